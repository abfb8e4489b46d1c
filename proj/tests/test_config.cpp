#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <string>

#include "bevd/config.hpp"

using namespace bevd;
namespace fs = std::filesystem;

namespace {

std::string what_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool has_line(const std::string& text, const std::string& line) {
  return text.find(line + "\n") != std::string::npos;
}

}  // namespace

TEST_CASE("default loss weights and mask parameters") {
  DistillConfig c = DistillConfig::make_default();
  CHECK(c.lambda_csrd == 100.0);
  CHECK(c.lambda_msfd == 10.0);
  CHECK(c.lambda_reld == 0.25);
  CHECK(c.lambda_respd == 1.0);
  CHECK(c.lambda_det == 1.0);

  CHECK(c.mask_r1 == 20.0);
  CHECK(c.mask_r2 == 30.0);
  CHECK(c.mask_alpha == 0.25);
  CHECK(c.mask_beta == 0.5);
  CHECK(c.mask_v1 == 0.3);
  CHECK(c.mask_v2 == 0.8);
  CHECK(c.mask_clip_min == 0.5);
  CHECK(c.mask_clip_max == 4.0);

  CHECK(c.respd_w_dynamic == 2.0);
  CHECK(c.respd_w_static == 1.0);
  CHECK(c.pool == PoolMode::kMean);
  CHECK(c.reld_scales == 4);
  CHECK(c.qfl_gamma == 2.0);
  CHECK(c.msfd_mask == MsfdMask::kScaled);
  CHECK(c.csrd_source == CsrdSource::kTeacher);
  CHECK(c.csrd_calibration);
  CHECK(c.use_gated);
  CHECK(c.use_respd);
  CHECK(c.use_csrd);
  CHECK(c.use_msfd);
  CHECK(c.use_reld);

  CHECK(c.grid.h == 96);
  CHECK(c.grid.w == 96);
  CHECK(c.grid.cell == 0.6);

  REQUIRE(c.classes.size() == 4);
  CHECK(c.classes[0].name == "car");
  CHECK(c.classes[0].dynamic);
  CHECK(c.classes[3].name == "barrier");
  CHECK_FALSE(c.classes[3].dynamic);

  CHECK_NOTHROW(c.validate());
}

TEST_CASE("serialized defaults pin the distillation constants") {
  std::string s = DistillConfig::make_default().serialize();
  CHECK(has_line(s, "loss.lambda_csrd = 100"));
  CHECK(has_line(s, "loss.lambda_msfd = 10"));
  CHECK(has_line(s, "loss.lambda_reld = 0.25"));
  CHECK(has_line(s, "loss.lambda_respd = 1"));
  CHECK(has_line(s, "loss.lambda_det = 1"));
  CHECK(has_line(s, "loss.pool = mean"));
  CHECK(has_line(s, "loss.reld_scales = 4"));
  CHECK(has_line(s, "loss.respd_w_dynamic = 2"));
  CHECK(has_line(s, "loss.respd_w_static = 1"));
  CHECK(has_line(s, "mask.r1 = 20"));
  CHECK(has_line(s, "mask.r2 = 30"));
  CHECK(has_line(s, "mask.alpha = 0.25"));
  CHECK(has_line(s, "mask.beta = 0.5"));
  CHECK(has_line(s, "mask.v1 = 0.3"));
  CHECK(has_line(s, "mask.v2 = 0.8"));
  CHECK(has_line(s, "mask.clip_min = 0.5"));
  CHECK(has_line(s, "mask.clip_max = 4"));
}

TEST_CASE("serialize then parse is the identity, bit-exact") {
  DistillConfig a = DistillConfig::make_default();
  a.seed = 777;
  a.lr = 0.0001234567890123;
  a.mask_alpha = 1.0 / 3.0;
  a.eval_match_thresholds = {0.25, 0.75, 1.5};
  a.classes.push_back({"cone", false, 0.4, 0.02, 0.4, 0.02});

  std::string s1 = a.serialize();
  DistillConfig b = DistillConfig::parse(s1);
  std::string s2 = b.serialize();
  CHECK(s1 == s2);
  CHECK(a.hash() == b.hash());
  CHECK(b.lr == a.lr);
  CHECK(b.mask_alpha == a.mask_alpha);
  CHECK(b.classes.size() == 5);
  CHECK(b.classes[4].name == "cone");
  CHECK_FALSE(b.classes[4].dynamic);
}

TEST_CASE("hash tracks content") {
  DistillConfig a = DistillConfig::make_default();
  DistillConfig b = DistillConfig::make_default();
  CHECK(a.hash() == b.hash());
  b.seed = 2;
  CHECK(a.hash() != b.hash());
  b.seed = 1;
  b.use_reld = false;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("file save and load") {
  fs::path dir = fs::temp_directory_path() / "bevd_cfg_test";
  fs::create_directories(dir);
  DistillConfig a = DistillConfig::make_default();
  a.seed = 99;
  a.grid.h = 64;
  a.grid.w = 64;
  a.save(dir / "c.cfg");
  DistillConfig b = DistillConfig::load(dir / "c.cfg");
  CHECK(b.seed == 99);
  CHECK(b.grid.h == 64);
  CHECK(a.serialize() == b.serialize());
  CHECK_THROWS(DistillConfig::load(dir / "missing.cfg"));
}

TEST_CASE("parse accepts comments, blanks and overrides") {
  std::string text =
      "# comment\n"
      "\n"
      "seed = 5\n"
      "  loss.pool   =  max \n"
      "toggles.msfd = 0\n";
  DistillConfig c = DistillConfig::parse(text);
  CHECK(c.seed == 5);
  CHECK(c.pool == PoolMode::kMax);
  CHECK_FALSE(c.use_msfd);
  CHECK(c.lambda_csrd == 100.0);  // untouched default
}

TEST_CASE("parse errors name the offending key") {
  std::string w = what_of([] { DistillConfig::parse("nonsense.key = 3\n"); });
  CHECK(w.find("unknown key") != std::string::npos);
  CHECK(w.find("nonsense.key") != std::string::npos);

  w = what_of([] { DistillConfig::parse("grid.h = soon\n"); });
  CHECK(w.find("grid.h") != std::string::npos);
  CHECK(w.find("soon") != std::string::npos);

  w = what_of([] { DistillConfig::parse("loss.pool = median\n"); });
  CHECK(w.find("loss.pool") != std::string::npos);
  CHECK(w.find("median") != std::string::npos);

  w = what_of([] { DistillConfig::parse("seed = 1\nthis line has no equals\n"); });
  CHECK(w.find("malformed line 2") != std::string::npos);

  w = what_of([] { DistillConfig::parse("train.lr = 1e\n"); });
  CHECK(w.find("train.lr") != std::string::npos);
}

TEST_CASE("class table parsing") {
  std::string text =
      "classes.count = 2\n"
      "classes.0.name = truck\n"
      "classes.0.dynamic = 1\n"
      "classes.0.width_mean = 2.5\n"
      "classes.1.name = post\n"
      "classes.1.dynamic = 0\n";
  DistillConfig c = DistillConfig::parse(text);
  REQUIRE(c.classes.size() == 2);
  CHECK(c.classes[0].name == "truck");
  CHECK(c.classes[0].width_mean == 2.5);
  CHECK_FALSE(c.classes[1].dynamic);
  CHECK_NOTHROW(c.validate());

  CHECK_THROWS_AS(DistillConfig::parse("classes.count = 0\n"), ConfigError);
  CHECK_THROWS_AS(DistillConfig::parse("classes.9.name = ghost\n"), ConfigError);
}

TEST_CASE("validate rejects inconsistent settings") {
  auto broken = [](auto mutate) {
    DistillConfig c = DistillConfig::make_default();
    mutate(c);
    return what_of([&] { c.validate(); });
  };

  CHECK(!broken([](DistillConfig& c) { c.grid.h = 4; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.grid.cell = 0.0; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.grid.h = 100; }).empty());  // not divisible by 2^4
  CHECK(!broken([](DistillConfig& c) { c.reld_scales = 0; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.mask_r2 = c.mask_r1; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.mask_v2 = 0.1; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.mask_clip_max = 0.1; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.batch = 0; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.lr = 0.0; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.teacher_steps = -1; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.eval_match_thresholds = {1.0, 0.5}; }).empty());
  CHECK(!broken([](DistillConfig& c) { c.eval_range_edges = {10.0}; }).empty());
  CHECK(!broken([](DistillConfig& c) {
          for (auto& cs : c.classes) cs.dynamic = true;  // needs one static class
        }).empty());
  CHECK(!broken([](DistillConfig& c) {
          for (auto& cs : c.classes) cs.dynamic = false;
        }).empty());
  CHECK(broken([](DistillConfig&) {}).empty());
}

TEST_CASE("grid coordinate helpers") {
  GridSpec g;  // 96x96, 0.6 m cells, origin -28.8
  CHECK(g.x_max() == doctest::Approx(28.8));
  CHECK(g.x_of_col(0) == doctest::Approx(-28.5));
  CHECK(g.col_of_x(-28.5) == doctest::Approx(0.0));
  CHECK(g.y_of_row(95) == doctest::Approx(28.5));
  CHECK(g.cell_in_bounds(0, 0));
  CHECK(g.cell_in_bounds(95, 95));
  CHECK_FALSE(g.cell_in_bounds(96, 0));
  CHECK_FALSE(g.cell_in_bounds(0, -1));
}
