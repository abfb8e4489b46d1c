#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "bevd/io.hpp"
#include "bevd/kd.hpp"
#include "bevd/mask.hpp"
#include "bevd/rng.hpp"

using namespace bevd;
namespace fs = std::filesystem;

namespace {

Tensor rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool rg = false) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(d), rg);
}

DistillConfig tiny_cfg() {
  DistillConfig c = DistillConfig::make_default();
  c.grid.h = 16;
  c.grid.w = 16;
  c.grid.x_min = -4.8;
  c.grid.y_min = -4.8;
  c.reld_scales = 2;
  c.ch_camera = 4;
  c.ch_points = 6;
  c.ch_fused = 8;
  c.ch_calibration = 6;
  c.classes = {{"mover", true, 1.0, 0.1, 2.0, 0.2},
               {"post", false, 0.5, 0.05, 0.5, 0.05}};
  return c;
}

}  // namespace

TEST_CASE("pooled objectness of zero logits is one half everywhere") {
  for (PoolMode pool : {PoolMode::kMean, PoolMode::kMax}) {
    Tensor obj = teacher_objectness(Tensor::zeros({3, 4, 4}), pool);
    REQUIRE(obj.shape() == Shape{4, 4});
    for (double v : obj.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("pooling modes differ as mean and max of class responses") {
  // two classes, constant logits 0 and 2
  std::vector<double> d(2 * 4, 0.0);
  for (int i = 0; i < 4; ++i) d[4 + i] = 2.0;
  Tensor logits = Tensor::from_data({2, 2, 2}, std::move(d));
  double s0 = 0.5, s2 = 1.0 / (1.0 + std::exp(-2.0));
  Tensor mean_pool = teacher_objectness(logits, PoolMode::kMean);
  for (double v : mean_pool.data())
    CHECK(v == doctest::Approx(0.5 * (s0 + s2)).epsilon(1e-12));
  Tensor max_pool = teacher_objectness(logits, PoolMode::kMax);
  for (double v : max_pool.data())
    CHECK(v == doctest::Approx(s2).epsilon(1e-12));
}

TEST_CASE("identical inputs zero out every distillation loss") {
  Rng rng(77);
  Tensor f = rand_t(rng, {6, 8, 8});
  Tensor mask = Tensor::full({8, 8}, 1.0);
  CHECK(msfd_loss(f, f, mask).value() == 0.0);
  CHECK(msfd_loss(f, f, mask).value() <= 1e-12);

  CHECK(reld_loss(f, f, 2).value() == 0.0);

  Tensor obj = rand_t(rng, {8, 8}, 0.05, 0.95);
  CHECK(csrd_loss(obj, obj).value() == 0.0);

  DistillConfig cfg = tiny_cfg();
  Tensor cls = rand_t(rng, {2, 8, 8});
  Tensor reg = rand_t(rng, {8, 8, 8});
  auto [rc, rr] = respd_loss(cls, reg, cls, reg, cfg);
  CHECK(rc.value() <= 1e-12);
  CHECK(rr.value() == 0.0);
}

TEST_CASE("qfl hand value at an uncertain prediction") {
  // target 0, logit 0: per element 0.25 * ln 2
  Tensor logits = Tensor::zeros({2, 3});
  Tensor target = Tensor::zeros({2, 3});
  double want = 0.25 * std::log(2.0);
  CHECK(qfl(logits, target, 2.0).value() == doctest::Approx(want).epsilon(1e-9));

  // symmetric case: target 1 gives the same penalty
  CHECK(qfl(logits, Tensor::full({2, 3}, 1.0), 2.0).value() ==
        doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("qfl with zero gamma is plain cross entropy") {
  Rng rng(31);
  Tensor logits = rand_t(rng, {4, 4}, -3.0, 3.0);
  Tensor target = rand_t(rng, {4, 4}, 0.0, 1.0);
  double want = 0.0;
  auto dl = logits.data();
  auto dt = target.data();
  for (size_t i = 0; i < dl.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-dl[i]));
    want -= dt[i] * std::log(p) + (1.0 - dt[i]) * std::log(1.0 - p);
  }
  want /= static_cast<double>(dl.size());
  CHECK(qfl(logits, target, 0.0).value() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("qfl is smallest when the prediction sits on the target") {
  Tensor target = Tensor::full({1}, 0.7);
  double logit_on = std::log(0.7 / 0.3);
  double on = qfl(Tensor::full({1}, logit_on), target, 2.0).value();
  for (double off : {-2.0, 0.0, 2.0, 4.0}) {
    if (std::abs(off - logit_on) < 1e-9) continue;
    CHECK(on < qfl(Tensor::full({1}, off), target, 2.0).value());
  }
}

TEST_CASE("single-cell feature distance fixture") {
  // 2x2 grid, one masked cell, difference vector (3,4): norm 5, / 4 cells
  Tensor teacher = Tensor::zeros({2, 2, 2});
  std::vector<double> sd(8, 0.0);
  sd[0] = 3.0;  // channel 0 at cell (0,0)
  sd[4] = 4.0;  // channel 1 at cell (0,0)
  Tensor student = Tensor::from_data({2, 2, 2}, std::move(sd));
  std::vector<double> md(4, 0.0);
  md[0] = 1.0;
  Tensor mask = Tensor::from_data({2, 2}, std::move(md));
  CHECK(msfd_loss(teacher, student, mask).value() == doctest::Approx(1.25).epsilon(1e-9));
}

TEST_CASE("feature distance ignores unmasked cells and scales with the mask") {
  Rng rng(41);
  Tensor t = rand_t(rng, {3, 4, 4});
  Tensor s = rand_t(rng, {3, 4, 4});
  CHECK(msfd_loss(t, s, Tensor::zeros({4, 4})).value() == 0.0);

  double full_v = msfd_loss(t, s, Tensor::full({4, 4}, 1.0)).value();
  double half_v = msfd_loss(t, s, Tensor::full({4, 4}, 0.5)).value();
  CHECK(full_v > 0.0);
  CHECK(half_v == doctest::Approx(0.5 * full_v).epsilon(1e-12));

  // masking in more cells can only add distance
  std::vector<double> partial(16, 0.0);
  partial[3] = 1.0;
  double one_cell = msfd_loss(t, s, Tensor::from_data({4, 4}, partial)).value();
  partial[9] = 1.0;
  double two_cells = msfd_loss(t, s, Tensor::from_data({4, 4}, partial)).value();
  CHECK(one_cell > 0.0);
  CHECK(two_cells >= one_cell);
  CHECK(full_v >= two_cells);
}

TEST_CASE("csrd is the mean absolute gap") {
  Tensor a = Tensor::from_data({2, 2}, {0.1, 0.2, 0.3, 0.4});
  Tensor b = Tensor::from_data({2, 2}, {0.2, 0.2, 0.1, 0.8});
  double want = (0.1 + 0.0 + 0.2 + 0.4) / 4.0;
  CHECK(csrd_loss(a, b).value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("relation loss is invariant to positive per-position rescaling") {
  Rng rng(53);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor t = rand_t(rng, {4, 8, 8});
    Tensor s_data = rand_t(rng, {4, 8, 8});

    // multiply every position of the student map by its own positive factor
    std::vector<double> scaled(s_data.data().begin(), s_data.data().end());
    const size_t plane = 64;
    for (size_t p = 0; p < plane; ++p) {
      double k = rng.uniform(0.1, 5.0);
      for (size_t c = 0; c < 4; ++c) scaled[c * plane + p] *= k;
    }
    Tensor s_scaled = Tensor::from_data({4, 8, 8}, std::move(scaled));

    double base = reld_loss(t, s_data, 2).value();
    double after = reld_loss(t, s_scaled, 2).value();
    CHECK(std::abs(base - after) <= 1e-9);
  }
}

TEST_CASE("relation loss grows as structure diverges") {
  Rng rng(59);
  Tensor t = rand_t(rng, {4, 8, 8});
  Tensor near = add(t, scale(rand_t(rng, {4, 8, 8}), 0.01));
  Tensor far = rand_t(rng, {4, 8, 8});
  double l_near = reld_loss(t, near, 2).value();
  double l_far = reld_loss(t, far, 2).value();
  CHECK(l_near < l_far);
  CHECK(l_near >= 0.0);
}

TEST_CASE("per-class response weights follow the configured mode") {
  DistillConfig cfg = tiny_cfg();  // class 0 dynamic, class 1 static

  cfg.respd_mode = RespdMode::kVanilla;
  CHECK(respd_task_weight(cfg, 0) == 1.0);
  CHECK(respd_task_weight(cfg, 1) == 1.0);

  cfg.respd_mode = RespdMode::kDynamic;
  CHECK(respd_task_weight(cfg, 0) == cfg.respd_w_dynamic);
  CHECK(respd_task_weight(cfg, 1) == cfg.respd_w_static);

  cfg.respd_mode = RespdMode::kStatic;
  CHECK(respd_task_weight(cfg, 0) == 1.0);
  CHECK(respd_task_weight(cfg, 1) == cfg.respd_w_dynamic);
}

TEST_CASE("response loss separates class and regression terms") {
  DistillConfig cfg = tiny_cfg();
  Rng rng(61);
  Tensor tc = rand_t(rng, {2, 8, 8});
  Tensor tr = rand_t(rng, {8, 8, 8});
  Tensor sc = rand_t(rng, {2, 8, 8});
  Tensor sr = rand_t(rng, {8, 8, 8});

  auto [cls_part, reg_part] = respd_loss(tc, tr, sc, sr, cfg);
  CHECK(cls_part.value() > 0.0);
  CHECK(reg_part.value() > 0.0);

  // matching regression kills only the regression term
  auto [c2, r2] = respd_loss(tc, tr, sc, tr, cfg);
  CHECK(r2.value() == 0.0);
  CHECK(c2.value() == doctest::Approx(cls_part.value()).epsilon(1e-12));

  // class weights scale the class term linearly across modes
  DistillConfig vanilla = cfg;
  vanilla.respd_mode = RespdMode::kVanilla;
  DistillConfig dyn = cfg;
  dyn.respd_mode = RespdMode::kDynamic;
  auto [cv, rv] = respd_loss(tc, tr, sc, sr, vanilla);
  auto [cd, rd] = respd_loss(tc, tr, sc, sr, dyn);
  CHECK(cd.value() > cv.value());  // dynamic class upweighted
  // reg term scales by the summed weights: (2+1)/(1+1)
  CHECK(rd.value() == doctest::Approx(rv.value() * 1.5).epsilon(1e-9));
}

TEST_CASE("total loss is the weighted sum of its parts") {
  DistillConfig cfg = tiny_cfg();
  LossParts parts;
  parts.csrd = Tensor::scalar(0.11);
  parts.msfd = Tensor::scalar(0.7);
  parts.reld = Tensor::scalar(0.3);
  parts.respd_cls = Tensor::scalar(0.2);
  parts.respd_reg = Tensor::scalar(0.05);
  parts.det = Tensor::scalar(1.3);
  double want = cfg.lambda_csrd * 0.11 + cfg.lambda_msfd * 0.7 + cfg.lambda_reld * 0.3 +
                cfg.lambda_respd * 0.25 + cfg.lambda_det * 1.3;
  CHECK(total_loss(parts, cfg).value() == doctest::Approx(want).epsilon(1e-12));

  LossParts det_only;
  det_only.det = Tensor::scalar(1.3);
  CHECK(total_loss(det_only, cfg).value() == doctest::Approx(1.3).epsilon(1e-12));
}

TEST_CASE("calibration module shapes and persistence") {
  CalibrationModule full(6, 5, 17, true);
  CalibrationModule reduced(6, 5, 17, false);
  CHECK(full.params().size() > reduced.params().size());
  CHECK(reduced.params().size() == 2);  // projection weight and bias

  Rng rng(71);
  Tensor feat = rand_t(rng, {6, 8, 8});
  Tensor out_full = full.forward(feat);
  Tensor out_red = reduced.forward(feat);
  CHECK(out_full.shape() == Shape{8, 8});
  CHECK(out_red.shape() == Shape{8, 8});

  fs::path dir = fs::temp_directory_path() / "bevd_calib_ckpt";
  fs::remove_all(dir);
  full.save(dir);
  CalibrationModule back = CalibrationModule::load(dir);
  CHECK(back.full());
  REQUIRE(back.params().size() == full.params().size());
  for (size_t i = 0; i < full.params().size(); ++i)
    CHECK(tensor_bytes(back.params()[i].second) == tensor_bytes(full.params()[i].second));
  Tensor out_back = back.forward(feat);
  auto a = out_full.data();
  auto b = out_back.data();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  fs::remove_all(dir);
}

TEST_CASE("distill_losses assembles the enabled terms") {
  DistillConfig cfg = tiny_cfg();
  DetectorModel teacher(cfg, DetectorModel::Role::kTeacher, 1, true);
  DetectorModel student(cfg, DetectorModel::Role::kStudent, 2, true);
  CalibrationModule calib(cfg.ch_points, cfg.ch_calibration, 3, true);

  Rng rng(81);
  Tensor cam = rand_t(rng, {kSensorChannels, 16, 16});
  Tensor lidar = rand_t(rng, {kSensorChannels, 16, 16});
  Tensor radar = rand_t(rng, {kSensorChannels, 16, 16});
  ModelTaps tt = teacher.forward(cam, lidar);
  ModelTaps ts = student.forward(cam, radar);

  BoxAnnotation box;
  box.class_id = 0;
  box.x = 1.0;
  box.y = 1.0;
  box.width = 1.0;
  box.length = 2.0;
  Tensor mask = feature_mask({box}, cfg, cfg.msfd_mask);
  Tensor heat = gaussian_heatmap({box}, cfg);
  Tensor det = Tensor::scalar(0.9);

  LossParts parts = distill_losses(tt, ts, &calib, mask, heat, det, cfg);
  CHECK(parts.csrd.defined());
  CHECK(parts.msfd.defined());
  CHECK(parts.reld.defined());
  CHECK(parts.respd_cls.defined());
  CHECK(parts.respd_reg.defined());
  CHECK(parts.total.defined());
  CHECK(parts.csrd.value() >= 0.0);
  CHECK(parts.msfd.value() >= 0.0);
  CHECK(parts.reld.value() >= 0.0);
  CHECK(parts.total.value() > 0.0);

  // disabling every toggle leaves only the detection term
  DistillConfig off = cfg;
  off.use_csrd = off.use_msfd = off.use_reld = off.use_respd = false;
  LossParts bare = distill_losses(tt, ts, &calib, mask, heat, det, off);
  CHECK_FALSE(bare.csrd.defined());
  CHECK_FALSE(bare.msfd.defined());
  CHECK_FALSE(bare.reld.defined());
  CHECK_FALSE(bare.respd_cls.defined());
  CHECK(bare.total.value() == doctest::Approx(0.9).epsilon(1e-12));

  // csrd without a calibration module is a hard error
  CHECK_THROWS(distill_losses(tt, ts, nullptr, mask, heat, det, cfg));

  // ground-truth sourced objectness works without the teacher's heads
  DistillConfig gt_src = cfg;
  gt_src.csrd_source = CsrdSource::kGt;
  LossParts gt_parts = distill_losses(tt, ts, &calib, mask, heat, det, gt_src);
  CHECK(gt_parts.csrd.defined());
  CHECK(gt_parts.csrd.value() >= 0.0);
}

TEST_CASE("teacher parameters stay outside the gradient graph") {
  DistillConfig cfg = tiny_cfg();
  DetectorModel teacher(cfg, DetectorModel::Role::kTeacher, 1, true);
  DetectorModel student(cfg, DetectorModel::Role::kStudent, 2, true);
  CalibrationModule calib(cfg.ch_points, cfg.ch_calibration, 3, true);

  Rng rng(91);
  Tensor cam = rand_t(rng, {kSensorChannels, 16, 16});
  Tensor lidar = rand_t(rng, {kSensorChannels, 16, 16});
  Tensor radar = rand_t(rng, {kSensorChannels, 16, 16});

  ModelTaps tt;
  {
    NoGradGuard ng;
    tt = teacher.forward(cam, lidar);
  }
  ModelTaps ts = student.forward(cam, radar);

  BoxAnnotation box;
  box.class_id = 0;
  box.x = -1.0;
  box.y = 2.0;
  box.width = 1.0;
  box.length = 1.0;
  Tensor mask = feature_mask({box}, cfg, cfg.msfd_mask);
  Tensor heat = gaussian_heatmap({box}, cfg);

  LossParts parts = distill_losses(tt, ts, &calib, mask, heat, Tensor(), cfg);
  GradMap grads = backward_collect(parts.total);

  for (const auto& [name, p] : teacher.params())
    CHECK(grads.count(p.id()) == 0);
  int student_grads = 0;
  for (const auto& [name, p] : student.params())
    student_grads += grads.count(p.id()) ? 1 : 0;
  CHECK(student_grads > 0);
  int calib_grads = 0;
  for (const auto& [name, p] : calib.params())
    calib_grads += grads.count(p.id()) ? 1 : 0;
  CHECK(calib_grads > 0);
}
