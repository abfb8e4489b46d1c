#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "bevd/eval.hpp"
#include "bevd/io.hpp"
#include "bevd/train.hpp"

using namespace bevd;

namespace {

DistillConfig fast_cfg() {
  DistillConfig c = DistillConfig::make_default();
  c.grid.h = 16;
  c.grid.w = 16;
  c.grid.x_min = -4.8;
  c.grid.y_min = -4.8;
  c.reld_scales = 2;
  c.ch_camera = 3;
  c.ch_points = 4;
  c.ch_fused = 6;
  c.ch_calibration = 4;
  c.classes = {{"mover", true, 1.0, 0.1, 1.5, 0.1},
               {"post", false, 0.5, 0.05, 0.5, 0.05}};
  c.objects_min = 1;
  c.objects_max = 2;
  c.place_margin = 1.2;
  c.batch = 2;
  c.teacher_steps = 6;
  c.student_steps = 6;
  c.distill_steps = 6;
  return c;
}

Detection det(int cls, double x, double y, double score) {
  Detection d;
  d.box.class_id = cls;
  d.box.x = x;
  d.box.y = y;
  d.score = score;
  return d;
}

BoxAnnotation gt(double x, double y) {
  BoxAnnotation b;
  b.x = x;
  b.y = y;
  return b;
}

bool curves_identical(const std::vector<StepRecord>& a, const std::vector<StepRecord>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].step != b[i].step) return false;
    if (a[i].csrd != b[i].csrd) return false;
    if (a[i].msfd != b[i].msfd) return false;
    if (a[i].reld != b[i].reld) return false;
    if (a[i].cls != b[i].cls) return false;
    if (a[i].reg != b[i].reg) return false;
    if (a[i].det != b[i].det) return false;
    if (a[i].total != b[i].total) return false;
  }
  return true;
}

bool params_identical(const DetectorModel& a, const DetectorModel& b) {
  if (a.params().size() != b.params().size()) return false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].first != b.params()[i].first) return false;
    if (tensor_bytes(a.params()[i].second) != tensor_bytes(b.params()[i].second))
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("average precision on hand-built match sets") {
  // every ground truth found by a confident detection
  std::vector<Detection> perfect = {det(0, 0.0, 0.0, 0.9), det(0, 5.0, 0.0, 0.8)};
  std::vector<BoxAnnotation> gts = {gt(0.0, 0.0), gt(5.0, 0.0)};
  CHECK(average_precision(perfect, gts, {0, 0}, {0, 0}, 1.0) == doctest::Approx(1.0));

  // nothing detected
  CHECK(average_precision({}, gts, {}, {0, 0}, 1.0) == 0.0);

  // no ground truth but spurious detections
  CHECK(average_precision(perfect, {}, {0, 0}, {}, 1.0) == 0.0);

  // half the ground truth found, no false positives: exactly one half
  std::vector<Detection> half = {det(0, 0.0, 0.0, 0.9)};
  CHECK(average_precision(half, gts, {0}, {0, 0}, 1.0) == doctest::Approx(0.5).epsilon(1e-12));

  // TP at 0.9, FP at 0.8, TP at 0.7 over two ground truths:
  // precision at recall .5 is 1, at recall 1 is 2/3
  std::vector<Detection> mixed = {det(0, 0.0, 0.0, 0.9), det(0, 50.0, 50.0, 0.8),
                                  det(0, 5.0, 0.0, 0.7)};
  double want = (5.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 10.0;
  CHECK(average_precision(mixed, gts, {0, 0, 0}, {0, 0}, 1.0) ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("matching is scene-scoped and radius-limited") {
  std::vector<BoxAnnotation> gts = {gt(0.0, 0.0)};

  // right position, wrong scene
  std::vector<Detection> d1 = {det(0, 0.0, 0.0, 0.9)};
  CHECK(average_precision(d1, gts, {1}, {0}, 1.0) == 0.0);

  // outside the match radius
  std::vector<Detection> d2 = {det(0, 3.0, 0.0, 0.9)};
  CHECK(average_precision(d2, gts, {0}, {0}, 1.0) == 0.0);
  CHECK(average_precision(d2, gts, {0}, {0}, 4.0) == doctest::Approx(1.0));

  // one ground truth cannot absorb two detections: second one is a FP
  std::vector<Detection> d3 = {det(0, 0.1, 0.0, 0.9), det(0, -0.1, 0.0, 0.8)};
  double ap_two = average_precision(d3, gts, {0, 0}, {0}, 1.0);
  CHECK(ap_two == doctest::Approx(1.0));  // recall 1 reached at precision 1 first
}

TEST_CASE("greedy matching prefers the higher score for a contested target") {
  // both detections inside the radius of one gt; the stronger one wins,
  // leaving the weaker as a false positive at the lower rank
  std::vector<BoxAnnotation> gts = {gt(0.0, 0.0), gt(10.0, 0.0)};
  std::vector<Detection> dets = {det(0, 0.2, 0.0, 0.9), det(0, -0.2, 0.0, 0.85)};
  double ap = average_precision(dets, gts, {0, 0}, {0, 0}, 1.0);
  // recall caps at 0.5 with precision 1 there
  CHECK(ap == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("evaluate rejects an empty scene set") {
  DistillConfig cfg = fast_cfg();
  DetectorModel m(cfg, DetectorModel::Role::kStudent, 1, true);
  SceneSet empty;
  CHECK_THROWS(evaluate(m, empty, cfg));
}

TEST_CASE("evaluate produces a coherent report on a tiny corpus") {
  DistillConfig cfg = fast_cfg();
  SceneSet scenes = SceneSet::generate(cfg, "val", 6);
  DetectorModel m(cfg, DetectorModel::Role::kTeacher, 5, true);
  EvalResult r = evaluate(m, scenes, cfg);
  CHECK(r.n_scenes == 6);
  CHECK(r.n_gt > 0);
  CHECK(r.map >= 0.0);
  CHECK(r.map <= 1.0);
  REQUIRE(r.per_class_ap.size() == 2);
  for (double ap : r.per_class_ap) {
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }
  CHECK(r.range_map.size() + 1 == cfg.eval_range_edges.size());
  CHECK(r.vel_tp_count >= 0);

  std::string js = eval_report_json(r, cfg);
  CHECK(js.find("\"map\"") != std::string::npos);
  CHECK(js.find("\"per_class_ap\"") != std::string::npos);
  CHECK(js.find("\"range_buckets\"") != std::string::npos);
  CHECK(js.find("\"mean_vel_err\"") != std::string::npos);
  CHECK(js.find("\"config_hash\"") != std::string::npos);
  CHECK(js.find("mover") != std::string::npos);
  CHECK(js.find("post") != std::string::npos);
}

TEST_CASE("adam single step moves a unit-gradient weight by the step size") {
  Tensor p = Tensor::from_data({3}, {1.0, -0.5, 2.0}, true);
  std::vector<std::pair<std::string, Tensor>> params = {{"w", p}};
  GradMap grads;
  grads[p.id()] = {1.0, 1.0, 1.0};
  Adam opt(0.01, 0.9, 0.999, 1e-8);
  opt.step(params, grads, 0.0);
  CHECK(opt.steps_taken() == 1);
  auto d = p.data();
  // bias-corrected first step: m_hat = g, v_hat = g*g, delta = lr*g/(|g|+eps)
  CHECK(d[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(d[1] == doctest::Approx(-0.5 - 0.01).epsilon(1e-9));
  CHECK(d[2] == doctest::Approx(2.0 - 0.01).epsilon(1e-9));
}

TEST_CASE("adam ignores parameters without gradients") {
  Tensor p = Tensor::from_data({2}, {1.0, 1.0}, true);
  Tensor q = Tensor::from_data({2}, {3.0, 3.0}, true);
  std::vector<std::pair<std::string, Tensor>> params = {{"p", p}, {"q", q}};
  GradMap grads;
  grads[p.id()] = {1.0, -1.0};
  Adam opt(0.1, 0.9, 0.999, 1e-8);
  opt.step(params, grads, 0.0);
  CHECK(q.at({0}) == 3.0);
  CHECK(q.at({1}) == 3.0);
  CHECK(p.at({0}) < 1.0);
  CHECK(p.at({1}) > 1.0);
}

TEST_CASE("gradient clipping caps the update magnitude") {
  Tensor a = Tensor::from_data({1}, {0.0}, true);
  Tensor b = Tensor::from_data({1}, {0.0}, true);
  std::vector<std::pair<std::string, Tensor>> pa = {{"w", a}};
  std::vector<std::pair<std::string, Tensor>> pb = {{"w", b}};
  GradMap big;
  big[a.id()] = {1000.0};
  GradMap small;
  small[b.id()] = {1.0};
  Adam oa(0.01, 0.9, 0.999, 1e-8);
  Adam ob(0.01, 0.9, 0.999, 1e-8);
  oa.step(pa, big, 1.0);   // clipped down to unit norm
  ob.step(pb, small, 0.0);
  CHECK(a.value() == doctest::Approx(b.value()).epsilon(1e-9));
}

TEST_CASE("training runs deterministically and logs every step") {
  DistillConfig cfg = fast_cfg();
  SceneSet scenes = SceneSet::generate(cfg, "train", 4);

  TrainOutput a = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  TrainOutput b = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  CHECK(a.curve.size() == static_cast<size_t>(cfg.teacher_steps));
  CHECK(curves_identical(a.curve, b.curve));
  CHECK(params_identical(a.model, b.model));
  for (const auto& rec : a.curve) {
    CHECK(std::isfinite(rec.total));
    CHECK(rec.det >= 0.0);
    CHECK(rec.csrd == 0.0);  // no distillation during plain training
    CHECK(rec.total == rec.det);
  }
}

TEST_CASE("teacher and student roles see different modalities") {
  DistillConfig cfg = fast_cfg();
  SceneSet scenes = SceneSet::generate(cfg, "train", 4);
  TrainOutput t = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  TrainOutput s = train_detector(cfg, DetectorModel::Role::kStudent, scenes);
  CHECK(t.model.role() == DetectorModel::Role::kTeacher);
  CHECK(s.model.role() == DetectorModel::Role::kStudent);
  CHECK_FALSE(curves_identical(t.curve, s.curve));
}

TEST_CASE("zero steps leave the model untouched") {
  DistillConfig cfg = fast_cfg();
  cfg.teacher_steps = 0;
  SceneSet scenes = SceneSet::generate(cfg, "train", 2);
  DetectorModel fresh(cfg, DetectorModel::Role::kTeacher,
                      model_seed(cfg, "teacher"), true);
  TrainOutput out = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  CHECK(out.curve.empty());
  CHECK(params_identical(out.model, fresh));
}

TEST_CASE("distillation with every term disabled is plain training") {
  DistillConfig cfg = fast_cfg();
  cfg.use_gated = false;  // same architecture for both runs
  cfg.use_csrd = cfg.use_msfd = cfg.use_reld = cfg.use_respd = false;
  SceneSet scenes = SceneSet::generate(cfg, "train", 4);

  TrainOutput teacher = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);

  DetectorModel init(cfg, DetectorModel::Role::kStudent, model_seed(cfg, "student"),
                     cfg.use_gated);
  TrainOutput distilled =
      distill_student(cfg, teacher.model, clone_detector(cfg, init), scenes);
  TrainOutput plain =
      run_training(cfg, clone_detector(cfg, init), nullptr, nullptr, scenes,
                   cfg.distill_steps, "distill");

  CHECK(curves_identical(distilled.curve, plain.curve));
  CHECK(params_identical(distilled.model, plain.model));
}

TEST_CASE("distillation losses appear in the curve when enabled") {
  DistillConfig cfg = fast_cfg();
  SceneSet scenes = SceneSet::generate(cfg, "train", 4);
  TrainOutput teacher = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  DetectorModel student(cfg, DetectorModel::Role::kStudent, model_seed(cfg, "student"),
                        cfg.use_gated);
  TrainOutput out = distill_student(cfg, teacher.model, std::move(student), scenes);
  REQUIRE(out.curve.size() == static_cast<size_t>(cfg.distill_steps));
  bool any_csrd = false, any_msfd = false, any_reld = false, any_resp = false;
  for (const auto& rec : out.curve) {
    any_csrd |= rec.csrd != 0.0;
    any_msfd |= rec.msfd != 0.0;
    any_reld |= rec.reld != 0.0;
    any_resp |= rec.cls != 0.0 || rec.reg != 0.0;
    CHECK(std::isfinite(rec.total));
  }
  CHECK(any_csrd);
  CHECK(any_msfd);
  CHECK(any_reld);
  CHECK(any_resp);
  CHECK(out.calib != nullptr);
}

TEST_CASE("teacher bytes survive a distillation run") {
  DistillConfig cfg = fast_cfg();
  SceneSet scenes = SceneSet::generate(cfg, "train", 4);
  TrainOutput teacher = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  std::vector<std::vector<uint8_t>> before;
  for (const auto& [n, p] : teacher.model.params()) before.push_back(tensor_bytes(p));

  DetectorModel student(cfg, DetectorModel::Role::kStudent, model_seed(cfg, "student"),
                        cfg.use_gated);
  distill_student(cfg, teacher.model, std::move(student), scenes);

  size_t i = 0;
  for (const auto& [n, p] : teacher.model.params())
    CHECK(tensor_bytes(p) == before[i++]);
}

TEST_CASE("supervised loss trends down over a short run") {
  DistillConfig cfg = fast_cfg();
  cfg.teacher_steps = 30;
  SceneSet scenes = SceneSet::generate(cfg, "train", 6);
  TrainOutput out = train_detector(cfg, DetectorModel::Role::kTeacher, scenes);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) {
    head += out.curve[static_cast<size_t>(i)].total;
    tail += out.curve[out.curve.size() - 1 - static_cast<size_t>(i)].total;
  }
  CHECK(tail < head);
}

TEST_CASE("clone_detector yields an independent copy") {
  DistillConfig cfg = fast_cfg();
  DetectorModel a(cfg, DetectorModel::Role::kStudent, 9, true);
  DetectorModel b = clone_detector(cfg, a);
  CHECK(params_identical(a, b));
  b.params()[0].second.mutable_data()[0] += 1.0;
  CHECK_FALSE(params_identical(a, b));
}

TEST_CASE("model_seed separates roles and obeys the config seed") {
  DistillConfig cfg = fast_cfg();
  CHECK(model_seed(cfg, "teacher") != model_seed(cfg, "student"));
  DistillConfig cfg2 = fast_cfg();
  cfg2.seed = cfg.seed + 1;
  CHECK(model_seed(cfg, "teacher") != model_seed(cfg2, "teacher"));
}

TEST_CASE("curve csv lists one row per step with a header") {
  std::vector<StepRecord> curve(2);
  curve[0].step = 0;
  curve[0].det = 1.5;
  curve[0].total = 1.5;
  curve[1].step = 1;
  curve[1].csrd = 0.25;
  curve[1].total = 26.5;
  std::string csv = curve_csv(curve);

  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,L_csrd,L_msfd,L_reld,L_cls,L_reg,L_det,total");
  std::getline(in, line);
  CHECK(line.substr(0, 2) == "0,");
  std::getline(in, line);
  CHECK(line.substr(0, 2) == "1,");
  CHECK(line.find("0.25") != std::string::npos);
  int rows = 2;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("ablation rows cover the toggle ladder and the variants") {
  DistillConfig base = fast_cfg();
  std::vector<AblationRow> rows = ablation_rows(base);
  REQUIRE(rows.size() >= 6);

  // the six-step ladder comes first, from nothing enabled to everything
  CHECK(rows[0].name == "baseline");
  CHECK_FALSE(rows[0].cfg.use_gated);
  CHECK_FALSE(rows[0].cfg.use_respd);
  CHECK(rows[1].cfg.use_gated);
  CHECK_FALSE(rows[1].cfg.use_respd);
  CHECK(rows[5].name == "full");
  CHECK(rows[5].cfg.use_gated);
  CHECK(rows[5].cfg.use_respd);
  CHECK(rows[5].cfg.use_csrd);
  CHECK(rows[5].cfg.use_msfd);
  CHECK(rows[5].cfg.use_reld);

  // every row keeps the corpus seed so scenes stay shared
  for (const auto& r : rows) CHECK(r.cfg.seed == base.seed);

  // variant rows flip exactly the advertised knobs
  bool has_max_pool = false, has_dense = false, has_vanilla = false;
  for (const auto& r : rows) {
    if (r.cfg.pool == PoolMode::kMax) has_max_pool = true;
    if (r.cfg.msfd_mask == MsfdMask::kDense) has_dense = true;
    if (r.cfg.respd_mode == RespdMode::kVanilla) has_vanilla = true;
  }
  CHECK(has_max_pool);
  CHECK(has_dense);
  CHECK(has_vanilla);
}

TEST_CASE("ablation csv echoes rows with hex hashes") {
  std::vector<AblationResult> rows(2);
  rows[0].name = "baseline";
  rows[0].config_hash = 0xabcULL;
  rows[0].map = 0.125;
  rows[1].name = "full";
  rows[1].config_hash = 0xdefULL;
  rows[1].map = 0.5;
  rows[1].reused = true;
  std::string csv = ablation_csv(rows);
  CHECK(csv.find("name,config_hash,map,reused") == 0);
  CHECK(csv.find("baseline,0000000000000abc,0.125,0") != std::string::npos);
  CHECK(csv.find("full,0000000000000def,0.5,1") != std::string::npos);
}
