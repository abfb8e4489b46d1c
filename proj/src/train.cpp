#include "bevd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

#include "bevd/eval.hpp"
#include "bevd/io.hpp"
#include "bevd/mask.hpp"
#include "bevd/rng.hpp"

namespace bevd {

std::string curve_csv(const std::vector<StepRecord>& curve) {
  std::string out = "step,L_csrd,L_msfd,L_reld,L_cls,L_reg,L_det,total\n";
  for (const auto& r : curve) {
    out += std::to_string(r.step);
    for (double v : {r.csrd, r.msfd, r.reld, r.cls, r.reg, r.det, r.total}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params,
                const GradMap& grads, double clip) {
  if (m_.size() < params.size()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  ++t_;
  double gscale = 1.0;
  if (clip > 0.0) {
    double sq = 0.0;
    for (auto& [name, p] : params) {
      auto it = grads.find(p.id());
      if (it == grads.end()) continue;
      for (double g : it->second) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > clip) gscale = clip / norm;
  }
  const double bc1 = 1.0 - std::pow(b1_, t_);
  const double bc2 = 1.0 - std::pow(b2_, t_);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    auto it = grads.find(p.id());
    if (it == grads.end()) continue;
    const std::vector<double>& g = it->second;
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    std::span<double> pd = p.mutable_data();
    for (size_t j = 0; j < g.size(); ++j) {
      double gj = g[j] * gscale;
      m[j] = b1_ * m[j] + (1.0 - b1_) * gj;
      v[j] = b2_ * v[j] + (1.0 - b2_) * gj * gj;
      pd[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

uint64_t model_seed(const DistillConfig& cfg, const std::string& role_tag) {
  return mix_seed(cfg.seed, "model/" + role_tag);
}

TrainOutput run_training(const DistillConfig& cfg, DetectorModel model,
                         const DetectorModel* teacher, CalibrationModule* calib,
                         const SceneSet& scenes, int steps, const std::string& stream) {
  if (scenes.scenes.empty())
    throw std::invalid_argument("run_training: empty scene set");
  if (cfg.batch <= 0) throw std::invalid_argument("run_training: batch must be positive");

  const bool any_kd = teacher != nullptr && (cfg.use_csrd || cfg.use_msfd ||
                                             cfg.use_reld || cfg.use_respd);
  if (teacher != nullptr && cfg.use_csrd && calib == nullptr)
    throw std::invalid_argument("run_training: cross-stage term needs a calibration module");

  std::vector<std::pair<std::string, Tensor>> params = model.params();
  if (any_kd && cfg.use_csrd && calib != nullptr)
    for (auto& p : calib->params()) params.push_back(p);

  Adam opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  Rng order_rng(cfg.seed, stream + "/batches");
  std::vector<int> order(scenes.scenes.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  auto next_index = [&]() -> int {
    if (cursor >= order.size()) {
      for (size_t i = order.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(order_rng.uniform_int(static_cast<int>(i)));
        std::swap(order[i - 1], order[j]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<std::unique_ptr<DetTargets>> tgt_cache(scenes.scenes.size());
  std::vector<Tensor> mask_cache(scenes.scenes.size());

  std::vector<StepRecord> curve;
  curve.reserve(static_cast<size_t>(std::max(steps, 0)));

  for (int step = 0; step < steps; ++step) {
    StepRecord rec;
    rec.step = step;
    Tensor batch_acc;
    for (int b = 0; b < cfg.batch; ++b) {
      int idx = next_index();
      const SceneSample& sc = scenes.scenes[static_cast<size_t>(idx)];
      const Tensor& pts =
          model.role() == DetectorModel::Role::kTeacher ? sc.lidar : sc.radar;
      ModelTaps taps = model.forward(sc.camera, pts);
      if (!tgt_cache[static_cast<size_t>(idx)])
        tgt_cache[static_cast<size_t>(idx)] =
            std::make_unique<DetTargets>(build_targets(sc.boxes, cfg));
      const DetTargets& tg = *tgt_cache[static_cast<size_t>(idx)];
      Tensor det = detection_loss(taps.cls, taps.reg, tg, cfg);

      Tensor sample_total;
      if (any_kd) {
        ModelTaps ttaps;
        {
          NoGradGuard ng;
          ttaps = teacher->forward(sc.camera, sc.lidar);
        }
        Tensor fmask;
        if (cfg.use_msfd) {
          if (!mask_cache[static_cast<size_t>(idx)].defined()) {
            NoGradGuard ng;
            mask_cache[static_cast<size_t>(idx)] =
                feature_mask(sc.boxes, cfg, cfg.msfd_mask);
          }
          fmask = mask_cache[static_cast<size_t>(idx)];
        }
        LossParts parts = distill_losses(ttaps, taps, calib, fmask, tg.heatmap, det, cfg);
        sample_total = parts.total;
        rec.csrd += parts.value_or_zero(parts.csrd);
        rec.msfd += parts.value_or_zero(parts.msfd);
        rec.reld += parts.value_or_zero(parts.reld);
        rec.cls += parts.value_or_zero(parts.respd_cls);
        rec.reg += parts.value_or_zero(parts.respd_reg);
      } else {
        LossParts parts;
        parts.det = det;
        sample_total = total_loss(parts, cfg);
      }
      rec.det += det.value();
      rec.total += sample_total.value();
      batch_acc = batch_acc.defined() ? add(batch_acc, sample_total) : sample_total;
    }
    Tensor batch_loss = scale(batch_acc, 1.0 / cfg.batch);
    if (!std::isfinite(batch_loss.value()))
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step));
    GradMap grads = backward_collect(batch_loss);
    opt.step(params, grads, cfg.grad_clip);
    const double inv = 1.0 / cfg.batch;
    rec.csrd *= inv;
    rec.msfd *= inv;
    rec.reld *= inv;
    rec.cls *= inv;
    rec.reg *= inv;
    rec.det *= inv;
    rec.total *= inv;
    curve.push_back(rec);
  }

  TrainOutput out{std::move(model), nullptr, std::move(curve)};
  return out;
}

TrainOutput train_detector(const DistillConfig& cfg, DetectorModel::Role role,
                           const SceneSet& scenes) {
  const bool is_teacher = role == DetectorModel::Role::kTeacher;
  const std::string tag = is_teacher ? "teacher" : "student";
  DetectorModel model(cfg, role, model_seed(cfg, tag),
                      is_teacher ? true : cfg.use_gated);
  int steps = is_teacher ? cfg.teacher_steps : cfg.student_steps;
  return run_training(cfg, std::move(model), nullptr, nullptr, scenes, steps,
                      "train/" + tag);
}

TrainOutput distill_student(const DistillConfig& cfg, const DetectorModel& teacher,
                            DetectorModel student, const SceneSet& scenes) {
  std::unique_ptr<CalibrationModule> calib;
  if (cfg.use_csrd)
    calib = std::make_unique<CalibrationModule>(cfg.ch_points, cfg.ch_calibration,
                                                model_seed(cfg, "calibration"),
                                                cfg.csrd_calibration);
  TrainOutput out = run_training(cfg, std::move(student), &teacher, calib.get(),
                                 scenes, cfg.distill_steps, "distill");
  out.calib = std::move(calib);
  return out;
}

DetectorModel clone_detector(const DistillConfig& cfg, const DetectorModel& src) {
  DetectorModel dup(cfg, src.role(), 0, src.gated());
  auto& dst = dup.params();
  const auto& s = src.params();
  if (dst.size() != s.size())
    throw std::logic_error("clone_detector: parameter count mismatch");
  for (size_t i = 0; i < s.size(); ++i) {
    if (dst[i].first != s[i].first ||
        dst[i].second.numel() != s[i].second.numel())
      throw std::logic_error("clone_detector: parameter layout mismatch");
    std::span<const double> sv = s[i].second.data();
    std::copy(sv.begin(), sv.end(), dst[i].second.mutable_data().begin());
  }
  return dup;
}

std::vector<AblationRow> ablation_rows(const DistillConfig& base) {
  std::vector<AblationRow> rows;
  auto push = [&](const std::string& name, auto mod) {
    DistillConfig c = base;
    mod(c);
    rows.push_back({name, std::move(c)});
  };
  // Incremental ladder first: each row switches one more module on.
  push("baseline", [](DistillConfig& c) {
    c.use_gated = c.use_respd = c.use_csrd = c.use_msfd = c.use_reld = false;
  });
  push("gated", [](DistillConfig& c) {
    c.use_gated = true;
    c.use_respd = c.use_csrd = c.use_msfd = c.use_reld = false;
  });
  push("gated_respd", [](DistillConfig& c) {
    c.use_gated = c.use_respd = true;
    c.use_csrd = c.use_msfd = c.use_reld = false;
  });
  push("gated_respd_csrd", [](DistillConfig& c) {
    c.use_gated = c.use_respd = c.use_csrd = true;
    c.use_msfd = c.use_reld = false;
  });
  push("gated_respd_csrd_msfd", [](DistillConfig& c) {
    c.use_gated = c.use_respd = c.use_csrd = c.use_msfd = true;
    c.use_reld = false;
  });
  push("full", [](DistillConfig& c) {
    c.use_gated = c.use_respd = c.use_csrd = c.use_msfd = c.use_reld = true;
  });
  // Variant rows swap one knob on top of the all-on configuration; the
  // knobs already at their defaults land on the same config hash as "full"
  // and exercise the dedup path.
  auto all_on = [](DistillConfig& c) {
    c.use_gated = c.use_respd = c.use_csrd = c.use_msfd = c.use_reld = true;
  };
  auto push_variant = [&](const std::string& name, auto mod) {
    push(name, [&](DistillConfig& c) {
      all_on(c);
      mod(c);
    });
  };
  push_variant("mask_dense", [](DistillConfig& c) { c.msfd_mask = MsfdMask::kDense; });
  push_variant("mask_gaussian", [](DistillConfig& c) { c.msfd_mask = MsfdMask::kGaussian; });
  push_variant("mask_scaled", [](DistillConfig& c) { c.msfd_mask = MsfdMask::kScaled; });
  push_variant("pool_max", [](DistillConfig& c) { c.pool = PoolMode::kMax; });
  push_variant("pool_mean", [](DistillConfig& c) { c.pool = PoolMode::kMean; });
  push_variant("csrd_from_gt", [](DistillConfig& c) { c.csrd_source = CsrdSource::kGt; });
  push_variant("csrd_no_calibration",
               [](DistillConfig& c) { c.csrd_calibration = false; });
  push_variant("respd_vanilla", [](DistillConfig& c) { c.respd_mode = RespdMode::kVanilla; });
  push_variant("respd_static", [](DistillConfig& c) { c.respd_mode = RespdMode::kStatic; });
  push_variant("respd_dynamic", [](DistillConfig& c) { c.respd_mode = RespdMode::kDynamic; });
  return rows;
}

std::vector<AblationResult> run_ablation(const DistillConfig& base) {
  SceneSet train_set = SceneSet::generate(base, "train", base.bench_train_scenes);
  SceneSet eval_set = SceneSet::generate(base, "val", base.bench_eval_scenes);

  TrainOutput teacher = train_detector(base, DetectorModel::Role::kTeacher, train_set);

  // students pretrain once per architecture variant
  std::map<bool, DetectorModel> pretrained;
  auto student_for = [&](const DistillConfig& c) -> DetectorModel {
    if (c.distill_from_scratch)
      return DetectorModel(c, DetectorModel::Role::kStudent,
                           model_seed(c, "student"), c.use_gated);
    auto it = pretrained.find(c.use_gated);
    if (it == pretrained.end()) {
      TrainOutput t = train_detector(c, DetectorModel::Role::kStudent, train_set);
      it = pretrained.emplace(c.use_gated, std::move(t.model)).first;
    }
    return clone_detector(c, it->second);
  };

  std::vector<AblationResult> results;
  std::map<uint64_t, double> seen;
  for (const AblationRow& row : ablation_rows(base)) {
    uint64_t h = row.cfg.hash();
    auto hit = seen.find(h);
    if (hit != seen.end()) {
      results.push_back({row.name, h, hit->second, true});
      continue;
    }
    DetectorModel student = student_for(row.cfg);
    TrainOutput out = distill_student(row.cfg, teacher.model, std::move(student),
                                      train_set);
    EvalResult er = evaluate(out.model, eval_set, row.cfg);
    seen.emplace(h, er.map);
    results.push_back({row.name, h, er.map, false});
  }
  return results;
}

std::string ablation_csv(const std::vector<AblationResult>& rows) {
  std::string csv = "name,config_hash,map,reused\n";
  for (const auto& r : rows) {
    char hash_buf[24];
    std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                  static_cast<unsigned long long>(r.config_hash));
    csv += r.name;
    csv += ',';
    csv += hash_buf;
    csv += ',';
    csv += format_double(r.map);
    csv += ',';
    csv += r.reused ? '1' : '0';
    csv += '\n';
  }
  return csv;
}

}  // namespace bevd
