#include "bevd/kd.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "bevd/io.hpp"
#include "bevd/rng.hpp"

namespace bevd {

using json = nlohmann::json;

namespace {

constexpr double kBnEps = 1e-5;

std::vector<double> uniform_fan_in(Shape shape, uint64_t seed) {
  int n = shape_numel(shape);
  int fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : 1;
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng(seed);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return data;
}

}  // namespace

Tensor CalibrationModule::add_param(const std::string& name, Shape shape, uint64_t seed,
                                    double fill, bool random) {
  Tensor t = random
                 ? Tensor::from_data(shape, uniform_fan_in(shape, mix_seed(seed, name)), true)
                 : Tensor::full(shape, fill, true);
  params_.emplace_back(name, t);
  return t;
}

CalibrationModule::CalibrationModule(int in_ch, int hidden_ch, uint64_t seed, bool full)
    : full_(full), in_ch_(in_ch), hidden_ch_(hidden_ch) {
  if (full_) {
    int c_in = in_ch;
    for (int i = 1; i <= 3; ++i) {
      std::string p = "calib.conv" + std::to_string(i);
      add_param(p + ".w", {hidden_ch, c_in, 3, 3}, seed, 0.0, true);
      add_param(p + ".b", {hidden_ch}, seed, 0.0, false);
      add_param("calib.bn" + std::to_string(i) + ".gamma", {hidden_ch}, seed, 1.0, false);
      add_param("calib.bn" + std::to_string(i) + ".beta", {hidden_ch}, seed, 0.0, false);
      c_in = hidden_ch;
    }
    add_param("calib.proj.w", {1, hidden_ch, 1, 1}, seed, 0.0, true);
  } else {
    add_param("calib.proj.w", {1, in_ch, 1, 1}, seed, 0.0, true);
  }
  add_param("calib.proj.b", {1}, seed, 0.0, false);
}

Tensor CalibrationModule::param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw std::runtime_error("calibration: no parameter named " + name);
}

Tensor CalibrationModule::forward(const Tensor& radar_feat) const {
  Tensor x = radar_feat;
  if (full_) {
    for (int i = 1; i <= 3; ++i) {
      std::string p = "calib.conv" + std::to_string(i);
      std::string bn = "calib.bn" + std::to_string(i);
      x = conv2d(x, param(p + ".w"), param(p + ".b"), 1, 1);
      x = batchnorm(x, param(bn + ".gamma"), param(bn + ".beta"), kBnEps);
      x = relu(x);
    }
  }
  Tensor projected = conv2d(x, param("calib.proj.w"), param("calib.proj.b"), 1, 0);
  return slice_channel(projected, 0);
}

void CalibrationModule::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "bev-calibration-checkpoint-v1";
  manifest["full"] = full_;
  manifest["in_ch"] = in_ch_;
  manifest["hidden_ch"] = hidden_ch_;
  json plist = json::array();
  for (const auto& [name, t] : params_) {
    std::string file = name + ".bdt1";
    write_tensor(dir / file, t);
    plist.push_back({{"name", name}, {"file", file}});
  }
  manifest["params"] = std::move(plist);
  write_file_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

CalibrationModule CalibrationModule::load(const std::filesystem::path& dir) {
  json manifest = json::parse(read_file_text(dir / "manifest.json"));
  if (manifest.value("format", "") != "bev-calibration-checkpoint-v1")
    throw std::runtime_error("calibration checkpoint: unrecognized format in " + dir.string());
  CalibrationModule m;
  m.full_ = manifest.at("full").get<bool>();
  m.in_ch_ = manifest.at("in_ch").get<int>();
  m.hidden_ch_ = manifest.at("hidden_ch").get<int>();
  for (const auto& entry : manifest.at("params")) {
    Tensor t = read_tensor(dir / entry.at("file").get<std::string>());
    Tensor p = Tensor::from_data(t.shape(),
                                 std::vector<double>(t.data().begin(), t.data().end()), true);
    m.params_.emplace_back(entry.at("name").get<std::string>(), p);
  }
  return m;
}

Tensor teacher_objectness(const Tensor& cls_logits, PoolMode pool) {
  return channel_pool(sigmoid(cls_logits),
                      pool == PoolMode::kMean ? Pool::kMean : Pool::kMax);
}

Tensor csrd_loss(const Tensor& calibrated, const Tensor& objectness) {
  return mean_all(abs(sub(objectness, calibrated)));
}

Tensor msfd_loss(const Tensor& f_teacher, const Tensor& f_student, const Tensor& mask) {
  Tensor diff = sub(f_teacher, f_student);
  Tensor norms = sqrt_guarded(channel_sum(mul(diff, diff)));
  double cells = static_cast<double>(norms.numel());
  return scale(sum_all(mul(norms, mask)), 1.0 / cells);
}

namespace {

// Per-position direction field: v / max(|v|, 1e-12).
Tensor direction_field(const Tensor& f) {
  Tensor norms = sqrt_guarded(channel_sum(mul(f, f)));
  return scale_channels(f, recip_floor(norms, 1e-12));
}

// Fixed, non-trainable 3x3 kernel shared between teacher and student at one
// ladder level. Seeded by (channels, level) only, so every call sees the
// same weights.
Tensor ladder_kernel(int channels, int level) {
  uint64_t seed = mix_seed(0x235A11u + static_cast<uint64_t>(level) * 7919u,
                           "reld-ladder-" + std::to_string(channels));
  return Tensor::from_data({channels, channels, 3, 3},
                           uniform_fan_in({channels, channels, 3, 3}, seed));
}

}  // namespace

Tensor reld_loss(const Tensor& f_teacher, const Tensor& f_student, int n_scales) {
  if (f_teacher.shape() != f_student.shape())
    throw std::runtime_error("reld: feature shapes differ");
  if (n_scales < 1) throw std::runtime_error("reld: need at least one scale");
  int h = f_teacher.dim(1), w = f_teacher.dim(2);
  int div = 1 << n_scales;
  if (h % div != 0 || w % div != 0)
    throw std::runtime_error("reld: spatial size not divisible by 2^n_scales");

  const int c = f_teacher.dim(0);
  Tensor zero_bias = Tensor::zeros({c});
  Tensor cur_t = direction_field(f_teacher);
  Tensor cur_s = direction_field(f_student);
  Tensor acc;
  for (int level = 1; level <= n_scales; ++level) {
    Tensor kernel = ladder_kernel(c, level);
    cur_t = relu(conv2d(avgpool2x(cur_t), kernel, zero_bias, 1, 1));
    cur_s = relu(conv2d(avgpool2x(cur_s), kernel, zero_bias, 1, 1));
    Tensor term = affinity_l1(cur_t, cur_s);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / n_scales);
}

Tensor qfl(const Tensor& pred_logits, const Tensor& soft_target, double gamma) {
  Tensor p = sigmoid(pred_logits);
  Tensor mod = pow_const(abs(sub(soft_target, p)), gamma);
  Tensor ce = add(mul(soft_target, log_clamped(p)),
                  mul(const_minus(1.0, soft_target), log_clamped(const_minus(1.0, p))));
  return scale(mean_all(mul(mod, ce)), -1.0);
}

double respd_task_weight(const DistillConfig& cfg, int class_id) {
  if (cfg.respd_mode == RespdMode::kVanilla) return 1.0;
  const ClassSpec& cs = cfg.classes[static_cast<size_t>(class_id)];
  if (cfg.respd_mode == RespdMode::kStatic) return cs.dynamic ? 1.0 : cfg.respd_w_dynamic;
  return cs.dynamic ? cfg.respd_w_dynamic : cfg.respd_w_static;
}

std::pair<Tensor, Tensor> respd_loss(const Tensor& teacher_cls, const Tensor& teacher_reg,
                                     const Tensor& student_cls, const Tensor& student_reg,
                                     const DistillConfig& cfg) {
  if (teacher_cls.shape() != student_cls.shape() ||
      teacher_reg.shape() != student_reg.shape())
    throw std::runtime_error("respd: head shapes differ");
  const int k = teacher_cls.dim(0);

  Tensor cls_acc;
  double reg_weight = 0.0;
  for (int i = 0; i < k; ++i) {
    double w = respd_task_weight(cfg, i);
    Tensor target = sigmoid(slice_channel(teacher_cls, i));
    Tensor term = scale(qfl(slice_channel(student_cls, i), target, cfg.qfl_gamma), w);
    cls_acc = cls_acc.defined() ? add(cls_acc, term) : term;
    reg_weight += w;
  }
  Tensor reg_term = scale(smooth_l1_mean(student_reg, teacher_reg, cfg.smooth_l1_delta),
                          reg_weight);
  return {cls_acc, reg_term};
}

Tensor total_loss(LossParts& parts, const DistillConfig& cfg) {
  Tensor acc = Tensor::scalar(0.0);
  auto add_part = [&acc](const Tensor& t, double lambda) {
    if (t.defined() && lambda != 0.0) acc = add(acc, scale(t, lambda));
  };
  add_part(parts.csrd, cfg.lambda_csrd);
  add_part(parts.msfd, cfg.lambda_msfd);
  add_part(parts.reld, cfg.lambda_reld);
  if (parts.respd_cls.defined())
    acc = add(acc, scale(add(parts.respd_cls, parts.respd_reg), cfg.lambda_respd));
  add_part(parts.det, cfg.lambda_det);
  parts.total = acc;
  return acc;
}

LossParts distill_losses(const ModelTaps& teacher, const ModelTaps& student,
                         const CalibrationModule* calib, const Tensor& feat_mask,
                         const Tensor& gt_heatmap, const Tensor& det_loss,
                         const DistillConfig& cfg) {
  LossParts parts;
  parts.det = det_loss;
  if (cfg.use_csrd) {
    if (!calib) throw std::runtime_error("distill: calibration module required");
    Tensor objectness;
    {
      NoGradGuard ng;
      objectness = cfg.csrd_source == CsrdSource::kTeacher
                       ? teacher_objectness(teacher.cls, cfg.pool)
                       : channel_pool(gt_heatmap,
                                      cfg.pool == PoolMode::kMean ? Pool::kMean : Pool::kMax);
    }
    parts.csrd = csrd_loss(calib->forward(student.pts_feat), objectness);
  }
  if (cfg.use_msfd) {
    Tensor cam_term = msfd_loss(teacher.gated_cam, student.gated_cam, feat_mask);
    Tensor fused_term = msfd_loss(teacher.fused, student.fused, feat_mask);
    parts.msfd = add(cam_term, fused_term);
  }
  if (cfg.use_reld) {
    parts.reld = reld_loss(teacher.fused, student.fused, cfg.reld_scales);
  }
  if (cfg.use_respd) {
    auto [cls_term, reg_term] =
        respd_loss(teacher.cls, teacher.reg, student.cls, student.reg, cfg);
    parts.respd_cls = cls_term;
    parts.respd_reg = reg_term;
  }
  total_loss(parts, cfg);
  return parts;
}

}  // namespace bevd
