#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bevd/config.hpp"
#include "bevd/model.hpp"
#include "bevd/tensor.hpp"

namespace bevd {

/// Projects the student's radar feature map to a single-channel map
/// comparable with the teacher's objectness field. Full form is three
/// (3x3 conv + batchnorm + relu) blocks plus a 1x1 projection; the reduced
/// form keeps only the projection.
class CalibrationModule {
 public:
  CalibrationModule(int in_ch, int hidden_ch, uint64_t seed, bool full);

  Tensor forward(const Tensor& radar_feat) const;  // [C,H,W] -> [H,W]

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  bool full() const { return full_; }

  void save(const std::filesystem::path& dir) const;
  static CalibrationModule load(const std::filesystem::path& dir);

 private:
  CalibrationModule() = default;
  Tensor param(const std::string& name) const;
  Tensor add_param(const std::string& name, Shape shape, uint64_t seed, double fill,
                   bool random);

  bool full_ = true;
  int in_ch_ = 0, hidden_ch_ = 0;
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// Pool of per-class sigmoid responses into one scene-level map.
Tensor teacher_objectness(const Tensor& cls_logits, PoolMode pool);

/// Mean absolute difference between the pooled objectness target and the
/// calibrated radar map, normalized by cell count.
Tensor csrd_loss(const Tensor& calibrated, const Tensor& objectness);

/// Masked per-cell L2 feature distance, normalized by cell count.
Tensor msfd_loss(const Tensor& f_teacher, const Tensor& f_student, const Tensor& mask);

/// Multi-scale affinity imitation. Both maps are reduced to per-position
/// direction fields, then run through n_scales ladder levels (avgpool2x
/// plus a fixed shared 3x3 conv block each); the mean absolute affinity
/// difference is averaged over levels.
Tensor reld_loss(const Tensor& f_teacher, const Tensor& f_student, int n_scales);

/// Quality focal loss with soft targets, mean reduction.
Tensor qfl(const Tensor& pred_logits, const Tensor& soft_target, double gamma);

/// Per-task response distillation: weighted QFL over class channels plus
/// weighted SmoothL1 over the regression map.
std::pair<Tensor, Tensor> respd_loss(const Tensor& teacher_cls, const Tensor& teacher_reg,
                                     const Tensor& student_cls, const Tensor& student_reg,
                                     const DistillConfig& cfg);

/// Per-task weight for one class under the configured weighting mode.
double respd_task_weight(const DistillConfig& cfg, int class_id);

struct LossParts {
  Tensor csrd, msfd, reld, respd_cls, respd_reg, det;  // undefined when disabled
  Tensor total;
  double value_or_zero(const Tensor& t) const { return t.defined() ? t.value() : 0.0; }
};

/// Weighted sum per the configured lambdas; undefined parts contribute 0.
Tensor total_loss(LossParts& parts, const DistillConfig& cfg);

/// All enabled distillation terms for one sample.
LossParts distill_losses(const ModelTaps& teacher, const ModelTaps& student,
                         const CalibrationModule* calib, const Tensor& feature_mask,
                         const Tensor& gt_heatmap, const Tensor& det_loss,
                         const DistillConfig& cfg);

}  // namespace bevd
