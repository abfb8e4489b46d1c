#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bevd/config.hpp"
#include "bevd/scene.hpp"
#include "bevd/tensor.hpp"

namespace bevd {

/// Intermediate feature maps of one forward pass, kept for distillation.
struct ModelTaps {
  Tensor cam_feat;    // camera encoder output
  Tensor pts_feat;    // points-stream (lidar or radar) encoder output
  Tensor gated_cam;   // after gating; equals cam_feat when gating is off
  Tensor gated_pts;
  Tensor fused;       // fusion conv output
  Tensor cls;         // [K,H,W] logits
  Tensor reg;         // [8,H,W]
};

constexpr int kRegChannels = 8;

/// Two-stream BEV detector: per-stream encoders, optional gated fusion,
/// fusion conv, decoder block, center-style head.
class DetectorModel {
 public:
  enum class Role { kTeacher, kStudent };

  DetectorModel(const DistillConfig& cfg, Role role, uint64_t param_seed, bool gated);

  ModelTaps forward(const Tensor& camera, const Tensor& points) const;

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  Tensor param(const std::string& name) const;

  Role role() const { return role_; }
  bool gated() const { return gated_; }
  int num_classes() const { return k_; }

  void save(const std::filesystem::path& dir, const DistillConfig& cfg) const;
  static DetectorModel load(const std::filesystem::path& dir);
  static DistillConfig checkpoint_config(const std::filesystem::path& dir);

 private:
  DetectorModel() = default;
  Tensor add_param(const std::string& name, Shape shape, uint64_t seed, double bias_init);

  Role role_ = Role::kStudent;
  bool gated_ = true;
  int k_ = 0;
  int ch_cam_ = 0, ch_pts_ = 0, ch_fused_ = 0;
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// Gating in isolation, usable with standalone parameter tensors.
std::pair<Tensor, Tensor> gated_fuse(const Tensor& f1, const Tensor& f2,
                                     const Tensor& gate1_w, const Tensor& gate1_b,
                                     const Tensor& gate2_w, const Tensor& gate2_b);

struct Detection {
  BoxAnnotation box;
  double score = 0.0;
};

std::vector<Detection> decode(const Tensor& cls, const Tensor& reg, const GridSpec& grid,
                              double score_thresh, int max_dets);

/// Ground-truth tensors for the detection loss.
struct DetTargets {
  Tensor heatmap;   // [K,H,W], gaussian, peak 1.0 at center cells
  Tensor reg;       // [8,H,W], meaningful at center cells
  Tensor reg_mask;  // [H,W], 1 at center cells
  int n_pos = 0;
};

DetTargets build_targets(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg);

/// Penalty-reduced focal loss on the class heatmap plus masked L1 on the
/// regression map, each normalized by object count.
Tensor detection_loss(const Tensor& cls, const Tensor& reg, const DetTargets& targets,
                      const DistillConfig& cfg);

}  // namespace bevd
