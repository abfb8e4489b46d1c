#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevd {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GridSpec {
  int h = 96;
  int w = 96;
  double cell = 0.6;  // meters per cell
  double x_min = -28.8;
  double y_min = -28.8;

  double x_of_col(double c) const { return x_min + (c + 0.5) * cell; }
  double y_of_row(double r) const { return y_min + (r + 0.5) * cell; }
  double col_of_x(double x) const { return (x - x_min) / cell - 0.5; }
  double row_of_y(double y) const { return (y - y_min) / cell - 0.5; }
  double x_max() const { return x_min + w * cell; }
  double y_max() const { return y_min + h * cell; }
  bool cell_in_bounds(int row, int col) const {
    return row >= 0 && row < h && col >= 0 && col < w;
  }
};

struct ClassSpec {
  std::string name;
  bool dynamic = true;
  double width_mean = 1.0, width_std = 0.1;
  double length_mean = 1.0, length_std = 0.1;
};

enum class PoolMode { kMean, kMax };
enum class CsrdSource { kTeacher, kGt };
enum class MsfdMask { kDense, kGaussian, kScaled };
enum class RespdMode { kVanilla, kStatic, kDynamic };

struct DistillConfig {
  uint64_t seed = 1;

  GridSpec grid;
  std::vector<ClassSpec> classes;  // defaults filled by make_default

  // scene generation
  int objects_min = 2;
  int objects_max = 6;
  double speed_max = 3.0;
  double place_margin = 4.8;
  double lidar_density = 12.0;
  double lidar_noise_std = 0.04;
  int lidar_bg_points = 60;
  double radar_density = 3.0;
  double radar_radial_std_per_m = 0.05;
  double radar_azimuth_std_deg = 0.5;
  double radar_dropout_max = 0.6;
  double radar_dropout_range_scale = 60.0;
  double radar_vel_noise_std = 0.1;
  double camera_blur_base = 0.5;
  double camera_blur_range_scale = 30.0;

  // model widths
  int ch_camera = 8;
  int ch_points = 16;
  int ch_fused = 32;
  int ch_calibration = 16;

  // loss weights and shapes
  double lambda_csrd = 100.0;
  double lambda_msfd = 10.0;
  double lambda_reld = 0.25;
  double lambda_respd = 1.0;
  double lambda_det = 1.0;
  double qfl_gamma = 2.0;
  double respd_w_dynamic = 2.0;
  double respd_w_static = 1.0;
  RespdMode respd_mode = RespdMode::kDynamic;
  PoolMode pool = PoolMode::kMean;
  int reld_scales = 4;
  CsrdSource csrd_source = CsrdSource::kTeacher;
  bool csrd_calibration = true;
  MsfdMask msfd_mask = MsfdMask::kScaled;
  double smooth_l1_delta = 1.0;

  // foreground mask scaling
  double mask_r1 = 20.0;
  double mask_r2 = 30.0;
  double mask_alpha = 0.25;
  double mask_beta = 0.5;
  double mask_v1 = 0.3;
  double mask_v2 = 0.8;
  double mask_clip_min = 0.5;
  double mask_clip_max = 4.0;

  // detection targets
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
  double heatmap_min_sigma = 1.0;
  double heatmap_sigma_factor = 0.2;

  // optimization
  double lr = 0.003;
  int batch = 4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // 0 disables
  int teacher_steps = 240;
  int student_steps = 240;
  int distill_steps = 160;
  bool distill_from_scratch = false;

  // distillation toggles
  bool use_gated = true;
  bool use_respd = true;
  bool use_csrd = true;
  bool use_msfd = true;
  bool use_reld = true;

  // evaluation
  double eval_score_thresh = 0.25;
  int eval_max_dets = 64;
  std::vector<double> eval_match_thresholds = {0.5, 1.0, 2.0, 4.0};
  std::vector<double> eval_range_edges = {0.0, 20.0, 30.0, 50.0};
  double eval_vel_thresh = 2.0;

  // benchmark
  int bench_train_scenes = 400;
  int bench_eval_scenes = 100;
  int bench_seeds = 3;

  static DistillConfig make_default();

  std::string serialize() const;                     // canonical key=value text
  static DistillConfig parse(const std::string& text);  // defaults + overrides
  void save(const std::filesystem::path& path) const;
  static DistillConfig load(const std::filesystem::path& path);
  uint64_t hash() const;

  void validate() const;  // throws ConfigError on inconsistency
  int num_classes() const { return static_cast<int>(classes.size()); }
};

}  // namespace bevd
