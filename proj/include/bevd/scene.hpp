#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bevd/config.hpp"
#include "bevd/tensor.hpp"

namespace bevd {

struct BoxAnnotation {
  int class_id = 0;
  double x = 0.0, y = 0.0;      // center, meters
  double width = 1.0, length = 1.0;
  double yaw = 0.0;             // radians; length axis points along yaw
  double vx = 0.0, vy = 0.0;    // m/s

  double range() const;
  double speed() const;
};

struct SceneSample {
  uint64_t scene_seed = 0;
  std::vector<BoxAnnotation> boxes;
  bool truncated = false;  // placement retries ran out, fewer objects than drawn
  Tensor lidar;   // [C,H,W]
  Tensor radar;   // [C,H,W]
  Tensor camera;  // [C,H,W]
};

constexpr int kSensorChannels = 4;

std::vector<BoxAnnotation> sample_boxes(const DistillConfig& cfg, uint64_t scene_seed,
                                        bool* truncated = nullptr);
Tensor render_lidar_bev(const DistillConfig& cfg, const std::vector<BoxAnnotation>& boxes,
                        uint64_t scene_seed);
Tensor render_radar_bev(const DistillConfig& cfg, const std::vector<BoxAnnotation>& boxes,
                        uint64_t scene_seed);
Tensor render_camera_bev(const DistillConfig& cfg, const std::vector<BoxAnnotation>& boxes,
                         uint64_t scene_seed);

SceneSample generate_scene(const DistillConfig& cfg, uint64_t scene_seed);

uint64_t scene_seed_for(const DistillConfig& cfg, const std::string& split, int index);

/// Materialized scene collection for training or evaluation.
struct SceneSet {
  std::vector<SceneSample> scenes;
  static SceneSet generate(const DistillConfig& cfg, const std::string& split, int count);
};

// On-disk corpus: manifest.json with annotations plus one binary grid file
// per sensor per scene.
void write_corpus(const std::filesystem::path& dir, const DistillConfig& cfg,
                  const SceneSet& set, const std::string& split);
SceneSet read_corpus(const std::filesystem::path& dir);

}  // namespace bevd
