#pragma once

#include <string>
#include <vector>

#include "bevd/config.hpp"
#include "bevd/model.hpp"
#include "bevd/scene.hpp"

namespace bevd {

/// Ground truth / detection pairs for one class over a whole split.
struct EvalResult {
  double map = 0.0;                      // mean over classes and match radii
  std::vector<double> per_class_ap;      // per class, mean over radii
  double mean_vel_err = 0.0;             // over dynamic-class true positives
  int vel_tp_count = 0;
  std::vector<double> range_map;         // per range bucket
  std::vector<int> range_gt_count;
  int n_scenes = 0;
  int n_gt = 0;
  int n_det = 0;
};

/// Average precision for one class at one match radius; interpolated
/// precision sampled at recall 0.1 .. 1.0. Detections greedily match the
/// nearest free ground-truth center of the same class within the radius,
/// in score order.
double average_precision(const std::vector<Detection>& dets,
                         const std::vector<BoxAnnotation>& gts,
                         const std::vector<int>& det_scene,
                         const std::vector<int>& gt_scene, double radius);

EvalResult evaluate(const DetectorModel& model, const SceneSet& scenes,
                    const DistillConfig& cfg);

std::string eval_report_json(const EvalResult& r, const DistillConfig& cfg);

}  // namespace bevd
