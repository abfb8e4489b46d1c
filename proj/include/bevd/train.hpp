#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bevd/config.hpp"
#include "bevd/kd.hpp"
#include "bevd/model.hpp"
#include "bevd/scene.hpp"

namespace bevd {

struct StepRecord {
  int step = 0;
  double csrd = 0.0, msfd = 0.0, reld = 0.0;
  double cls = 0.0, reg = 0.0;  // response-distillation components
  double det = 0.0, total = 0.0;
};

std::string curve_csv(const std::vector<StepRecord>& curve);

/// Adam with bias correction; state grows lazily per parameter slot.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps);
  void step(std::vector<std::pair<std::string, Tensor>>& params, const GradMap& grads,
            double clip);
  int steps_taken() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainOutput {
  DetectorModel model;
  std::unique_ptr<CalibrationModule> calib;  // present when CSRD was active
  std::vector<StepRecord> curve;
};

/// One optimization loop shared by plain training and distillation. With no
/// teacher (or with every distillation term disabled) the loop reduces to
/// supervised detection training; the code path is identical either way, so
/// a distillation run with all toggles off reproduces plain training
/// step for step.
TrainOutput run_training(const DistillConfig& cfg, DetectorModel model,
                         const DetectorModel* teacher, CalibrationModule* calib,
                         const SceneSet& scenes, int steps, const std::string& stream);

/// Fresh model of the given role trained on supervised detection only.
TrainOutput train_detector(const DistillConfig& cfg, DetectorModel::Role role,
                           const SceneSet& scenes);

/// Knowledge distillation into a student; the teacher is never updated.
TrainOutput distill_student(const DistillConfig& cfg, const DetectorModel& teacher,
                            DetectorModel student, const SceneSet& scenes);

uint64_t model_seed(const DistillConfig& cfg, const std::string& role_tag);

/// Independent copy: fresh parameter nodes holding the same values.
DetectorModel clone_detector(const DistillConfig& cfg, const DetectorModel& src);

/// Named configuration rows for the ablation table: the full setting, each
/// single-loss removal, the ungated variant, and the alternative mask,
/// pooling, source, calibration, and weighting choices.
struct AblationRow {
  std::string name;
  DistillConfig cfg;
};
std::vector<AblationRow> ablation_rows(const DistillConfig& base);

struct AblationResult {
  std::string name;
  uint64_t config_hash = 0;
  double map = 0.0;
  bool reused = false;  // identical config already evaluated
};

/// Runs every ablation row against one shared teacher and per-architecture
/// pretrained students; duplicate configurations are computed once.
std::vector<AblationResult> run_ablation(const DistillConfig& base);

/// "name,config_hash,map,reused" table, hashes as 16 hex digits.
std::string ablation_csv(const std::vector<AblationResult>& rows);

}  // namespace bevd
