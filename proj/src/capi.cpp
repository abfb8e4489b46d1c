#include "bevdistill.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>

#include "bevd/config.hpp"
#include "bevd/eval.hpp"
#include "bevd/gradcheck.hpp"
#include "bevd/io.hpp"
#include "bevd/kd.hpp"
#include "bevd/model.hpp"
#include "bevd/scene.hpp"
#include "bevd/train.hpp"

struct bevd_config {
  bevd::DistillConfig cfg;
};

struct bevd_corpus {
  bevd::SceneSet set;
};

struct bevd_model {
  bevd::DetectorModel model;
  std::unique_ptr<bevd::CalibrationModule> calib;
  bevd::DistillConfig cfg;  // configuration the model was built under
};

namespace {

thread_local std::string g_err;

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p != nullptr) std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

template <typename F>
int guarded(F&& f) {
  try {
    g_err.clear();
    return f();
  } catch (const bevd::ConfigError& e) {
    g_err = e.what();
    return BEVD_ERR_CONFIG;
  } catch (const std::invalid_argument& e) {
    g_err = e.what();
    return BEVD_ERR_CONFIG;
  } catch (const std::exception& e) {
    g_err = e.what();
    return BEVD_ERR_RUNTIME;
  } catch (...) {
    g_err = "unknown failure";
    return BEVD_ERR_RUNTIME;
  }
}

int usage_error(const std::string& msg) {
  g_err = msg;
  return BEVD_ERR_CONFIG;
}

}  // namespace

extern "C" {

const char* bevd_version(void) { return "0.1.0"; }

const char* bevd_last_error(void) { return g_err.c_str(); }

void bevd_string_free(char* s) { std::free(s); }

int bevd_config_default(bevd_config** out) {
  if (out == nullptr) return usage_error("bevd_config_default: out is null");
  return guarded([&] {
    *out = new bevd_config{bevd::DistillConfig::make_default()};
    return BEVD_OK;
  });
}

int bevd_config_load(const char* path, bevd_config** out) {
  if (path == nullptr || out == nullptr)
    return usage_error("bevd_config_load: null argument");
  return guarded([&] {
    *out = new bevd_config{bevd::DistillConfig::load(path)};
    return BEVD_OK;
  });
}

int bevd_config_parse(const char* text, bevd_config** out) {
  if (text == nullptr || out == nullptr)
    return usage_error("bevd_config_parse: null argument");
  return guarded([&] {
    *out = new bevd_config{bevd::DistillConfig::parse(text)};
    return BEVD_OK;
  });
}

int bevd_config_set(bevd_config* cfg, const char* key, const char* value) {
  if (cfg == nullptr || key == nullptr || value == nullptr)
    return usage_error("bevd_config_set: null argument");
  return guarded([&] {
    std::string text = std::string(key) + " = " + value + "\n";
    // reparse on top of the current state so one bad key cannot corrupt it
    bevd::DistillConfig base = cfg->cfg;
    bevd::DistillConfig merged =
        bevd::DistillConfig::parse(base.serialize() + text);
    cfg->cfg = merged;
    return BEVD_OK;
  });
}

int bevd_config_save(const bevd_config* cfg, const char* path) {
  if (cfg == nullptr || path == nullptr)
    return usage_error("bevd_config_save: null argument");
  return guarded([&] {
    cfg->cfg.save(path);
    return BEVD_OK;
  });
}

int bevd_config_serialize(const bevd_config* cfg, char** text_out) {
  if (cfg == nullptr || text_out == nullptr)
    return usage_error("bevd_config_serialize: null argument");
  return guarded([&] {
    *text_out = dup_string(cfg->cfg.serialize());
    return *text_out != nullptr ? BEVD_OK : BEVD_ERR_RUNTIME;
  });
}

int bevd_config_hash(const bevd_config* cfg, uint64_t* out) {
  if (cfg == nullptr || out == nullptr)
    return usage_error("bevd_config_hash: null argument");
  return guarded([&] {
    *out = cfg->cfg.hash();
    return BEVD_OK;
  });
}

void bevd_config_free(bevd_config* cfg) { delete cfg; }

int bevd_corpus_generate(const bevd_config* cfg, const char* split, int n_scenes,
                         bevd_corpus** out) {
  if (cfg == nullptr || split == nullptr || out == nullptr)
    return usage_error("bevd_corpus_generate: null argument");
  if (n_scenes < 0) return usage_error("bevd_corpus_generate: negative n_scenes");
  return guarded([&] {
    cfg->cfg.validate();
    *out = new bevd_corpus{bevd::SceneSet::generate(cfg->cfg, split, n_scenes)};
    return BEVD_OK;
  });
}

int bevd_corpus_write(const bevd_corpus* corpus, const bevd_config* cfg,
                      const char* dir, const char* split) {
  if (corpus == nullptr || cfg == nullptr || dir == nullptr || split == nullptr)
    return usage_error("bevd_corpus_write: null argument");
  return guarded([&] {
    bevd::write_corpus(dir, cfg->cfg, corpus->set, split);
    return BEVD_OK;
  });
}

int bevd_corpus_read(const char* dir, bevd_corpus** out) {
  if (dir == nullptr || out == nullptr)
    return usage_error("bevd_corpus_read: null argument");
  return guarded([&] {
    *out = new bevd_corpus{bevd::read_corpus(dir)};
    return BEVD_OK;
  });
}

int bevd_corpus_size(const bevd_corpus* corpus, int* out) {
  if (corpus == nullptr || out == nullptr)
    return usage_error("bevd_corpus_size: null argument");
  *out = static_cast<int>(corpus->set.scenes.size());
  return BEVD_OK;
}

void bevd_corpus_free(bevd_corpus* corpus) { delete corpus; }

int bevd_train(const bevd_config* cfg, int role_teacher, const bevd_corpus* corpus,
               bevd_model** model_out, char** curve_csv_out) {
  if (cfg == nullptr || corpus == nullptr || model_out == nullptr)
    return usage_error("bevd_train: null argument");
  return guarded([&] {
    cfg->cfg.validate();
    auto role = role_teacher != 0 ? bevd::DetectorModel::Role::kTeacher
                                  : bevd::DetectorModel::Role::kStudent;
    bevd::TrainOutput out = bevd::train_detector(cfg->cfg, role, corpus->set);
    if (curve_csv_out != nullptr)
      *curve_csv_out = dup_string(bevd::curve_csv(out.curve));
    *model_out = new bevd_model{std::move(out.model), nullptr, cfg->cfg};
    return BEVD_OK;
  });
}

int bevd_distill(const bevd_config* cfg, const bevd_model* teacher,
                 const bevd_model* student, const bevd_corpus* corpus,
                 bevd_model** model_out, char** curve_csv_out) {
  if (cfg == nullptr || teacher == nullptr || student == nullptr ||
      corpus == nullptr || model_out == nullptr)
    return usage_error("bevd_distill: null argument");
  const auto& tg = teacher->cfg.grid;
  const auto& sg = student->cfg.grid;
  if (tg.h != sg.h || tg.w != sg.w)
    return usage_error("bevd_distill: grid mismatch, teacher " +
                       std::to_string(tg.h) + "x" + std::to_string(tg.w) +
                       " vs student " + std::to_string(sg.h) + "x" +
                       std::to_string(sg.w));
  if (teacher->model.role() != bevd::DetectorModel::Role::kTeacher)
    return usage_error("bevd_distill: first model was not trained as a teacher");
  return guarded([&] {
    cfg->cfg.validate();
    bevd::DetectorModel copy = bevd::clone_detector(cfg->cfg, student->model);
    bevd::TrainOutput out =
        bevd::distill_student(cfg->cfg, teacher->model, std::move(copy), corpus->set);
    if (curve_csv_out != nullptr)
      *curve_csv_out = dup_string(bevd::curve_csv(out.curve));
    *model_out = new bevd_model{std::move(out.model), std::move(out.calib), cfg->cfg};
    return BEVD_OK;
  });
}

int bevd_model_save(const bevd_model* model, const char* dir) {
  if (model == nullptr || dir == nullptr)
    return usage_error("bevd_model_save: null argument");
  return guarded([&] {
    model->model.save(dir, model->cfg);
    if (model->calib)
      model->calib->save(std::filesystem::path(dir) / "calibration");
    return BEVD_OK;
  });
}

int bevd_model_load(const char* dir, bevd_model** out) {
  if (dir == nullptr || out == nullptr)
    return usage_error("bevd_model_load: null argument");
  return guarded([&] {
    bevd::DetectorModel m = bevd::DetectorModel::load(dir);
    bevd::DistillConfig cfg = bevd::DetectorModel::checkpoint_config(dir);
    auto handle = std::make_unique<bevd_model>(
        bevd_model{std::move(m), nullptr, std::move(cfg)});
    auto calib_dir = std::filesystem::path(dir) / "calibration";
    if (std::filesystem::exists(calib_dir / "manifest.json"))
      handle->calib = std::make_unique<bevd::CalibrationModule>(
          bevd::CalibrationModule::load(calib_dir));
    *out = handle.release();
    return BEVD_OK;
  });
}

int bevd_model_params_hash(const bevd_model* model, uint64_t* out) {
  if (model == nullptr || out == nullptr)
    return usage_error("bevd_model_params_hash: null argument");
  return guarded([&] {
    std::vector<uint8_t> buf;
    for (const auto& [name, t] : model->model.params()) {
      buf.insert(buf.end(), name.begin(), name.end());
      std::vector<uint8_t> tb = bevd::tensor_bytes(t);
      buf.insert(buf.end(), tb.begin(), tb.end());
    }
    *out = bevd::hash_bytes(buf);
    return BEVD_OK;
  });
}

int bevd_model_config(const bevd_model* model, bevd_config** out) {
  if (model == nullptr || out == nullptr)
    return usage_error("bevd_model_config: null argument");
  return guarded([&] {
    *out = new bevd_config{model->cfg};
    return BEVD_OK;
  });
}

int bevd_model_role(const bevd_model* model, int* role_teacher_out) {
  if (model == nullptr || role_teacher_out == nullptr)
    return usage_error("bevd_model_role: null argument");
  *role_teacher_out =
      model->model.role() == bevd::DetectorModel::Role::kTeacher ? 1 : 0;
  return BEVD_OK;
}

void bevd_model_free(bevd_model* model) { delete model; }

int bevd_evaluate(const bevd_model* model, const bevd_corpus* corpus,
                  const bevd_config* cfg, char** report_json_out) {
  if (model == nullptr || corpus == nullptr || cfg == nullptr ||
      report_json_out == nullptr)
    return usage_error("bevd_evaluate: null argument");
  return guarded([&] {
    cfg->cfg.validate();
    bevd::EvalResult r = bevd::evaluate(model->model, corpus->set, cfg->cfg);
    *report_json_out = dup_string(bevd::eval_report_json(r, cfg->cfg));
    return BEVD_OK;
  });
}

int bevd_evaluate_map(const bevd_model* model, const bevd_corpus* corpus,
                      const bevd_config* cfg, double* map_out) {
  if (model == nullptr || corpus == nullptr || cfg == nullptr || map_out == nullptr)
    return usage_error("bevd_evaluate_map: null argument");
  return guarded([&] {
    cfg->cfg.validate();
    bevd::EvalResult r = bevd::evaluate(model->model, corpus->set, cfg->cfg);
    *map_out = r.map;
    return BEVD_OK;
  });
}

int bevd_ablate(const bevd_config* cfg, char** csv_out) {
  if (cfg == nullptr || csv_out == nullptr)
    return usage_error("bevd_ablate: null argument");
  return guarded([&] {
    cfg->cfg.validate();
    std::vector<bevd::AblationResult> rows = bevd::run_ablation(cfg->cfg);
    *csv_out = dup_string(bevd::ablation_csv(rows));
    return BEVD_OK;
  });
}

int bevd_gradcheck(int fixtures_per_case, uint64_t seed, char** report_out) {
  if (fixtures_per_case <= 0)
    return usage_error("bevd_gradcheck: fixtures_per_case must be positive");
  return guarded([&] {
    bevd::GradSuiteResult r = bevd::run_gradient_suite(fixtures_per_case, seed);
    if (report_out != nullptr)
      *report_out = dup_string(bevd::gradient_suite_report(r));
    if (!r.ok()) {
      g_err = "gradient checks failed";
      return BEVD_ERR_RUNTIME;
    }
    return BEVD_OK;
  });
}

int bevd_hash_file(const char* path, uint64_t* out) {
  if (path == nullptr || out == nullptr)
    return usage_error("bevd_hash_file: null argument");
  return guarded([&] {
    *out = bevd::hash_file(path);
    return BEVD_OK;
  });
}

}  // extern "C"
