#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bevdistill.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using ConfigPtr = std::unique_ptr<bevd_config, decltype(&bevd_config_free)>;
using CorpusPtr = std::unique_ptr<bevd_corpus, decltype(&bevd_corpus_free)>;
using ModelPtr = std::unique_ptr<bevd_model, decltype(&bevd_model_free)>;

std::string take_string(char* s) {
  std::string out = s != nullptr ? s : "";
  bevd_string_free(s);
  return out;
}

int fail(int rc, const std::string& what) {
  std::fprintf(stderr, "error: %s: %s\n", what.c_str(), bevd_last_error());
  return rc;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int thread_cap() {
  // BEVD_THREADS caps worker parallelism; everything here runs on one
  // worker, so the cap only clamps and gets recorded
  const char* env = std::getenv("BEVD_THREADS");
  if (env == nullptr) return 1;
  int v = std::atoi(env);
  return v >= 1 ? 1 : 1;
}

// content identity of a corpus directory: scene annotations + config hash
// from its manifest plus every scene grid file, volatile fields excluded
bool corpus_content_hash(const fs::path& dir, uint64_t* out) {
  fs::path man = dir / "manifest.json";
  std::ifstream in(man);
  if (!in) return false;
  json j;
  try {
    in >> j;
  } catch (...) {
    return false;
  }
  std::string acc = j.value("config_hash", "");
  acc += j.contains("scenes") ? j["scenes"].dump() : "";
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string name = e.path().filename().string();
    if (name == "manifest.json") continue;
    names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  for (const auto& n : names) {
    uint64_t fh = 0;
    if (bevd_hash_file((dir / n).string().c_str(), &fh) != BEVD_OK) return false;
    acc += n;
    acc += '=';
    acc += hex64(fh);
    acc += '\n';
  }
  *out = fnv1a(acc);
  return true;
}

bool write_text_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) return false;
  out << text;
  return static_cast<bool>(out);
}

struct RunClock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  int64_t ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - t0)
        .count();
  }
};

// every output directory carries exactly one manifest describing the run;
// duration_ms is the only field expected to vary between identical reruns
bool write_manifest(const fs::path& out_dir, json fields) {
  fields["threads"] = thread_cap();
  return write_text_file(out_dir / "manifest.json", fields.dump(2) + "\n");
}

ConfigPtr load_config_or_default(const std::string& path, int* rc) {
  bevd_config* cfg = nullptr;
  *rc = path.empty() ? bevd_config_default(&cfg)
                     : bevd_config_load(path.c_str(), &cfg);
  return ConfigPtr(cfg, &bevd_config_free);
}

int cmd_gen(const std::string& config_path, const std::string& out_dir,
            int n_scenes, const std::string& seed, const std::string& split) {
  RunClock clock;
  int rc = 0;
  ConfigPtr cfg = load_config_or_default(config_path, &rc);
  if (rc != BEVD_OK) return fail(rc, "loading config");
  if (!seed.empty()) {
    rc = bevd_config_set(cfg.get(), "seed", seed.c_str());
    if (rc != BEVD_OK) return fail(rc, "applying --seed");
  }
  bevd_corpus* corpus = nullptr;
  rc = bevd_corpus_generate(cfg.get(), split.c_str(), n_scenes, &corpus);
  if (rc != BEVD_OK) return fail(rc, "generating scenes");
  CorpusPtr corpus_guard(corpus, &bevd_corpus_free);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  rc = bevd_corpus_write(corpus, cfg.get(), out_dir.c_str(), split.c_str());
  if (rc != BEVD_OK) return fail(rc, "writing corpus");

  uint64_t cfg_hash = 0;
  bevd_config_hash(cfg.get(), &cfg_hash);
  uint64_t corpus_hash = 0;
  if (!corpus_content_hash(out_dir, &corpus_hash)) {
    std::fprintf(stderr, "error: written corpus failed to hash\n");
    return 1;
  }
  // fold run fields into the corpus manifest so the directory keeps one
  json j;
  {
    std::ifstream in(fs::path(out_dir) / "manifest.json");
    if (!in) {
      std::fprintf(stderr, "error: corpus manifest missing after write\n");
      return 1;
    }
    in >> j;
  }
  j["command"] = "gen";
  j["run_config_hash"] = hex64(cfg_hash);
  j["corpus_hash"] = hex64(corpus_hash);
  j["n_scenes"] = n_scenes;
  j["duration_ms"] = clock.ms();
  j["threads"] = thread_cap();
  if (!write_text_file(fs::path(out_dir) / "manifest.json", j.dump(2) + "\n")) {
    std::fprintf(stderr, "error: cannot rewrite corpus manifest\n");
    return 1;
  }
  std::printf("gen: %d scenes -> %s (corpus %s)\n", n_scenes, out_dir.c_str(),
              hex64(corpus_hash).c_str());
  return 0;
}

int cmd_train(const std::string& role, const std::string& corpus_dir,
              const std::string& config_path, const std::string& out_dir) {
  RunClock clock;
  int rc = 0;
  ConfigPtr cfg = load_config_or_default(config_path, &rc);
  if (rc != BEVD_OK) return fail(rc, "loading config");
  bevd_corpus* corpus = nullptr;
  rc = bevd_corpus_read(corpus_dir.c_str(), &corpus);
  if (rc != BEVD_OK) return fail(rc, "reading corpus " + corpus_dir);
  CorpusPtr corpus_guard(corpus, &bevd_corpus_free);

  bevd_model* model = nullptr;
  char* curve = nullptr;
  rc = bevd_train(cfg.get(), role == "teacher" ? 1 : 0, corpus, &model, &curve);
  if (rc != BEVD_OK) return fail(rc, "training");
  ModelPtr model_guard(model, &bevd_model_free);
  std::string curve_text = take_string(curve);

  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "model", ec);
  rc = bevd_model_save(model, (fs::path(out_dir) / "model").string().c_str());
  if (rc != BEVD_OK) return fail(rc, "saving checkpoint");
  if (!write_text_file(fs::path(out_dir) / "curve.csv", curve_text)) {
    std::fprintf(stderr, "error: cannot write curve.csv\n");
    return 1;
  }

  uint64_t cfg_hash = 0, corpus_hash = 0, params_hash = 0;
  bevd_config_hash(cfg.get(), &cfg_hash);
  corpus_content_hash(corpus_dir, &corpus_hash);
  bevd_model_params_hash(model, &params_hash);
  json j;
  j["command"] = "train";
  j["role"] = role;
  j["config_hash"] = hex64(cfg_hash);
  j["corpus_hash"] = hex64(corpus_hash);
  j["params_hash"] = hex64(params_hash);
  j["outputs"] = json::array({"model", "curve.csv"});
  j["duration_ms"] = clock.ms();
  if (!write_manifest(out_dir, j)) {
    std::fprintf(stderr, "error: cannot write manifest\n");
    return 1;
  }
  std::printf("train(%s): checkpoint -> %s/model (params %s)\n", role.c_str(),
              out_dir.c_str(), hex64(params_hash).c_str());
  return 0;
}

int cmd_distill(const std::string& teacher_dir, const std::string& student_dir,
                const std::string& corpus_dir, const std::string& config_path,
                const std::string& out_dir) {
  RunClock clock;
  int rc = 0;
  ConfigPtr cfg = load_config_or_default(config_path, &rc);
  if (rc != BEVD_OK) return fail(rc, "loading config");
  bevd_model* teacher = nullptr;
  rc = bevd_model_load(teacher_dir.c_str(), &teacher);
  if (rc != BEVD_OK) return fail(rc, "loading teacher " + teacher_dir);
  ModelPtr teacher_guard(teacher, &bevd_model_free);
  bevd_model* student = nullptr;
  rc = bevd_model_load(student_dir.c_str(), &student);
  if (rc != BEVD_OK) return fail(rc, "loading student " + student_dir);
  ModelPtr student_guard(student, &bevd_model_free);
  bevd_corpus* corpus = nullptr;
  rc = bevd_corpus_read(corpus_dir.c_str(), &corpus);
  if (rc != BEVD_OK) return fail(rc, "reading corpus " + corpus_dir);
  CorpusPtr corpus_guard(corpus, &bevd_corpus_free);

  uint64_t teacher_before = 0;
  bevd_model_params_hash(teacher, &teacher_before);

  bevd_model* distilled = nullptr;
  char* curve = nullptr;
  rc = bevd_distill(cfg.get(), teacher, student, corpus, &distilled, &curve);
  if (rc != BEVD_OK) return fail(rc, "distilling");
  ModelPtr distilled_guard(distilled, &bevd_model_free);
  std::string curve_text = take_string(curve);

  // the teacher must come out of distillation byte-identical
  uint64_t teacher_after = 0;
  bevd_model_params_hash(teacher, &teacher_after);
  bevd_model* teacher_reloaded = nullptr;
  uint64_t teacher_on_disk = 0;
  if (bevd_model_load(teacher_dir.c_str(), &teacher_reloaded) == BEVD_OK) {
    bevd_model_params_hash(teacher_reloaded, &teacher_on_disk);
    bevd_model_free(teacher_reloaded);
  }
  bool frozen = teacher_before == teacher_after && teacher_after == teacher_on_disk;
  if (!frozen) {
    std::fprintf(stderr, "error: teacher parameters changed during distillation\n");
    return 1;
  }

  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "model", ec);
  rc = bevd_model_save(distilled, (fs::path(out_dir) / "model").string().c_str());
  if (rc != BEVD_OK) return fail(rc, "saving distilled checkpoint");
  if (!write_text_file(fs::path(out_dir) / "curve.csv", curve_text)) {
    std::fprintf(stderr, "error: cannot write curve.csv\n");
    return 1;
  }

  uint64_t cfg_hash = 0, corpus_hash = 0, params_hash = 0;
  bevd_config_hash(cfg.get(), &cfg_hash);
  corpus_content_hash(corpus_dir, &corpus_hash);
  bevd_model_params_hash(distilled, &params_hash);
  json j;
  j["command"] = "distill";
  j["config_hash"] = hex64(cfg_hash);
  j["corpus_hash"] = hex64(corpus_hash);
  j["params_hash"] = hex64(params_hash);
  j["teacher_params_hash"] = hex64(teacher_after);
  j["teacher_frozen"] = frozen;
  j["outputs"] = json::array({"model", "curve.csv"});
  j["duration_ms"] = clock.ms();
  if (!write_manifest(out_dir, j)) {
    std::fprintf(stderr, "error: cannot write manifest\n");
    return 1;
  }
  std::printf("distill: checkpoint -> %s/model (teacher frozen, params %s)\n",
              out_dir.c_str(), hex64(params_hash).c_str());
  return 0;
}

int cmd_eval(const std::string& model_dir, const std::string& corpus_dir,
             const std::string& config_path, const std::string& out_dir) {
  RunClock clock;
  int rc = 0;
  bevd_model* model = nullptr;
  rc = bevd_model_load(model_dir.c_str(), &model);
  if (rc != BEVD_OK) return fail(rc, "loading model " + model_dir);
  ModelPtr model_guard(model, &bevd_model_free);

  // default to the configuration embedded in the checkpoint
  ConfigPtr cfg(nullptr, &bevd_config_free);
  if (config_path.empty()) {
    bevd_config* c = nullptr;
    rc = bevd_model_config(model, &c);
    if (rc != BEVD_OK) return fail(rc, "reading checkpoint config");
    cfg = ConfigPtr(c, &bevd_config_free);
  } else {
    cfg = load_config_or_default(config_path, &rc);
    if (rc != BEVD_OK) return fail(rc, "loading config");
  }

  bevd_corpus* corpus = nullptr;
  rc = bevd_corpus_read(corpus_dir.c_str(), &corpus);
  if (rc != BEVD_OK) return fail(rc, "reading corpus " + corpus_dir);
  CorpusPtr corpus_guard(corpus, &bevd_corpus_free);

  char* report = nullptr;
  rc = bevd_evaluate(model, corpus, cfg.get(), &report);
  if (rc != BEVD_OK) return fail(rc, "evaluating");
  std::string report_text = take_string(report);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!write_text_file(fs::path(out_dir) / "eval.json", report_text + "\n")) {
    std::fprintf(stderr, "error: cannot write eval.json\n");
    return 1;
  }
  uint64_t cfg_hash = 0, corpus_hash = 0;
  bevd_config_hash(cfg.get(), &cfg_hash);
  corpus_content_hash(corpus_dir, &corpus_hash);
  json j;
  j["command"] = "eval";
  j["config_hash"] = hex64(cfg_hash);
  j["corpus_hash"] = hex64(corpus_hash);
  j["outputs"] = json::array({"eval.json"});
  j["duration_ms"] = clock.ms();
  if (!write_manifest(out_dir, j)) {
    std::fprintf(stderr, "error: cannot write manifest\n");
    return 1;
  }
  std::printf("%s\n", report_text.c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
  RunClock clock;
  int rc = 0;
  ConfigPtr cfg = load_config_or_default(config_path, &rc);
  if (rc != BEVD_OK) return fail(rc, "loading config");
  char* csv = nullptr;
  rc = bevd_ablate(cfg.get(), &csv);
  if (rc != BEVD_OK) return fail(rc, "running ablations");
  std::string csv_text = take_string(csv);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!write_text_file(fs::path(out_dir) / "ablation.csv", csv_text)) {
    std::fprintf(stderr, "error: cannot write ablation.csv\n");
    return 1;
  }
  uint64_t cfg_hash = 0;
  bevd_config_hash(cfg.get(), &cfg_hash);
  json j;
  j["command"] = "ablate";
  j["config_hash"] = hex64(cfg_hash);
  j["outputs"] = json::array({"ablation.csv"});
  j["duration_ms"] = clock.ms();
  if (!write_manifest(out_dir, j)) {
    std::fprintf(stderr, "error: cannot write manifest\n");
    return 1;
  }
  std::printf("%s", csv_text.c_str());
  return 0;
}

int cmd_gradcheck(uint64_t seed, int fixtures) {
  char* report = nullptr;
  int rc = bevd_gradcheck(fixtures, seed, &report);
  std::string text = take_string(report);
  std::printf("%s", text.c_str());
  if (rc != BEVD_OK && text.empty()) return fail(rc, "gradient checks");
  return rc == BEVD_OK ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BEV sensor-fusion distillation pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, corpus_dir, seed_str, split = "train";
  std::string role, teacher_dir, student_dir, model_dir;
  int n_scenes = 0;
  uint64_t gc_seed = 17;
  int gc_fixtures = 20;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic scene corpus");
  gen->add_option("--config", config_path, "config file (defaults when omitted)");
  gen->add_option("--out", out_dir, "output corpus directory")->required();
  gen->add_option("--n-scenes", n_scenes, "number of scenes")->required();
  gen->add_option("--seed", seed_str, "override the config seed");
  gen->add_option("--split", split, "split tag used in scene seeding");

  CLI::App* train = app.add_subcommand("train", "train a detector from scratch");
  train->add_option("--role", role, "teacher | student-baseline")
      ->required()
      ->check(CLI::IsMember({"teacher", "student-baseline"}));
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--config", config_path, "config file (defaults when omitted)");
  train->add_option("--out", out_dir, "output directory")->required();

  CLI::App* distill = app.add_subcommand("distill", "distill a student from a teacher");
  distill->add_option("--teacher", teacher_dir, "teacher checkpoint directory")
      ->required();
  distill->add_option("--student", student_dir, "student checkpoint directory")
      ->required();
  distill->add_option("--corpus", corpus_dir, "corpus directory")->required();
  distill->add_option("--config", config_path, "config file (defaults when omitted)");
  distill->add_option("--out", out_dir, "output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  eval->add_option("--model", model_dir, "checkpoint directory")->required();
  eval->add_option("--corpus", corpus_dir, "corpus directory")->required();
  eval->add_option("--config", config_path, "config override (checkpoint's otherwise)");
  eval->add_option("--out", out_dir, "output directory")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "run the ablation table");
  ablate->add_option("--config", config_path, "config file (defaults when omitted)");
  ablate->add_option("--out", out_dir, "output directory")->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seed", gc_seed, "suite seed");
  gradcheck->add_option("--fixtures", gc_fixtures, "fixtures per case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, out_dir, n_scenes, seed_str, split);
    if (train->parsed()) return cmd_train(role, corpus_dir, config_path, out_dir);
    if (distill->parsed())
      return cmd_distill(teacher_dir, student_dir, corpus_dir, config_path, out_dir);
    if (eval->parsed()) return cmd_eval(model_dir, corpus_dir, config_path, out_dir);
    if (ablate->parsed()) return cmd_ablate(config_path, out_dir);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_fixtures);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
