#include "bevd/config.hpp"

#include <functional>
#include <map>
#include <sstream>

#include "bevd/io.hpp"
#include "bevd/rng.hpp"

namespace bevd {

namespace {

std::string bool_str(bool b) { return b ? "1" : "0"; }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("bad boolean for key " + key + ": " + v);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for key " + key + ": " + v);
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for key " + key + ": " + v);
  }
}

double parse_dbl(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const std::exception&) {
    throw ConfigError("bad number for key " + key + ": " + v);
  }
}

std::string list_str(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += format_double(v[i]);
  }
  return out;
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_dbl(key, item));
  if (out.empty()) throw ConfigError("empty list for key " + key);
  return out;
}

const char* pool_str(PoolMode m) { return m == PoolMode::kMean ? "mean" : "max"; }
PoolMode parse_pool(const std::string& key, const std::string& v) {
  if (v == "mean") return PoolMode::kMean;
  if (v == "max") return PoolMode::kMax;
  throw ConfigError("bad value for key " + key + ": " + v + " (want mean|max)");
}

const char* csrd_src_str(CsrdSource s) { return s == CsrdSource::kTeacher ? "teacher" : "gt"; }
CsrdSource parse_csrd_src(const std::string& key, const std::string& v) {
  if (v == "teacher") return CsrdSource::kTeacher;
  if (v == "gt") return CsrdSource::kGt;
  throw ConfigError("bad value for key " + key + ": " + v + " (want teacher|gt)");
}

const char* msfd_mask_str(MsfdMask m) {
  switch (m) {
    case MsfdMask::kDense: return "dense";
    case MsfdMask::kGaussian: return "gaussian";
    default: return "scaled";
  }
}
MsfdMask parse_msfd_mask(const std::string& key, const std::string& v) {
  if (v == "dense") return MsfdMask::kDense;
  if (v == "gaussian") return MsfdMask::kGaussian;
  if (v == "scaled") return MsfdMask::kScaled;
  throw ConfigError("bad value for key " + key + ": " + v + " (want dense|gaussian|scaled)");
}

const char* respd_mode_str(RespdMode m) {
  switch (m) {
    case RespdMode::kVanilla: return "vanilla";
    case RespdMode::kStatic: return "static";
    default: return "dynamic";
  }
}
RespdMode parse_respd_mode(const std::string& key, const std::string& v) {
  if (v == "vanilla") return RespdMode::kVanilla;
  if (v == "static") return RespdMode::kStatic;
  if (v == "dynamic") return RespdMode::kDynamic;
  throw ConfigError("bad value for key " + key + ": " + v + " (want vanilla|static|dynamic)");
}

struct Field {
  std::string key;
  std::function<std::string(const DistillConfig&)> get;
  std::function<void(DistillConfig&, const std::string&)> set;
};

#define DBL_FIELD(key, member)                                                   \
  Field{key, [](const DistillConfig& c) { return format_double(c.member); },     \
        [](DistillConfig& c, const std::string& v) { c.member = parse_dbl(key, v); }}
#define INT_FIELD(key, member)                                                   \
  Field{key, [](const DistillConfig& c) { return std::to_string(c.member); },    \
        [](DistillConfig& c, const std::string& v) { c.member = parse_int(key, v); }}
#define BOOL_FIELD(key, member)                                                  \
  Field{key, [](const DistillConfig& c) { return bool_str(c.member); },          \
        [](DistillConfig& c, const std::string& v) { c.member = parse_bool(key, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{"seed", [](const DistillConfig& c) { return std::to_string(c.seed); },
            [](DistillConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
      INT_FIELD("grid.h", grid.h),
      INT_FIELD("grid.w", grid.w),
      DBL_FIELD("grid.cell", grid.cell),
      DBL_FIELD("grid.x_min", grid.x_min),
      DBL_FIELD("grid.y_min", grid.y_min),
      INT_FIELD("scene.objects_min", objects_min),
      INT_FIELD("scene.objects_max", objects_max),
      DBL_FIELD("scene.speed_max", speed_max),
      DBL_FIELD("scene.margin", place_margin),
      DBL_FIELD("scene.lidar.density", lidar_density),
      DBL_FIELD("scene.lidar.noise_std", lidar_noise_std),
      INT_FIELD("scene.lidar.bg_points", lidar_bg_points),
      DBL_FIELD("scene.radar.density", radar_density),
      DBL_FIELD("scene.radar.radial_std_per_m", radar_radial_std_per_m),
      DBL_FIELD("scene.radar.azimuth_std_deg", radar_azimuth_std_deg),
      DBL_FIELD("scene.radar.dropout_max", radar_dropout_max),
      DBL_FIELD("scene.radar.dropout_range_scale", radar_dropout_range_scale),
      DBL_FIELD("scene.radar.vel_noise_std", radar_vel_noise_std),
      DBL_FIELD("scene.camera.blur_base", camera_blur_base),
      DBL_FIELD("scene.camera.blur_range_scale", camera_blur_range_scale),
      INT_FIELD("channels.camera", ch_camera),
      INT_FIELD("channels.points", ch_points),
      INT_FIELD("channels.fused", ch_fused),
      INT_FIELD("channels.calibration", ch_calibration),
      DBL_FIELD("loss.lambda_csrd", lambda_csrd),
      DBL_FIELD("loss.lambda_msfd", lambda_msfd),
      DBL_FIELD("loss.lambda_reld", lambda_reld),
      DBL_FIELD("loss.lambda_respd", lambda_respd),
      DBL_FIELD("loss.lambda_det", lambda_det),
      DBL_FIELD("loss.qfl_gamma", qfl_gamma),
      DBL_FIELD("loss.respd_w_dynamic", respd_w_dynamic),
      DBL_FIELD("loss.respd_w_static", respd_w_static),
      Field{"loss.respd_mode",
            [](const DistillConfig& c) { return std::string(respd_mode_str(c.respd_mode)); },
            [](DistillConfig& c, const std::string& v) {
              c.respd_mode = parse_respd_mode("loss.respd_mode", v);
            }},
      Field{"loss.pool", [](const DistillConfig& c) { return std::string(pool_str(c.pool)); },
            [](DistillConfig& c, const std::string& v) { c.pool = parse_pool("loss.pool", v); }},
      INT_FIELD("loss.reld_scales", reld_scales),
      Field{"loss.csrd_source",
            [](const DistillConfig& c) { return std::string(csrd_src_str(c.csrd_source)); },
            [](DistillConfig& c, const std::string& v) {
              c.csrd_source = parse_csrd_src("loss.csrd_source", v);
            }},
      BOOL_FIELD("loss.csrd_calibration", csrd_calibration),
      Field{"loss.msfd_mask",
            [](const DistillConfig& c) { return std::string(msfd_mask_str(c.msfd_mask)); },
            [](DistillConfig& c, const std::string& v) {
              c.msfd_mask = parse_msfd_mask("loss.msfd_mask", v);
            }},
      DBL_FIELD("loss.smooth_l1_delta", smooth_l1_delta),
      DBL_FIELD("mask.r1", mask_r1),
      DBL_FIELD("mask.r2", mask_r2),
      DBL_FIELD("mask.alpha", mask_alpha),
      DBL_FIELD("mask.beta", mask_beta),
      DBL_FIELD("mask.v1", mask_v1),
      DBL_FIELD("mask.v2", mask_v2),
      DBL_FIELD("mask.clip_min", mask_clip_min),
      DBL_FIELD("mask.clip_max", mask_clip_max),
      DBL_FIELD("target.focal_alpha", focal_alpha),
      DBL_FIELD("target.focal_beta", focal_beta),
      DBL_FIELD("target.heatmap_min_sigma", heatmap_min_sigma),
      DBL_FIELD("target.heatmap_sigma_factor", heatmap_sigma_factor),
      DBL_FIELD("train.lr", lr),
      INT_FIELD("train.batch", batch),
      DBL_FIELD("train.adam_beta1", adam_beta1),
      DBL_FIELD("train.adam_beta2", adam_beta2),
      DBL_FIELD("train.adam_eps", adam_eps),
      DBL_FIELD("train.grad_clip", grad_clip),
      INT_FIELD("train.teacher_steps", teacher_steps),
      INT_FIELD("train.student_steps", student_steps),
      INT_FIELD("train.distill_steps", distill_steps),
      BOOL_FIELD("train.distill_from_scratch", distill_from_scratch),
      BOOL_FIELD("toggles.gated", use_gated),
      BOOL_FIELD("toggles.respd", use_respd),
      BOOL_FIELD("toggles.csrd", use_csrd),
      BOOL_FIELD("toggles.msfd", use_msfd),
      BOOL_FIELD("toggles.reld", use_reld),
      DBL_FIELD("eval.score_thresh", eval_score_thresh),
      INT_FIELD("eval.max_dets", eval_max_dets),
      Field{"eval.match_thresholds",
            [](const DistillConfig& c) { return list_str(c.eval_match_thresholds); },
            [](DistillConfig& c, const std::string& v) {
              c.eval_match_thresholds = parse_list("eval.match_thresholds", v);
            }},
      Field{"eval.range_edges",
            [](const DistillConfig& c) { return list_str(c.eval_range_edges); },
            [](DistillConfig& c, const std::string& v) {
              c.eval_range_edges = parse_list("eval.range_edges", v);
            }},
      DBL_FIELD("eval.vel_thresh", eval_vel_thresh),
      INT_FIELD("bench.train_scenes", bench_train_scenes),
      INT_FIELD("bench.eval_scenes", bench_eval_scenes),
      INT_FIELD("bench.seeds", bench_seeds),
  };
  return f;
}

#undef DBL_FIELD
#undef INT_FIELD
#undef BOOL_FIELD

std::string class_field(const DistillConfig& c, size_t i, const std::string& sub) {
  const ClassSpec& cs = c.classes[i];
  if (sub == "name") return cs.name;
  if (sub == "dynamic") return bool_str(cs.dynamic);
  if (sub == "width_mean") return format_double(cs.width_mean);
  if (sub == "width_std") return format_double(cs.width_std);
  if (sub == "length_mean") return format_double(cs.length_mean);
  if (sub == "length_std") return format_double(cs.length_std);
  throw ConfigError("unknown class field: " + sub);
}

void set_class_field(DistillConfig& c, size_t i, const std::string& sub,
                     const std::string& key, const std::string& v) {
  if (i >= c.classes.size())
    throw ConfigError("class index out of range for key " + key);
  ClassSpec& cs = c.classes[i];
  if (sub == "name") {
    if (v.empty()) throw ConfigError("empty class name for key " + key);
    cs.name = v;
  } else if (sub == "dynamic") {
    cs.dynamic = parse_bool(key, v);
  } else if (sub == "width_mean") {
    cs.width_mean = parse_dbl(key, v);
  } else if (sub == "width_std") {
    cs.width_std = parse_dbl(key, v);
  } else if (sub == "length_mean") {
    cs.length_mean = parse_dbl(key, v);
  } else if (sub == "length_std") {
    cs.length_std = parse_dbl(key, v);
  } else {
    throw ConfigError("unknown key: " + key);
  }
}

const std::vector<std::string>& class_subfields() {
  static const std::vector<std::string> s = {"name",       "dynamic",     "width_mean",
                                             "width_std",  "length_mean", "length_std"};
  return s;
}

}  // namespace

DistillConfig DistillConfig::make_default() {
  DistillConfig c;
  c.classes = {
      {"car", true, 1.9, 0.15, 4.6, 0.4},
      {"pedestrian", true, 0.7, 0.05, 0.8, 0.05},
      {"cyclist", true, 0.8, 0.08, 1.9, 0.15},
      {"barrier", false, 0.6, 0.05, 2.5, 0.5},
  };
  return c;
}

std::string DistillConfig::serialize() const {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += " = ";
    out += f.get(*this);
    out += "\n";
  }
  out += "classes.count = " + std::to_string(classes.size()) + "\n";
  for (size_t i = 0; i < classes.size(); ++i)
    for (const std::string& sub : class_subfields())
      out += "classes." + std::to_string(i) + "." + sub + " = " +
             class_field(*this, i, sub) + "\n";
  return out;
}

DistillConfig DistillConfig::parse(const std::string& text) {
  DistillConfig c = make_default();
  std::map<std::string, const Field*> by_key;
  for (const Field& f : fields()) by_key[f.key] = &f;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    size_t b = line.find_last_not_of(" \t\r");
    std::string body = line.substr(a, b - a + 1);
    if (body.empty() || body[0] == '#') continue;
    size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("malformed line " + std::to_string(lineno) + ": " + body);
    auto trim = [](std::string s) {
      size_t x = s.find_first_not_of(" \t");
      size_t y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    std::string key = trim(body.substr(0, eq));
    std::string val = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError("malformed line " + std::to_string(lineno) + ": " + body);

    auto it = by_key.find(key);
    if (it != by_key.end()) {
      it->second->set(c, val);
      continue;
    }
    if (key == "classes.count") {
      int n = parse_int(key, val);
      if (n < 1 || n > 64) throw ConfigError("bad value for key classes.count: " + val);
      c.classes.resize(static_cast<size_t>(n));
      for (auto& cs : c.classes)
        if (cs.name.empty()) cs = ClassSpec{"object", true, 1.0, 0.1, 1.0, 0.1};
      continue;
    }
    if (key.rfind("classes.", 0) == 0) {
      std::string rest = key.substr(8);
      size_t dot = rest.find('.');
      if (dot == std::string::npos) throw ConfigError("unknown key: " + key);
      size_t idx = 0;
      try {
        size_t pos = 0;
        idx = std::stoul(rest.substr(0, dot), &pos);
        if (pos != dot) throw std::invalid_argument(rest);
      } catch (const std::exception&) {
        throw ConfigError("unknown key: " + key);
      }
      set_class_field(c, idx, rest.substr(dot + 1), key, val);
      continue;
    }
    throw ConfigError("unknown key: " + key);
  }
  c.validate();
  return c;
}

void DistillConfig::save(const std::filesystem::path& path) const {
  write_file_text(path, serialize());
}

DistillConfig DistillConfig::load(const std::filesystem::path& path) {
  return parse(read_file_text(path));
}

uint64_t DistillConfig::hash() const { return fnv1a64(serialize()); }

void DistillConfig::validate() const {
  if (grid.h < 8 || grid.w < 8) throw ConfigError("grid too small");
  if (grid.cell <= 0.0) throw ConfigError("grid.cell must be positive");
  if (classes.empty()) throw ConfigError("need at least one class");
  if (classes.size() >= 2) {
    bool any_dyn = false, any_static = false;
    for (const auto& cs : classes) (cs.dynamic ? any_dyn : any_static) = true;
    if (!any_dyn || !any_static)
      throw ConfigError("classes must include a dynamic and a static one when several are configured");
  }
  if (objects_min < 0 || objects_max < objects_min)
    throw ConfigError("bad scene.objects range");
  if (ch_camera < 1 || ch_points < 1 || ch_fused < 1 || ch_calibration < 1)
    throw ConfigError("channel counts must be positive");
  if (reld_scales < 1 || reld_scales > 6) throw ConfigError("loss.reld_scales out of range");
  int div = 1 << reld_scales;
  if (grid.h % div != 0 || grid.w % div != 0)
    throw ConfigError("grid dims must be divisible by 2^loss.reld_scales");
  if (mask_clip_min > mask_clip_max) throw ConfigError("mask clip window inverted");
  if (mask_r2 <= mask_r1) throw ConfigError("mask.r2 must exceed mask.r1");
  if (mask_v2 <= mask_v1) throw ConfigError("mask.v2 must exceed mask.v1");
  if (batch < 1) throw ConfigError("train.batch must be positive");
  if (lr <= 0.0) throw ConfigError("train.lr must be positive");
  if (teacher_steps < 0 || student_steps < 0 || distill_steps < 0)
    throw ConfigError("step counts must be non-negative");
  if (eval_match_thresholds.empty()) throw ConfigError("eval.match_thresholds empty");
  for (size_t i = 1; i < eval_match_thresholds.size(); ++i)
    if (eval_match_thresholds[i] <= eval_match_thresholds[i - 1])
      throw ConfigError("eval.match_thresholds must increase");
  if (eval_range_edges.size() < 2) throw ConfigError("eval.range_edges too short");
  for (size_t i = 1; i < eval_range_edges.size(); ++i)
    if (eval_range_edges[i] <= eval_range_edges[i - 1])
      throw ConfigError("eval.range_edges must increase");
  if (bench_train_scenes < 1 || bench_eval_scenes < 1 || bench_seeds < 1)
    throw ConfigError("bench counts must be positive");
}

}  // namespace bevd
