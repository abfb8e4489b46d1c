#include "bevd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "bevd/io.hpp"
#include "bevd/rng.hpp"

namespace bevd {

using json = nlohmann::json;

double BoxAnnotation::range() const { return std::sqrt(x * x + y * y); }
double BoxAnnotation::speed() const { return std::sqrt(vx * vx + vy * vy); }

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLidarFalloffRange = 60.0;  // meters to halve return density

struct CellAcc {
  double count = 0.0, a = 0.0, b = 0.0, c = 0.0;
};

int cell_index(const GridSpec& g, double x, double y) {
  int col = static_cast<int>(std::floor((x - g.x_min) / g.cell));
  int row = static_cast<int>(std::floor((y - g.y_min) / g.cell));
  if (row < 0 || row >= g.h || col < 0 || col >= g.w) return -1;
  return row * g.w + col;
}

}  // namespace

uint64_t scene_seed_for(const DistillConfig& cfg, const std::string& split, int index) {
  return mix_seed(cfg.seed, split + "/scene/" + std::to_string(index));
}

std::vector<BoxAnnotation> sample_boxes(const DistillConfig& cfg, uint64_t scene_seed,
                                        bool* truncated) {
  Rng rng(scene_seed, "boxes");
  const GridSpec& g = cfg.grid;
  int n = cfg.objects_min + rng.uniform_int(cfg.objects_max - cfg.objects_min + 1);
  std::vector<BoxAnnotation> boxes;
  boxes.reserve(static_cast<size_t>(n));
  const double m = cfg.place_margin;
  if (truncated) *truncated = false;
  for (int i = 0; i < n; ++i) {
    BoxAnnotation box;
    box.class_id = rng.uniform_int(cfg.num_classes());
    const ClassSpec& cs = cfg.classes[static_cast<size_t>(box.class_id)];
    box.width = std::max(0.3, rng.normal(cs.width_mean, cs.width_std));
    box.length = std::max(0.3, rng.normal(cs.length_mean, cs.length_std));
    box.yaw = rng.uniform(-kPi, kPi);
    // Keep centers far enough apart, relative to both footprints, that
    // every object resolves to its own target cell neighborhood.
    double hd = 0.5 * std::hypot(box.width, box.length);
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      box.x = rng.uniform(g.x_min + m, g.x_max() - m);
      box.y = rng.uniform(g.y_min + m, g.y_max() - m);
      placed = true;
      for (const auto& other : boxes) {
        double need = 0.8 * (hd + 0.5 * std::hypot(other.width, other.length));
        double dx = box.x - other.x, dy = box.y - other.y;
        if (std::sqrt(dx * dx + dy * dy) < need) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) {  // drop the object rather than emit an overlapping scene
      if (truncated) *truncated = true;
      continue;
    }
    if (cs.dynamic) {
      double speed = rng.uniform(0.0, cfg.speed_max);
      double dir = box.yaw + rng.normal(0.0, 0.35);
      box.vx = speed * std::cos(dir);
      box.vy = speed * std::sin(dir);
    } else {
      box.vx = 0.0;
      box.vy = 0.0;
    }
    boxes.push_back(box);
  }
  return boxes;
}

Tensor render_lidar_bev(const DistillConfig& cfg, const std::vector<BoxAnnotation>& boxes,
                        uint64_t scene_seed) {
  Rng rng(scene_seed, "lidar");
  const GridSpec& g = cfg.grid;
  const size_t plane = static_cast<size_t>(g.h) * g.w;
  std::vector<CellAcc> acc(plane);  // a = z sum, b = z max, c = intensity sum

  for (const auto& box : boxes) {
    // Return density thins out with range, the usual beam divergence effect.
    double falloff = 1.0 / (1.0 + box.range() / kLidarFalloffRange);
    int n = std::max(3, static_cast<int>(std::lround(cfg.lidar_density * falloff *
                                                     box.width * box.length)));
    double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    double zmax = 0.8 + 0.4 * box.class_id;
    for (int i = 0; i < n; ++i) {
      double u = rng.uniform(-0.5, 0.5) * box.length;
      double v = rng.uniform(-0.5, 0.5) * box.width;
      double px = box.x + u * cy - v * sy + rng.normal(0.0, cfg.lidar_noise_std);
      double py = box.y + u * sy + v * cy + rng.normal(0.0, cfg.lidar_noise_std);
      double z = rng.uniform(0.1, zmax);
      double inten = rng.uniform(0.3, 1.0);
      int idx = cell_index(g, px, py);
      if (idx < 0) continue;
      CellAcc& ca = acc[static_cast<size_t>(idx)];
      ca.count += 1.0;
      ca.a += z;
      ca.b = std::max(ca.b, z);
      ca.c += inten;
    }
  }

  // Sparse clutter on distinct cells keeps the background level well below
  // any object response.
  std::unordered_set<int> used;
  for (int i = 0; i < cfg.lidar_bg_points; ++i) {
    int idx = -1;
    for (int attempt = 0; attempt < 50; ++attempt) {
      int cand = rng.uniform_int(static_cast<int>(plane));
      if (!used.count(cand)) {
        idx = cand;
        break;
      }
    }
    if (idx < 0) continue;
    used.insert(idx);
    double z = rng.uniform(0.0, 0.3);
    double inten = rng.uniform(0.1, 0.5);
    CellAcc& ca = acc[static_cast<size_t>(idx)];
    if (ca.count == 0.0) {  // never stack clutter on object returns
      ca.count = 1.0;
      ca.a = z;
      ca.b = z;
      ca.c = inten;
    }
  }

  std::vector<double> data(static_cast<size_t>(kSensorChannels) * plane, 0.0);
  for (size_t i = 0; i < plane; ++i) {
    const CellAcc& ca = acc[i];
    if (ca.count == 0.0) continue;
    data[i] = 1.0 - std::exp(-ca.count / 5.0);
    data[plane + i] = ca.a / ca.count;
    data[2 * plane + i] = ca.b;
    data[3 * plane + i] = ca.c / ca.count;
  }
  return Tensor::from_data({kSensorChannels, g.h, g.w}, std::move(data));
}

Tensor render_radar_bev(const DistillConfig& cfg, const std::vector<BoxAnnotation>& boxes,
                        uint64_t scene_seed) {
  Rng rng(scene_seed, "radar");
  const GridSpec& g = cfg.grid;
  const size_t plane = static_cast<size_t>(g.h) * g.w;
  std::vector<CellAcc> acc(plane);  // a = rcs sum, b = vx sum, c = vy sum

  for (const auto& box : boxes) {
    // Whole objects go missing with probability growing with range.
    double drop = std::min(cfg.radar_dropout_max,
                           box.range() / cfg.radar_dropout_range_scale);
    if (rng.uniform01() < drop) continue;
    int n = std::max(1, static_cast<int>(std::lround(cfg.radar_density * box.width * box.length)));
    double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    bool moving = box.speed() > 0.0;
    double rcs_base = std::min(1.0, 0.1 + 0.15 * box.width * box.length);
    for (int i = 0; i < n; ++i) {
      double u = rng.uniform(-0.5, 0.5) * box.length;
      double v = rng.uniform(-0.5, 0.5) * box.width;
      double px = box.x + u * cy - v * sy;
      double py = box.y + u * sy + v * cy;
      double r = std::sqrt(px * px + py * py);
      // Noise acts in polar coordinates: radial scatter grows with range.
      double theta = std::atan2(py, px);
      double rn = r + rng.normal(0.0, cfg.radar_radial_std_per_m * r);
      double tn = theta + rng.normal(0.0, cfg.radar_azimuth_std_deg * kPi / 180.0);
      px = rn * std::cos(tn);
      py = rn * std::sin(tn);
      double vx = 0.0, vy = 0.0;
      if (moving) {
        vx = box.vx + rng.normal(0.0, cfg.radar_vel_noise_std);
        vy = box.vy + rng.normal(0.0, cfg.radar_vel_noise_std);
      }
      double rcs = std::clamp(rcs_base + 0.2 * (rng.uniform01() - 0.5), 0.05, 1.0);
      int idx = cell_index(g, px, py);
      if (idx < 0) continue;
      CellAcc& ca = acc[static_cast<size_t>(idx)];
      ca.count += 1.0;
      ca.a += rcs;
      ca.b += vx;
      ca.c += vy;
    }
  }

  std::vector<double> data(static_cast<size_t>(kSensorChannels) * plane, 0.0);
  for (size_t i = 0; i < plane; ++i) {
    const CellAcc& ca = acc[i];
    if (ca.count == 0.0) continue;
    data[i] = 1.0 - std::exp(-ca.count / 2.0);
    data[plane + i] = ca.a / ca.count;
    data[2 * plane + i] = ca.b / ca.count;
    data[3 * plane + i] = ca.c / ca.count;
  }
  return Tensor::from_data({kSensorChannels, g.h, g.w}, std::move(data));
}

namespace {

// Splat one value through a gaussian kernel centered on (row, col).
void splat_gauss(double* plane_buf, const GridSpec& g, double row,
                 double col, double sigma, double amount) {
  int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  int r0 = static_cast<int>(std::floor(row)) - rad;
  int r1 = static_cast<int>(std::floor(row)) + rad;
  int c0 = static_cast<int>(std::floor(col)) - rad;
  int c1 = static_cast<int>(std::floor(col)) + rad;
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int r = std::max(0, r0); r <= std::min(g.h - 1, r1); ++r) {
    for (int c = std::max(0, c0); c <= std::min(g.w - 1, c1); ++c) {
      double dr = r - row, dc = c - col;
      plane_buf[static_cast<size_t>(r) * g.w + c] +=
          amount * std::exp(-(dr * dr + dc * dc) * inv);
    }
  }
}

}  // namespace

Tensor render_camera_bev(const DistillConfig& cfg, const std::vector<BoxAnnotation>& boxes,
                         uint64_t scene_seed) {
  Rng rng(scene_seed, "camera");
  const GridSpec& g = cfg.grid;
  const size_t plane = static_cast<size_t>(g.h) * g.w;
  std::vector<double> data(static_cast<size_t>(kSensorChannels) * plane, 0.0);
  double* occ = data.data();
  double* cls = data.data() + plane;
  double* app = data.data() + 2 * plane;
  double* edge = data.data() + 3 * plane;

  const int k = cfg.num_classes();
  for (const auto& box : boxes) {
    double appearance = rng.uniform(0.4, 1.0);
    double r = box.range();
    double sigma = cfg.camera_blur_base + r / cfg.camera_blur_range_scale;
    double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    // Sample the footprint on a small deterministic lattice; blur spreads
    // each sample so distant objects smear over more cells.
    int nu = std::max(2, static_cast<int>(std::ceil(box.length / (0.5 * g.cell))));
    int nv = std::max(2, static_cast<int>(std::ceil(box.width / (0.5 * g.cell))));
    double w_sample = box.width * box.length / (nu * nv) / (g.cell * g.cell);
    double cls_val = (box.class_id + 1.0) / k;
    for (int iu = 0; iu < nu; ++iu) {
      for (int iv = 0; iv < nv; ++iv) {
        double u = ((iu + 0.5) / nu - 0.5) * box.length;
        double v = ((iv + 0.5) / nv - 0.5) * box.width;
        double px = box.x + u * cy - v * sy;
        double py = box.y + u * sy + v * cy;
        double row = g.row_of_y(py);
        double col = g.col_of_x(px);
        bool rim = iu == 0 || iu == nu - 1 || iv == 0 || iv == nv - 1;
        double norm = w_sample / (2.0 * kPi * sigma * sigma);
        splat_gauss(occ, g, row, col, sigma, norm);
        splat_gauss(cls, g, row, col, sigma, norm * cls_val);
        splat_gauss(app, g, row, col, sigma, norm * appearance);
        if (rim) splat_gauss(edge, g, row, col, sigma, norm);
      }
    }
  }
  return Tensor::from_data({kSensorChannels, g.h, g.w}, std::move(data));
}

SceneSample generate_scene(const DistillConfig& cfg, uint64_t scene_seed) {
  SceneSample s;
  s.scene_seed = scene_seed;
  s.boxes = sample_boxes(cfg, scene_seed, &s.truncated);
  s.lidar = render_lidar_bev(cfg, s.boxes, scene_seed);
  s.radar = render_radar_bev(cfg, s.boxes, scene_seed);
  s.camera = render_camera_bev(cfg, s.boxes, scene_seed);
  return s;
}

SceneSet SceneSet::generate(const DistillConfig& cfg, const std::string& split, int count) {
  if (cfg.classes.empty())
    throw std::runtime_error("scene generation needs a non-empty class table");
  SceneSet set;
  set.scenes.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    set.scenes.push_back(generate_scene(cfg, scene_seed_for(cfg, split, i)));
  return set;
}

void write_corpus(const std::filesystem::path& dir, const DistillConfig& cfg,
                  const SceneSet& set, const std::string& split) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "bev-scene-corpus-v1";
  char hash_buf[32];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(cfg.hash()));
  manifest["config_hash"] = hash_buf;
  manifest["split"] = split;
  manifest["count"] = set.scenes.size();
  json scenes = json::array();
  for (size_t i = 0; i < set.scenes.size(); ++i) {
    const SceneSample& s = set.scenes[i];
    char id[32];
    std::snprintf(id, sizeof(id), "scene_%06zu", i);
    json entry;
    entry["id"] = id;
    entry["seed"] = s.scene_seed;
    entry["truncated"] = s.truncated;
    json boxes = json::array();
    for (const auto& b : s.boxes) {
      boxes.push_back({{"class_id", b.class_id},
                       {"x", b.x},
                       {"y", b.y},
                       {"width", b.width},
                       {"length", b.length},
                       {"yaw", b.yaw},
                       {"vx", b.vx},
                       {"vy", b.vy}});
    }
    entry["boxes"] = std::move(boxes);
    scenes.push_back(std::move(entry));
    write_tensor(dir / (std::string(id) + ".lidar.bdt1"), s.lidar);
    write_tensor(dir / (std::string(id) + ".radar.bdt1"), s.radar);
    write_tensor(dir / (std::string(id) + ".camera.bdt1"), s.camera);
  }
  manifest["scenes"] = std::move(scenes);
  write_file_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

SceneSet read_corpus(const std::filesystem::path& dir) {
  json manifest = json::parse(read_file_text(dir / "manifest.json"));
  if (manifest.value("format", "") != "bev-scene-corpus-v1")
    throw std::runtime_error("corpus: unrecognized manifest format in " + dir.string());
  SceneSet set;
  for (const auto& entry : manifest.at("scenes")) {
    SceneSample s;
    s.scene_seed = entry.at("seed").get<uint64_t>();
    s.truncated = entry.value("truncated", false);
    for (const auto& jb : entry.at("boxes")) {
      BoxAnnotation b;
      b.class_id = jb.at("class_id").get<int>();
      b.x = jb.at("x").get<double>();
      b.y = jb.at("y").get<double>();
      b.width = jb.at("width").get<double>();
      b.length = jb.at("length").get<double>();
      b.yaw = jb.at("yaw").get<double>();
      b.vx = jb.at("vx").get<double>();
      b.vy = jb.at("vy").get<double>();
      s.boxes.push_back(b);
    }
    std::string id = entry.at("id").get<std::string>();
    s.lidar = read_tensor(dir / (id + ".lidar.bdt1"));
    s.radar = read_tensor(dir / (id + ".radar.bdt1"));
    s.camera = read_tensor(dir / (id + ".camera.bdt1"));
    set.scenes.push_back(std::move(s));
  }
  return set;
}

}  // namespace bevd
