#include "bevd/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "bevd/io.hpp"
#include "bevd/mask.hpp"
#include "bevd/rng.hpp"

namespace bevd {

using json = nlohmann::json;

namespace {

// Matches a sigmoid prior of about 0.1 so early heatmaps start sparse.
constexpr double kClsBiasInit = -2.1972245773362196;

std::vector<double> uniform_fan_in(Shape shape, uint64_t seed) {
  int n = shape_numel(shape);
  int fan_in = 1;
  if (shape.size() == 4) fan_in = shape[1] * shape[2] * shape[3];
  else if (shape.size() == 2) fan_in = shape[1];
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng(seed);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return data;
}

}  // namespace

Tensor DetectorModel::add_param(const std::string& name, Shape shape, uint64_t seed,
                                double bias_init) {
  Tensor t;
  if (shape.size() == 1 || shape.empty()) {
    t = Tensor::full(shape, bias_init, true);
  } else {
    t = Tensor::from_data(shape, uniform_fan_in(shape, mix_seed(seed, name)), true);
  }
  params_.emplace_back(name, t);
  return t;
}

DetectorModel::DetectorModel(const DistillConfig& cfg, Role role, uint64_t param_seed,
                             bool gated)
    : role_(role), gated_(gated), k_(cfg.num_classes()),
      ch_cam_(cfg.ch_camera), ch_pts_(cfg.ch_points), ch_fused_(cfg.ch_fused) {
  const int cin = kSensorChannels;
  const int cc = ch_cam_, cp = ch_pts_, cf = ch_fused_;
  add_param("enc_cam.conv1.w", {cc, cin, 3, 3}, param_seed, 0.0);
  add_param("enc_cam.conv1.b", {cc}, param_seed, 0.0);
  add_param("enc_cam.conv2.w", {cc, cc, 3, 3}, param_seed, 0.0);
  add_param("enc_cam.conv2.b", {cc}, param_seed, 0.0);
  add_param("enc_pts.conv1.w", {cp, cin, 3, 3}, param_seed, 0.0);
  add_param("enc_pts.conv1.b", {cp}, param_seed, 0.0);
  add_param("enc_pts.conv2.w", {cp, cp, 3, 3}, param_seed, 0.0);
  add_param("enc_pts.conv2.b", {cp}, param_seed, 0.0);
  add_param("gate_cam.w", {cc, cc + cp, 3, 3}, param_seed, 0.0);
  add_param("gate_cam.b", {cc}, param_seed, 0.0);
  add_param("gate_pts.w", {cp, cc + cp, 3, 3}, param_seed, 0.0);
  add_param("gate_pts.b", {cp}, param_seed, 0.0);
  add_param("fuse.w", {cf, cc + cp, 3, 3}, param_seed, 0.0);
  add_param("fuse.b", {cf}, param_seed, 0.0);
  add_param("decoder.w", {cf, cf, 3, 3}, param_seed, 0.0);
  add_param("decoder.b", {cf}, param_seed, 0.0);
  add_param("trunk.w", {cf, cf, 3, 3}, param_seed, 0.0);
  add_param("trunk.b", {cf}, param_seed, 0.0);
  add_param("cls.w", {k_, cf, 1, 1}, param_seed, 0.0);
  add_param("cls.b", {k_}, param_seed, kClsBiasInit);
  add_param("reg.w", {kRegChannels, cf, 1, 1}, param_seed, 0.0);
  add_param("reg.b", {kRegChannels}, param_seed, 0.0);
}

Tensor DetectorModel::param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw std::runtime_error("model: no parameter named " + name);
}

std::pair<Tensor, Tensor> gated_fuse(const Tensor& f1, const Tensor& f2,
                                     const Tensor& gate1_w, const Tensor& gate1_b,
                                     const Tensor& gate2_w, const Tensor& gate2_b) {
  Tensor cat = concat_channels(f1, f2);
  Tensor g1 = sigmoid(conv2d(cat, gate1_w, gate1_b, 1, 1));
  Tensor g2 = sigmoid(conv2d(cat, gate2_w, gate2_b, 1, 1));
  return {mul(f1, g1), mul(f2, g2)};
}

ModelTaps DetectorModel::forward(const Tensor& camera, const Tensor& points) const {
  ModelTaps t;
  t.cam_feat = relu(conv2d(relu(conv2d(camera, param("enc_cam.conv1.w"),
                                       param("enc_cam.conv1.b"), 1, 1)),
                           param("enc_cam.conv2.w"), param("enc_cam.conv2.b"), 1, 1));
  t.pts_feat = relu(conv2d(relu(conv2d(points, param("enc_pts.conv1.w"),
                                       param("enc_pts.conv1.b"), 1, 1)),
                           param("enc_pts.conv2.w"), param("enc_pts.conv2.b"), 1, 1));
  if (gated_) {
    auto [gc, gp] = gated_fuse(t.cam_feat, t.pts_feat, param("gate_cam.w"),
                               param("gate_cam.b"), param("gate_pts.w"), param("gate_pts.b"));
    t.gated_cam = gc;
    t.gated_pts = gp;
  } else {
    t.gated_cam = t.cam_feat;
    t.gated_pts = t.pts_feat;
  }
  Tensor fused_in = concat_channels(t.gated_cam, t.gated_pts);
  t.fused = relu(conv2d(fused_in, param("fuse.w"), param("fuse.b"), 1, 1));
  Tensor dec = relu(conv2d(t.fused, param("decoder.w"), param("decoder.b"), 1, 1));
  Tensor trunk = relu(conv2d(dec, param("trunk.w"), param("trunk.b"), 1, 1));
  t.cls = conv2d(trunk, param("cls.w"), param("cls.b"), 1, 0);
  t.reg = conv2d(trunk, param("reg.w"), param("reg.b"), 1, 0);
  return t;
}

void DetectorModel::save(const std::filesystem::path& dir, const DistillConfig& cfg) const {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "bev-detector-checkpoint-v1";
  manifest["role"] = role_ == Role::kTeacher ? "teacher" : "student";
  manifest["gated"] = gated_;
  manifest["config"] = cfg.serialize();
  json plist = json::array();
  for (const auto& [name, t] : params_) {
    std::string file = name + ".bdt1";
    write_tensor(dir / file, t);
    plist.push_back({{"name", name}, {"file", file}});
  }
  manifest["params"] = std::move(plist);
  write_file_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

DistillConfig DetectorModel::checkpoint_config(const std::filesystem::path& dir) {
  json manifest = json::parse(read_file_text(dir / "manifest.json"));
  return DistillConfig::parse(manifest.at("config").get<std::string>());
}

DetectorModel DetectorModel::load(const std::filesystem::path& dir) {
  json manifest = json::parse(read_file_text(dir / "manifest.json"));
  if (manifest.value("format", "") != "bev-detector-checkpoint-v1")
    throw std::runtime_error("checkpoint: unrecognized manifest format in " + dir.string());
  DistillConfig cfg = DistillConfig::parse(manifest.at("config").get<std::string>());
  DetectorModel m;
  m.role_ = manifest.at("role").get<std::string>() == "teacher" ? Role::kTeacher
                                                                : Role::kStudent;
  m.gated_ = manifest.at("gated").get<bool>();
  m.k_ = cfg.num_classes();
  m.ch_cam_ = cfg.ch_camera;
  m.ch_pts_ = cfg.ch_points;
  m.ch_fused_ = cfg.ch_fused;
  for (const auto& entry : manifest.at("params")) {
    std::string name = entry.at("name").get<std::string>();
    Tensor t = read_tensor(dir / entry.at("file").get<std::string>());
    Tensor p = Tensor::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
    m.params_.emplace_back(name, p);
  }
  if (m.params_.empty()) throw std::runtime_error("checkpoint: no parameters listed");
  return m;
}

std::vector<Detection> decode(const Tensor& cls, const Tensor& reg, const GridSpec& grid,
                              double score_thresh, int max_dets) {
  if (cls.rank() != 3 || reg.rank() != 3 || reg.dim(0) != kRegChannels)
    throw std::runtime_error("decode: bad head output shapes");
  const int k = cls.dim(0), h = cls.dim(1), w = cls.dim(2);
  const size_t plane = static_cast<size_t>(h) * w;
  const auto dc = cls.data();
  const auto dr = reg.data();

  std::vector<Detection> dets;
  for (int c = 0; c < k; ++c) {
    const double* p = dc.data() + static_cast<size_t>(c) * plane;
    for (int r = 0; r < h; ++r) {
      for (int x = 0; x < w; ++x) {
        double v = p[static_cast<size_t>(r) * w + x];
        bool peak = true;
        for (int dy = -1; dy <= 1 && peak; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            int rr = r + dy, xx = x + dx;
            if (rr < 0 || rr >= h || xx < 0 || xx >= w) continue;
            if (p[static_cast<size_t>(rr) * w + xx] > v) {
              peak = false;
              break;
            }
          }
        }
        if (!peak) continue;
        double score = 1.0 / (1.0 + std::exp(-v));
        if (score <= score_thresh) continue;
        size_t at = static_cast<size_t>(r) * w + x;
        Detection d;
        d.score = score;
        d.box.class_id = c;
        d.box.x = grid.x_of_col(x + dr[at]);
        d.box.y = grid.y_of_row(r + dr[plane + at]);
        d.box.width = std::exp(dr[2 * plane + at]);
        d.box.length = std::exp(dr[3 * plane + at]);
        d.box.yaw = std::atan2(dr[4 * plane + at], dr[5 * plane + at]);
        d.box.vx = dr[6 * plane + at];
        d.box.vy = dr[7 * plane + at];
        dets.push_back(d);
      }
    }
  }
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.class_id != b.box.class_id) return a.box.class_id < b.box.class_id;
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    return a.box.x < b.box.x;
  });
  if (static_cast<int>(dets.size()) > max_dets) dets.resize(static_cast<size_t>(max_dets));
  return dets;
}

DetTargets build_targets(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg) {
  const GridSpec& g = cfg.grid;
  const size_t plane = static_cast<size_t>(g.h) * g.w;
  DetTargets t;
  t.heatmap = gaussian_heatmap(boxes, cfg);
  std::vector<double> reg(static_cast<size_t>(kRegChannels) * plane, 0.0);
  std::vector<double> mask(plane, 0.0);
  int n_pos = 0;
  for (const auto& box : boxes) {
    int row = static_cast<int>(std::floor((box.y - g.y_min) / g.cell));
    int col = static_cast<int>(std::floor((box.x - g.x_min) / g.cell));
    if (!g.cell_in_bounds(row, col)) continue;
    size_t at = static_cast<size_t>(row) * g.w + col;
    reg[at] = g.col_of_x(box.x) - col;
    reg[plane + at] = g.row_of_y(box.y) - row;
    reg[2 * plane + at] = std::log(box.width);
    reg[3 * plane + at] = std::log(box.length);
    reg[4 * plane + at] = std::sin(box.yaw);
    reg[5 * plane + at] = std::cos(box.yaw);
    reg[6 * plane + at] = box.vx;
    reg[7 * plane + at] = box.vy;
    mask[at] = 1.0;
    ++n_pos;
  }
  t.reg = Tensor::from_data({kRegChannels, g.h, g.w}, std::move(reg));
  t.reg_mask = Tensor::from_data({g.h, g.w}, std::move(mask));
  t.n_pos = n_pos;
  return t;
}

Tensor detection_loss(const Tensor& cls, const Tensor& reg, const DetTargets& targets,
                      const DistillConfig& cfg) {
  const double norm = 1.0 / std::max(targets.n_pos, 1);

  // Constant weights derived from the ground-truth heatmap.
  const auto hm = targets.heatmap.data();
  std::vector<double> pos(hm.size()), negw(hm.size());
  for (size_t i = 0; i < hm.size(); ++i) {
    pos[i] = hm[i] == 1.0 ? 1.0 : 0.0;
    negw[i] = pos[i] == 1.0 ? 0.0 : std::pow(1.0 - hm[i], cfg.focal_beta);
  }
  Tensor pos_mask = Tensor::from_data(targets.heatmap.shape(), std::move(pos));
  Tensor neg_weight = Tensor::from_data(targets.heatmap.shape(), std::move(negw));

  Tensor p = sigmoid(cls);
  Tensor pos_term = mul(pos_mask, mul(pow_const(const_minus(1.0, p), cfg.focal_alpha),
                                      log_clamped(p)));
  Tensor neg_term = mul(neg_weight, mul(pow_const(p, cfg.focal_alpha),
                                        log_clamped(const_minus(1.0, p))));
  Tensor cls_loss = scale(add(sum_all(pos_term), sum_all(neg_term)), -norm);

  Tensor reg_diff = scale_channels(sub(reg, targets.reg), targets.reg_mask);
  Tensor reg_loss = scale(sum_all(abs(reg_diff)), norm);

  return add(cls_loss, reg_loss);
}

}  // namespace bevd
