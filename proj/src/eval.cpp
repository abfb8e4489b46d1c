#include "bevd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"

namespace bevd {

namespace {

struct MatchOut {
  std::vector<size_t> order;  // detection indices, best score first
  std::vector<int> match;     // per ordered detection: gt index or -1
};

// Score-ordered greedy matching to the nearest free ground truth of the
// same scene within the radius. Ties break deterministically.
MatchOut greedy_match(const std::vector<Detection>& dets,
                      const std::vector<BoxAnnotation>& gts,
                      const std::vector<int>& det_scene,
                      const std::vector<int>& gt_scene, double radius) {
  MatchOut out;
  out.order.resize(dets.size());
  std::iota(out.order.begin(), out.order.end(), size_t{0});
  std::stable_sort(out.order.begin(), out.order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (det_scene[a] != det_scene[b]) return det_scene[a] < det_scene[b];
    if (dets[a].box.x != dets[b].box.x) return dets[a].box.x < dets[b].box.x;
    return dets[a].box.y < dets[b].box.y;
  });
  std::vector<char> used(gts.size(), 0);
  out.match.assign(dets.size(), -1);
  for (size_t oi = 0; oi < out.order.size(); ++oi) {
    size_t di = out.order[oi];
    int best = -1;
    double best_d = radius;
    for (size_t gj = 0; gj < gts.size(); ++gj) {
      if (used[gj] || gt_scene[gj] != det_scene[di]) continue;
      double dx = dets[di].box.x - gts[gj].x;
      double dy = dets[di].box.y - gts[gj].y;
      double d = std::sqrt(dx * dx + dy * dy);
      if (d <= best_d && (best < 0 || d < best_d)) {
        best = static_cast<int>(gj);
        best_d = d;
      }
    }
    if (best >= 0) {
      used[static_cast<size_t>(best)] = 1;
      out.match[oi] = best;
    }
  }
  return out;
}

}  // namespace

double average_precision(const std::vector<Detection>& dets,
                         const std::vector<BoxAnnotation>& gts,
                         const std::vector<int>& det_scene,
                         const std::vector<int>& gt_scene, double radius) {
  if (gts.empty()) return 0.0;
  MatchOut m = greedy_match(dets, gts, det_scene, gt_scene, radius);
  size_t n = m.order.size();
  std::vector<double> prec(n), rec(n);
  double tp = 0.0, fp = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (m.match[i] >= 0) tp += 1.0; else fp += 1.0;
    prec[i] = tp / (tp + fp);
    rec[i] = tp / static_cast<double>(gts.size());
  }
  // Interpolated precision sampled at recall levels 0.1 .. 1.0. The zero
  // level is skipped: it always repeats the best precision and would pull
  // a half-recall perfect-precision result above 0.5.
  double ap = 0.0;
  for (int k = 1; k <= 10; ++k) {
    double r = k / 10.0;
    double best = 0.0;
    for (size_t i = 0; i < n; ++i)
      if (rec[i] >= r - 1e-12 && prec[i] > best) best = prec[i];
    ap += best / 10.0;
  }
  return ap;
}

EvalResult evaluate(const DetectorModel& model, const SceneSet& scenes,
                    const DistillConfig& cfg) {
  if (scenes.scenes.empty())
    throw std::invalid_argument("evaluate: empty scene set");
  EvalResult out;
  out.n_scenes = static_cast<int>(scenes.scenes.size());

  std::vector<Detection> dets;
  std::vector<int> det_scene;
  std::vector<BoxAnnotation> gts;
  std::vector<int> gt_scene;
  for (size_t i = 0; i < scenes.scenes.size(); ++i) {
    const SceneSample& sc = scenes.scenes[i];
    const Tensor& pts =
        model.role() == DetectorModel::Role::kTeacher ? sc.lidar : sc.radar;
    ModelTaps taps;
    {
      NoGradGuard ng;
      taps = model.forward(sc.camera, pts);
    }
    auto d = decode(taps.cls, taps.reg, cfg.grid, cfg.eval_score_thresh,
                    cfg.eval_max_dets);
    for (const auto& det : d) {
      dets.push_back(det);
      det_scene.push_back(static_cast<int>(i));
    }
    for (const auto& b : sc.boxes) {
      gts.push_back(b);
      gt_scene.push_back(static_cast<int>(i));
    }
  }
  out.n_gt = static_cast<int>(gts.size());
  out.n_det = static_cast<int>(dets.size());

  const int k = cfg.num_classes();
  // per-class subsets reused for every radius
  std::vector<std::vector<Detection>> cdets(k);
  std::vector<std::vector<int>> cdet_scene(k);
  std::vector<std::vector<BoxAnnotation>> cgts(k);
  std::vector<std::vector<int>> cgt_scene(k);
  for (size_t i = 0; i < dets.size(); ++i) {
    int c = dets[i].box.class_id;
    if (c < 0 || c >= k) continue;
    cdets[c].push_back(dets[i]);
    cdet_scene[c].push_back(det_scene[i]);
  }
  for (size_t i = 0; i < gts.size(); ++i) {
    int c = gts[i].class_id;
    cgts[c].push_back(gts[i]);
    cgt_scene[c].push_back(gt_scene[i]);
  }

  out.per_class_ap.assign(k, 0.0);
  int present = 0;
  double map_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    if (cgts[c].empty()) continue;
    double acc = 0.0;
    for (double radius : cfg.eval_match_thresholds)
      acc += average_precision(cdets[c], cgts[c], cdet_scene[c], cgt_scene[c], radius);
    double ap = acc / static_cast<double>(cfg.eval_match_thresholds.size());
    out.per_class_ap[c] = ap;
    map_sum += ap;
    ++present;
  }
  out.map = present > 0 ? map_sum / present : 0.0;

  // velocity error over true positives of dynamic classes at the fixed radius
  double vel_sum = 0.0;
  int vel_n = 0;
  for (int c = 0; c < k; ++c) {
    if (!cfg.classes[static_cast<size_t>(c)].dynamic || cgts[c].empty()) continue;
    MatchOut m = greedy_match(cdets[c], cgts[c], cdet_scene[c], cgt_scene[c],
                              cfg.eval_vel_thresh);
    for (size_t oi = 0; oi < m.order.size(); ++oi) {
      if (m.match[oi] < 0) continue;
      const auto& db = cdets[c][m.order[oi]].box;
      const auto& gb = cgts[c][static_cast<size_t>(m.match[oi])];
      double dvx = db.vx - gb.vx, dvy = db.vy - gb.vy;
      vel_sum += std::sqrt(dvx * dvx + dvy * dvy);
      ++vel_n;
    }
  }
  out.mean_vel_err = vel_n > 0 ? vel_sum / vel_n : 0.0;
  out.vel_tp_count = vel_n;

  // range buckets partition ground truth by center range; detections fall in
  // the bucket of their predicted center range
  size_t nb = cfg.eval_range_edges.size() > 1 ? cfg.eval_range_edges.size() - 1 : 0;
  out.range_map.assign(nb, 0.0);
  out.range_gt_count.assign(nb, 0);
  for (size_t b = 0; b < nb; ++b) {
    double lo = cfg.eval_range_edges[b], hi = cfg.eval_range_edges[b + 1];
    double bucket_sum = 0.0;
    int bucket_present = 0;
    int gt_count = 0;
    for (int c = 0; c < k; ++c) {
      std::vector<Detection> bd;
      std::vector<int> bds;
      std::vector<BoxAnnotation> bg;
      std::vector<int> bgs;
      for (size_t i = 0; i < cdets[c].size(); ++i) {
        double r = cdets[c][i].box.range();
        if (r >= lo && r < hi) {
          bd.push_back(cdets[c][i]);
          bds.push_back(cdet_scene[c][i]);
        }
      }
      for (size_t i = 0; i < cgts[c].size(); ++i) {
        double r = cgts[c][i].range();
        if (r >= lo && r < hi) {
          bg.push_back(cgts[c][i]);
          bgs.push_back(cgt_scene[c][i]);
        }
      }
      gt_count += static_cast<int>(bg.size());
      if (bg.empty()) continue;
      double acc = 0.0;
      for (double radius : cfg.eval_match_thresholds)
        acc += average_precision(bd, bg, bds, bgs, radius);
      bucket_sum += acc / static_cast<double>(cfg.eval_match_thresholds.size());
      ++bucket_present;
    }
    out.range_map[b] = bucket_present > 0 ? bucket_sum / bucket_present : 0.0;
    out.range_gt_count[b] = gt_count;
  }
  return out;
}

std::string eval_report_json(const EvalResult& r, const DistillConfig& cfg) {
  nlohmann::json j;
  j["map"] = r.map;
  nlohmann::json pc = nlohmann::json::object();
  for (size_t c = 0; c < r.per_class_ap.size(); ++c)
    pc[cfg.classes[c].name] = r.per_class_ap[c];
  j["per_class_ap"] = pc;
  j["mean_vel_err"] = r.mean_vel_err;
  j["vel_tp_count"] = r.vel_tp_count;
  nlohmann::json ranges = nlohmann::json::array();
  for (size_t b = 0; b < r.range_map.size(); ++b) {
    nlohmann::json rb;
    rb["lo"] = cfg.eval_range_edges[b];
    rb["hi"] = cfg.eval_range_edges[b + 1];
    rb["map"] = r.range_map[b];
    rb["gt_count"] = r.range_gt_count[b];
    ranges.push_back(rb);
  }
  j["range_buckets"] = ranges;
  j["n_scenes"] = r.n_scenes;
  j["n_gt"] = r.n_gt;
  j["n_det"] = r.n_det;
  char hash_buf[32];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(cfg.hash()));
  j["config_hash"] = hash_buf;
  return j.dump(2);
}

}  // namespace bevd
