#include "bevd/mask.hpp"

#include <algorithm>
#include <cmath>

namespace bevd {

bool point_in_box(const BoxAnnotation& box, double x, double y) {
  double dx = x - box.x, dy = y - box.y;
  double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
  double u = dx * cy + dy * sy;    // along length
  double v = -dx * sy + dy * cy;   // along width
  return std::fabs(u) <= 0.5 * box.length && std::fabs(v) <= 0.5 * box.width;
}

Tensor rasterize_foreground(const std::vector<BoxAnnotation>& boxes, const GridSpec& grid) {
  std::vector<double> data(static_cast<size_t>(grid.h) * grid.w, 0.0);
  for (const auto& box : boxes) {
    // Only sweep the axis-aligned bounding window of the rotated box.
    double half = 0.5 * std::sqrt(box.width * box.width + box.length * box.length);
    int r0 = std::max(0, static_cast<int>(std::floor(grid.row_of_y(box.y - half))));
    int r1 = std::min(grid.h - 1, static_cast<int>(std::ceil(grid.row_of_y(box.y + half))));
    int c0 = std::max(0, static_cast<int>(std::floor(grid.col_of_x(box.x - half))));
    int c1 = std::min(grid.w - 1, static_cast<int>(std::ceil(grid.col_of_x(box.x + half))));
    for (int r = r0; r <= r1; ++r) {
      double y = grid.y_of_row(r);
      for (int c = c0; c <= c1; ++c) {
        if (point_in_box(box, grid.x_of_col(c), y))
          data[static_cast<size_t>(r) * grid.w + c] = 1.0;
      }
    }
  }
  return Tensor::from_data({grid.h, grid.w}, std::move(data));
}

namespace {

double band_factor(double value, double lo, double hi, double alpha, double beta) {
  if (value >= hi) return beta;
  if (value >= lo) return alpha;
  return 0.0;
}

double expand_extent(double extent, double factor, double clip_min, double clip_max) {
  if (factor <= 0.0) return extent;
  double raw = factor * extent;
  return extent + std::clamp(raw, clip_min, clip_max);
}

}  // namespace

BoxAnnotation scale_box(const BoxAnnotation& box, const DistillConfig& cfg) {
  double r = box.range();
  double range_f = band_factor(r, cfg.mask_r1, cfg.mask_r2, cfg.mask_alpha, cfg.mask_beta);

  // Velocity resolved in the box frame: length axis along yaw.
  double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
  double v_len = std::fabs(box.vx * cy + box.vy * sy);
  double v_wid = std::fabs(-box.vx * sy + box.vy * cy);
  double len_f = range_f + band_factor(v_len, cfg.mask_v1, cfg.mask_v2, cfg.mask_alpha, cfg.mask_beta);
  double wid_f = range_f + band_factor(v_wid, cfg.mask_v1, cfg.mask_v2, cfg.mask_alpha, cfg.mask_beta);

  BoxAnnotation out = box;
  out.length = expand_extent(box.length, len_f, cfg.mask_clip_min, cfg.mask_clip_max);
  out.width = expand_extent(box.width, wid_f, cfg.mask_clip_min, cfg.mask_clip_max);
  return out;
}

Tensor scaled_mask(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg) {
  std::vector<BoxAnnotation> scaled;
  scaled.reserve(boxes.size());
  for (const auto& b : boxes) scaled.push_back(scale_box(b, cfg));
  return rasterize_foreground(scaled, cfg.grid);
}

Tensor gaussian_heatmap(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg) {
  const GridSpec& g = cfg.grid;
  const int k = cfg.num_classes();
  const size_t plane = static_cast<size_t>(g.h) * g.w;
  std::vector<double> data(static_cast<size_t>(k) * plane, 0.0);
  for (const auto& box : boxes) {
    if (box.class_id < 0 || box.class_id >= k)
      throw std::runtime_error("gaussian_heatmap: class_id out of range");
    int row = static_cast<int>(std::floor((box.y - g.y_min) / g.cell));
    int col = static_cast<int>(std::floor((box.x - g.x_min) / g.cell));
    if (!g.cell_in_bounds(row, col)) continue;
    double wc = box.width / g.cell, lc = box.length / g.cell;
    double sigma = std::max(cfg.heatmap_min_sigma,
                            cfg.heatmap_sigma_factor * std::sqrt(wc * wc + lc * lc));
    int rad = static_cast<int>(std::ceil(3.0 * sigma));
    double inv = 1.0 / (2.0 * sigma * sigma);
    double* plane_buf = data.data() + static_cast<size_t>(box.class_id) * plane;
    for (int r = std::max(0, row - rad); r <= std::min(g.h - 1, row + rad); ++r) {
      for (int c = std::max(0, col - rad); c <= std::min(g.w - 1, col + rad); ++c) {
        // Distance measured between cell indices so the center cell hits
        // exp(0) = 1 exactly.
        double dr = r - row, dc = c - col;
        double v = std::exp(-(dr * dr + dc * dc) * inv);
        double& cell = plane_buf[static_cast<size_t>(r) * g.w + c];
        cell = std::max(cell, v);
      }
    }
  }
  return Tensor::from_data({k, g.h, g.w}, std::move(data));
}

Tensor feature_mask(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg,
                    MsfdMask mode) {
  const GridSpec& g = cfg.grid;
  switch (mode) {
    case MsfdMask::kDense:
      return Tensor::full({g.h, g.w}, 1.0);
    case MsfdMask::kGaussian: {
      Tensor hm = gaussian_heatmap(boxes, cfg);
      NoGradGuard ng;
      return channel_pool(hm, Pool::kMax);
    }
    case MsfdMask::kScaled:
    default:
      return scaled_mask(boxes, cfg);
  }
}

}  // namespace bevd
