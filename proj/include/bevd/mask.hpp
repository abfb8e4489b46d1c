#pragma once

#include <vector>

#include "bevd/config.hpp"
#include "bevd/scene.hpp"
#include "bevd/tensor.hpp"

namespace bevd {

/// Point-in-rotated-rectangle test in world coordinates.
bool point_in_box(const BoxAnnotation& box, double x, double y);

/// Binary [H,W] map: 1 where the cell center falls inside any box.
Tensor rasterize_foreground(const std::vector<BoxAnnotation>& boxes, const GridSpec& grid);

/// Range- and velocity-driven box expansion. Center and yaw unchanged.
BoxAnnotation scale_box(const BoxAnnotation& box, const DistillConfig& cfg);

/// rasterize_foreground over scale_box of every annotation.
Tensor scaled_mask(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg);

/// Per-class Gaussian heatmaps [K,H,W]; each isolated object peaks at
/// exactly 1.0 in its center cell; overlaps combine by max.
Tensor gaussian_heatmap(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg);

/// Spatial weight map [H,W] selecting where feature imitation applies.
Tensor feature_mask(const std::vector<BoxAnnotation>& boxes, const DistillConfig& cfg,
                    MsfdMask mode);

}  // namespace bevd
