#pragma once

#include <array>
#include <utility>
#include <vector>

#include "hst/scene.hpp"

namespace hst {

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), sorted by row
  double total_cost = 0.0;
};

/// Exact minimum-cost one-to-one assignment of min(rows, cols) pairs.
/// Rectangular matrices are padded internally with a large sentinel.
Assignment hungarian_associate(const std::vector<std::vector<double>>& costs);

/// Gated per-frame matching on Euclidean distance: pairs further apart than
/// gate_distance_m are excluded. Returns (detection, label) index pairs.
std::vector<std::pair<int, int>> associate_frame(
    const std::vector<std::array<double, 2>>& detections,
    const std::vector<std::array<double, 2>>& labels, double gate_distance_m);

/// Frame-by-frame association of detection tracks to label tracks; each
/// detection track takes the label id it matches most often (original id is
/// kept when no frame ever matched).
TrackDataset associate_detections(const TrackDataset& detections, const TrackDataset& labels,
                                  double gate_distance_m);

}  // namespace hst
