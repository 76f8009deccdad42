#include "hst/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace hst {

Assignment hungarian_associate(const std::vector<std::vector<double>>& costs) {
  const int rows = static_cast<int>(costs.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(costs[0].size());
  if (cols == 0) return {};
  double max_abs = 1.0;
  for (const auto& row : costs) {
    if (static_cast<int>(row.size()) != cols) throw Error("hungarian: ragged cost matrix");
    for (double c : row) {
      if (!std::isfinite(c)) throw Error("hungarian: non-finite cost");
      max_abs = std::max(max_abs, std::abs(c));
    }
  }
  const int n = std::max(rows, cols);
  const double pad = 4.0 * max_abs * n + 1.0;
  auto cost_at = [&](int i, int j) -> double {
    if (i < rows && j < cols) return costs[i][j];
    return pad;
  };

  // potentials + shortest augmenting path, O(n^3)
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost_at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  Assignment out;
  for (int j = 1; j <= n; ++j) {
    const int i = p[j] - 1, c = j - 1;
    if (i < rows && c < cols) {
      out.pairs.emplace_back(i, c);
      out.total_cost += costs[i][c];
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

std::vector<std::pair<int, int>> associate_frame(
    const std::vector<std::array<double, 2>>& detections,
    const std::vector<std::array<double, 2>>& labels, double gate_distance_m) {
  if (detections.empty() || labels.empty()) return {};
  std::vector<std::vector<double>> costs(detections.size(),
                                         std::vector<double>(labels.size(), 0.0));
  const double gated = 4.0 * gate_distance_m + 10.0;
  for (size_t d = 0; d < detections.size(); ++d) {
    for (size_t l = 0; l < labels.size(); ++l) {
      const double dx = detections[d][0] - labels[l][0];
      const double dy = detections[d][1] - labels[l][1];
      const double dist = std::hypot(dx, dy);
      costs[d][l] = dist <= gate_distance_m ? dist : gated;
    }
  }
  auto assignment = hungarian_associate(costs);
  std::vector<std::pair<int, int>> pairs;
  for (auto [d, l] : assignment.pairs) {
    if (costs[d][l] <= gate_distance_m) pairs.emplace_back(d, l);
  }
  return pairs;
}

TrackDataset associate_detections(const TrackDataset& detections, const TrackDataset& labels,
                                  double gate_distance_m) {
  TrackDataset out;
  out.rate_hz = detections.rate_hz;
  for (const auto& det_scene : detections.scenes) {
    const SceneTracks* label_scene = nullptr;
    for (const auto& s : labels.scenes) {
      if (s.scene_id == det_scene.scene_id) label_scene = &s;
    }
    SceneTracks result;
    result.scene_id = det_scene.scene_id;
    if (!label_scene) {
      result.tracks = det_scene.tracks;
      out.scenes.push_back(std::move(result));
      continue;
    }

    // group observations by quantized frame time
    const double rate = detections.rate_hz;
    auto quantize = [&](double t) { return std::llround(t * rate); };
    std::map<int64_t, std::vector<std::pair<int, int>>> det_by_frame;   // (track, point)
    std::map<int64_t, std::vector<std::pair<int, int>>> label_by_frame;
    for (int tr = 0; tr < static_cast<int>(det_scene.tracks.size()); ++tr) {
      const auto& points = det_scene.tracks[tr].points;
      for (int p = 0; p < static_cast<int>(points.size()); ++p) {
        det_by_frame[quantize(points[p].t)].emplace_back(tr, p);
      }
    }
    for (int tr = 0; tr < static_cast<int>(label_scene->tracks.size()); ++tr) {
      const auto& points = label_scene->tracks[tr].points;
      for (int p = 0; p < static_cast<int>(points.size()); ++p) {
        label_by_frame[quantize(points[p].t)].emplace_back(tr, p);
      }
    }

    // per-frame matching, votes per detection track
    std::vector<std::map<std::string, int>> votes(det_scene.tracks.size());
    for (const auto& [frame, dets] : det_by_frame) {
      auto it = label_by_frame.find(frame);
      if (it == label_by_frame.end()) continue;
      std::vector<std::array<double, 2>> dp, lp;
      for (auto [tr, p] : dets) dp.push_back(det_scene.tracks[tr].points[p].position);
      for (auto [tr, p] : it->second) lp.push_back(label_scene->tracks[tr].points[p].position);
      for (auto [d, l] : associate_frame(dp, lp, gate_distance_m)) {
        const auto& label_id = label_scene->tracks[it->second[l].first].agent_id;
        votes[dets[d].first][label_id] += 1;
      }
    }

    for (int tr = 0; tr < static_cast<int>(det_scene.tracks.size()); ++tr) {
      Track t = det_scene.tracks[tr];
      if (!votes[tr].empty()) {
        int best = 0;
        std::string best_id;
        for (const auto& [id, n] : votes[tr]) {
          if (n > best || (n == best && (best_id.empty() || id < best_id))) {
            best = n;
            best_id = id;
          }
        }
        t.agent_id = best_id;
      }
      result.tracks.push_back(std::move(t));
    }
    out.scenes.push_back(std::move(result));
  }
  return out;
}

}  // namespace hst
