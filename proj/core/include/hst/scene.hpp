#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hst/tensor.hpp"

namespace hst {

constexpr int kNumKeypoints = 33;
constexpr int kKeypointDim = 3 * kNumKeypoints;

/// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

/// Per-agent feature rows over the T = H+1+F steps of one window.
/// Invalid timesteps hold exactly zero in every feature slot.
struct AgentFeatures {
  std::vector<double> position;   // [T, 2] meters
  std::vector<double> keypoints;  // [T, 99] meters (33 joints x xyz)
  std::vector<double> head_yaw;   // [T] radians in (-pi, pi]
  std::vector<uint8_t> position_valid;
  std::vector<uint8_t> keypoints_valid;
  std::vector<uint8_t> head_valid;

  void resize(int total_steps);
  int timesteps() const { return static_cast<int>(position_valid.size()); }
};

struct OccupancyGrid {
  int width = 0;
  int height = 0;
  double cell_size_m = 0.1;
  double origin_x = 0.0;
  double origin_y = 0.0;
  std::vector<uint8_t> cells;  // row-major [height, width], 0/1
};

OccupancyGrid load_occupancy(const std::string& path);
void save_occupancy(const OccupancyGrid& grid, const std::string& path);

/// One prediction window: N agents, H+1 observed input steps, F future steps.
struct Scene {
  int history_len = 0;
  int future_len = 0;
  double timestep_period = 1.0 / 3.0;
  std::vector<std::string> agent_ids;
  std::vector<AgentFeatures> agents;
  std::vector<double> future_positions;  // [N, F, 2] ground truth
  std::vector<uint8_t> future_valid;     // [N, F]
  std::optional<OccupancyGrid> occupancy;
  std::string scene_id;
  int window_start_index = 0;

  int num_agents() const { return static_cast<int>(agents.size()); }
  int total_steps() const { return history_len + 1 + future_len; }
  void validate() const;
};

struct TrackPoint {
  double t = 0.0;
  std::array<double, 2> position{0.0, 0.0};
  std::optional<std::array<double, kKeypointDim>> keypoints;
  std::optional<double> head_yaw;
};

struct Track {
  std::string agent_id;
  std::vector<TrackPoint> points;  // strictly increasing timestamps
};

struct SceneTracks {
  std::string scene_id;
  std::vector<Track> tracks;
};

struct TrackDataset {
  double rate_hz = 3.0;
  std::vector<SceneTracks> scenes;

  int64_t total_points() const;
};

struct LoadStats {
  int rejected_tracks = 0;
  std::vector<std::string> warnings;
};

/// Reads the newline-delimited JSON track format (docs/formats.md). Unknown
/// fields are ignored with a warning; tracks with non-monotonic timestamps
/// are rejected and counted.
TrackDataset load_tracks(const std::string& path, LoadStats* stats = nullptr);
void save_tracks(const TrackDataset& ds, const std::string& path);

/// Splits a dataset into from_hz/to_hz phase-shifted datasets at to_hz,
/// keeping every original frame exactly once across the phases.
std::vector<TrackDataset> subsample(const TrackDataset& ds, int from_hz, int to_hz);

/// Sliding prediction windows. Agents with at least one observed input step
/// are kept; future input features are zeroed and their ground truth copied
/// out with validity flags.
std::vector<Scene> make_windows(const TrackDataset& ds, int history_len, int future_len,
                                int stride);

/// Caps a scene at n_max agents: one uniformly random anchor plus its
/// n_max-1 nearest neighbors by current-timestep distance.
Scene cap_agents(const Scene& scene, int n_max, uint64_t rng_seed);

/// Drops observed positions (and head) at input steps lacking keypoints, so
/// position and pose features cover identical timesteps. Agents left with no
/// valid input step are removed.
void apply_feature_parity(Scene& scene);

/// Number of consecutive observed input steps ending at the current step.
int consecutive_observed_steps(const Scene& scene, int agent);

}  // namespace hst
