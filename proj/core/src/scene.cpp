#include "hst/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace hst {

using nlohmann::json;

double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * M_PI);
  if (r <= -M_PI) r += 2.0 * M_PI;
  return r;
}

void AgentFeatures::resize(int total_steps) {
  position.assign(static_cast<size_t>(total_steps) * 2, 0.0);
  keypoints.assign(static_cast<size_t>(total_steps) * kKeypointDim, 0.0);
  head_yaw.assign(total_steps, 0.0);
  position_valid.assign(total_steps, 0);
  keypoints_valid.assign(total_steps, 0);
  head_valid.assign(total_steps, 0);
}

void Scene::validate() const {
  if (agents.empty()) throw Error("scene '" + scene_id + "' has no agents");
  const int T = total_steps();
  const int N = num_agents();
  if (static_cast<int>(agent_ids.size()) != N) throw Error("scene agent_ids/agents mismatch");
  if (static_cast<int>(future_valid.size()) != N * future_len ||
      static_cast<int>(future_positions.size()) != N * future_len * 2) {
    throw Error("scene ground-truth arrays do not match [N, F]");
  }
  for (int n = 0; n < N; ++n) {
    const auto& a = agents[n];
    if (a.timesteps() != T || static_cast<int>(a.position.size()) != T * 2 ||
        static_cast<int>(a.keypoints.size()) != T * kKeypointDim ||
        static_cast<int>(a.head_yaw.size()) != T) {
      throw Error("agent feature arrays do not match T = " + std::to_string(T));
    }
    for (int t = 0; t < T; ++t) {
      if (t > history_len && (a.position_valid[t] || a.keypoints_valid[t] || a.head_valid[t])) {
        throw Error("future timestep " + std::to_string(t) + " marked valid on input");
      }
      if (a.keypoints_valid[t] && !a.position_valid[t]) {
        throw Error("keypoints valid without position at timestep " + std::to_string(t));
      }
      if (!a.position_valid[t] && (a.position[t * 2] != 0.0 || a.position[t * 2 + 1] != 0.0)) {
        throw Error("invalid position slot not zeroed");
      }
      if (!a.keypoints_valid[t]) {
        for (int d = 0; d < kKeypointDim; ++d) {
          if (a.keypoints[t * kKeypointDim + d] != 0.0) throw Error("invalid keypoint slot not zeroed");
        }
      }
      if (!a.head_valid[t] && a.head_yaw[t] != 0.0) throw Error("invalid head slot not zeroed");
      if (a.head_valid[t] && (a.head_yaw[t] <= -M_PI || a.head_yaw[t] > M_PI)) {
        throw Error("head yaw out of (-pi, pi]");
      }
    }
  }
}

int64_t TrackDataset::total_points() const {
  int64_t n = 0;
  for (const auto& s : scenes) {
    for (const auto& t : s.tracks) n += static_cast<int64_t>(t.points.size());
  }
  return n;
}

// ---------------------------------------------------------------------------
// Track file I/O
// ---------------------------------------------------------------------------

TrackDataset load_tracks(const std::string& path, LoadStats* stats) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open track file: " + path);
  TrackDataset ds;
  LoadStats local;
  LoadStats& st = stats ? *stats : local;

  std::vector<std::string> scene_order;
  auto scene_index = [&](const std::string& id) -> SceneTracks& {
    for (auto& s : ds.scenes) {
      if (s.scene_id == id) return s;
    }
    ds.scenes.push_back(SceneTracks{id, {}});
    return ds.scenes.back();
  };

  static const char* known_fields[] = {"scene_id", "t", "agent_id", "p", "kp", "head"};
  std::string line;
  int line_no = 0;
  bool warned_unknown = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error("parse error in " + path + " at line " + std::to_string(line_no) + ": " +
                  e.what());
    }
    try {
      for (auto it = rec.begin(); it != rec.end(); ++it) {
        bool known = false;
        for (const char* f : known_fields) {
          if (it.key() == f) known = true;
        }
        if (!known && !warned_unknown) {
          st.warnings.push_back("ignoring unknown field '" + it.key() + "' (line " +
                                std::to_string(line_no) + ")");
          warned_unknown = true;
        }
      }
      TrackPoint pt;
      pt.t = rec.at("t").get<double>();
      pt.position = {rec.at("p").at(0).get<double>(), rec.at("p").at(1).get<double>()};
      if (rec.contains("kp") && !rec["kp"].is_null()) {
        const auto& kp = rec["kp"];
        if (kp.size() != kNumKeypoints) {
          throw Error("line " + std::to_string(line_no) + ": kp must have " +
                      std::to_string(kNumKeypoints) + " joints");
        }
        std::array<double, kKeypointDim> k{};
        for (int j = 0; j < kNumKeypoints; ++j) {
          for (int d = 0; d < 3; ++d) k[j * 3 + d] = kp.at(j).at(d).get<double>();
        }
        pt.keypoints = k;
      }
      if (rec.contains("head") && !rec["head"].is_null()) {
        pt.head_yaw = wrap_angle(rec["head"].get<double>());
      }
      auto& scene = scene_index(rec.at("scene_id").get<std::string>());
      const std::string agent_id = rec.at("agent_id").get<std::string>();
      Track* track = nullptr;
      for (auto& tr : scene.tracks) {
        if (tr.agent_id == agent_id) track = &tr;
      }
      if (!track) {
        scene.tracks.push_back(Track{agent_id, {}});
        track = &scene.tracks.back();
      }
      track->points.push_back(pt);
    } catch (const json::exception& e) {
      throw Error("parse error in " + path + " at line " + std::to_string(line_no) + ": " +
                  e.what());
    }
  }

  // reject tracks with non-monotonic timestamps
  for (auto& scene : ds.scenes) {
    std::vector<Track> kept;
    for (auto& tr : scene.tracks) {
      bool monotonic = true;
      for (size_t i = 1; i < tr.points.size(); ++i) {
        if (tr.points[i].t <= tr.points[i - 1].t) monotonic = false;
      }
      if (monotonic) {
        kept.push_back(std::move(tr));
      } else {
        ++st.rejected_tracks;
        st.warnings.push_back("rejected track '" + tr.agent_id + "' in scene '" + scene.scene_id +
                              "': non-monotonic timestamps");
      }
    }
    scene.tracks = std::move(kept);
  }

  // infer the native rate from the median timestamp delta
  std::vector<double> deltas;
  for (const auto& scene : ds.scenes) {
    for (const auto& tr : scene.tracks) {
      for (size_t i = 1; i < tr.points.size(); ++i) {
        deltas.push_back(tr.points[i].t - tr.points[i - 1].t);
      }
    }
  }
  if (!deltas.empty()) {
    std::nth_element(deltas.begin(), deltas.begin() + deltas.size() / 2, deltas.end());
    const double med = deltas[deltas.size() / 2];
    if (med > 0.0) ds.rate_hz = 1.0 / med;
  }
  return ds;
}

void save_tracks(const TrackDataset& ds, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot open track file for writing: " + tmp.string());
    for (const auto& scene : ds.scenes) {
      for (const auto& tr : scene.tracks) {
        for (const auto& pt : tr.points) {
          json rec;
          rec["scene_id"] = scene.scene_id;
          rec["t"] = pt.t;
          rec["agent_id"] = tr.agent_id;
          rec["p"] = {pt.position[0], pt.position[1]};
          if (pt.keypoints) {
            json kp = json::array();
            for (int j = 0; j < kNumKeypoints; ++j) {
              kp.push_back({(*pt.keypoints)[j * 3], (*pt.keypoints)[j * 3 + 1],
                            (*pt.keypoints)[j * 3 + 2]});
            }
            rec["kp"] = std::move(kp);
          } else {
            rec["kp"] = nullptr;
          }
          if (pt.head_yaw) {
            rec["head"] = *pt.head_yaw;
          } else {
            rec["head"] = nullptr;
          }
          out << rec.dump() << "\n";
        }
      }
    }
    if (!out) throw Error("write failure on track file: " + tmp.string());
  }
  fs::rename(tmp, target);
}

// ---------------------------------------------------------------------------
// Occupancy grids
// ---------------------------------------------------------------------------

OccupancyGrid load_occupancy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open occupancy file: " + path);
  OccupancyGrid g;
  in >> g.width >> g.height >> g.cell_size_m >> g.origin_x >> g.origin_y;
  if (!in || g.width <= 0 || g.height <= 0 || g.cell_size_m <= 0.0) {
    throw Error("bad occupancy header in " + path);
  }
  g.cells.assign(static_cast<size_t>(g.width) * g.height, 0);
  for (int r = 0; r < g.height; ++r) {
    std::string row;
    in >> row;
    if (static_cast<int>(row.size()) != g.width) {
      throw Error("occupancy row " + std::to_string(r) + " has wrong length in " + path);
    }
    for (int c = 0; c < g.width; ++c) {
      if (row[c] != '0' && row[c] != '1') throw Error("occupancy cells must be 0/1 in " + path);
      g.cells[static_cast<size_t>(r) * g.width + c] = row[c] == '1';
    }
  }
  return g;
}

void save_occupancy(const OccupancyGrid& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open occupancy file for writing: " + path);
  out << g.width << " " << g.height << " " << g.cell_size_m << " " << g.origin_x << " "
      << g.origin_y << "\n";
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      out << (g.cells[static_cast<size_t>(r) * g.width + c] ? '1' : '0');
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Subsampling and windowing
// ---------------------------------------------------------------------------

namespace {

double scene_t0(const SceneTracks& scene) {
  double t0 = HUGE_VAL;
  for (const auto& tr : scene.tracks) {
    if (!tr.points.empty()) t0 = std::min(t0, tr.points.front().t);
  }
  return t0;
}

int64_t frame_index(double t, double t0, double rate) {
  return std::llround((t - t0) * rate);
}

}  // namespace

std::vector<TrackDataset> subsample(const TrackDataset& ds, int from_hz, int to_hz) {
  if (from_hz <= 0 || to_hz <= 0 || from_hz % to_hz != 0) {
    throw Error("subsample: " + std::to_string(from_hz) + " Hz is not an integer multiple of " +
                std::to_string(to_hz) + " Hz");
  }
  const int k = from_hz / to_hz;
  std::vector<TrackDataset> phases(k);
  for (int p = 0; p < k; ++p) phases[p].rate_hz = to_hz;
  for (const auto& scene : ds.scenes) {
    const double t0 = scene_t0(scene);
    std::vector<SceneTracks> per_phase(k);
    for (int p = 0; p < k; ++p) per_phase[p].scene_id = scene.scene_id;
    for (const auto& tr : scene.tracks) {
      std::vector<Track> split(k);
      for (int p = 0; p < k; ++p) split[p].agent_id = tr.agent_id;
      for (const auto& pt : tr.points) {
        const int64_t idx = frame_index(pt.t, t0, from_hz);
        split[static_cast<int>(idx % k)].points.push_back(pt);
      }
      for (int p = 0; p < k; ++p) {
        if (!split[p].points.empty()) per_phase[p].tracks.push_back(std::move(split[p]));
      }
    }
    for (int p = 0; p < k; ++p) {
      if (!per_phase[p].tracks.empty()) phases[p].scenes.push_back(std::move(per_phase[p]));
    }
  }
  return phases;
}

std::vector<Scene> make_windows(const TrackDataset& ds, int history_len, int future_len,
                                int stride) {
  if (history_len < 0 || future_len < 1 || stride < 1) {
    throw Error("make_windows: need history_len >= 0, future_len >= 1, stride >= 1");
  }
  const int T = history_len + 1 + future_len;
  const double rate = ds.rate_hz;
  std::vector<Scene> out;
  for (const auto& scene : ds.scenes) {
    if (scene.tracks.empty()) continue;
    const double t0 = scene_t0(scene);
    int64_t frames = 0;
    for (const auto& tr : scene.tracks) {
      for (const auto& pt : tr.points) frames = std::max(frames, frame_index(pt.t, t0, rate) + 1);
    }
    for (int64_t start = 0; start + T <= frames; start += stride) {
      Scene w;
      w.history_len = history_len;
      w.future_len = future_len;
      w.timestep_period = 1.0 / rate;
      w.scene_id = scene.scene_id;
      w.window_start_index = static_cast<int>(start);
      for (const auto& tr : scene.tracks) {
        AgentFeatures feat;
        feat.resize(T);
        std::vector<double> fut_pos(static_cast<size_t>(future_len) * 2, 0.0);
        std::vector<uint8_t> fut_valid(future_len, 0);
        bool any_input = false;
        for (const auto& pt : tr.points) {
          const int64_t idx = frame_index(pt.t, t0, rate) - start;
          if (idx < 0 || idx >= T) continue;
          if (idx <= history_len) {
            const int t = static_cast<int>(idx);
            feat.position[t * 2] = pt.position[0];
            feat.position[t * 2 + 1] = pt.position[1];
            feat.position_valid[t] = 1;
            any_input = true;
            if (pt.keypoints) {
              std::copy(pt.keypoints->begin(), pt.keypoints->end(),
                        feat.keypoints.begin() + static_cast<size_t>(t) * kKeypointDim);
              feat.keypoints_valid[t] = 1;
            }
            if (pt.head_yaw) {
              feat.head_yaw[t] = *pt.head_yaw;
              feat.head_valid[t] = 1;
            }
          } else {
            const int f = static_cast<int>(idx) - history_len - 1;
            fut_pos[f * 2] = pt.position[0];
            fut_pos[f * 2 + 1] = pt.position[1];
            fut_valid[f] = 1;
          }
        }
        if (!any_input) continue;  // never observed in the input range
        w.agent_ids.push_back(tr.agent_id);
        w.agents.push_back(std::move(feat));
        w.future_positions.insert(w.future_positions.end(), fut_pos.begin(), fut_pos.end());
        w.future_valid.insert(w.future_valid.end(), fut_valid.begin(), fut_valid.end());
      }
      if (!w.agents.empty()) out.push_back(std::move(w));
    }
  }
  return out;
}

namespace {

/// Position of an agent at the current step, falling back to the most recent
/// observed input step.
std::array<double, 2> current_position(const Scene& scene, int agent) {
  const auto& a = scene.agents[agent];
  for (int t = scene.history_len; t >= 0; --t) {
    if (a.position_valid[t]) return {a.position[t * 2], a.position[t * 2 + 1]};
  }
  return {0.0, 0.0};
}

}  // namespace

Scene cap_agents(const Scene& scene, int n_max, uint64_t rng_seed) {
  if (n_max < 1) throw Error("cap_agents: n_max must be >= 1");
  const int N = scene.num_agents();
  if (N <= n_max) return scene;
  RandomStream rng(rng_seed);
  const int anchor = rng.uniform_int(0, N - 1);
  const auto ap = current_position(scene, anchor);
  std::vector<std::pair<double, int>> others;
  for (int n = 0; n < N; ++n) {
    if (n == anchor) continue;
    const auto p = current_position(scene, n);
    const double dx = p[0] - ap[0], dy = p[1] - ap[1];
    others.emplace_back(dx * dx + dy * dy, n);
  }
  std::sort(others.begin(), others.end());
  std::vector<int> keep = {anchor};
  for (int i = 0; i < n_max - 1; ++i) keep.push_back(others[i].second);
  std::sort(keep.begin(), keep.end());  // preserve original agent order

  Scene out;
  out.history_len = scene.history_len;
  out.future_len = scene.future_len;
  out.timestep_period = scene.timestep_period;
  out.occupancy = scene.occupancy;
  out.scene_id = scene.scene_id;
  out.window_start_index = scene.window_start_index;
  const int F = scene.future_len;
  for (int n : keep) {
    out.agent_ids.push_back(scene.agent_ids[n]);
    out.agents.push_back(scene.agents[n]);
    out.future_positions.insert(out.future_positions.end(),
                                scene.future_positions.begin() + static_cast<size_t>(n) * F * 2,
                                scene.future_positions.begin() + static_cast<size_t>(n + 1) * F * 2);
    out.future_valid.insert(out.future_valid.end(),
                            scene.future_valid.begin() + static_cast<size_t>(n) * F,
                            scene.future_valid.begin() + static_cast<size_t>(n + 1) * F);
  }
  return out;
}

void apply_feature_parity(Scene& scene) {
  const int F = scene.future_len;
  std::vector<int> keep;
  for (int n = 0; n < scene.num_agents(); ++n) {
    auto& a = scene.agents[n];
    bool any_valid = false;
    for (int t = 0; t <= scene.history_len; ++t) {
      if (a.position_valid[t] && !a.keypoints_valid[t]) {
        a.position_valid[t] = 0;
        a.position[t * 2] = 0.0;
        a.position[t * 2 + 1] = 0.0;
        a.head_valid[t] = 0;
        a.head_yaw[t] = 0.0;
      }
      if (a.position_valid[t]) any_valid = true;
    }
    if (any_valid) keep.push_back(n);
  }
  if (static_cast<int>(keep.size()) == scene.num_agents()) return;
  Scene filtered;
  filtered.history_len = scene.history_len;
  filtered.future_len = scene.future_len;
  filtered.timestep_period = scene.timestep_period;
  filtered.occupancy = scene.occupancy;
  filtered.scene_id = scene.scene_id;
  filtered.window_start_index = scene.window_start_index;
  for (int n : keep) {
    filtered.agent_ids.push_back(scene.agent_ids[n]);
    filtered.agents.push_back(std::move(scene.agents[n]));
    filtered.future_positions.insert(
        filtered.future_positions.end(),
        scene.future_positions.begin() + static_cast<size_t>(n) * F * 2,
        scene.future_positions.begin() + static_cast<size_t>(n + 1) * F * 2);
    filtered.future_valid.insert(filtered.future_valid.end(),
                                 scene.future_valid.begin() + static_cast<size_t>(n) * F,
                                 scene.future_valid.begin() + static_cast<size_t>(n + 1) * F);
  }
  scene = std::move(filtered);
}

int consecutive_observed_steps(const Scene& scene, int agent) {
  const auto& a = scene.agents[agent];
  int count = 0;
  for (int t = scene.history_len; t >= 0; --t) {
    if (!a.position_valid[t]) break;
    ++count;
  }
  return count;
}

}  // namespace hst
