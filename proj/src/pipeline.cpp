#include "vinkit/pipeline.hpp"

#include "vinkit/manifold.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <utility>

namespace vinkit {

namespace {

std::string join(const std::string& dir, const char* name) {
  return (std::filesystem::path(dir) / name).string();
}

// Frames grouped by timestamp, features undistorted and sorted by landmark so
// every downstream container fills in one deterministic order.
std::vector<FrameInput> group_frames(const std::vector<FeatureObservation>& raw,
                                     const CameraModel& camera) {
  std::map<std::int64_t, FrameInput> by_ts;
  for (const FeatureObservation& f : raw) {
    FrameInput& frame = by_ts[f.timestamp_ns];
    frame.timestamp_ns = f.timestamp_ns;
    FeatureObservation u = f;
    u.pixel = undistort_pixel(camera, f.pixel);
    frame.features.push_back(u);
  }
  std::vector<FrameInput> out;
  out.reserve(by_ts.size());
  for (auto& [ts, frame] : by_ts) {
    (void)ts;
    std::sort(frame.features.begin(), frame.features.end(),
              [](const FeatureObservation& a, const FeatureObservation& b) {
                return a.landmark_id < b.landmark_id;
              });
    out.push_back(std::move(frame));
  }
  return out;
}

// Inclusive slice of the IMU stream covering [t0, t1]. Camera frames must hit
// IMU sample times exactly; anything else would silently shift the
// preintegration horizon.
std::vector<ImuSample> slice_imu(const ImuCsv& imu, std::int64_t t0, std::int64_t t1) {
  const auto& ts = imu.timestamps_ns;
  const auto first = std::lower_bound(ts.begin(), ts.end(), t0);
  const auto last = std::upper_bound(ts.begin(), ts.end(), t1);
  VINKIT_REQUIRE(first != ts.end() && *first == t0 && last != ts.begin() &&
                     *(last - 1) == t1,
                 "camera frames must align with imu sample times");
  return {imu.samples.begin() + (first - ts.begin()),
          imu.samples.begin() + (last - ts.begin())};
}

ImuState anchor_state(const Dataset& data, const std::optional<ImuState>& override_state) {
  if (override_state.has_value()) return *override_state;
  VINKIT_REQUIRE(!data.ground_truth.empty(),
                 "run needs an initial state: none given and no ground truth");
  return data.ground_truth.front().state;
}

Vec3 camera_center(const ImuState& s, const CameraModel& cam, Mat3* r_wc) {
  const Mat3 r_wb = quat_to_rotmat(s.orientation);
  *r_wc = r_wb * cam.r_ci.transpose();
  return s.position - *r_wc * cam.t_ci;
}

bool in_front(const ImuState& s, const CameraModel& cam, const Vec3& point_w) {
  const Mat3 r_wb = quat_to_rotmat(s.orientation);
  const Vec3 l_c = cam.r_ci * (r_wb.transpose() * (point_w - s.position)) + cam.t_ci;
  return l_c.z() > kMinDepth;
}

// Midpoint of the two viewing rays; refuses weak parallax and points behind
// either camera.
std::optional<Vec3> midpoint_from_views(const ImuState& s0, const Vec2& px0,
                                        const ImuState& s1, const Vec2& px1,
                                        const CameraModel& cam) {
  Mat3 r0, r1;
  const Vec3 c0 = camera_center(s0, cam, &r0);
  const Vec3 c1 = camera_center(s1, cam, &r1);
  const Vec3 d0 = (r0 * back_project_ray(cam, px0)).normalized();
  const Vec3 d1 = (r1 * back_project_ray(cam, px1)).normalized();
  const double cos_angle = std::clamp(d0.dot(d1), -1.0, 1.0);
  if (std::acos(cos_angle) < kMinInitParallaxRad) return std::nullopt;

  const Vec3 w = c0 - c1;
  const double b = d0.dot(d1);
  const double d = d0.dot(w);
  const double e = d1.dot(w);
  const double denom = 1.0 - b * b;
  const double t0 = (b * e - d) / denom;
  const double t1 = (e - b * d) / denom;
  const Vec3 point = 0.5 * (c0 + t0 * d0 + c1 + t1 * d1);
  if (!in_front(s0, cam, point) || !in_front(s1, cam, point)) return std::nullopt;
  return point;
}

// Fixed-lag smoother over a keyframe window plus a short tail of recent
// frames. Frames stay chronological; the first n_key of them are keyframes.
struct SmootherRunner {
  const Dataset& data;
  const SmootherOptions& opt;

  WindowGraph g;
  int n_key = 0;
  bool have_window = false;
  std::vector<FrameInput> buffer;  // frames seen before initialization
  ImuState buffer_anchor;          // state estimate at buffer.front()
  // Tracked-but-not-yet-triangulated pixels: landmark -> timestamp -> pixel.
  std::map<std::int64_t, std::map<std::int64_t, Vec2>> tracks;
  std::map<std::int64_t, TrajectoryRow> rows;
  std::vector<WindowDiagnostics> diags;
  bool diverged = false;
  std::string message;

  SmootherRunner(const Dataset& d, const SmootherOptions& o) : data(d), opt(o) {
    buffer_anchor = anchor_state(d, o.initial_state);
  }

  void record(std::int64_t timestamp_ns, const ImuState& state) {
    TrajectoryRow row;
    row.timestamp_ns = timestamp_ns;
    row.state = state;
    rows[timestamp_ns] = row;
  }

  void forget_timestamp(std::int64_t ts) {
    for (auto it = tracks.begin(); it != tracks.end();) {
      it->second.erase(ts);
      it = it->second.empty() ? tracks.erase(it) : std::next(it);
    }
  }

  // Landmarks need two in-window observations or a prior reference to stay
  // constrained; anything weaker leaves with its lone factor, which under a
  // flat prior is an exact marginalization.
  void prune_weak_landmarks() {
    std::map<std::int64_t, int> obs_count;
    for (const VisualFactor& f : g.visual_factors) ++obs_count[f.landmark_id];
    std::set<std::int64_t> in_prior;
    if (g.dense_prior.has_value()) {
      in_prior.insert(g.dense_prior->landmark_ids.begin(),
                      g.dense_prior->landmark_ids.end());
    }
    std::set<std::int64_t> doomed;
    for (const auto& [id, point] : g.landmarks) {
      (void)point;
      if (in_prior.count(id) > 0) continue;
      if (obs_count.count(id) == 0 || obs_count.at(id) < 2) doomed.insert(id);
    }
    if (doomed.empty()) return;
    g.visual_factors.erase(
        std::remove_if(g.visual_factors.begin(), g.visual_factors.end(),
                       [&](const VisualFactor& f) {
                         return doomed.count(f.landmark_id) > 0;
                       }),
        g.visual_factors.end());
    for (std::int64_t id : doomed) g.landmarks.erase(id);
  }

  // Pending tracks with two or more in-window observations become landmarks,
  // strongest track first, until the budget is full.
  void activate_tracks() {
    std::map<std::int64_t, int> ts_to_idx;
    for (int i = 0; i < static_cast<int>(g.frames.size()); ++i) {
      ts_to_idx[g.frames[i].timestamp_ns] = i;
    }
    struct Candidate {
      std::int64_t id;
      int count;
    };
    std::vector<Candidate> candidates;
    for (const auto& [id, obs] : tracks) {
      int count = 0;
      for (const auto& [ts, px] : obs) {
        (void)px;
        if (ts_to_idx.count(ts) > 0) ++count;
      }
      if (count >= 2) candidates.push_back({id, count});
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const Candidate& a, const Candidate& b) {
                return a.count != b.count ? a.count > b.count : a.id < b.id;
              });
    for (const Candidate& c : candidates) {
      if (static_cast<int>(g.landmarks.size()) >= opt.max_landmarks) break;
      std::vector<std::pair<int, Vec2>> obs;
      for (const auto& [ts, px] : tracks.at(c.id)) {
        const auto it = ts_to_idx.find(ts);
        if (it != ts_to_idx.end()) obs.emplace_back(it->second, px);
      }
      const auto point = midpoint_from_views(
          g.frames[obs.front().first].state, obs.front().second,
          g.frames[obs.back().first].state, obs.back().second, data.camera);
      if (!point.has_value()) continue;
      bool visible = true;
      for (const auto& [idx, px] : obs) {
        (void)px;
        if (!in_front(g.frames[idx].state, data.camera, *point)) visible = false;
      }
      if (!visible) continue;
      g.landmarks[c.id] = *point;
      for (const auto& [idx, px] : obs) {
        g.visual_factors.push_back({idx, c.id, px});
      }
      tracks.erase(c.id);
    }
  }

  // Median pixel displacement and shared-track count between the candidate
  // frame and the newest keyframe; the keyframe test consumes both.
  std::pair<double, int> parallax_against_last_keyframe(int c) {
    const int k = n_key - 1;
    std::map<std::int64_t, Vec2> at_k;
    std::map<std::int64_t, Vec2> at_c;
    for (const VisualFactor& f : g.visual_factors) {
      if (f.frame == k) at_k[f.landmark_id] = f.pixel;
      if (f.frame == c) at_c[f.landmark_id] = f.pixel;
    }
    const std::int64_t tk = g.frames[k].timestamp_ns;
    const std::int64_t tc = g.frames[c].timestamp_ns;
    for (const auto& [id, obs] : tracks) {
      const auto ik = obs.find(tk);
      const auto ic = obs.find(tc);
      if (ik != obs.end()) at_k[id] = ik->second;
      if (ic != obs.end()) at_c[id] = ic->second;
    }
    std::vector<double> motion;
    for (const auto& [id, px] : at_c) {
      const auto it = at_k.find(id);
      if (it != at_k.end()) motion.push_back((px - it->second).norm());
    }
    if (motion.empty()) return {0.0, 0};
    std::nth_element(motion.begin(), motion.begin() + motion.size() / 2, motion.end());
    return {motion[motion.size() / 2], static_cast<int>(motion.size())};
  }

  void promote_oldest_recent() {
    ++n_key;
    if (n_key > opt.max_keyframes) {
      record(g.frames[0].timestamp_ns, g.frames[0].state);
      const std::int64_t t0 = g.frames[0].timestamp_ns;
      marginalize_oldest(&g);
      --n_key;
      forget_timestamp(t0);
      prune_weak_landmarks();
    }
  }

  // Non-keyframes leave whole: their pixels are discarded and the two
  // adjacent inertial factors re-preintegrate into one span.
  void drop_frame(int c) {
    record(g.frames[c].timestamp_ns, g.frames[c].state);
    const std::int64_t t0 = g.frames[c - 1].timestamp_ns;
    const std::int64_t tc = g.frames[c].timestamp_ns;
    const std::int64_t t2 = g.frames[c + 1].timestamp_ns;
    const ImuState lin = g.frames[c - 1].state;
    const PreintegratedImu merged =
        preintegrate(slice_imu(data.imu, t0, t2), lin.gyro_bias, lin.accel_bias,
                     opt.noise, opt.integrator);

    std::vector<ImuFactor> imu_kept;
    for (const ImuFactor& f : g.imu_factors) {
      if (f.frame_i == c || f.frame_j == c) continue;
      ImuFactor nf = f;
      if (nf.frame_i > c) --nf.frame_i;
      if (nf.frame_j > c) --nf.frame_j;
      imu_kept.push_back(std::move(nf));
    }
    imu_kept.push_back(make_imu_factor(c - 1, c, merged, lin));
    std::sort(imu_kept.begin(), imu_kept.end(),
              [](const ImuFactor& a, const ImuFactor& b) { return a.frame_i < b.frame_i; });
    g.imu_factors = std::move(imu_kept);

    std::vector<VisualFactor> vis_kept;
    for (const VisualFactor& f : g.visual_factors) {
      if (f.frame == c) continue;
      VisualFactor nf = f;
      if (nf.frame > c) --nf.frame;
      vis_kept.push_back(nf);
    }
    g.visual_factors = std::move(vis_kept);
    g.frames.erase(g.frames.begin() + c);
    forget_timestamp(tc);
    prune_weak_landmarks();
  }

  void enforce_window_policy() {
    while (static_cast<int>(g.frames.size()) - n_key > opt.max_recent) {
      const int c = n_key;  // oldest recent frame decides its fate
      const auto [parallax_px, tracked] = parallax_against_last_keyframe(c);
      if (select_keyframe(parallax_px, tracked, opt.keyframe)) {
        promote_oldest_recent();
      } else {
        drop_frame(c);
      }
    }
  }

  void optimize_window(std::int64_t timestamp_ns) {
    const OptimizeReport rep = optimize(&g, opt.optimize);
    WindowDiagnostics d;
    d.timestamp_ns = timestamp_ns;
    d.iterations = rep.iterations;
    d.initial_cost = rep.initial_cost;
    d.final_cost = rep.final_cost;
    d.breakdown = total_cost(g);
    diags.push_back(d);
    if (rep.diverged || !std::isfinite(rep.final_cost) ||
        !g.frames.back().state.position.allFinite()) {
      diverged = true;
      message = "optimization diverged";
    }
  }

  void append_frame(const FrameInput& f) {
    const int i = static_cast<int>(g.frames.size()) - 1;
    const ImuState prev = g.frames[i].state;
    const std::int64_t prev_ts = g.frames[i].timestamp_ns;
    const PreintegratedImu delta =
        preintegrate(slice_imu(data.imu, prev_ts, f.timestamp_ns), prev.gyro_bias,
                     prev.accel_bias, opt.noise, opt.integrator);
    Keyframe kf;
    kf.timestamp_ns = f.timestamp_ns;
    kf.state = predict(prev, delta, opt.noise);
    g.frames.push_back(kf);
    g.imu_factors.push_back(make_imu_factor(i, i + 1, delta, prev));
    const int j = i + 1;
    for (const FeatureObservation& obs : f.features) {
      if (g.landmarks.count(obs.landmark_id) > 0) {
        g.visual_factors.push_back({j, obs.landmark_id, obs.pixel});
      } else {
        tracks[obs.landmark_id][f.timestamp_ns] = obs.pixel;
      }
    }
    activate_tracks();
  }

  void try_initialize() {
    if (buffer.size() < 3) return;
    InitializeOptions init;
    init.min_parallax_px = opt.init_parallax_px;
    init.anchor = buffer_anchor;
    auto window = initialize_window(
        buffer,
        slice_imu(data.imu, buffer.front().timestamp_ns, buffer.back().timestamp_ns),
        data.camera, opt.noise, init);
    if (!window.has_value()) {
      // Keep the buffer bounded: dead-reckon past frames that slide out.
      if (static_cast<int>(buffer.size()) > opt.max_keyframes + opt.max_recent) {
        const std::int64_t t_old = buffer.front().timestamp_ns;
        record(t_old, buffer_anchor);
        buffer.erase(buffer.begin());
        buffer_anchor = propagate(
            buffer_anchor, slice_imu(data.imu, t_old, buffer.front().timestamp_ns),
            opt.noise, opt.integrator);
      }
      return;
    }
    g = std::move(*window);
    have_window = true;
    n_key = static_cast<int>(g.frames.size());
    for (const FrameInput& fi : buffer) {
      for (const FeatureObservation& obs : fi.features) {
        if (g.landmarks.count(obs.landmark_id) == 0) {
          tracks[obs.landmark_id][fi.timestamp_ns] = obs.pixel;
        }
      }
    }
    buffer.clear();
    while (n_key > opt.max_keyframes) {
      record(g.frames[0].timestamp_ns, g.frames[0].state);
      const std::int64_t t0 = g.frames[0].timestamp_ns;
      marginalize_oldest(&g);
      --n_key;
      forget_timestamp(t0);
      prune_weak_landmarks();
    }
    optimize_window(g.frames.back().timestamp_ns);
  }

  void feed(const FrameInput& f) {
    if (!have_window) {
      buffer.push_back(f);
      try_initialize();
      return;
    }
    append_frame(f);
    enforce_window_policy();
    optimize_window(f.timestamp_ns);
  }

  RunResult finish() {
    if (have_window) {
      for (const Keyframe& kf : g.frames) record(kf.timestamp_ns, kf.state);
    } else {
      message = "window initialization never succeeded";
      for (std::size_t i = 0; i < buffer.size(); ++i) {
        record(buffer[i].timestamp_ns, buffer_anchor);
        if (i + 1 < buffer.size()) {
          buffer_anchor = propagate(
              buffer_anchor,
              slice_imu(data.imu, buffer[i].timestamp_ns, buffer[i + 1].timestamp_ns),
              opt.noise, opt.integrator);
        }
      }
    }
    RunResult out;
    out.trajectory.reserve(rows.size());
    for (auto& [ts, row] : rows) {
      (void)ts;
      out.trajectory.push_back(std::move(row));
    }
    out.diagnostics = std::move(diags);
    out.diverged = diverged;
    out.message = message;
    return out;
  }
};

}  // namespace

void save_dataset(const std::string& dir, const SimulationResult& sim,
                  const CameraModel& camera) {
  std::filesystem::create_directories(dir);
  write_imu_csv(join(dir, "imu.csv"), sim.imu, sim.imu_timestamps_ns);
  write_feature_csv(join(dir, "features.csv"), sim.features);
  write_camera_json(join(dir, "camera.json"), camera);
  std::vector<TrajectoryRow> gt;
  gt.reserve(sim.ground_truth.size());
  for (const TimedState& s : sim.ground_truth) {
    TrajectoryRow row;
    row.timestamp_ns = s.timestamp_ns;
    row.state = s.state;
    gt.push_back(row);
  }
  write_trajectory_csv(join(dir, "groundtruth.csv"), gt);
  write_landmarks_csv(join(dir, "landmarks.csv"), sim.landmarks);
}

Dataset load_dataset(const std::string& dir) {
  Dataset d;
  d.imu = read_imu_csv(join(dir, "imu.csv"));
  d.features = read_feature_csv(join(dir, "features.csv"));
  d.camera = read_camera_json(join(dir, "camera.json"));
  d.ground_truth = read_trajectory_csv(join(dir, "groundtruth.csv"));
  d.landmarks = read_landmarks_csv(join(dir, "landmarks.csv"));
  return d;
}

RunResult run_filter(const Dataset& data, const FilterOptions& opt) {
  RunResult out;
  const std::vector<FrameInput> frames = group_frames(data.features, data.camera);
  if (frames.empty()) {
    out.message = "no camera frames in dataset";
    return out;
  }

  FilterState fs;
  fs.imu = anchor_state(data, opt.initial_state);
  fs.covariance = MatX::Zero(kStateDim, kStateDim);
  fs.covariance.diagonal() = opt.initial_sigma.cwiseProduct(opt.initial_sigma);

  UpdateOptions update;
  update.gate_chi2 = opt.gate_chi2;

  std::map<std::int64_t, std::vector<LandmarkView>> pending;
  std::map<std::int64_t, int> last_seen;  // landmark -> frame index

  for (int k = 0; k < static_cast<int>(frames.size()); ++k) {
    const FrameInput& f = frames[k];
    try {
      if (k > 0) {
        const auto samples =
            slice_imu(data.imu, frames[k - 1].timestamp_ns, f.timestamp_ns);
        fs = filter_propagate(fs, samples, opt.noise, opt.integrator);
      }
      std::vector<FeatureObservation> active;
      std::vector<FeatureObservation> fresh;
      for (const FeatureObservation& obs : f.features) {
        (fs.landmarks.count(obs.landmark_id) > 0 ? active : fresh).push_back(obs);
        last_seen[obs.landmark_id] = k;
      }
      if (!active.empty()) fs = filter_update(fs, active, data.camera, nullptr, update);
      for (const FeatureObservation& obs : fresh) {
        pending[obs.landmark_id].push_back({fs.imu, obs.pixel});
      }
      for (auto it = pending.begin(); it != pending.end();) {
        if (static_cast<int>(fs.landmarks.size()) >= opt.max_landmarks) break;
        if (it->second.size() >= 2 &&
            initialize_landmark(&fs, it->first, it->second, data.camera)) {
          it = pending.erase(it);
        } else {
          ++it;
        }
      }
      // Retire tracks that left the field of view.
      for (auto it = last_seen.begin(); it != last_seen.end();) {
        if (k - it->second >= opt.stale_after_frames) {
          if (fs.landmarks.count(it->first) > 0) {
            fs = marginalize_landmark(fs, it->first);
          }
          pending.erase(it->first);
          it = last_seen.erase(it);
        } else {
          ++it;
        }
      }
    } catch (const EstimationError& e) {
      out.diverged = true;
      out.message = e.what();
      break;
    }
    if (!fs.imu.position.allFinite() || !fs.covariance.allFinite() ||
        fs.covariance.diagonal().maxCoeff() > 1e8) {
      out.diverged = true;
      out.message = "filter covariance exploded";
      break;
    }
    TrajectoryRow row;
    row.timestamp_ns = f.timestamp_ns;
    row.state = fs.imu;
    row.covariance_diagonal = fs.covariance.diagonal().head(kStateDim);
    out.trajectory.push_back(row);
  }
  return out;
}

RunResult run_smoother(const Dataset& data, const SmootherOptions& opt) {
  const std::vector<FrameInput> frames = group_frames(data.features, data.camera);
  if (frames.empty()) {
    RunResult out;
    out.message = "no camera frames in dataset";
    return out;
  }
  SmootherRunner runner(data, opt);
  for (const FrameInput& f : frames) {
    try {
      runner.feed(f);
    } catch (const EstimationError& e) {
      runner.diverged = true;
      runner.message = e.what();
      break;
    }
    if (runner.diverged) break;
  }
  return runner.finish();
}

void write_diagnostics_json(const std::string& path,
                            const std::vector<WindowDiagnostics>& diagnostics) {
  nlohmann::json windows = nlohmann::json::array();
  for (const WindowDiagnostics& d : diagnostics) {
    windows.push_back({{"timestamp_ns", d.timestamp_ns},
                       {"iterations", d.iterations},
                       {"initial_cost", d.initial_cost},
                       {"final_cost", d.final_cost},
                       {"cost",
                        {{"prior", d.breakdown.prior},
                         {"imu", d.breakdown.imu},
                         {"visual", d.breakdown.visual},
                         {"total", d.breakdown.total()}}}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << nlohmann::json{{"windows", std::move(windows)}}.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace vinkit
