#pragma once

#include "vinkit/filter.hpp"
#include "vinkit/io.hpp"
#include "vinkit/smoother.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vinkit {

// A dataset directory as the simulator lays it out: imu.csv, features.csv,
// camera.json, groundtruth.csv, landmarks.csv.
struct Dataset {
  ImuCsv imu;
  std::vector<FeatureObservation> features;  // distorted, straight off the sensor
  CameraModel camera;
  std::vector<TrajectoryRow> ground_truth;
  std::vector<std::pair<std::int64_t, Vec3>> landmarks;
};

void save_dataset(const std::string& dir, const SimulationResult& sim,
                  const CameraModel& camera);
Dataset load_dataset(const std::string& dir);

struct FilterOptions {
  Integrator integrator = Integrator::kRk4;
  NoiseParams noise;
  // In-state landmark budget; the stalest track is marginalized to make room.
  int max_landmarks = 40;
  // Landmarks unseen for this many frames are marginalized out.
  int stale_after_frames = 3;
  double gate_chi2 = kVisualGateChi2;
  // Start state; the first ground-truth row when unset. Estimating from an
  // unanchored start is meaningless under the gauge freedom, so runs anchor
  // here rather than at identity.
  std::optional<ImuState> initial_state;
  // Per-axis 1-sigma of the initial error state, matching however
  // initial_state was produced.
  Vec15 initial_sigma = Vec15::Constant(1e-6);
};

struct SmootherOptions {
  Integrator integrator = Integrator::kRk4;
  NoiseParams noise;
  int max_keyframes = kDefaultKeyframeWindow;
  int max_recent = kDefaultRecentWindow;
  int max_landmarks = 50;
  KeyframePolicy keyframe;
  OptimizeOptions optimize;
  double init_parallax_px = 10.0;
  std::optional<ImuState> initial_state;  // anchor; first ground-truth row when unset
};

// One entry per optimized window, in frame order.
struct WindowDiagnostics {
  std::int64_t timestamp_ns = 0;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  CostBreakdown breakdown;  // at the optimum
};

struct RunResult {
  // One row per camera frame, timestamp-ascending. Filter rows carry the
  // covariance diagonal; smoother rows do not.
  std::vector<TrajectoryRow> trajectory;
  std::vector<WindowDiagnostics> diagnostics;  // smoother only
  bool diverged = false;
  std::string message;  // why the run stopped early; empty when healthy
};

RunResult run_filter(const Dataset& data, const FilterOptions& options = {});
RunResult run_smoother(const Dataset& data, const SmootherOptions& options = {});

void write_diagnostics_json(const std::string& path,
                            const std::vector<WindowDiagnostics>& diagnostics);

}  // namespace vinkit
