#pragma once

#include "vinkit/camera.hpp"
#include "vinkit/imu.hpp"
#include "vinkit/sim.hpp"
#include "vinkit/types.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vinkit {

// Config-content problems: unknown keys, wrong types, out-of-range values.
// Carries the offending key in the message. File-level problems use IoError
// from types.hpp so the CLI can map the two to distinct exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ImuCsv {
  std::vector<ImuSample> samples;
  std::vector<std::int64_t> timestamps_ns;  // parallel to samples
};

// `timestamp_ns, wx, wy, wz, ax, ay, az`, header line required, strictly
// increasing timestamps. Sample times are the timestamps in seconds.
void write_imu_csv(const std::string& path, const std::vector<ImuSample>& samples,
                   const std::vector<std::int64_t>& timestamps_ns);
ImuCsv read_imu_csv(const std::string& path);

// `timestamp_ns, frame_id, landmark_id, u_px, v_px`.
void write_feature_csv(const std::string& path,
                       const std::vector<FeatureObservation>& features);
std::vector<FeatureObservation> read_feature_csv(const std::string& path);

// One estimate row: the full state and, when the estimator tracks one, the
// diagonal of its 15x15 error covariance. A file carries the covariance
// columns either on every row or on none.
struct TrajectoryRow {
  std::int64_t timestamp_ns = 0;
  ImuState state;
  std::optional<Vec15> covariance_diagonal;
};

// `timestamp_ns, tx, ty, tz, qw, qx, qy, qz, vx, vy, vz, bgx, bgy, bgz,
//  bax, bay, baz[, cov0..cov14]`.
void write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectoryRow>& rows);
std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path);

// `id, x, y, z`.
void write_landmarks_csv(const std::string& path,
                         const std::vector<std::pair<std::int64_t, Vec3>>& landmarks);
std::vector<std::pair<std::int64_t, Vec3>> read_landmarks_csv(const std::string& path);

// Intrinsics, distortion, image size, pixel noise, and the IMU-to-camera
// extrinsic stored as a wxyz quaternion plus translation.
void write_camera_json(const std::string& path, const CameraModel& model);
CameraModel read_camera_json(const std::string& path);

// Scenario document; every key optional with the struct's defaults, unknown
// keys rejected. Schema mirrors the Scenario fields (see README).
void write_scenario_json(const std::string& path, const Scenario& scenario);
Scenario read_scenario_json(const std::string& path);

// Shape the eval module consumes.
std::vector<TimedState> to_timed_states(const std::vector<TrajectoryRow>& rows);

}  // namespace vinkit
