#pragma once

#include "vinkit/camera.hpp"
#include "vinkit/imu.hpp"
#include "vinkit/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vinkit {

enum class TrajectoryFamily { kCircle, kSinusoid3d, kFigureEight };
enum class AttitudeMode { kYawFollowing, kFixed };

TrajectoryFamily trajectory_family_from_string(const std::string& name);
std::string to_string(TrajectoryFamily family);

// Closed-form trajectory with analytic derivatives. All families start at
// the origin with identity orientation, so the world frame doubles as the
// first body frame. Yaw-following attitude turns the body x axis with the
// horizontal velocity (relative to its initial heading); construction
// cross-checks every analytic derivative against finite differences.
class AnalyticTrajectory {
 public:
  AnalyticTrajectory(TrajectoryFamily family, double radius_m, double rate_rad_s,
                     double amplitude_m, AttitudeMode attitude);

  Vec3 position(double t) const;
  Vec3 velocity(double t) const;
  Vec3 acceleration(double t) const;
  UnitQuaternion orientation(double t) const;
  Vec3 body_rate(double t) const;

  AttitudeMode attitude() const { return attitude_; }

 private:
  double yaw(double t) const;
  double yaw_rate(double t) const;

  TrajectoryFamily family_;
  double radius_, rate_, amplitude_;
  AttitudeMode attitude_;
  double yaw0_ = 0.0;
};

AttitudeMode default_attitude(TrajectoryFamily family);

// Accelerometer reading along the trajectory, before bias and noise.
Vec3 true_specific_force(const AnalyticTrajectory& trajectory, double t,
                         const Vec3& gravity_world);

// Forward-looking camera (optical axis along body x) with a mild lens.
CameraModel forward_camera();

struct Scenario {
  TrajectoryFamily family = TrajectoryFamily::kCircle;
  double radius_m = 3.0;
  double rate_rad_s = 0.6;
  double amplitude_m = 1.0;
  std::optional<AttitudeMode> attitude;  // family default when unset

  CameraModel camera = forward_camera();
  NoiseParams noise;
  bool emit_noise = true;
  bool quantize_pixels = false;

  double imu_rate_hz = 200.0;
  double camera_rate_hz = 20.0;
  double duration_s = 10.0;
  std::uint64_t seed = 1;

  int landmark_count = 200;
  double shell_inner_m = 1.5;
  double shell_outer_m = 5.0;
  Vec3 initial_gyro_bias = Vec3::Zero();
  Vec3 initial_accel_bias = Vec3::Zero();
};

AnalyticTrajectory make_trajectory(const Scenario& scenario);

struct TimedState {
  std::int64_t timestamp_ns = 0;
  ImuState state;
};

struct SimulationResult {
  std::vector<ImuSample> imu;
  std::vector<std::int64_t> imu_timestamps_ns;  // parallel to imu
  std::vector<FeatureObservation> features;
  std::vector<TimedState> ground_truth;  // IMU rate, biases included
  std::vector<std::pair<std::int64_t, Vec3>> landmarks;
};

// Deterministic synthetic dataset for the scenario. The emitted IMU stream
// is increment-matched: with noise off, zero-order-hold propagation lands
// on the ground-truth nodes to integrator accuracy, which is what makes
// the simulator usable as an oracle.
SimulationResult generate(const Scenario& scenario);

}  // namespace vinkit
