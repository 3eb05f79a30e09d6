#include "vinkit/sim.hpp"

#include <cmath>
#include <random>

namespace vinkit {

namespace {

// V = integral of Exp(tau*w) over [0,h]: maps a constant body-frame input
// to the exact velocity increment of the zero-order-hold system.
// D = integral of (h - tau)*Exp(tau*w): same for the position increment.
void so3_hold_integrals(const Vec3& w, double h, Mat3* v_out, Mat3* d_out) {
  const double a = w.norm();
  const double ah = a * h;
  double v1, c1, c2;
  if (ah < 1e-4) {
    v1 = 0.5 * h * h * (1.0 - ah * ah / 12.0);
    c1 = h * h * h / 6.0 * (1.0 - ah * ah / 20.0);
    c2 = h * h * h * h / 24.0 * (1.0 - ah * ah / 30.0);
  } else {
    v1 = (1.0 - std::cos(ah)) / (a * a);
    c1 = (ah - std::sin(ah)) / (a * a * a);
    c2 = (0.5 * h * h - v1) / (a * a);
  }
  const Mat3 s = skew(w);
  const Mat3 s2 = s * s;
  *v_out = h * Mat3::Identity() + v1 * s + c1 * s2;
  *d_out = 0.5 * h * h * Mat3::Identity() + c1 * s + c2 * s2;
}

UnitQuaternion yaw_quaternion(double psi) {
  return UnitQuaternion(std::cos(0.5 * psi), 0.0, 0.0, std::sin(0.5 * psi));
}

Vec3 random_unit(std::mt19937_64& rng, std::normal_distribution<double>& gauss) {
  Vec3 dir;
  do {
    dir = Vec3(gauss(rng), gauss(rng), gauss(rng));
  } while (dir.norm() < 1e-6);
  return dir.normalized();
}

}  // namespace

TrajectoryFamily trajectory_family_from_string(const std::string& name) {
  if (name == "circle") return TrajectoryFamily::kCircle;
  if (name == "sinusoid3d") return TrajectoryFamily::kSinusoid3d;
  if (name == "figure_eight") return TrajectoryFamily::kFigureEight;
  throw ContractViolation("unknown trajectory family: " + name);
}

std::string to_string(TrajectoryFamily family) {
  switch (family) {
    case TrajectoryFamily::kCircle: return "circle";
    case TrajectoryFamily::kSinusoid3d: return "sinusoid3d";
    case TrajectoryFamily::kFigureEight: return "figure_eight";
  }
  throw ContractViolation("unknown trajectory family enum value");
}

AttitudeMode default_attitude(TrajectoryFamily family) {
  return family == TrajectoryFamily::kSinusoid3d ? AttitudeMode::kFixed
                                                 : AttitudeMode::kYawFollowing;
}

AnalyticTrajectory::AnalyticTrajectory(TrajectoryFamily family, double radius_m,
                                       double rate_rad_s, double amplitude_m,
                                       AttitudeMode attitude)
    : family_(family),
      radius_(radius_m),
      rate_(rate_rad_s),
      amplitude_(amplitude_m),
      attitude_(attitude) {
  VINKIT_REQUIRE(rate_ > 0.0, "angular rate must be positive");
  if (family_ == TrajectoryFamily::kSinusoid3d) {
    VINKIT_REQUIRE(amplitude_ >= 0.0, "amplitude must be non-negative");
  } else {
    VINKIT_REQUIRE(radius_ > 0.0, "radius must be positive");
  }
  if (attitude_ == AttitudeMode::kYawFollowing) yaw0_ = yaw(0.0);

  // Every closed form is cross-checked against finite differences before
  // the trajectory is allowed to drive a simulation.
  const double period = 2.0 * M_PI / rate_;
  const double eps = 1e-5;
  for (int i = 0; i <= 32; ++i) {
    const double t = period * i / 32.0 + eps;
    if (attitude_ == AttitudeMode::kYawFollowing) {
      VINKIT_REQUIRE(velocity(t).head<2>().norm() > 1e-3,
                     "yaw-following attitude needs horizontal motion");
    }
    const Vec3 v_fd = (position(t + eps) - position(t - eps)) / (2.0 * eps);
    VINKIT_REQUIRE((v_fd - velocity(t)).norm() < 1e-8, "velocity disagrees with dp/dt");
    const Vec3 a_fd = (velocity(t + eps) - velocity(t - eps)) / (2.0 * eps);
    VINKIT_REQUIRE((a_fd - acceleration(t)).norm() < 1e-8, "acceleration disagrees with dv/dt");
    const Vec3 w_fd = boxminus(orientation(t + eps), orientation(t - eps)) / (2.0 * eps);
    VINKIT_REQUIRE((w_fd - body_rate(t)).norm() < 1e-8, "body rate disagrees with dq/dt");
  }
}

Vec3 AnalyticTrajectory::position(double t) const {
  const double th = rate_ * t;
  switch (family_) {
    case TrajectoryFamily::kCircle:
      return radius_ * Vec3(std::sin(th), 1.0 - std::cos(th), 0.0);
    case TrajectoryFamily::kSinusoid3d:
      return amplitude_ *
             Vec3(std::sin(th), 0.8 * (1.0 - std::cos(th)), 0.3 * std::sin(2.0 * th));
    case TrajectoryFamily::kFigureEight:
      return radius_ * Vec3(std::sin(th), 0.5 * std::sin(2.0 * th), 0.0);
  }
  throw ContractViolation("unknown trajectory family enum value");
}

Vec3 AnalyticTrajectory::velocity(double t) const {
  const double th = rate_ * t;
  switch (family_) {
    case TrajectoryFamily::kCircle:
      return radius_ * rate_ * Vec3(std::cos(th), std::sin(th), 0.0);
    case TrajectoryFamily::kSinusoid3d:
      return amplitude_ * rate_ *
             Vec3(std::cos(th), 0.8 * std::sin(th), 0.6 * std::cos(2.0 * th));
    case TrajectoryFamily::kFigureEight:
      return radius_ * rate_ * Vec3(std::cos(th), std::cos(2.0 * th), 0.0);
  }
  throw ContractViolation("unknown trajectory family enum value");
}

Vec3 AnalyticTrajectory::acceleration(double t) const {
  const double th = rate_ * t;
  const double w2 = rate_ * rate_;
  switch (family_) {
    case TrajectoryFamily::kCircle:
      return radius_ * w2 * Vec3(-std::sin(th), std::cos(th), 0.0);
    case TrajectoryFamily::kSinusoid3d:
      return amplitude_ * w2 *
             Vec3(-std::sin(th), 0.8 * std::cos(th), -1.2 * std::sin(2.0 * th));
    case TrajectoryFamily::kFigureEight:
      return radius_ * w2 * Vec3(-std::sin(th), -2.0 * std::sin(2.0 * th), 0.0);
  }
  throw ContractViolation("unknown trajectory family enum value");
}

double AnalyticTrajectory::yaw(double t) const {
  const Vec3 v = velocity(t);
  return std::atan2(v.y(), v.x());
}

double AnalyticTrajectory::yaw_rate(double t) const {
  const Vec3 v = velocity(t);
  const Vec3 a = acceleration(t);
  const double h2 = v.x() * v.x() + v.y() * v.y();
  return (v.x() * a.y() - v.y() * a.x()) / h2;
}

UnitQuaternion AnalyticTrajectory::orientation(double t) const {
  if (attitude_ == AttitudeMode::kFixed) return UnitQuaternion();
  return yaw_quaternion(yaw(t) - yaw0_);
}

Vec3 AnalyticTrajectory::body_rate(double t) const {
  if (attitude_ == AttitudeMode::kFixed) return Vec3::Zero();
  return Vec3(0.0, 0.0, yaw_rate(t));
}

Vec3 true_specific_force(const AnalyticTrajectory& trajectory, double t,
                         const Vec3& gravity_world) {
  return trajectory.orientation(t).conjugate().rotate(trajectory.acceleration(t) -
                                                      gravity_world);
}

CameraModel forward_camera() {
  CameraModel m;
  m.fx = 460.0;
  m.fy = 455.0;
  m.cx = 319.5;
  m.cy = 239.5;
  m.width = 640;
  m.height = 480;
  m.k << -0.1, 0.02, 0.001, 0.005, -0.002, 0.0003;
  m.p << 2e-4, -3e-4;
  m.r_ci << 0, -1, 0, 0, 0, -1, 1, 0, 0;  // optical axis along body x
  m.t_ci = Vec3(0.02, -0.01, 0.005);
  m.sigma_px = 1.0;
  return m;
}

AnalyticTrajectory make_trajectory(const Scenario& scenario) {
  const AttitudeMode attitude =
      scenario.attitude.value_or(default_attitude(scenario.family));
  return AnalyticTrajectory(scenario.family, scenario.radius_m, scenario.rate_rad_s,
                            scenario.amplitude_m, attitude);
}

SimulationResult generate(const Scenario& scenario) {
  VINKIT_REQUIRE(scenario.duration_s > 0.0, "duration must be positive");
  VINKIT_REQUIRE(scenario.imu_rate_hz > 0.0 && scenario.camera_rate_hz > 0.0,
                 "rates must be positive");
  VINKIT_REQUIRE(scenario.imu_rate_hz >= scenario.camera_rate_hz,
                 "IMU must sample at least as fast as the camera");
  const double ratio_real = scenario.imu_rate_hz / scenario.camera_rate_hz;
  const int ratio = static_cast<int>(std::llround(ratio_real));
  VINKIT_REQUIRE(std::abs(ratio_real - ratio) < 1e-9,
                 "IMU rate must be an integer multiple of the camera rate");
  const double step_ns_real = 1e9 / scenario.imu_rate_hz;
  const std::int64_t step_ns = std::llround(step_ns_real);
  VINKIT_REQUIRE(std::abs(step_ns_real - static_cast<double>(step_ns)) < 1e-6,
                 "IMU rate must divide the nanosecond grid");
  VINKIT_REQUIRE(scenario.landmark_count >= 0, "landmark count must be non-negative");
  VINKIT_REQUIRE(scenario.shell_inner_m > 0.0 &&
                     scenario.shell_outer_m >= scenario.shell_inner_m,
                 "landmark shell must satisfy 0 < inner <= outer");

  const AnalyticTrajectory traj = make_trajectory(scenario);
  const int steps = static_cast<int>(std::llround(scenario.duration_s * scenario.imu_rate_hz));
  VINKIT_REQUIRE(steps >= 1, "scenario too short for one IMU interval");
  const int nodes = steps + 1;

  std::mt19937_64 rng(scenario.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SimulationResult out;

  // Landmarks first so their draw order is independent of the stream
  // lengths: uniform shell offsets around uniformly sampled path points.
  std::uniform_real_distribution<double> anchor_time(0.0, scenario.duration_s);
  std::uniform_real_distribution<double> shell(scenario.shell_inner_m, scenario.shell_outer_m);
  out.landmarks.reserve(scenario.landmark_count);
  for (int id = 0; id < scenario.landmark_count; ++id) {
    const Vec3 at = traj.position(anchor_time(rng));
    out.landmarks.emplace_back(id, Vec3(at + shell(rng) * random_unit(rng, gauss)));
  }

  // Increment matching: pick the constant rate and specific force whose
  // zero-order-hold solution interpolates the analytic orientation and
  // velocity at the nodes, then integrate the position under exactly those
  // inputs. That closes the loop between generate() and propagate().
  // Fixed draw order per step: white noise for sample i, then the bias walk
  // to node i+1 (exact discretization of the white drive).
  const Vec3 g_w = scenario.noise.gravity_world();
  out.imu.resize(nodes);
  out.imu_timestamps_ns.resize(nodes);
  out.ground_truth.resize(nodes);

  const auto node_time = [&](int i) {
    return static_cast<double>(static_cast<std::int64_t>(i) * step_ns) * 1e-9;
  };
  {
    ImuState& s0 = out.ground_truth[0].state;
    s0.position = traj.position(0.0);
    s0.orientation = traj.orientation(0.0);
    s0.velocity = traj.velocity(0.0);
    s0.gyro_bias = scenario.initial_gyro_bias;
    s0.accel_bias = scenario.initial_accel_bias;
    out.ground_truth[0].timestamp_ns = 0;
    out.imu_timestamps_ns[0] = 0;
  }

  Vec3 w_clean = Vec3::Zero(), a_clean = Vec3::Zero();
  double h_last = 1.0 / scenario.imu_rate_hz;
  for (int i = 0; i < steps; ++i) {
    const ImuState& cur = out.ground_truth[i].state;
    const double t_next = node_time(i + 1);
    const double h = t_next - node_time(i);
    const UnitQuaternion q_next = traj.orientation(t_next);
    const Vec3 v_next = traj.velocity(t_next);

    w_clean = boxminus(q_next, cur.orientation) / h;
    Mat3 v_int, d_int;
    so3_hold_integrals(w_clean, h, &v_int, &d_int);
    const Mat3 r_i = quat_to_rotmat(cur.orientation);
    a_clean = v_int.partialPivLu().solve(r_i.transpose() * (v_next - cur.velocity - g_w * h));

    Vec3 gyro = w_clean + cur.gyro_bias;
    Vec3 accel = a_clean + cur.accel_bias;
    if (scenario.emit_noise) {
      const double sg = scenario.noise.sigma_g / std::sqrt(h);
      const double sa = scenario.noise.sigma_a / std::sqrt(h);
      gyro += sg * Vec3(gauss(rng), gauss(rng), gauss(rng));
      accel += sa * Vec3(gauss(rng), gauss(rng), gauss(rng));
    }
    out.imu[i] = ImuSample{node_time(i), gyro, accel};
    h_last = h;

    out.imu_timestamps_ns[i + 1] = static_cast<std::int64_t>(i + 1) * step_ns;
    out.ground_truth[i + 1].timestamp_ns = out.imu_timestamps_ns[i + 1];
    ImuState& next = out.ground_truth[i + 1].state;
    next.position =
        cur.position + cur.velocity * h + 0.5 * h * h * g_w + r_i * (d_int * a_clean);
    next.orientation = q_next;
    next.velocity = v_next;
    next.gyro_bias = cur.gyro_bias;
    next.accel_bias = cur.accel_bias;
    if (scenario.emit_noise) {
      const double sqrt_h = std::sqrt(h);
      next.gyro_bias +=
          scenario.noise.sigma_bg * sqrt_h * Vec3(gauss(rng), gauss(rng), gauss(rng));
      next.accel_bias +=
          scenario.noise.sigma_ba * sqrt_h * Vec3(gauss(rng), gauss(rng), gauss(rng));
    }
  }

  // The final node repeats the last hold values under its own bias/noise.
  {
    const ImuState& last = out.ground_truth[steps].state;
    Vec3 gyro = w_clean + last.gyro_bias;
    Vec3 accel = a_clean + last.accel_bias;
    if (scenario.emit_noise) {
      gyro += scenario.noise.sigma_g / std::sqrt(h_last) *
              Vec3(gauss(rng), gauss(rng), gauss(rng));
      accel += scenario.noise.sigma_a / std::sqrt(h_last) *
               Vec3(gauss(rng), gauss(rng), gauss(rng));
    }
    out.imu[steps] = ImuSample{node_time(steps), gyro, accel};
  }

  // Camera frames on every ratio-th node; visibility decides emission, so
  // the pixel-noise draw order is a pure function of the geometry.
  for (int i = 0; i < nodes; i += ratio) {
    const std::int64_t frame = i / ratio;
    for (const auto& [id, l_w] : out.landmarks) {
      const Observation obs = observe(out.ground_truth[i].state, l_w, scenario.camera, true);
      if (!obs.ok()) continue;
      Vec2 pixel = obs.pixel;
      if (scenario.emit_noise) {
        pixel += scenario.camera.sigma_px * Vec2(gauss(rng), gauss(rng));
      }
      if (scenario.quantize_pixels) {
        pixel = Vec2(std::round(pixel.x()), std::round(pixel.y()));
      }
      if (!in_image(scenario.camera, pixel)) continue;
      FeatureObservation f;
      f.timestamp_ns = out.imu_timestamps_ns[i];
      f.frame_id = frame;
      f.landmark_id = id;
      f.pixel = pixel;
      out.features.push_back(f);
    }
  }

  return out;
}

}  // namespace vinkit
