#pragma once

#include "vinkit/manifold.hpp"
#include "vinkit/types.hpp"

#include <memory>
#include <random>
#include <vector>

namespace vinkit {

// World-frame inertial state. orientation is q_WI (IMU-to-world), velocity
// is expressed in the world frame, biases in the IMU frame.
struct ImuState {
  Vec3 position = Vec3::Zero();        // t_WI
  UnitQuaternion orientation;          // q_WI
  Vec3 velocity = Vec3::Zero();        // v_WI
  Vec3 gyro_bias = Vec3::Zero();
  Vec3 accel_bias = Vec3::Zero();
};

// Error-state blocks, in order: position, attitude, velocity, gyro bias,
// accel bias. The attitude error is a right perturbation,
//   q_true = q (x) quat_exp(dtheta),
// so all 15 tangent coordinates live in the frame of the estimate.
inline constexpr int kIdxPos = 0;
inline constexpr int kIdxAtt = 3;
inline constexpr int kIdxVel = 6;
inline constexpr int kIdxBg = 9;
inline constexpr int kIdxBa = 12;
inline constexpr int kStateDim = 15;
inline constexpr int kNoiseDim = 12;  // (n_g, n_a, n_bg, n_ba)

ImuState boxplus(const ImuState& x, const Vec15& tau);
Vec15 boxminus(const ImuState& y, const ImuState& x);

struct ImuSample {
  double t = 0.0;  // seconds
  Vec3 gyro = Vec3::Zero();   // rad/s, bias and noise included
  Vec3 accel = Vec3::Zero();  // m/s^2 specific force, bias and noise included
};

// Continuous-time noise densities (units per sqrt(Hz)) plus the gravity
// magnitude. Gravity points down: g_W = (0, 0, -gravity). A stationary
// accelerometer at identity attitude therefore reads (0, 0, +gravity).
struct NoiseParams {
  double sigma_g = 1.7e-4;   // rad/s/sqrt(Hz)
  double sigma_a = 2.0e-3;   // m/s^2/sqrt(Hz)
  double sigma_bg = 1.9e-5;  // rad/s^2/sqrt(Hz)
  double sigma_ba = 3.0e-3;  // m/s^3/sqrt(Hz)
  double gravity = 9.81;

  Vec3 gravity_world() const { return Vec3(0.0, 0.0, -gravity); }
  // diag(sigma_g^2 I, sigma_a^2 I, sigma_bg^2 I, sigma_ba^2 I)
  Mat12 psd() const;
};

enum class Integrator { kEuler, kMidpoint, kRk4 };

Integrator integrator_from_string(const std::string& name);
std::string to_string(Integrator integrator);

// Synthesizes the sample an ideal-clock IMU produces at time t:
//   gyro  = omega_body + b_g + n_g
//   accel = R_IW (a_W - g_W) + b_a + n_a
// dt is the sampling interval used to turn densities into per-sample
// standard deviations (sigma / sqrt(dt)); rng == nullptr emits noise-free.
ImuSample measure(double t, const ImuState& state, const Vec3& omega_body,
                  const Vec3& accel_world, const NoiseParams& noise, double dt,
                  std::mt19937_64* rng);

// Integrates the state over [samples.front().t, samples.back().t].
// Measurements are zero-order held at the left sample of each interval, so
// N samples drive N-1 steps; the integrator choice controls the quadrature
// of the translation states (rotation steps are exact under the hold).
ImuState propagate(const ImuState& state, const std::vector<ImuSample>& samples,
                   const NoiseParams& noise, Integrator integrator);

// Relative motion over an interval, integrated from zero initial conditions
// at the linearization biases; independent of any world-frame state.
// covariance orders the errors (d_alpha, d_theta, d_beta, d_bg, d_ba) to
// line up with the state error blocks.
struct PreintegratedImu {
  double dt = 0.0;
  Vec3 alpha = Vec3::Zero();  // position delta, start-frame coordinates
  Vec3 beta = Vec3::Zero();   // velocity delta, start-frame coordinates
  UnitQuaternion gamma;       // rotation delta
  Vec3 gyro_bias_lin = Vec3::Zero();
  Vec3 accel_bias_lin = Vec3::Zero();
  Mat15 covariance = Mat15::Zero();
  // d(alpha, theta, beta) / d(bg, ba) at the linearization point.
  Eigen::Matrix<double, 9, 6> bias_jacobian = Eigen::Matrix<double, 9, 6>::Zero();
  // Retained so corrections beyond the first-order regime can re-integrate.
  std::shared_ptr<const std::vector<ImuSample>> samples;
  NoiseParams noise;
  Integrator integrator = Integrator::kRk4;
};

PreintegratedImu preintegrate(const std::vector<ImuSample>& samples,
                              const Vec3& gyro_bias, const Vec3& accel_bias,
                              const NoiseParams& noise, Integrator integrator,
                              int covariance_order = 3);

// Bias shifts up to this infinity norm are folded in with the first-order
// Jacobians; larger shifts trigger a full re-integration of the samples.
inline constexpr double kRepreintegrationThreshold = 0.05;

PreintegratedImu bias_correct(const PreintegratedImu& preint, const Vec3& gyro_bias,
                              const Vec3& accel_bias,
                              double threshold = kRepreintegrationThreshold);

// Composes a start state with preintegrated deltas over preint.dt:
//   position += velocity dt + 1/2 g dt^2 + R alpha
//   velocity += g dt + R beta
//   orientation = q (x) gamma
// Biases pass through (their mean is a random walk).
ImuState predict(const ImuState& state, const PreintegratedImu& preint,
                 const NoiseParams& noise);

// Continuous-time error dynamics d/dt dx = F dx + G n evaluated at the
// current estimate and (bias-corrected) sample.
void error_jacobians(const ImuState& state, const ImuSample& sample, Mat15* F,
                     Mat15x12* G);

// Truncated transition matrix Phi = sum_{i<=order} (F dt)^i / i! and the
// matching process noise
//   Qk = integral_0^dt Phi(dt, s) G Qc G^T Phi(dt, s)^T ds
// evaluated with composite trapezoidal quadrature on `order` panels.
void discretize(const Mat15& F, const Mat15x12& G, const Mat12& Qc, double dt,
                int order, Mat15* Phi, Mat15* Qk);

// P <- Phi P Phi^T + Qk, re-symmetrized. P must be PSD on entry (minimum
// eigenvalue >= -1e-9) or the call is rejected.
Mat15 propagate_covariance(const Mat15& P, const Mat15& Phi, const Mat15& Qk);

// Mean, transition and noise accumulated jointly across a sample stream;
// the workhorse behind filter propagation. Phi and Qk may be null.
void propagate_interval(const ImuState& state, const std::vector<ImuSample>& samples,
                        const NoiseParams& noise, Integrator integrator, int order,
                        ImuState* end_state, Mat15* Phi, Mat15* Qk);

}  // namespace vinkit
