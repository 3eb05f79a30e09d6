// Random-instance generators shared by the module suites.
#pragma once

#include "oracles.hpp"
#include "vinkit/imu.hpp"

#include <random>
#include <vector>

namespace testsup {

inline vinkit::ImuState random_state(std::mt19937_64& rng) {
  vinkit::ImuState x;
  x.position = oracles::random_vec3(rng, 5.0);
  x.orientation = vinkit::quat_exp(oracles::random_vec3(rng, 2.0));
  x.velocity = oracles::random_vec3(rng, 3.0);
  x.gyro_bias = oracles::random_vec3(rng, 0.05);
  x.accel_bias = oracles::random_vec3(rng, 0.2);
  return x;
}

inline vinkit::ImuSample random_sample(std::mt19937_64& rng, double t,
                                       double w_scale = 1.5, double a_scale = 8.0) {
  vinkit::ImuSample s;
  s.t = t;
  s.gyro = oracles::random_vec3(rng, w_scale);
  s.accel = oracles::random_vec3(rng, a_scale);
  return s;
}

// n samples at the given rate starting at t0, values drawn independently.
inline std::vector<vinkit::ImuSample> random_stream(std::mt19937_64& rng, int n,
                                                    double rate, double t0 = 0.0) {
  std::vector<vinkit::ImuSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    out.push_back(random_sample(rng, t0 + i / rate));
  }
  return out;
}

// Smooth band-limited stream: sinusoid mixtures with randomized phases,
// closer to rigid-body motion than independent per-sample draws.
inline std::vector<vinkit::ImuSample> smooth_stream(std::mt19937_64& rng, int n,
                                                    double rate, double w_amp = 0.8,
                                                    double a_amp = 4.0) {
  std::uniform_real_distribution<double> phase(0.0, 6.28);
  std::uniform_real_distribution<double> freq(0.2, 1.5);
  Eigen::Matrix<double, 6, 1> ph, fr;
  for (int i = 0; i < 6; ++i) {
    ph(i) = phase(rng);
    fr(i) = freq(rng);
  }
  std::vector<vinkit::ImuSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    vinkit::ImuSample s;
    s.t = i / rate;
    for (int k = 0; k < 3; ++k) {
      s.gyro(k) = w_amp * std::sin(6.28 * fr(k) * s.t + ph(k));
      s.accel(k) = a_amp * std::sin(6.28 * fr(3 + k) * s.t + ph(3 + k));
    }
    s.accel(2) += 9.81;  // roughly gravity-supporting
    out.push_back(s);
  }
  return out;
}

// Central-difference errors of the inertial error dynamics at one random
// evaluation point. Returns (relative F error, absolute G error over the
// measurement-noise columns). The flow map under a held sample is the
// generating map of both matrices:
//  - F: differentiate the flow in the state by central differences, then
//    take the centered one-step estimate (Phi - Phi^-1)/(2h). Comparing at
//    the half-step state cancels the drift of F along the segment.
//  - G: inject constant measurement offsets (central in the offset) and
//    Richardson-extrapolate over the span to strip the transition factor.
inline std::pair<double, double> imu_jacobian_fd_errors(const vinkit::ImuState& x,
                                                        const vinkit::ImuSample& u,
                                                        const vinkit::NoiseParams& noise) {
  using namespace vinkit;
  const double h = 5e-5;
  const double eps_x = 1e-5;
  const double eps_u = 1e-3;

  const auto flow = [&](const ImuState& start, const ImuSample& held, double span) {
    std::vector<ImuSample> ss(2);
    ss[0] = held;
    ss[0].t = 0.0;
    ss[1] = held;
    ss[1].t = span;
    return propagate(start, ss, noise, Integrator::kRk4);
  };

  const ImuState x_mid = flow(x, u, 0.5 * h);
  Mat15 f_exact;
  Mat15x12 g_exact;
  error_jacobians(x_mid, u, &f_exact, &g_exact);

  Mat15 phi_num;
  for (int i = 0; i < 15; ++i) {
    Vec15 d = Vec15::Zero();
    d(i) = eps_x;
    phi_num.col(i) = boxminus(flow(boxplus(x, d), u, h),
                              flow(boxplus(x, Vec15(-d)), u, h)) /
                     (2.0 * eps_x);
  }
  const Mat15 f_num = (phi_num - phi_num.inverse()) / (2.0 * h);
  const double f_scale = 1.0 + f_exact.cwiseAbs().maxCoeff();
  const double f_err = (f_num - f_exact).cwiseAbs().maxCoeff() / f_scale;

  // error_jacobians at the start pairs with the Richardson-extrapolated
  // probe, which converges to the G of the span's left endpoint.
  error_jacobians(x, u, nullptr, &g_exact);
  const auto g_cols = [&](double span) {
    Eigen::Matrix<double, 15, 6> cols;
    for (int i = 0; i < 6; ++i) {
      ImuSample up = u, dn = u;
      if (i < 3) {
        up.gyro(i) += eps_u;
        dn.gyro(i) -= eps_u;
      } else {
        up.accel(i - 3) += eps_u;
        dn.accel(i - 3) -= eps_u;
      }
      // Deviation of the nominal flow caused by corrupted measurements has
      // the opposite sign of the error driven by the noise itself.
      cols.col(i) = -boxminus(flow(x, up, span), flow(x, dn, span)) /
                    (2.0 * eps_u * span);
    }
    return cols;
  };
  const Eigen::Matrix<double, 15, 6> g_num = 2.0 * g_cols(0.5 * h) - g_cols(h);
  const double g_err = (g_num - g_exact.leftCols<6>()).cwiseAbs().maxCoeff();
  return {f_err, g_err};
}

}  // namespace testsup
