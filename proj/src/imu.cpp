#include "vinkit/imu.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace vinkit {

namespace {

// One zero-order-hold step of the shared translation/rotation kinematics:
//   dq/dt = 1/2 q (x) [0, w],  dv/dt = R(q) a + g,  dp/dt = v
// with w, a already bias-corrected and constant over the step. Rotation is
// advanced with the exact exponential; the integrator selects the stage
// rule for the translation quadrature. Preintegration reuses this with
// g = 0 on (alpha, gamma, beta).
void zoh_step(Vec3* p, UnitQuaternion* q, Vec3* v, const Vec3& w, const Vec3& a,
              double h, const Vec3& g, Integrator integrator) {
  Vec3 dv;
  Vec3 dp;  // beyond the v*h term
  switch (integrator) {
    case Integrator::kEuler: {
      const Vec3 a0 = quat_to_rotmat(*q) * a + g;
      dv = a0 * h;
      dp = 0.5 * a0 * h * h;
      break;
    }
    case Integrator::kMidpoint: {
      const Vec3 am = quat_to_rotmat(boxplus(*q, (0.5 * h) * w)) * a + g;
      dv = am * h;
      dp = 0.5 * am * h * h;
      break;
    }
    case Integrator::kRk4: {
      const Vec3 a0 = quat_to_rotmat(*q) * a + g;
      const Vec3 am = quat_to_rotmat(boxplus(*q, (0.5 * h) * w)) * a + g;
      const Vec3 ah = quat_to_rotmat(boxplus(*q, h * w)) * a + g;
      dv = (a0 + 4.0 * am + ah) * (h / 6.0);
      dp = (a0 + 2.0 * am) * (h * h / 6.0);
      break;
    }
  }
  *p += *v * h + dp;
  *v += dv;
  *q = boxplus(*q, h * w);
}

void check_samples(const std::vector<ImuSample>& samples) {
  VINKIT_REQUIRE(!samples.empty(), "imu: at least one sample required");
  for (size_t i = 1; i < samples.size(); ++i) {
    VINKIT_REQUIRE(samples[i].t > samples[i - 1].t,
                   "imu: sample timestamps must be strictly increasing");
  }
}

// Exact first-order sensitivity of one zoh_step with respect to the
// entering errors (d_pos, d_theta, d_vel, d_bg, d_ba). Unlike the truncated
// continuous-time transition this differentiates the discrete stepper
// itself, so first-order bias corrections are exact in the linear regime
// instead of carrying an O(h) mismatch per step.
Mat15 discrete_step_jacobian(const Mat3& r0, const Vec3& w, const Vec3& a, double h,
                             Integrator integrator) {
  const Mat3 em = quat_to_rotmat(quat_exp((0.5 * h) * w));
  const Mat3 eh = quat_to_rotmat(quat_exp(h * w));
  const Mat3 rm = r0 * em;
  const Mat3 rh = r0 * eh;

  // Stage sensitivities of the rotated specific force R(stage) * a.
  const Mat3 dth0 = -r0 * skew(a);
  const Mat3 dthm = -r0 * skew(em * a);
  const Mat3 dthh = -r0 * skew(eh * a);
  const Mat3 bg_m = (0.5 * h) * rm * skew(a) * right_jacobian_so3((0.5 * h) * w);
  const Mat3 bg_h = h * rh * skew(a) * right_jacobian_so3(h * w);

  Mat3 bth, bbg, bba;  // velocity-row blocks
  Mat3 ath, abg, aba;  // position-row blocks, beyond the h * dv term
  switch (integrator) {
    case Integrator::kEuler:
      bth = h * dth0;
      bbg = Mat3::Zero();
      bba = -h * r0;
      ath = 0.5 * h * h * dth0;
      abg = Mat3::Zero();
      aba = -0.5 * h * h * r0;
      break;
    case Integrator::kMidpoint:
      bth = h * dthm;
      bbg = h * bg_m;
      bba = -h * rm;
      ath = 0.5 * h * h * dthm;
      abg = 0.5 * h * h * bg_m;
      aba = -0.5 * h * h * rm;
      break;
    case Integrator::kRk4:
      bth = (h / 6.0) * (dth0 + 4.0 * dthm + dthh);
      bbg = (h / 6.0) * (4.0 * bg_m + bg_h);
      bba = -(h / 6.0) * (r0 + 4.0 * rm + rh);
      ath = (h * h / 6.0) * (dth0 + 2.0 * dthm);
      abg = (h * h / 6.0) * (2.0 * bg_m);
      aba = -(h * h / 6.0) * (r0 + 2.0 * rm);
      break;
  }

  Mat15 jac = Mat15::Identity();
  jac.block<3, 3>(kIdxPos, kIdxVel) = h * Mat3::Identity();
  jac.block<3, 3>(kIdxPos, kIdxAtt) = ath;
  jac.block<3, 3>(kIdxPos, kIdxBg) = abg;
  jac.block<3, 3>(kIdxPos, kIdxBa) = aba;
  jac.block<3, 3>(kIdxVel, kIdxAtt) = bth;
  jac.block<3, 3>(kIdxVel, kIdxBg) = bbg;
  jac.block<3, 3>(kIdxVel, kIdxBa) = bba;
  jac.block<3, 3>(kIdxAtt, kIdxAtt) = eh.transpose();
  jac.block<3, 3>(kIdxAtt, kIdxBg) = -h * right_jacobian_so3(h * w);
  return jac;
}

}  // namespace

ImuState boxplus(const ImuState& x, const Vec15& tau) {
  ImuState out;
  out.position = x.position + tau.segment<3>(kIdxPos);
  out.orientation = boxplus(x.orientation, Vec3(tau.segment<3>(kIdxAtt)));
  out.velocity = x.velocity + tau.segment<3>(kIdxVel);
  out.gyro_bias = x.gyro_bias + tau.segment<3>(kIdxBg);
  out.accel_bias = x.accel_bias + tau.segment<3>(kIdxBa);
  return out;
}

Vec15 boxminus(const ImuState& y, const ImuState& x) {
  Vec15 tau;
  tau.segment<3>(kIdxPos) = y.position - x.position;
  tau.segment<3>(kIdxAtt) = boxminus(y.orientation, x.orientation);
  tau.segment<3>(kIdxVel) = y.velocity - x.velocity;
  tau.segment<3>(kIdxBg) = y.gyro_bias - x.gyro_bias;
  tau.segment<3>(kIdxBa) = y.accel_bias - x.accel_bias;
  return tau;
}

Mat12 NoiseParams::psd() const {
  Mat12 q = Mat12::Zero();
  q.block<3, 3>(0, 0) = sigma_g * sigma_g * Mat3::Identity();
  q.block<3, 3>(3, 3) = sigma_a * sigma_a * Mat3::Identity();
  q.block<3, 3>(6, 6) = sigma_bg * sigma_bg * Mat3::Identity();
  q.block<3, 3>(9, 9) = sigma_ba * sigma_ba * Mat3::Identity();
  return q;
}

Integrator integrator_from_string(const std::string& name) {
  if (name == "euler") return Integrator::kEuler;
  if (name == "midpoint") return Integrator::kMidpoint;
  if (name == "rk4") return Integrator::kRk4;
  throw ContractViolation("unknown integrator '" + name + "'");
}

std::string to_string(Integrator integrator) {
  switch (integrator) {
    case Integrator::kEuler: return "euler";
    case Integrator::kMidpoint: return "midpoint";
    case Integrator::kRk4: return "rk4";
  }
  return "rk4";
}

ImuSample measure(double t, const ImuState& state, const Vec3& omega_body,
                  const Vec3& accel_world, const NoiseParams& noise, double dt,
                  std::mt19937_64* rng) {
  ImuSample s;
  s.t = t;
  const Mat3 r_iw = quat_to_rotmat(state.orientation).transpose();
  s.gyro = omega_body + state.gyro_bias;
  s.accel = r_iw * (accel_world - noise.gravity_world()) + state.accel_bias;
  if (rng != nullptr) {
    VINKIT_REQUIRE(dt > 0.0, "measure: dt must be positive to scale noise densities");
    std::normal_distribution<double> n(0.0, 1.0);
    const double sg = noise.sigma_g / std::sqrt(dt);
    const double sa = noise.sigma_a / std::sqrt(dt);
    for (int i = 0; i < 3; ++i) s.gyro(i) += sg * n(*rng);
    for (int i = 0; i < 3; ++i) s.accel(i) += sa * n(*rng);
  }
  return s;
}

ImuState propagate(const ImuState& state, const std::vector<ImuSample>& samples,
                   const NoiseParams& noise, Integrator integrator) {
  check_samples(samples);
  ImuState x = state;
  const Vec3 g = noise.gravity_world();
  for (size_t i = 0; i + 1 < samples.size(); ++i) {
    const double h = samples[i + 1].t - samples[i].t;
    const Vec3 w = samples[i].gyro - x.gyro_bias;
    const Vec3 a = samples[i].accel - x.accel_bias;
    zoh_step(&x.position, &x.orientation, &x.velocity, w, a, h, g, integrator);
  }
  return x;
}

void error_jacobians(const ImuState& state, const ImuSample& sample, Mat15* F,
                     Mat15x12* G) {
  const Mat3 r = quat_to_rotmat(state.orientation);
  const Vec3 w = sample.gyro - state.gyro_bias;
  const Vec3 a = sample.accel - state.accel_bias;
  if (F != nullptr) {
    F->setZero();
    F->block<3, 3>(kIdxPos, kIdxVel) = Mat3::Identity();
    F->block<3, 3>(kIdxAtt, kIdxAtt) = -skew(w);
    F->block<3, 3>(kIdxAtt, kIdxBg) = -Mat3::Identity();
    F->block<3, 3>(kIdxVel, kIdxAtt) = -r * skew(a);
    F->block<3, 3>(kIdxVel, kIdxBa) = -r;
  }
  if (G != nullptr) {
    G->setZero();
    G->block<3, 3>(kIdxAtt, 0) = -Mat3::Identity();
    G->block<3, 3>(kIdxVel, 3) = -r;
    G->block<3, 3>(kIdxBg, 6) = Mat3::Identity();
    G->block<3, 3>(kIdxBa, 9) = Mat3::Identity();
  }
}

void discretize(const Mat15& F, const Mat15x12& G, const Mat12& Qc, double dt,
                int order, Mat15* Phi, Mat15* Qk) {
  VINKIT_REQUIRE(dt > 0.0, "discretize: dt must be positive");
  VINKIT_REQUIRE(order >= 1, "discretize: order must be >= 1");

  const auto phi_of = [&](double s) {
    Mat15 phi = Mat15::Identity();
    Mat15 term = Mat15::Identity();
    for (int i = 1; i <= order; ++i) {
      term = term * F * (s / static_cast<double>(i));
      phi += term;
    }
    return phi;
  };

  if (Phi != nullptr) *Phi = phi_of(dt);
  if (Qk != nullptr) {
    const Mat15x12 gq = G * Qc;
    const auto integrand = [&](double s) -> Mat15 {
      const Mat15 phi = phi_of(dt - s);
      const Mat15x12 pg = phi * gq;
      return pg * (phi * G).transpose();
    };
    const double panel = dt / static_cast<double>(order);
    Mat15 acc = 0.5 * (integrand(0.0) + integrand(dt));
    for (int j = 1; j < order; ++j) acc += integrand(j * panel);
    *Qk = acc * panel;
  }
}

Mat15 propagate_covariance(const Mat15& P, const Mat15& Phi, const Mat15& Qk) {
  const Mat15 sym = 0.5 * (P + P.transpose());
  Eigen::SelfAdjointEigenSolver<Mat15> eig(sym, Eigen::EigenvaluesOnly);
  VINKIT_REQUIRE(eig.eigenvalues().minCoeff() >= -1e-9,
                 "propagate_covariance: input covariance is not PSD");
  const Mat15 out = Phi * sym * Phi.transpose() + Qk;
  return 0.5 * (out + out.transpose());
}

void propagate_interval(const ImuState& state, const std::vector<ImuSample>& samples,
                        const NoiseParams& noise, Integrator integrator, int order,
                        ImuState* end_state, Mat15* Phi, Mat15* Qk) {
  check_samples(samples);
  ImuState x = state;
  const Vec3 g = noise.gravity_world();
  Mat15 phi_total = Mat15::Identity();
  Mat15 q_total = Mat15::Zero();
  const Mat12 qc = noise.psd();
  Mat15 f;
  Mat15x12 gmat;
  Mat15 phi_i, q_i;
  for (size_t i = 0; i + 1 < samples.size(); ++i) {
    const double h = samples[i + 1].t - samples[i].t;
    if (Phi != nullptr || Qk != nullptr) {
      error_jacobians(x, samples[i], &f, &gmat);
      discretize(f, gmat, qc, h, order, &phi_i, &q_i);
      phi_total = phi_i * phi_total;
      q_total = phi_i * q_total * phi_i.transpose() + q_i;
    }
    const Vec3 w = samples[i].gyro - x.gyro_bias;
    const Vec3 a = samples[i].accel - x.accel_bias;
    zoh_step(&x.position, &x.orientation, &x.velocity, w, a, h, g, integrator);
  }
  if (end_state != nullptr) *end_state = x;
  if (Phi != nullptr) *Phi = phi_total;
  if (Qk != nullptr) *Qk = 0.5 * (q_total + q_total.transpose());
}

PreintegratedImu preintegrate(const std::vector<ImuSample>& samples,
                              const Vec3& gyro_bias, const Vec3& accel_bias,
                              const NoiseParams& noise, Integrator integrator,
                              int covariance_order) {
  check_samples(samples);
  PreintegratedImu out;
  out.gyro_bias_lin = gyro_bias;
  out.accel_bias_lin = accel_bias;
  out.noise = noise;
  out.integrator = integrator;
  out.samples = std::make_shared<const std::vector<ImuSample>>(samples);
  out.dt = samples.back().t - samples.front().t;

  // Deltas follow the same kinematics as the world-frame state with gravity
  // removed and zero initial conditions, so the error Jacobians apply with
  // the running delta in place of the state.
  ImuState delta;
  delta.gyro_bias = gyro_bias;
  delta.accel_bias = accel_bias;

  Mat15 jac = Mat15::Identity();
  const Mat12 qc = noise.psd();
  Mat15 f, phi, qk;
  Mat15x12 g;
  for (size_t i = 0; i + 1 < samples.size(); ++i) {
    const double h = samples[i + 1].t - samples[i].t;
    error_jacobians(delta, samples[i], &f, &g);
    discretize(f, g, qc, h, covariance_order, &phi, &qk);
    out.covariance = propagate_covariance(out.covariance, phi, qk);

    const Vec3 w = samples[i].gyro - gyro_bias;
    const Vec3 a = samples[i].accel - accel_bias;
    jac = discrete_step_jacobian(quat_to_rotmat(delta.orientation), w, a, h,
                                 integrator) *
          jac;
    zoh_step(&delta.position, &delta.orientation, &delta.velocity, w, a, h,
             Vec3::Zero(), integrator);
  }
  out.alpha = delta.position;
  out.beta = delta.velocity;
  out.gamma = delta.orientation;
  out.bias_jacobian = jac.block<9, 6>(0, kIdxBg);
  return out;
}

PreintegratedImu bias_correct(const PreintegratedImu& preint, const Vec3& gyro_bias,
                              const Vec3& accel_bias, double threshold) {
  Vec6 db;
  db.head<3>() = gyro_bias - preint.gyro_bias_lin;
  db.tail<3>() = accel_bias - preint.accel_bias_lin;
  if (db.cwiseAbs().maxCoeff() > threshold) {
    VINKIT_REQUIRE(preint.samples != nullptr,
                   "bias_correct: shift exceeds first-order range and no samples retained");
    return preintegrate(*preint.samples, gyro_bias, accel_bias, preint.noise,
                        preint.integrator);
  }
  const Eigen::Matrix<double, 9, 1> d = preint.bias_jacobian * db;
  PreintegratedImu out = preint;
  out.alpha += d.segment<3>(0);
  out.gamma = quat_mul(preint.gamma, quat_exp(d.segment<3>(3)));
  out.beta += d.segment<3>(6);
  out.gyro_bias_lin = gyro_bias;
  out.accel_bias_lin = accel_bias;
  return out;
}

ImuState predict(const ImuState& state, const PreintegratedImu& preint,
                 const NoiseParams& noise) {
  const Mat3 r = quat_to_rotmat(state.orientation);
  const Vec3 g = noise.gravity_world();
  const double dt = preint.dt;
  ImuState out;
  out.position = state.position + state.velocity * dt + 0.5 * g * dt * dt + r * preint.alpha;
  out.velocity = state.velocity + g * dt + r * preint.beta;
  out.orientation = quat_mul(state.orientation, preint.gamma);
  out.gyro_bias = state.gyro_bias;
  out.accel_bias = state.accel_bias;
  return out;
}

}  // namespace vinkit
