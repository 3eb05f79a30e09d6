#include "vinkit/smoother.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <set>

namespace vinkit {

namespace {

Mat3 left_jacobian_so3_inv(const Vec3& phi) {
  return right_jacobian_inv_so3(phi).transpose();
}

// Variable offsets of a linear system over a subset of the window.
struct Layout {
  std::map<int, int> frame_offset;
  std::map<std::int64_t, int> landmark_offset;
  int dim = 0;

  void add_frame(int frame) {
    if (frame_offset.emplace(frame, dim).second) dim += kStateDim;
  }
  void add_landmark(std::int64_t id) {
    if (landmark_offset.emplace(id, dim).second) dim += 3;
  }
};

Layout full_layout(const WindowGraph& g) {
  Layout lay;
  for (int k = 0; k < static_cast<int>(g.frames.size()); ++k) lay.add_frame(k);
  for (const auto& [id, l] : g.landmarks) lay.add_landmark(id);
  return lay;
}

// One whitened factor term: residual plus Jacobian chunks per variable slot.
struct Term {
  VecX residual;
  std::vector<int> offsets;
  std::vector<MatX> jacobians;  // rows match residual
};

void accumulate(const Term& term, MatX* h, VecX* b) {
  for (std::size_t i = 0; i < term.offsets.size(); ++i) {
    const MatX& ji = term.jacobians[i];
    b->segment(term.offsets[i], ji.cols()) -= ji.transpose() * term.residual;
    for (std::size_t j = 0; j < term.offsets.size(); ++j) {
      const MatX& jj = term.jacobians[j];
      h->block(term.offsets[i], term.offsets[j], ji.cols(), jj.cols()) +=
          ji.transpose() * jj;
    }
  }
}

Term gauge_term(const GaugePrior& gp, const ImuState& x, int offset) {
  VINKIT_REQUIRE(gp.sigma_pos > 0.0 && gp.sigma_yaw > 0.0,
                 "gauge prior sigmas must be positive");
  const Vec3 dphi = boxminus(x.orientation, gp.orientation);
  const Mat3 r0 = quat_to_rotmat(gp.orientation);
  Term t;
  t.residual = VecX(4);
  t.residual.head<3>() = (x.position - gp.position) / gp.sigma_pos;
  t.residual(3) = (r0.row(2) * dphi).value() / gp.sigma_yaw;
  MatX j = MatX::Zero(4, kStateDim);
  j.block<3, 3>(0, kIdxPos) = Mat3::Identity() / gp.sigma_pos;
  j.block<1, 3>(3, kIdxAtt) = r0.row(2) * right_jacobian_inv_so3(dphi) / gp.sigma_yaw;
  t.offsets = {offset};
  t.jacobians = {j};
  return t;
}

Term dense_prior_term(const DensePriorFactor& dp, const WindowGraph& g,
                      const Layout& lay) {
  VINKIT_REQUIRE(dp.frames.size() == dp.frame_anchors.size() &&
                     dp.landmark_ids.size() == dp.landmark_anchors.size() &&
                     dp.sqrt_info.cols() == dp.dim() &&
                     dp.sqrt_info.rows() == dp.offset.size(),
                 "dense prior shape mismatch");
  const int dim = dp.dim();
  VecX d(dim);
  MatX chart = MatX::Identity(dim, dim);
  int at = 0;
  for (std::size_t k = 0; k < dp.frames.size(); ++k) {
    const ImuState& x = g.frames.at(dp.frames[k]).state;
    const Vec15 dx = boxminus(x, dp.frame_anchors[k]);
    d.segment<kStateDim>(at) = dx;
    chart.block<3, 3>(at + kIdxAtt, at + kIdxAtt) =
        right_jacobian_inv_so3(Vec3(dx.segment<3>(kIdxAtt)));
    at += kStateDim;
  }
  for (std::size_t k = 0; k < dp.landmark_ids.size(); ++k) {
    d.segment<3>(at) = g.landmarks.at(dp.landmark_ids[k]) - dp.landmark_anchors[k];
    at += 3;
  }

  const MatX j_full = dp.sqrt_info * chart;
  Term t;
  t.residual = dp.sqrt_info * d - dp.offset;
  at = 0;
  for (int frame : dp.frames) {
    t.offsets.push_back(lay.frame_offset.at(frame));
    t.jacobians.push_back(j_full.middleCols(at, kStateDim));
    at += kStateDim;
  }
  for (std::int64_t id : dp.landmark_ids) {
    t.offsets.push_back(lay.landmark_offset.at(id));
    t.jacobians.push_back(j_full.middleCols(at, 3));
    at += 3;
  }
  return t;
}

Term imu_term(const ImuFactor& f, const WindowGraph& g, const Layout& lay) {
  Vec15 r;
  Mat15 j_i, j_j;
  imu_factor_jacobians(g.frames.at(f.frame_i).state, g.frames.at(f.frame_j).state,
                       f.delta, &r, &j_i, &j_j);
  Term t;
  t.residual = f.sqrt_info * r;
  t.offsets = {lay.frame_offset.at(f.frame_i), lay.frame_offset.at(f.frame_j)};
  t.jacobians = {MatX(f.sqrt_info * j_i), MatX(f.sqrt_info * j_j)};
  return t;
}

// Whitened reprojection residual with the Huber IRLS scaling folded in.
// nullopt when the landmark projects behind the camera.
std::optional<Term> visual_term(const VisualFactor& f, const WindowGraph& g,
                                const Layout& lay) {
  VINKIT_REQUIRE(g.camera.sigma_px > 0.0, "pixel noise must be positive");
  const auto jac = observe_jacobians(g.frames.at(f.frame).state,
                                     g.landmarks.at(f.landmark_id), g.camera);
  if (!jac.has_value()) return std::nullopt;
  const double inv_sigma = 1.0 / g.camera.sigma_px;
  Term t;
  t.residual = (f.pixel - jac->pixel) * inv_sigma;
  double scale = inv_sigma;
  if (g.huber_sigmas > 0.0) {
    const double s = t.residual.norm();
    if (s > g.huber_sigmas) {
      const double w = std::sqrt(g.huber_sigmas / s);
      t.residual *= w;
      scale *= w;
    }
  }
  t.offsets = {lay.frame_offset.at(f.frame), lay.landmark_offset.at(f.landmark_id)};
  t.jacobians = {MatX(-scale * jac->h_state), MatX(-scale * jac->h_landmark)};
  return t;
}

double huber_cost(double s, double delta) {
  if (delta <= 0.0 || s <= delta) return s * s;
  return 2.0 * delta * s - delta * delta;
}

// Cost at the current estimates; nullopt when a landmark is behind a camera.
std::optional<CostBreakdown> try_total_cost(const WindowGraph& g) {
  CostBreakdown cost;
  if (g.gauge.has_value()) {
    VINKIT_REQUIRE(g.gauge->frame >= 0 &&
                       g.gauge->frame < static_cast<int>(g.frames.size()),
                   "gauge prior frame out of range");
    cost.prior += gauge_term(*g.gauge, g.frames[g.gauge->frame].state, 0)
                      .residual.squaredNorm();
  }
  if (g.dense_prior.has_value()) {
    const Layout lay = full_layout(g);
    cost.prior += dense_prior_term(*g.dense_prior, g, lay).residual.squaredNorm();
  }
  for (const ImuFactor& f : g.imu_factors) {
    const Vec15 r = imu_factor_residual(g.frames.at(f.frame_i).state,
                                        g.frames.at(f.frame_j).state, f.delta);
    cost.imu += (f.sqrt_info * r).squaredNorm();
  }
  VINKIT_REQUIRE(g.camera.sigma_px > 0.0 || g.visual_factors.empty(),
                 "pixel noise must be positive");
  for (const VisualFactor& f : g.visual_factors) {
    const Observation obs = observe(g.frames.at(f.frame).state,
                                    g.landmarks.at(f.landmark_id), g.camera, false);
    if (obs.status == ObserveStatus::kBehindCamera) return std::nullopt;
    const double s = (f.pixel - obs.pixel).norm() / g.camera.sigma_px;
    cost.visual += huber_cost(s, g.huber_sigmas);
  }
  return cost;
}

void apply_step(WindowGraph* g, const VecX& d) {
  int at = 0;
  for (Keyframe& kf : g->frames) {
    kf.state = boxplus(kf.state, Vec15(d.segment<kStateDim>(at)));
    at += kStateDim;
  }
  for (auto& [id, l] : g->landmarks) {
    l += d.segment<3>(at);
    at += 3;
  }
}

MatX pseudo_inverse_spd(const MatX& m, double rel_tol = 1e-12) {
  if (m.rows() == 0) return m;
  const Eigen::SelfAdjointEigenSolver<MatX> eig(0.5 * (m + m.transpose()));
  const VecX& ev = eig.eigenvalues();
  const double cutoff = std::max(ev.cwiseAbs().maxCoeff() * rel_tol, 0.0);
  VecX inv = VecX::Zero(ev.size());
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) > cutoff) inv(i) = 1.0 / ev(i);
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

Vec15 imu_factor_residual(const ImuState& state_i, const ImuState& state_j,
                          const PreintegratedImu& preint) {
  const PreintegratedImu corrected =
      bias_correct(preint, state_i.gyro_bias, state_i.accel_bias);
  return boxminus(state_j, predict(state_i, corrected, preint.noise));
}

void imu_factor_jacobians(const ImuState& state_i, const ImuState& state_j,
                          const PreintegratedImu& preint, Vec15* residual,
                          Mat15* j_i, Mat15* j_j) {
  const PreintegratedImu corrected =
      bias_correct(preint, state_i.gyro_bias, state_i.accel_bias);
  const Vec15 r = boxminus(state_j, predict(state_i, corrected, preint.noise));
  if (residual != nullptr) *residual = r;
  if (j_i == nullptr && j_j == nullptr) return;

  const Vec3 r_theta = r.segment<3>(kIdxAtt);
  const Mat3 jr_inv = right_jacobian_inv_so3(r_theta);
  const Mat3 jl_inv = left_jacobian_so3_inv(r_theta);

  if (j_j != nullptr) {
    j_j->setIdentity();
    j_j->block<3, 3>(kIdxAtt, kIdxAtt) = jr_inv;
  }
  if (j_i == nullptr) return;

  const Mat3 r_i = quat_to_rotmat(state_i.orientation);
  const Mat3 r_gamma = quat_to_rotmat(corrected.gamma);
  const double dt = corrected.dt;

  // Bias sensitivities of the corrected deltas. alpha and beta are affine in
  // the shift; gamma composes through Exp, which bends the direction by the
  // right Jacobian at the already-applied shift.
  const auto j_alpha = corrected.bias_jacobian.block<3, 6>(0, 0);
  const auto j_theta = corrected.bias_jacobian.block<3, 6>(3, 0);
  const auto j_beta = corrected.bias_jacobian.block<3, 6>(6, 0);
  Vec6 db = Vec6::Zero();
  const double shift =
      std::max((state_i.gyro_bias - preint.gyro_bias_lin).cwiseAbs().maxCoeff(),
               (state_i.accel_bias - preint.accel_bias_lin).cwiseAbs().maxCoeff());
  if (shift <= kRepreintegrationThreshold) {
    db.head<3>() = state_i.gyro_bias - preint.gyro_bias_lin;
    db.tail<3>() = state_i.accel_bias - preint.accel_bias_lin;
  }
  const Eigen::Matrix<double, 3, 6> j_gamma =
      right_jacobian_so3(Vec3(j_theta * db)) * j_theta;

  Mat15& ji = *j_i;
  ji.setZero();
  ji.block<3, 3>(kIdxPos, kIdxPos) = -Mat3::Identity();
  ji.block<3, 3>(kIdxPos, kIdxAtt) = r_i * skew(corrected.alpha);
  ji.block<3, 3>(kIdxPos, kIdxVel) = -dt * Mat3::Identity();
  ji.block<3, 6>(kIdxPos, kIdxBg) = -r_i * j_alpha;
  ji.block<3, 3>(kIdxAtt, kIdxAtt) = -jl_inv * r_gamma.transpose();
  ji.block<3, 6>(kIdxAtt, kIdxBg) = -jl_inv * j_gamma;
  ji.block<3, 3>(kIdxVel, kIdxAtt) = r_i * skew(corrected.beta);
  ji.block<3, 3>(kIdxVel, kIdxVel) = -Mat3::Identity();
  ji.block<3, 6>(kIdxVel, kIdxBg) = -r_i * j_beta;
  ji.block<3, 3>(kIdxBg, kIdxBg) = -Mat3::Identity();
  ji.block<3, 3>(kIdxBa, kIdxBa) = -Mat3::Identity();
}

Mat15 imu_residual_covariance(const ImuState& state_i, const PreintegratedImu& preint) {
  const Mat3 r_i = quat_to_rotmat(state_i.orientation);
  Mat15 t = Mat15::Identity();
  t.block<3, 3>(kIdxPos, kIdxPos) = r_i;
  t.block<3, 3>(kIdxVel, kIdxVel) = r_i;
  return t * preint.covariance * t.transpose();
}

ImuFactor make_imu_factor(int frame_i, int frame_j, const PreintegratedImu& delta,
                          const ImuState& state_i_lin) {
  VINKIT_REQUIRE(frame_i != frame_j, "inertial factor must connect two frames");
  VINKIT_REQUIRE(delta.dt > 0.0, "preintegrated interval must be positive");
  ImuFactor f;
  f.frame_i = frame_i;
  f.frame_j = frame_j;
  f.delta = delta;
  const Mat15 sigma = imu_residual_covariance(state_i_lin, delta);
  const Eigen::LLT<Mat15> llt(sigma);
  VINKIT_REQUIRE(llt.info() == Eigen::Success, "singular inertial residual covariance");
  f.sqrt_info = llt.matrixL().solve(Mat15::Identity());
  return f;
}

CostBreakdown total_cost(const WindowGraph& g) {
  const auto cost = try_total_cost(g);
  if (!cost.has_value()) {
    throw EstimationError("landmark behind the camera, cost undefined");
  }
  return *cost;
}

void linearize(const WindowGraph& g, MatX* h, VecX* b) {
  VINKIT_REQUIRE(h != nullptr && b != nullptr, "output system required");
  const Layout lay = full_layout(g);
  *h = MatX::Zero(lay.dim, lay.dim);
  *b = VecX::Zero(lay.dim);
  if (g.gauge.has_value()) {
    VINKIT_REQUIRE(g.gauge->frame >= 0 &&
                       g.gauge->frame < static_cast<int>(g.frames.size()),
                   "gauge prior frame out of range");
    accumulate(gauge_term(*g.gauge, g.frames[g.gauge->frame].state,
                          lay.frame_offset.at(g.gauge->frame)),
               h, b);
  }
  if (g.dense_prior.has_value()) {
    accumulate(dense_prior_term(*g.dense_prior, g, lay), h, b);
  }
  for (const ImuFactor& f : g.imu_factors) accumulate(imu_term(f, g, lay), h, b);
  for (const VisualFactor& f : g.visual_factors) {
    const auto term = visual_term(f, g, lay);
    if (!term.has_value()) {
      throw EstimationError("landmark behind the camera, cannot linearize");
    }
    accumulate(*term, h, b);
  }
}

VecX solve_normal_equations(const MatX& h, const VecX& b, int frame_dim,
                            bool use_schur) {
  VINKIT_REQUIRE(h.rows() == h.cols() && h.rows() == b.size(),
                 "normal equations shape mismatch");
  VINKIT_REQUIRE(frame_dim >= 0 && frame_dim <= h.rows() &&
                     (h.rows() - frame_dim) % 3 == 0,
                 "frame block must cover a 15k prefix");
  const int lm_dim = static_cast<int>(h.rows()) - frame_dim;
  // Whitened inertial rows carry ~1e10 information while pixel rows sit near
  // 1e3, which costs the raw Cholesky several digits: equilibrate first, then
  // polish with refinement. The residuals are accumulated in extended
  // precision, otherwise their rounding floor (kappa * eps * |d|) is exactly
  // the error being repaired and the passes stall.
  VecX scale(h.rows());
  for (int i = 0; i < h.rows(); ++i) {
    const double v = h(i, i);
    scale(i) = v > 0.0 ? 1.0 / std::sqrt(v) : 1.0;
  }
  const MatX hs = scale.asDiagonal() * h * scale.asDiagonal();
  const VecX bs = scale.cwiseProduct(b);
  using MatLd = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  using VecLd = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  const MatLd hs_ld = hs.cast<long double>();
  const VecLd bs_ld = bs.cast<long double>();
  const auto residual = [&](const VecX& y) {
    return VecX((bs_ld - hs_ld * y.cast<long double>()).cast<double>());
  };
  VecX y(h.rows());
  if (!use_schur || lm_dim == 0 || frame_dim == 0) {
    const Eigen::LLT<MatX> llt(hs);
    if (llt.info() != Eigen::Success) {
      throw EstimationError("normal equations not positive definite");
    }
    y = llt.solve(bs);
    y += llt.solve(residual(y));
    y += llt.solve(residual(y));
  } else {
    const MatX hs_fl = hs.topRightCorner(frame_dim, lm_dim);
    const Eigen::LLT<MatX> llt_ll(hs.bottomRightCorner(lm_dim, lm_dim));
    if (llt_ll.info() != Eigen::Success) {
      throw EstimationError("landmark block not positive definite");
    }
    const MatX s = hs.topLeftCorner(frame_dim, frame_dim) -
                   hs_fl * llt_ll.solve(hs_fl.transpose());
    const Eigen::LLT<MatX> llt_s(s);
    if (llt_s.info() != Eigen::Success) {
      throw EstimationError("reduced camera system not positive definite");
    }
    const auto back_substitute = [&](const VecX& rhs) {
      VecX sol(rhs.size());
      const VecX reduced =
          rhs.head(frame_dim) - hs_fl * llt_ll.solve(VecX(rhs.tail(lm_dim)));
      sol.head(frame_dim) = llt_s.solve(reduced);
      sol.tail(lm_dim) = llt_ll.solve(
          VecX(rhs.tail(lm_dim) - hs_fl.transpose() * sol.head(frame_dim)));
      return sol;
    };
    y = back_substitute(bs);
    y += back_substitute(residual(y));
    y += back_substitute(residual(y));
  }
  const VecX d = scale.cwiseProduct(y);
  if (!d.allFinite()) throw EstimationError("non-finite optimization step");
  return d;
}

void schur_marginalize(const MatX& h, const VecX& b, const std::vector<int>& marg,
                       MatX* h_out, VecX* b_out) {
  VINKIT_REQUIRE(h.rows() == h.cols() && h.rows() == b.size(),
                 "information system shape mismatch");
  VINKIT_REQUIRE(h_out != nullptr && b_out != nullptr, "output system required");
  const int n = static_cast<int>(h.rows());
  std::set<int> marg_set;
  for (int idx : marg) {
    VINKIT_REQUIRE(idx >= 0 && idx < n, "marginalized index out of range");
    VINKIT_REQUIRE(marg_set.insert(idx).second, "duplicate marginalized index");
  }
  std::vector<int> keep;
  keep.reserve(n - marg_set.size());
  for (int i = 0; i < n; ++i) {
    if (marg_set.count(i) == 0) keep.push_back(i);
  }
  const std::vector<int> m(marg_set.begin(), marg_set.end());
  const int nk = static_cast<int>(keep.size());
  const int nm = static_cast<int>(m.size());

  MatX h_kk(nk, nk), h_km(nk, nm), h_mm(nm, nm);
  VecX b_k(nk), b_m(nm);
  for (int i = 0; i < nk; ++i) {
    b_k(i) = b(keep[i]);
    for (int j = 0; j < nk; ++j) h_kk(i, j) = h(keep[i], keep[j]);
    for (int j = 0; j < nm; ++j) h_km(i, j) = h(keep[i], m[j]);
  }
  for (int i = 0; i < nm; ++i) {
    b_m(i) = b(m[i]);
    for (int j = 0; j < nm; ++j) h_mm(i, j) = h(m[i], m[j]);
  }

  const MatX h_mm_inv = pseudo_inverse_spd(h_mm);
  const MatX reduced = h_kk - h_km * h_mm_inv * h_km.transpose();
  *h_out = 0.5 * (reduced + reduced.transpose());
  *b_out = b_k - h_km * h_mm_inv * b_m;
}

OptimizeReport optimize(WindowGraph* g, const OptimizeOptions& options) {
  VINKIT_REQUIRE(g != nullptr, "graph required");
  VINKIT_REQUIRE(options.max_iterations >= 1, "at least one iteration");
  VINKIT_REQUIRE(options.tolerance > 0.0, "tolerance must be positive");
  VINKIT_REQUIRE(!g->frames.empty(), "empty window");

  OptimizeReport rep;
  rep.initial_cost = total_cost(*g).total();
  double cost = rep.initial_cost;
  double lambda = options.lambda0;
  const int frame_dim = kStateDim * static_cast<int>(g->frames.size());

  for (int it = 0; it < options.max_iterations; ++it) {
    MatX h;
    VecX b;
    linearize(*g, &h, &b);
    rep.iterations = it + 1;

    if (options.method == Method::kGaussNewton) {
      const VecX d = solve_normal_equations(h, b, frame_dim, options.use_schur);
      apply_step(g, d);
      const double new_cost = total_cost(*g).total();
      if (d.norm() < options.tolerance) {
        cost = new_cost;
        rep.converged = true;
        break;
      }
      if (new_cost > cost) {
        cost = new_cost;
        rep.diverged = true;
        break;
      }
      cost = new_cost;
    } else {
      bool accepted = false;
      for (int trial = 0; trial < 12 && !accepted; ++trial) {
        MatX damped = h;
        damped.diagonal() += lambda * h.diagonal().cwiseMax(1e-12);
        VecX d;
        try {
          d = solve_normal_equations(damped, b, frame_dim, options.use_schur);
        } catch (const EstimationError&) {
          lambda *= 10.0;
          continue;
        }
        WindowGraph candidate = *g;
        apply_step(&candidate, d);
        const auto trial_cost = try_total_cost(candidate);
        if (trial_cost.has_value() && trial_cost->total() <= cost) {
          *g = std::move(candidate);
          cost = trial_cost->total();
          lambda = std::max(lambda / 10.0, 1e-12);
          accepted = true;
          // A short step under heavy damping says nothing about stationarity,
          // so only trust it once lambda has decayed back to its start value.
          if (d.norm() < options.tolerance && lambda <= options.lambda0) {
            rep.converged = true;
          }
        } else {
          lambda *= 10.0;
        }
      }
      if (!accepted) {
        // No damping level improves from here: stationary for this model.
        rep.converged = true;
        break;
      }
      if (rep.converged) break;
    }
  }
  rep.final_cost = cost;
  return rep;
}

void marginalize_oldest(WindowGraph* g) {
  VINKIT_REQUIRE(g != nullptr, "graph required");
  VINKIT_REQUIRE(g->frames.size() >= 2, "window must keep at least one frame");

  // Landmarks referenced outside frame 0 (other observations or the prior)
  // survive; the rest are dropped together with their single observation.
  std::set<std::int64_t> seen_elsewhere;
  for (const VisualFactor& f : g->visual_factors) {
    if (f.frame != 0) seen_elsewhere.insert(f.landmark_id);
  }
  if (g->dense_prior.has_value()) {
    seen_elsewhere.insert(g->dense_prior->landmark_ids.begin(),
                          g->dense_prior->landmark_ids.end());
  }

  std::vector<VisualFactor> consumed_visual;
  std::vector<VisualFactor> kept_visual;
  std::set<std::int64_t> dropped_landmarks;
  for (const VisualFactor& f : g->visual_factors) {
    if (f.frame != 0) {
      kept_visual.push_back(f);
    } else if (seen_elsewhere.count(f.landmark_id) > 0) {
      consumed_visual.push_back(f);
    } else {
      dropped_landmarks.insert(f.landmark_id);
    }
  }

  std::vector<ImuFactor> consumed_imu;
  std::vector<ImuFactor> kept_imu;
  for (const ImuFactor& f : g->imu_factors) {
    VINKIT_REQUIRE(f.frame_i >= 0 && f.frame_j >= 0 &&
                       f.frame_i < static_cast<int>(g->frames.size()) &&
                       f.frame_j < static_cast<int>(g->frames.size()),
                   "inertial factor frame out of range");
    (f.frame_i == 0 || f.frame_j == 0 ? consumed_imu : kept_imu).push_back(f);
  }

  const bool gauge_consumed = g->gauge.has_value() && g->gauge->frame == 0;
  const bool other_consumed =
      !consumed_imu.empty() || !consumed_visual.empty() || gauge_consumed;
  const bool prior_touches_front =
      g->dense_prior.has_value() &&
      std::find(g->dense_prior->frames.begin(), g->dense_prior->frames.end(), 0) !=
          g->dense_prior->frames.end();
  // Merge the old prior whenever anything else is consumed, so a single dense
  // prior always summarizes the marginalized past.
  const bool prior_consumed =
      g->dense_prior.has_value() && (prior_touches_front || other_consumed);

  std::optional<DensePriorFactor> next_prior = g->dense_prior;
  if (other_consumed || prior_touches_front) {
    // Markov blanket of frame 0, in ascending order so the reduced system's
    // column order matches the new prior's variable lists.
    std::set<int> blanket_frames;
    std::set<std::int64_t> blanket_landmarks;
    for (const ImuFactor& f : consumed_imu) {
      blanket_frames.insert(f.frame_i);
      blanket_frames.insert(f.frame_j);
    }
    for (const VisualFactor& f : consumed_visual) {
      blanket_landmarks.insert(f.landmark_id);
    }
    if (prior_consumed) {
      blanket_frames.insert(g->dense_prior->frames.begin(),
                            g->dense_prior->frames.end());
      blanket_landmarks.insert(g->dense_prior->landmark_ids.begin(),
                               g->dense_prior->landmark_ids.end());
    }
    blanket_frames.erase(0);

    Layout lay;
    lay.add_frame(0);
    for (int frame : blanket_frames) lay.add_frame(frame);
    for (std::int64_t id : blanket_landmarks) lay.add_landmark(id);

    MatX h = MatX::Zero(lay.dim, lay.dim);
    VecX b = VecX::Zero(lay.dim);
    if (gauge_consumed) {
      accumulate(gauge_term(*g->gauge, g->frames[0].state, lay.frame_offset.at(0)),
                 &h, &b);
    }
    if (prior_consumed) accumulate(dense_prior_term(*g->dense_prior, *g, lay), &h, &b);
    for (const ImuFactor& f : consumed_imu) accumulate(imu_term(f, *g, lay), &h, &b);
    for (const VisualFactor& f : consumed_visual) {
      const auto term = visual_term(f, *g, lay);
      if (!term.has_value()) {
        throw EstimationError("landmark behind the camera, cannot marginalize");
      }
      accumulate(*term, &h, &b);
    }

    std::vector<int> marg(kStateDim);
    for (int i = 0; i < kStateDim; ++i) marg[i] = i;
    MatX h_red;
    VecX b_red;
    schur_marginalize(h, b, marg, &h_red, &b_red);

    if (h_red.rows() == 0) {
      // The consumed factors touched nothing outside frame 0.
      next_prior = std::nullopt;
    } else {
      // Factorize the reduced information into a square-root prior,
      // discarding numerically flat directions.
      const Eigen::SelfAdjointEigenSolver<MatX> eig(h_red);
      const VecX& ev = eig.eigenvalues();
      const double cutoff = std::max(ev.cwiseAbs().maxCoeff(), 0.0) * 1e-12;
      std::vector<int> rows;
      for (int i = 0; i < ev.size(); ++i) {
        if (ev(i) > cutoff) rows.push_back(i);
      }
      if (rows.empty()) {
        next_prior = std::nullopt;
      } else {
        DensePriorFactor dp;
        for (int frame : blanket_frames) {
          dp.frames.push_back(frame);
          dp.frame_anchors.push_back(g->frames.at(frame).state);
        }
        for (std::int64_t id : blanket_landmarks) {
          dp.landmark_ids.push_back(id);
          dp.landmark_anchors.push_back(g->landmarks.at(id));
        }
        dp.sqrt_info =
            MatX::Zero(static_cast<int>(rows.size()), lay.dim - kStateDim);
        dp.offset = VecX::Zero(static_cast<int>(rows.size()));
        const VecX delta_star = pseudo_inverse_spd(h_red) * b_red;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const double root = std::sqrt(ev(rows[r]));
          dp.sqrt_info.row(r) = root * eig.eigenvectors().col(rows[r]).transpose();
          dp.offset(r) = root * eig.eigenvectors().col(rows[r]).dot(delta_star);
        }
        next_prior = std::move(dp);
      }
    }
  }

  // Rebuild the window without frame 0.
  g->frames.erase(g->frames.begin());
  for (std::int64_t id : dropped_landmarks) g->landmarks.erase(id);
  g->imu_factors = std::move(kept_imu);
  for (ImuFactor& f : g->imu_factors) {
    --f.frame_i;
    --f.frame_j;
  }
  g->visual_factors = std::move(kept_visual);
  for (VisualFactor& f : g->visual_factors) --f.frame;
  if (gauge_consumed) {
    g->gauge.reset();
  } else if (g->gauge.has_value()) {
    --g->gauge->frame;
  }
  if (next_prior.has_value()) {
    for (int& frame : next_prior->frames) --frame;
  }
  g->dense_prior = std::move(next_prior);
}

bool select_keyframe(double median_parallax_px, int tracked_count,
                     const KeyframePolicy& policy) {
  return median_parallax_px >= policy.min_parallax_px ||
         tracked_count <= policy.min_tracked;
}

std::optional<WindowGraph> initialize_window(const std::vector<FrameInput>& frames,
                                             const std::vector<ImuSample>& imu,
                                             const CameraModel& camera,
                                             const NoiseParams& noise,
                                             const InitializeOptions& options) {
  if (frames.size() < 2) return std::nullopt;
  for (std::size_t k = 1; k < frames.size(); ++k) {
    VINKIT_REQUIRE(frames[k].timestamp_ns > frames[k - 1].timestamp_ns,
                   "frame timestamps must be strictly increasing");
  }
  VINKIT_REQUIRE(imu.size() >= 2, "imu stream required");

  const int n = static_cast<int>(frames.size());
  ImuState anchor;
  if (options.anchor.has_value()) anchor = *options.anchor;

  // Dead-reckon attitudes and the velocity-free position chain from the
  // preintegrated deltas; positions are affine in the unknown v0.
  std::vector<PreintegratedImu> deltas;
  deltas.reserve(n - 1);
  for (int k = 0; k + 1 < n; ++k) {
    const double t0 = static_cast<double>(frames[k].timestamp_ns) * 1e-9;
    const double t1 = static_cast<double>(frames[k + 1].timestamp_ns) * 1e-9;
    const auto first = std::lower_bound(
        imu.begin(), imu.end(), t0 - 1e-9,
        [](const ImuSample& s, double t) { return s.t < t; });
    auto last = std::lower_bound(imu.begin(), imu.end(), t1 + 1e-9,
                                 [](const ImuSample& s, double t) { return s.t < t; });
    const std::vector<ImuSample> slice(first, last);
    VINKIT_REQUIRE(slice.size() >= 2 && slice.front().t <= t0 + 1e-6 &&
                       slice.back().t >= t1 - 1e-6,
                   "imu stream must cover the frame interval");
    deltas.push_back(preintegrate(slice, anchor.gyro_bias, anchor.accel_bias, noise,
                                  Integrator::kRk4));
  }

  std::vector<ImuState> base(n);  // chain with v0 = 0
  base[0] = anchor;
  base[0].velocity = Vec3::Zero();
  for (int k = 0; k + 1 < n; ++k) base[k + 1] = predict(base[k], deltas[k], noise);

  std::vector<double> span(n, 0.0);  // seconds since the first frame
  for (int k = 0; k + 1 < n; ++k) span[k + 1] = span[k] + deltas[k].dt;

  // World-frame bearing of every observation under the dead-reckoned
  // attitudes, grouped by landmark.
  struct Sight {
    int frame = 0;
    Vec3 ray = Vec3::Zero();      // unit, world
    Vec3 center0 = Vec3::Zero();  // camera center at v0 = 0
    Vec2 pixel = Vec2::Zero();
  };
  std::map<std::int64_t, std::vector<Sight>> tracks;
  for (int k = 0; k < n; ++k) {
    const Mat3 r_wc = quat_to_rotmat(base[k].orientation) * camera.r_ci.transpose();
    const Vec3 center = camera_center(base[k], camera);
    for (const FeatureObservation& f : frames[k].features) {
      Sight s;
      s.frame = k;
      s.ray = (r_wc * back_project_ray(camera, f.pixel)).normalized();
      s.center0 = center;
      s.pixel = f.pixel;
      tracks[f.landmark_id].push_back(s);
    }
  }

  // Median rotation-compensated parallax between each landmark's first and
  // last sighting gates the whole attempt.
  std::vector<double> parallax;
  for (const auto& [id, sights] : tracks) {
    if (sights.size() < 2) continue;
    const Sight& a = sights.front();
    const Sight& b = sights.back();
    const Mat3 r_wc_b =
        quat_to_rotmat(base[b.frame].orientation) * camera.r_ci.transpose();
    const Vec3 in_b = r_wc_b.transpose() * a.ray;
    const auto z = project(in_b);
    if (!z) continue;
    parallax.push_back((apply_intrinsics(camera, *z) - b.pixel).norm());
  }
  if (parallax.empty()) return std::nullopt;
  std::nth_element(parallax.begin(), parallax.begin() + parallax.size() / 2,
                   parallax.end());
  if (parallax[parallax.size() / 2] < options.min_parallax_px) return std::nullopt;

  // v0 from ray-baseline coplanarity: (C_b - C_a + v0 (t_b - t_a)) . (d_a x d_b) = 0
  // for every observation pair of every landmark.
  Mat3 normal = Mat3::Zero();
  Vec3 rhs_acc = Vec3::Zero();
  for (const auto& [id, sights] : tracks) {
    for (std::size_t a = 0; a < sights.size(); ++a) {
      for (std::size_t b = a + 1; b < sights.size(); ++b) {
        const Vec3 nrm = sights[a].ray.cross(sights[b].ray);
        const double dt_ab = span[sights[b].frame] - span[sights[a].frame];
        const Vec3 row = dt_ab * nrm;
        const double rhs = -nrm.dot(sights[b].center0 - sights[a].center0);
        normal += row * row.transpose();
        rhs_acc += row * rhs;
      }
    }
  }
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(normal);
  if (eig.eigenvalues().minCoeff() <= 1e-12 * eig.eigenvalues().maxCoeff()) {
    return std::nullopt;  // velocity unobservable from this parallax
  }
  const Vec3 v0 = eig.eigenvectors() *
                  (eig.eigenvalues().cwiseInverse().asDiagonal() *
                   (eig.eigenvectors().transpose() * rhs_acc));

  WindowGraph g;
  g.camera = camera;
  g.frames.resize(n);
  for (int k = 0; k < n; ++k) {
    g.frames[k].timestamp_ns = frames[k].timestamp_ns;
    ImuState x = base[k];
    x.position += v0 * span[k];
    x.velocity += v0;
    g.frames[k].state = x;
  }
  for (int k = 0; k + 1 < n; ++k) {
    g.imu_factors.push_back(make_imu_factor(k, k + 1, deltas[k], g.frames[k].state));
  }

  // Midpoint triangulation over all sightings; landmarks that stay behind a
  // camera or lack baseline are left out of the window.
  for (const auto& [id, sights] : tracks) {
    if (sights.size() < 2) continue;
    Mat3 a = Mat3::Zero();
    Vec3 b = Vec3::Zero();
    for (const Sight& s : sights) {
      const Mat3 ortho = Mat3::Identity() - s.ray * s.ray.transpose();
      a += ortho;
      b += ortho * (s.center0 + v0 * span[s.frame]);
    }
    const Eigen::LLT<Mat3> llt(a);
    if (llt.info() != Eigen::Success) continue;
    const Vec3 point = llt.solve(b);
    bool in_front = true;
    for (const Sight& s : sights) {
      if (transform_to_camera(g.frames[s.frame].state, point, camera).z() <=
          kMinDepth) {
        in_front = false;
        break;
      }
    }
    if (!in_front) continue;
    g.landmarks[id] = point;
    for (const Sight& s : sights) {
      VisualFactor f;
      f.frame = s.frame;
      f.landmark_id = id;
      f.pixel = s.pixel;
      g.visual_factors.push_back(f);
    }
  }
  if (g.landmarks.empty()) return std::nullopt;

  GaugePrior gauge;
  gauge.frame = 0;
  gauge.position = anchor.position;
  gauge.orientation = anchor.orientation;
  g.gauge = gauge;

  OptimizeOptions refine;
  refine.method = Method::kLevenbergMarquardt;
  refine.max_iterations = 1;
  refine.lambda0 = 1e-8;
  optimize(&g, refine);
  return g;
}

}  // namespace vinkit
