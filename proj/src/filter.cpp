#include "vinkit/filter.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <optional>

namespace vinkit {

namespace {

void check_filter(const FilterState& fs) {
  VINKIT_REQUIRE(fs.covariance.rows() == fs.dim() && fs.covariance.cols() == fs.dim(),
                 "covariance dimension must be 15 + 3 * landmark count");
}

// Copy of p with a 3-wide zero block spliced in at `start` (rows and cols).
MatX insert_zero_block(const MatX& p, int start) {
  const int n = static_cast<int>(p.rows());
  const int tail = n - start;
  MatX out = MatX::Zero(n + 3, n + 3);
  out.topLeftCorner(start, start) = p.topLeftCorner(start, start);
  out.block(0, start + 3, start, tail) = p.block(0, start, start, tail);
  out.block(start + 3, 0, tail, start) = p.block(start, 0, tail, start);
  out.block(start + 3, start + 3, tail, tail) = p.block(start, start, tail, tail);
  return out;
}

// Copy of p without the 3-wide block starting at `start`.
MatX remove_block(const MatX& p, int start) {
  const int n = static_cast<int>(p.rows());
  const int tail = n - start - 3;
  MatX out(n - 3, n - 3);
  out.topLeftCorner(start, start) = p.topLeftCorner(start, start);
  out.block(0, start, start, tail) = p.block(0, start + 3, start, tail);
  out.block(start, 0, tail, start) = p.block(start + 3, 0, tail, start);
  out.block(start, start, tail, tail) = p.block(start + 3, start + 3, tail, tail);
  return out;
}

FilterState state_boxplus(const FilterState& x, const VecX& tau) {
  FilterState out = x;
  out.imu = boxplus(x.imu, Vec15(tau.head<kStateDim>()));
  int idx = kStateDim;
  for (auto& [id, l] : out.landmarks) {
    l += tau.segment<3>(idx);
    idx += 3;
  }
  return out;
}

// Gain, corrected mean, and Joseph-form covariance for one linearization.
// Throws when the innovation covariance loses positive definiteness.
void kalman_step(const FilterState& prior, const MatX& h, const VecX& rhs,
                 const MatX& r_cov, VecX* correction, MatX* covariance) {
  const MatX& p = prior.covariance;
  const MatX s = h * p * h.transpose() + r_cov;
  const Eigen::LLT<MatX> llt(s);
  VINKIT_REQUIRE(llt.info() == Eigen::Success,
                 "innovation covariance not invertible");
  const MatX k = llt.solve(h * p).transpose();
  *correction = k * rhs;
  if (covariance != nullptr) {
    const MatX a = MatX::Identity(p.rows(), p.cols()) - k * h;
    const MatX joseph = a * p * a.transpose() + k * r_cov * k.transpose();
    *covariance = 0.5 * (joseph + joseph.transpose());
  }
}

}  // namespace

int landmark_index(const FilterState& fs, std::int64_t landmark_id) {
  int idx = kStateDim;
  for (const auto& [id, l] : fs.landmarks) {
    if (id == landmark_id) return idx;
    idx += 3;
  }
  throw ContractViolation("landmark id not in filter state");
}

FilterState filter_propagate(const FilterState& fs, const std::vector<ImuSample>& samples,
                             const NoiseParams& noise, Integrator integrator) {
  check_filter(fs);
  ImuState end;
  Mat15 phi, qk;
  propagate_interval(fs.imu, samples, noise, integrator, 3, &end, &phi, &qk);

  FilterState out = fs;
  out.imu = end;
  const int nl = fs.dim() - kStateDim;
  out.covariance.topLeftCorner<kStateDim, kStateDim>() = propagate_covariance(
      fs.covariance.topLeftCorner<kStateDim, kStateDim>(), phi, qk);
  if (nl > 0) {
    // Landmarks are static, so only the cross blocks see the transition.
    out.covariance.block(0, kStateDim, kStateDim, nl) =
        phi * fs.covariance.block(0, kStateDim, kStateDim, nl);
    out.covariance.block(kStateDim, 0, nl, kStateDim) =
        out.covariance.block(0, kStateDim, kStateDim, nl).transpose();
  }
  return out;
}

FilterState filter_update(const FilterState& fs,
                          const std::vector<FeatureObservation>& observations,
                          const CameraModel& model, UpdateReport* report,
                          const UpdateOptions& options) {
  check_filter(fs);
  const double sigma = options.sigma_px > 0.0 ? options.sigma_px : model.sigma_px;
  VINKIT_REQUIRE(sigma > 0.0, "pixel noise must be positive");
  VINKIT_REQUIRE(options.max_iterations >= 1, "at least one update iteration");
  const int dim = fs.dim();

  UpdateReport local;
  UpdateReport& rep = report != nullptr ? *report : local;
  rep = UpdateReport{};
  if (observations.empty()) return fs;

  // Gate each feature against its own innovation covariance at the prior.
  struct Accepted {
    std::int64_t id = 0;
    int index = 0;
    Vec2 pixel = Vec2::Zero();
  };
  std::vector<Accepted> accepted;
  double residual_sq = 0.0;
  for (const FeatureObservation& obs : observations) {
    const int idx = landmark_index(fs, obs.landmark_id);
    const auto jac = observe_jacobians(fs.imu, fs.landmarks.at(obs.landmark_id), model);
    if (!jac.has_value()) {
      ++rep.gated;  // predicted behind the camera; nothing to linearize
      continue;
    }
    Eigen::Matrix<double, 2, Eigen::Dynamic> h(2, dim);
    h.setZero();
    h.leftCols<kStateDim>() = jac->h_state;
    h.middleCols<3>(idx) = jac->h_landmark;
    const Vec2 nu = obs.pixel - jac->pixel;
    const Mat2 s = h * fs.covariance * h.transpose() +
                   sigma * sigma * Mat2::Identity();
    const double maha = nu.dot(s.ldlt().solve(nu));
    if (!(maha <= options.gate_chi2)) {
      ++rep.gated;
      continue;
    }
    accepted.push_back({obs.landmark_id, idx, obs.pixel});
    residual_sq += nu.squaredNorm();
  }
  rep.accepted = static_cast<int>(accepted.size());
  rep.residual_norm = std::sqrt(residual_sq);
  if (accepted.empty()) {
    rep.all_gated = true;
    return fs;
  }

  const int m = 2 * static_cast<int>(accepted.size());
  const MatX r_cov = sigma * sigma * MatX::Identity(m, m);

  // Gauss-Newton on the single-frame posterior, iterated in the tangent
  // space of the prior. One pass with xi = 0 is the plain EKF correction.
  FilterState iterate = fs;
  VecX xi = VecX::Zero(dim);
  MatX h_chart(m, dim);
  VecX correction(dim);
  MatX p_next;
  for (int it = 0; it < options.max_iterations; ++it) {
    MatX h(m, dim);
    VecX nu(m);
    for (std::size_t k = 0; k < accepted.size(); ++k) {
      const auto jac =
          observe_jacobians(iterate.imu, iterate.landmarks.at(accepted[k].id), model);
      if (!jac.has_value()) {
        throw EstimationError("landmark moved behind the camera mid-update");
      }
      h.middleRows<2>(2 * k).setZero();
      h.block<2, kStateDim>(2 * k, 0) = jac->h_state;
      h.block<2, 3>(2 * k, accepted[k].index) = jac->h_landmark;
      nu.segment<2>(2 * k) = accepted[k].pixel - jac->pixel;
    }
    // Measurement Jacobian lives in the chart of the iterate; transfer it to
    // the prior chart where the quadratic prior term is exact.
    h_chart = h;
    h_chart.middleCols<3>(kIdxAtt) =
        h.middleCols<3>(kIdxAtt) * right_jacobian_so3(xi.segment<3>(kIdxAtt));

    kalman_step(fs, h_chart, VecX(nu + h_chart * xi), r_cov, &correction,
                it + 1 == options.max_iterations ? &p_next : nullptr);
    rep.iterations = it + 1;
    const double step = (correction - xi).norm();
    xi = correction;
    iterate = state_boxplus(fs, xi);
    if (step < options.iteration_tol) break;
  }
  if (rep.iterations < options.max_iterations) {
    // Converged early; the covariance still reflects the last linearization.
    kalman_step(fs, h_chart, VecX::Zero(m), r_cov, &correction, &p_next);
  }
  iterate.covariance = p_next;
  return iterate;
}

FilterState apply_linear_update(const FilterState& fs, const MatX& h,
                                const VecX& innovation, const MatX& r_cov) {
  check_filter(fs);
  VINKIT_REQUIRE(h.cols() == fs.dim(), "measurement Jacobian column mismatch");
  VINKIT_REQUIRE(h.rows() == innovation.size() && r_cov.rows() == h.rows() &&
                     r_cov.cols() == h.rows(),
                 "measurement dimension mismatch");
  VecX correction(fs.dim());
  MatX covariance;
  kalman_step(fs, h, innovation, r_cov, &correction, &covariance);
  FilterState out = state_boxplus(fs, correction);
  out.covariance = covariance;
  return out;
}

bool initialize_landmark(FilterState* fs, std::int64_t landmark_id,
                         const std::vector<LandmarkView>& views, const CameraModel& model,
                         double min_parallax_rad) {
  VINKIT_REQUIRE(fs != nullptr, "filter state required");
  check_filter(*fs);
  VINKIT_REQUIRE(fs->landmarks.count(landmark_id) == 0,
                 "landmark already initialized");
  VINKIT_REQUIRE(views.size() >= 2, "need at least two views to triangulate");
  VINKIT_REQUIRE(model.sigma_px > 0.0, "pixel noise must be positive");

  std::vector<Vec3> centers(views.size());
  std::vector<Vec3> rays(views.size());
  for (std::size_t i = 0; i < views.size(); ++i) {
    centers[i] = camera_center(views[i].state, model);
    const Vec3 ray_c = back_project_ray(model, views[i].pixel);
    const Mat3 r_wc = quat_to_rotmat(views[i].state.orientation) * model.r_ci.transpose();
    rays[i] = (r_wc * ray_c).normalized();
  }

  double max_angle = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    for (std::size_t j = i + 1; j < views.size(); ++j) {
      const double angle =
          std::atan2(rays[i].cross(rays[j]).norm(), rays[i].dot(rays[j]));
      max_angle = std::max(max_angle, angle);
    }
  }
  if (max_angle < min_parallax_rad) return false;

  // Midpoint triangulation: X minimizing the squared distances to all rays.
  Mat3 a = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const Mat3 ortho = Mat3::Identity() - rays[i] * rays[i].transpose();
    a += ortho;
    b += ortho * centers[i];
  }
  const Eigen::LLT<Mat3> llt_a(a);
  if (llt_a.info() != Eigen::Success) return false;
  const Vec3 point = llt_a.solve(b);

  // Reprojection normal equations give the landmark block; the views' poses
  // are treated as known here, so inflate x2 against that optimism.
  Mat3 info = Mat3::Zero();
  const double inv_var = 1.0 / (model.sigma_px * model.sigma_px);
  for (const LandmarkView& view : views) {
    if (transform_to_camera(view.state, point, model).z() <= kMinDepth) return false;
    const auto jac = observe_jacobians(view.state, point, model);
    if (!jac.has_value()) return false;
    info += jac->h_landmark.transpose() * jac->h_landmark * inv_var;
  }
  const Eigen::LLT<Mat3> llt_info(info);
  if (llt_info.info() != Eigen::Success) return false;
  const Mat3 cov = 2.0 * llt_info.solve(Mat3::Identity());

  // Splice the new block in at the landmark's id-ordered position.
  int insert_at = kStateDim;
  for (const auto& [id, l] : fs->landmarks) {
    if (id > landmark_id) break;
    insert_at += 3;
  }
  fs->covariance = insert_zero_block(fs->covariance, insert_at);
  fs->covariance.block<3, 3>(insert_at, insert_at) = cov;
  fs->landmarks[landmark_id] = point;
  return true;
}

FilterState marginalize_landmark(const FilterState& fs, std::int64_t landmark_id) {
  check_filter(fs);
  const int idx = landmark_index(fs, landmark_id);
  FilterState out = fs;
  out.covariance = remove_block(fs.covariance, idx);
  out.landmarks.erase(landmark_id);
  return out;
}

}  // namespace vinkit
