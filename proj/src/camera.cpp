#include "vinkit/camera.hpp"

#include <cmath>

namespace vinkit {

namespace {

// Radial scale of the rational model at squared radius r2.
double radial_scale(const CameraModel& model, double r2) {
  const double r4 = r2 * r2;
  const double r6 = r4 * r2;
  const double num = 1.0 + model.k(0) * r2 + model.k(1) * r4 + model.k(2) * r6;
  const double den = 1.0 + model.k(3) * r2 + model.k(4) * r4 + model.k(5) * r6;
  return num / den;
}

Vec2 tangential_shift(const CameraModel& model, const Vec2& z) {
  const double x = z.x(), y = z.y();
  const double r2 = x * x + y * y;
  return Vec2(2.0 * model.p(0) * x * y + model.p(1) * (r2 + 2.0 * x * x),
              model.p(0) * (r2 + 2.0 * y * y) + 2.0 * model.p(1) * x * y);
}

// Angle between two unit vectors; atan2 keeps it well conditioned near 0
// and pi where the dot product saturates.
double unit_angle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace

Vec3 transform_to_camera(const ImuState& state, const Vec3& l_w, const CameraModel& model) {
  const Vec3 l_i = state.orientation.conjugate().rotate(l_w - state.position);
  return model.r_ci * l_i + model.t_ci;
}

Vec3 inverse_transform(const ImuState& state, const Vec3& l_c, const CameraModel& model) {
  const Vec3 l_i = model.r_ci.transpose() * (l_c - model.t_ci);
  return state.orientation.rotate(l_i) + state.position;
}

Vec3 camera_center(const ImuState& state, const CameraModel& model) {
  return inverse_transform(state, Vec3::Zero(), model);
}

std::optional<Vec2> project(const Vec3& l_c) {
  if (l_c.z() <= kMinDepth) return std::nullopt;
  return Vec2(l_c.x() / l_c.z(), l_c.y() / l_c.z());
}

Vec2 distort(const CameraModel& model, const Vec2& z_p) {
  if (!model.has_distortion()) return z_p;
  const double r2 = z_p.squaredNorm();
  return radial_scale(model, r2) * z_p + tangential_shift(model, z_p);
}

Vec2 undistort(const CameraModel& model, const Vec2& z_d) {
  if (!model.has_distortion()) return z_d;
  Vec2 z = z_d;
  for (int i = 0; i < 10; ++i) {
    const Vec2 next = (z_d - tangential_shift(model, z)) / radial_scale(model, z.squaredNorm());
    const double step = (next - z).norm();
    z = next;
    if (step < 1e-10) break;
  }
  return z;
}

Vec2 apply_intrinsics(const CameraModel& model, const Vec2& z) {
  return Vec2(model.fx * z.x() + model.cx, model.fy * z.y() + model.cy);
}

Vec2 invert_intrinsics(const CameraModel& model, const Vec2& pixel) {
  return Vec2((pixel.x() - model.cx) / model.fx, (pixel.y() - model.cy) / model.fy);
}

Vec3 back_project_ray(const CameraModel& model, const Vec2& pixel) {
  const Vec2 z = invert_intrinsics(model, pixel);
  return Vec3(z.x(), z.y(), 1.0);
}

Vec3 back_project_idp(const CameraModel& model, const Vec2& pixel, double rho) {
  VINKIT_REQUIRE(rho > 0.0, "inverse depth must be positive");
  return back_project_ray(model, pixel).normalized() / rho;
}

bool in_image(const CameraModel& model, const Vec2& pixel) {
  return pixel.x() >= 0.0 && pixel.x() <= model.width - 1.0 && pixel.y() >= 0.0 &&
         pixel.y() <= model.height - 1.0;
}

Vec2 undistort_pixel(const CameraModel& model, const Vec2& pixel) {
  return apply_intrinsics(model, undistort(model, invert_intrinsics(model, pixel)));
}

Vec3 world_from_idp(const ImuState& anchor_state, const IdpLandmark& idp,
                    const CameraModel& model) {
  VINKIT_REQUIRE(idp.rho > 0.0, "inverse depth must be positive");
  return inverse_transform(anchor_state, idp.bearing / idp.rho, model);
}

IdpLandmark idp_from_world(const ImuState& anchor_state, const Vec3& l_w,
                           const CameraModel& model, std::int64_t anchor_frame) {
  const Vec3 l_c = transform_to_camera(anchor_state, l_w, model);
  VINKIT_REQUIRE(l_c.z() > kMinDepth, "anchor cannot see the point");
  IdpLandmark idp;
  idp.anchor_frame = anchor_frame;
  const double range = l_c.norm();
  idp.bearing = l_c / range;
  idp.rho = 1.0 / range;
  return idp;
}

Vec4 homogeneous_from_idp(const IdpLandmark& idp) {
  return Vec4(idp.bearing.x(), idp.bearing.y(), idp.bearing.z(), idp.rho);
}

IdpLandmark idp_from_homogeneous(const Vec4& h, std::int64_t anchor_frame) {
  const double norm = h.head<3>().norm();
  VINKIT_REQUIRE(norm > 0.0, "zero direction");
  // Scale so the direction part is a unit bearing; rho rescales with it.
  IdpLandmark idp;
  idp.anchor_frame = anchor_frame;
  idp.bearing = h.head<3>() / norm;
  idp.rho = h(3) / norm;
  VINKIT_REQUIRE(idp.rho > 0.0, "inverse depth must be positive");
  return idp;
}

Observation observe(const ImuState& state, const Vec3& l_w, const CameraModel& model,
                    bool apply_distortion) {
  Observation obs;
  const Vec3 l_c = transform_to_camera(state, l_w, model);
  const auto z_p = project(l_c);
  if (!z_p) {
    obs.status = ObserveStatus::kBehindCamera;
    return obs;
  }
  obs.pixel = apply_intrinsics(model, apply_distortion ? distort(model, *z_p) : *z_p);
  obs.status = in_image(model, obs.pixel) ? ObserveStatus::kOk : ObserveStatus::kOutsideImage;
  return obs;
}

std::optional<ObserveJacobians> observe_jacobians(const ImuState& state, const Vec3& l_w,
                                                  const CameraModel& model) {
  const Mat3 r_wi = quat_to_rotmat(state.orientation);
  const Vec3 l_i = r_wi.transpose() * (l_w - state.position);
  const Vec3 l_c = model.r_ci * l_i + model.t_ci;
  const auto z_p = project(l_c);
  if (!z_p) return std::nullopt;

  Eigen::Matrix<double, 2, 3> j_proj;
  const double iz = 1.0 / l_c.z();
  j_proj << iz, 0.0, -l_c.x() * iz * iz, 0.0, iz, -l_c.y() * iz * iz;
  j_proj.row(0) *= model.fx;
  j_proj.row(1) *= model.fy;

  ObserveJacobians out;
  out.pixel = apply_intrinsics(model, *z_p);
  out.h_state.block<2, 3>(0, kIdxPos) = j_proj * (-model.r_ci * r_wi.transpose());
  // Right perturbation q -> q * Exp(dth) moves the camera-frame point by
  // r_ci * [l_i]x * dth.
  out.h_state.block<2, 3>(0, kIdxAtt) = j_proj * (model.r_ci * skew(l_i));
  out.h_landmark = j_proj * (model.r_ci * r_wi.transpose());
  return out;
}

ResidualMetric metric_from_string(const std::string& name) {
  if (name == "image_plane") return ResidualMetric::kImagePlane;
  if (name == "unit_plane") return ResidualMetric::kUnitPlane;
  if (name == "unit_bearing") return ResidualMetric::kUnitBearing;
  if (name == "bearing_angle") return ResidualMetric::kBearingAngle;
  throw ContractViolation("unknown residual metric: " + name);
}

std::string to_string(ResidualMetric metric) {
  switch (metric) {
    case ResidualMetric::kImagePlane: return "image_plane";
    case ResidualMetric::kUnitPlane: return "unit_plane";
    case ResidualMetric::kUnitBearing: return "unit_bearing";
    case ResidualMetric::kBearingAngle: return "bearing_angle";
  }
  throw ContractViolation("unknown residual metric enum value");
}

std::optional<VecX> geometric_residual(const Vec2& measurement, const ImuState& state,
                                       const Vec3& l_w, const CameraModel& model,
                                       ResidualMetric metric) {
  const Vec3 l_c = transform_to_camera(state, l_w, model);
  const Vec3 m = back_project_ray(model, measurement);
  switch (metric) {
    case ResidualMetric::kImagePlane: {
      const auto z_p = project(l_c);
      if (!z_p) return std::nullopt;
      return VecX(measurement - apply_intrinsics(model, *z_p));
    }
    case ResidualMetric::kUnitPlane: {
      const auto z_p = project(l_c);
      if (!z_p) return std::nullopt;
      return VecX(m.head<2>() - *z_p);
    }
    // The bearing metrics compare ray directions, so they stay defined for
    // points beside or behind the camera; only the optical center itself
    // has no direction.
    case ResidualMetric::kUnitBearing: {
      if (l_c.norm() <= kMinDepth) return std::nullopt;
      return VecX(m.normalized() - l_c.normalized());
    }
    case ResidualMetric::kBearingAngle: {
      if (l_c.norm() <= kMinDepth) return std::nullopt;
      VecX r(1);
      r(0) = unit_angle(m.normalized(), l_c.normalized());
      return r;
    }
  }
  throw ContractViolation("unknown residual metric enum value");
}

IntensityField::IntensityField(int width, int height) : width_(width), height_(height) {
  VINKIT_REQUIRE(width >= 2 && height >= 2, "intensity field needs at least 2x2 nodes");
  grid_.setZero(height, width);
}

std::optional<double> IntensityField::sample(const Vec2& pixel) const {
  const double u = pixel.x(), v = pixel.y();
  if (!(u >= 0.0 && u <= width_ - 1.0 && v >= 0.0 && v <= height_ - 1.0)) return std::nullopt;
  const int j0 = std::min(static_cast<int>(std::floor(u)), width_ - 2);
  const int i0 = std::min(static_cast<int>(std::floor(v)), height_ - 2);
  const double a = u - j0;
  const double b = v - i0;
  return (1.0 - b) * ((1.0 - a) * grid_(i0, j0) + a * grid_(i0, j0 + 1)) +
         b * ((1.0 - a) * grid_(i0 + 1, j0) + a * grid_(i0 + 1, j0 + 1));
}

IntensityField render_plane(const PlaneScene& scene, const ImuState& state,
                            const CameraModel& model) {
  VINKIT_REQUIRE(static_cast<bool>(scene.texture), "plane scene has no texture");
  IntensityField field(model.width, model.height);
  const Vec3 center = camera_center(state, model);
  const Mat3 r_wc = quat_to_rotmat(state.orientation) * model.r_ci.transpose();
  for (int v = 0; v < model.height; ++v) {
    for (int u = 0; u < model.width; ++u) {
      const Vec3 dir = r_wc * back_project_ray(model, Vec2(u, v));
      const double denom = dir.dot(scene.normal);
      if (std::abs(denom) < 1e-12) continue;
      const double t = (scene.point - center).dot(scene.normal) / denom;
      if (t <= 0.0) continue;
      field.at(v, u) = scene.texture(center + t * dir);
    }
  }
  return field;
}

std::optional<Vec2> warp(const Vec2& pixel1, double rho, const ImuState& state1,
                         const ImuState& state2, const CameraModel& model) {
  const Vec3 l_w = inverse_transform(state1, back_project_idp(model, pixel1, rho), model);
  const Vec3 l_c2 = transform_to_camera(state2, l_w, model);
  const auto z_p = project(l_c2);
  if (!z_p) return std::nullopt;
  const Vec2 pixel2 = apply_intrinsics(model, *z_p);
  if (!in_image(model, pixel2)) return std::nullopt;
  return pixel2;
}

std::optional<double> photometric_residual(const Vec2& pixel1, double rho,
                                           const ImuState& state1, const ImuState& state2,
                                           const IntensityField& i1, const IntensityField& i2,
                                           const CameraModel& model) {
  const auto a = i1.sample(pixel1);
  if (!a) return std::nullopt;
  const auto pixel2 = warp(pixel1, rho, state1, state2, model);
  if (!pixel2) return std::nullopt;
  const auto b = i2.sample(*pixel2);
  if (!b) return std::nullopt;
  return *a - *b;
}

}  // namespace vinkit
