#pragma once

#include "vinkit/imu.hpp"
#include "vinkit/manifold.hpp"
#include "vinkit/types.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>

namespace vinkit {

// Points at or behind this camera-frame depth do not project.
inline constexpr double kMinDepth = 1e-6;

// Pinhole intrinsics with rational radial (k1..k6) and tangential (p1, p2)
// distortion, plus the IMU-to-camera extrinsic transform:
//   L_C = r_ci * L_I + t_ci.
struct CameraModel {
  double fx = 500.0, fy = 500.0;
  double cx = 320.0, cy = 240.0;
  int width = 640, height = 480;
  Eigen::Matrix<double, 6, 1> k = Eigen::Matrix<double, 6, 1>::Zero();
  Vec2 p = Vec2::Zero();
  Mat3 r_ci = Mat3::Identity();
  Vec3 t_ci = Vec3::Zero();
  double sigma_px = 1.0;

  bool has_distortion() const {
    return k.cwiseAbs().maxCoeff() > 0.0 || p.cwiseAbs().maxCoeff() > 0.0;
  }
};

struct FeatureObservation {
  std::int64_t timestamp_ns = 0;
  std::int64_t frame_id = 0;
  std::int64_t landmark_id = 0;
  Vec2 pixel = Vec2::Zero();
};

// Inverse-depth point: unit bearing and inverse range in the camera frame
// of the anchor keyframe (the first frame that observed it), L_C = m / rho.
struct IdpLandmark {
  std::int64_t anchor_frame = -1;
  Vec3 bearing = Vec3(0.0, 0.0, 1.0);
  double rho = 1.0;
};

// World point or anchored inverse-depth point, tagged with its track id.
struct Landmark {
  std::int64_t id = -1;
  std::variant<Vec3, IdpLandmark> geometry = Vec3::Zero();
};

// ---- projection chain stages ----

// World point into the camera frame through the IMU pose.
Vec3 transform_to_camera(const ImuState& state, const Vec3& l_w, const CameraModel& model);
// Exact algebraic inverse of transform_to_camera.
Vec3 inverse_transform(const ImuState& state, const Vec3& l_c, const CameraModel& model);
// Optical center in world coordinates.
Vec3 camera_center(const ImuState& state, const CameraModel& model);

// Perspective division onto the unit plane; empty if z <= kMinDepth.
std::optional<Vec2> project(const Vec3& l_c);

Vec2 distort(const CameraModel& model, const Vec2& z_p);
// Fixed-point inverse of distort (10 iterations / 1e-10 step tolerance).
Vec2 undistort(const CameraModel& model, const Vec2& z_d);

Vec2 apply_intrinsics(const CameraModel& model, const Vec2& z);
Vec2 invert_intrinsics(const CameraModel& model, const Vec2& pixel);

// Unit-plane ray (x, y, 1) of an (undistorted) pixel. Up to scale.
Vec3 back_project_ray(const CameraModel& model, const Vec2& pixel);
// Point at inverse range rho along the pixel's unit bearing, in the camera
// frame: m_hat / rho.
Vec3 back_project_idp(const CameraModel& model, const Vec2& pixel, double rho);

bool in_image(const CameraModel& model, const Vec2& pixel);

// Measured pixels carry the lens distortion; estimator-facing pixels do
// not. This removes it in one step per feature.
Vec2 undistort_pixel(const CameraModel& model, const Vec2& pixel);

// ---- inverse depth and homogeneous parametrizations ----

Vec3 world_from_idp(const ImuState& anchor_state, const IdpLandmark& idp,
                    const CameraModel& model);
// rho from the range along the bearing; rejects points at the optical
// center or behind the camera.
IdpLandmark idp_from_world(const ImuState& anchor_state, const Vec3& l_w,
                           const CameraModel& model, std::int64_t anchor_frame);

// Projective-space form (m_x, m_y, m_z, rho); conversion utility only, no
// residual consumes it.
Vec4 homogeneous_from_idp(const IdpLandmark& idp);
IdpLandmark idp_from_homogeneous(const Vec4& h, std::int64_t anchor_frame);

// ---- full chain ----

enum class ObserveStatus { kOk, kBehindCamera, kOutsideImage };

struct Observation {
  ObserveStatus status = ObserveStatus::kBehindCamera;
  Vec2 pixel = Vec2::Zero();
  bool ok() const { return status == ObserveStatus::kOk; }
};

// Full chain pixel = K(D(P(T(x, L)))). apply_distortion selects whether the
// lens model is in the chain: the simulator renders with it, estimators
// work on undistorted inputs without it.
Observation observe(const ImuState& state, const Vec3& l_w, const CameraModel& model,
                    bool apply_distortion);

// Jacobians of the undistorted chain with respect to the state tangent
// (position and attitude blocks; velocity/bias columns are zero) and the
// landmark position. Returns the predicted pixel alongside. Empty when the
// point fails cheirality.
struct ObserveJacobians {
  Vec2 pixel = Vec2::Zero();
  Eigen::Matrix<double, 2, 15> h_state = Eigen::Matrix<double, 2, 15>::Zero();
  Eigen::Matrix<double, 2, 3> h_landmark = Eigen::Matrix<double, 2, 3>::Zero();
};
std::optional<ObserveJacobians> observe_jacobians(const ImuState& state, const Vec3& l_w,
                                                  const CameraModel& model);

// ---- geometric residual metrics ----

enum class ResidualMetric { kImagePlane, kUnitPlane, kUnitBearing, kBearingAngle };

ResidualMetric metric_from_string(const std::string& name);
std::string to_string(ResidualMetric metric);

// measurement-minus-prediction under the chosen metric; measurement is an
// undistorted pixel. Dimension: 2 (plane metrics), 3 (unit bearing),
// 1 (bearing angle). Plane metrics are empty on cheirality failure; the
// bearing metrics accept any direction and only reject a point at the
// optical center.
std::optional<VecX> geometric_residual(const Vec2& measurement, const ImuState& state,
                                       const Vec3& l_w, const CameraModel& model,
                                       ResidualMetric metric);

// ---- photometric machinery ----

// Sampled image with bilinear interpolation between pixel-center nodes;
// the valid domain is [0, width-1] x [0, height-1].
class IntensityField {
 public:
  IntensityField(int width, int height);

  int width() const { return width_; }
  int height() const { return height_; }
  double& at(int row, int col) { return grid_(row, col); }
  double at(int row, int col) const { return grid_(row, col); }

  std::optional<double> sample(const Vec2& pixel) const;

 private:
  int width_, height_;
  Eigen::MatrixXd grid_;  // height x width
};

// Textured world plane for rendering synthetic views.
struct PlaneScene {
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3(0.0, 0.0, 1.0);
  std::function<double(const Vec3&)> texture;
};

// Evaluates the scene through the true geometry at every pixel center.
// Pixels whose ray misses the plane (or hits it behind the camera) get 0.
IntensityField render_plane(const PlaneScene& scene, const ImuState& state,
                            const CameraModel& model);

// Maps a pixel of frame 1 into frame 2 through the inverse-depth point it
// observes: back-project at rho, move to world, reproject. Undistorted
// pixel coordinates on both ends. Empty if the target fails cheirality or
// leaves the image.
std::optional<Vec2> warp(const Vec2& pixel1, double rho, const ImuState& state1,
                         const ImuState& state2, const CameraModel& model);

// I_1(z) - I_2(warp(z)); empty when the warp fails or either field is
// sampled outside its domain.
std::optional<double> photometric_residual(const Vec2& pixel1, double rho,
                                           const ImuState& state1, const ImuState& state2,
                                           const IntensityField& i1, const IntensityField& i2,
                                           const CameraModel& model);

}  // namespace vinkit
