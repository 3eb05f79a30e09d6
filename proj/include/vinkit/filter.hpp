#pragma once

#include "vinkit/camera.hpp"
#include "vinkit/imu.hpp"
#include "vinkit/types.hpp"

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace vinkit {

// chi-square(2 dof, 0.999) = -2 log(0.001), the default innovation gate for
// a pixel measurement.
inline constexpr double kVisualGateChi2 = 13.815510557964274;

// Joint error-state filter: inertial state plus the map points it currently
// tracks. The covariance orders blocks (15 IMU error coordinates, then 3 per
// landmark in ascending id order).
struct FilterState {
  ImuState imu;
  std::map<std::int64_t, Vec3> landmarks;  // euclidean world points
  MatX covariance = MatX::Zero(kStateDim, kStateDim);

  int dim() const { return kStateDim + 3 * static_cast<int>(landmarks.size()); }
};

// Column offset of a landmark's error block; unknown id is a contract
// violation.
int landmark_index(const FilterState& fs, std::int64_t landmark_id);

// Mean through imu propagation; covariance IMU block through Phi and Qk,
// IMU-landmark cross blocks through Phi alone. Landmark-landmark blocks are
// untouched (static world).
FilterState filter_propagate(const FilterState& fs, const std::vector<ImuSample>& samples,
                             const NoiseParams& noise, Integrator integrator);

struct UpdateOptions {
  double gate_chi2 = kVisualGateChi2;
  // Pixel noise standard deviation; non-positive falls back to the camera
  // model's sigma_px.
  double sigma_px = -1.0;
  // 1 is the plain EKF correction; larger values re-linearize until the
  // correction step drops below iteration_tol (Gauss-Newton on the
  // single-frame posterior).
  int max_iterations = 1;
  double iteration_tol = 1e-10;
};

struct UpdateReport {
  int accepted = 0;
  int gated = 0;
  // Observations were supplied but every one failed the gate; the state
  // passed through unchanged.
  bool all_gated = false;
  int iterations = 0;
  double residual_norm = 0.0;  // stacked innovation at the first linearization
};

// Visual update with stacked undistorted-pixel measurements. Observations
// must reference landmarks already in the state; each is Mahalanobis-gated
// against its own innovation covariance before stacking, and the covariance
// update uses the Joseph form.
FilterState filter_update(const FilterState& fs,
                          const std::vector<FeatureObservation>& observations,
                          const CameraModel& model, UpdateReport* report = nullptr,
                          const UpdateOptions& options = {});

// One Kalman step x + = x (+) K nu, P+ = (I - KH) P (I - KH)' + K R K' for an
// arbitrary linear measurement z = H dx + n, n ~ N(0, r_cov). The visual
// update is built on this; exposed so linear-Gaussian harnesses can drive the
// exact same arithmetic.
FilterState apply_linear_update(const FilterState& fs, const MatX& h,
                                const VecX& innovation, const MatX& r_cov);

// Rays closer than this to parallel carry no depth information; candidate
// landmarks below the threshold stay deferred (0.5 degree).
inline constexpr double kMinInitParallaxRad = 0.008726646259971648;

// One observing view for delayed landmark initialization: the estimated
// inertial pose of the frame and the undistorted pixel seen there.
struct LandmarkView {
  ImuState state;
  Vec2 pixel = Vec2::Zero();
};

// Midpoint triangulation over all views, covariance from the reprojection
// normal equations (inflated x2), zero cross-covariance against the existing
// state. Returns false (state unchanged) while the geometry is too weak:
// parallax under min_parallax_rad or the point behind any view.
bool initialize_landmark(FilterState* fs, std::int64_t landmark_id,
                         const std::vector<LandmarkView>& views, const CameraModel& model,
                         double min_parallax_rad = kMinInitParallaxRad);

// Gaussian marginalization of a covariance block is plain deletion: drop the
// landmark's rows and columns and its map entry.
FilterState marginalize_landmark(const FilterState& fs, std::int64_t landmark_id);

}  // namespace vinkit
