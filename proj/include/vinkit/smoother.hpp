#pragma once

#include "vinkit/camera.hpp"
#include "vinkit/imu.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vinkit {

// Fixed-lag window defaults: keyframe span plus the most recent frames.
inline constexpr int kDefaultKeyframeWindow = 7;
inline constexpr int kDefaultRecentWindow = 2;

// Residual of one preintegrated inertial constraint,
//   r = x_j [-] f(x_i, delta(b_i)),
// blocks ordered (p, theta, v, bg, ba); zero iff the pair is exactly
// consistent with the deltas at the biases of x_i.
Vec15 imu_factor_residual(const ImuState& state_i, const ImuState& state_j,
                          const PreintegratedImu& preint);

// Residual plus its derivatives w.r.t. right perturbations of both states.
// Any output may be null.
void imu_factor_jacobians(const ImuState& state_i, const ImuState& state_j,
                          const PreintegratedImu& preint, Vec15* residual,
                          Mat15* j_i, Mat15* j_j);

// Covariance of the residual for consistent states: the preintegrated
// covariance carried into the world-difference residual frame by
// blkdiag(R_i, I, R_i, I, I).
Mat15 imu_residual_covariance(const ImuState& state_i, const PreintegratedImu& preint);

struct ImuFactor {
  int frame_i = 0;
  int frame_j = 0;
  PreintegratedImu delta;
  // Whitener frozen when the factor enters the window: chol(Sigma_r)^-1.
  Mat15 sqrt_info = Mat15::Identity();
};

ImuFactor make_imu_factor(int frame_i, int frame_j, const PreintegratedImu& delta,
                          const ImuState& state_i_lin);

struct VisualFactor {
  int frame = 0;
  std::int64_t landmark_id = 0;
  Vec2 pixel = Vec2::Zero();  // undistorted
};

// Anchors the four directions vision plus gravity cannot observe: global
// position and heading. Roll and pitch stay free.
struct GaugePrior {
  int frame = 0;
  Vec3 position = Vec3::Zero();
  UnitQuaternion orientation;
  double sigma_pos = 1e-6;
  double sigma_yaw = 1e-6;
};

// Linear factor left behind by marginalization: cost ||A d - c||^2 with
// d the stacked boxminus from the anchors, frames first then landmarks.
struct DensePriorFactor {
  std::vector<int> frames;
  std::vector<std::int64_t> landmark_ids;
  std::vector<ImuState> frame_anchors;
  std::vector<Vec3> landmark_anchors;
  MatX sqrt_info;  // A, rows x dim()
  VecX offset;     // c
  int dim() const {
    return kStateDim * static_cast<int>(frames.size()) +
           3 * static_cast<int>(landmark_ids.size());
  }
};

struct Keyframe {
  std::int64_t timestamp_ns = 0;
  ImuState state;
};

struct WindowGraph {
  std::vector<Keyframe> frames;  // oldest first; factor indices point here
  std::map<std::int64_t, Vec3> landmarks;
  std::vector<ImuFactor> imu_factors;
  std::vector<VisualFactor> visual_factors;
  std::optional<GaugePrior> gauge;
  std::optional<DensePriorFactor> dense_prior;
  CameraModel camera;
  // Huber threshold on the whitened visual residual norm; <= 0 disables.
  double huber_sigmas = 1.345;

  int dim() const {
    return kStateDim * static_cast<int>(frames.size()) +
           3 * static_cast<int>(landmarks.size());
  }
};

struct CostBreakdown {
  double prior = 0.0;  // gauge + dense prior
  double imu = 0.0;
  double visual = 0.0;
  double total() const { return prior + imu + visual; }
};

// Sum of squared Mahalanobis residuals at the graph's current estimates,
// Huber-attenuated on the visual terms when configured.
CostBreakdown total_cost(const WindowGraph& g);

// Normal equations of the whitened linearization at the current estimates:
// the Gauss-Newton step solves h d = b. Layout: frames in window order
// (15 each), then landmarks in id order (3 each).
void linearize(const WindowGraph& g, MatX* h, VecX* b);

// Gauss-Newton step of h d = b; when use_schur, the trailing landmark block
// (everything past frame_dim) is eliminated first and back-substituted.
// Throws EstimationError when the reduced system is not positive definite.
VecX solve_normal_equations(const MatX& h, const VecX& b, int frame_dim,
                            bool use_schur);

// Schur complement onto the complement of `marg` (ascending scalar indices
// into h): the marginal information and gradient of the kept variables.
// Rank-deficient marginalized blocks are handled by pseudo-inverse, which is
// the flat-prior limit.
void schur_marginalize(const MatX& h, const VecX& b, const std::vector<int>& marg,
                       MatX* h_out, VecX* b_out);

enum class Method { kGaussNewton, kLevenbergMarquardt };

struct OptimizeOptions {
  Method method = Method::kLevenbergMarquardt;
  int max_iterations = 25;
  double tolerance = 1e-10;  // step-norm stopping threshold
  double lambda0 = 1e-4;     // initial LM damping
  bool use_schur = true;
};

struct OptimizeReport {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  bool converged = false;
  bool diverged = false;  // GN step increased the cost
};

// Iterates damped/undamped Gauss-Newton on the window until the step norm
// drops below tolerance. LM accepts only cost-decreasing steps; GN applies
// every step and reports divergence when the cost increases.
OptimizeReport optimize(WindowGraph* g, const OptimizeOptions& options = {});

// Consumes the oldest frame: factors touching it are linearized at the
// current estimates and Schur-reduced onto their Markov blanket, which
// becomes the new dense prior. Landmarks seen only by that frame are dropped
// (a single two-dimensional observation is fully explained by the landmark,
// so its marginal contribution to the rest of the graph is zero).
void marginalize_oldest(WindowGraph* g);

struct KeyframePolicy {
  double min_parallax_px = 10.0;
  int min_tracked = 20;
};

// True when the frame carries enough baseline or tracking has degraded.
bool select_keyframe(double median_parallax_px, int tracked_count,
                     const KeyframePolicy& policy = {});

struct FrameInput {
  std::int64_t timestamp_ns = 0;
  std::vector<FeatureObservation> features;  // undistorted pixels
};

struct InitializeOptions {
  double min_parallax_px = 10.0;
  // Pose and bias seed for the first frame; velocity is always solved from
  // the epipolar constraints. Identity when unset.
  std::optional<ImuState> anchor;
};

// Bootstraps a window from raw frames and the covering IMU stream: attitudes
// by gyro dead reckoning, the initial velocity from the coplanarity of
// feature rays and preintegrated baselines (linear in v0), landmarks by
// midpoint triangulation, then one damped refinement pass. Returns nullopt
// while the data cannot support initialization (too few frames or parallax).
std::optional<WindowGraph> initialize_window(const std::vector<FrameInput>& frames,
                                             const std::vector<ImuSample>& imu,
                                             const CameraModel& camera,
                                             const NoiseParams& noise,
                                             const InitializeOptions& options = {});

}  // namespace vinkit
