#pragma once

#include "vinkit/imu.hpp"
#include "vinkit/sim.hpp"
#include "vinkit/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vinkit {

// Estimate/truth samples matched by timestamp.
struct TrajectoryPair {
  std::vector<std::int64_t> timestamps_ns;
  std::vector<ImuState> estimate;
  std::vector<ImuState> truth;

  std::size_t size() const { return timestamps_ns.size(); }
};

inline constexpr std::int64_t kDefaultAssociationToleranceNs = 1000000;  // 1 ms

// Nearest-neighbor matching of estimate timestamps into the truth stream;
// samples without a truth neighbor inside the tolerance are dropped.
TrajectoryPair associate(const std::vector<TimedState>& estimate,
                         const std::vector<TimedState>& truth,
                         std::int64_t tolerance_ns = kDefaultAssociationToleranceNs);

enum class AlignMode { kSe3, kFourDof };

// Rigid correction applied to the estimate: p -> r * p + t.
struct Alignment {
  Mat3 r = Mat3::Identity();
  Vec3 t = Vec3::Zero();
};

// Least-squares fit of the estimated positions onto the truth over the
// chosen transform group. four_dof restricts to yaw and translation, the
// gauge freedom of a gravity-aligned estimator.
Alignment align(const TrajectoryPair& pair, AlignMode mode);
TrajectoryPair apply_alignment(const TrajectoryPair& pair, const Alignment& alignment);

// Position RMSE over the pair (align first if a gauge correction is wanted).
double ate(const TrajectoryPair& pair);

struct RpeDelta {
  enum class Unit { kSeconds, kMeters } unit = Unit::kSeconds;
  double value = 1.0;
};

struct RpeResult {
  std::vector<double> translation_errors;  // meters, one per segment
  std::vector<double> rotation_errors;     // radians, one per segment
  double translation_rmse = 0.0;
  double rotation_rmse = 0.0;
};

// Relative-pose error over sliding segments of the given span (time or
// ground-truth path length).
RpeResult rpe(const TrajectoryPair& pair, const RpeDelta& delta);

enum class NeesVariant { kFull15, kPose6 };

struct NeesResult {
  std::vector<double> per_step;
  double average = 0.0;
};

// Normalized estimation error squared, d = estimate (-) truth on the error
// space, e = d' P^-1 d. Covariances are the full 15x15 blocks; the pose
// variant uses their position/attitude sub-block.
NeesResult nees(const TrajectoryPair& pair, const std::vector<Mat15>& covariances,
                NeesVariant variant);

// Regularized lower incomplete gamma, the chi-square CDF, and its inverse;
// used for consistency intervals.
double gamma_p(double a, double x);
double chi2_cdf(double x, int dof);
double chi2_quantile(double p, int dof);

// Two-sided interval for the AVERAGE of n iid chi-square(dof) variables.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const { return x >= lo && x <= hi; }
};
Interval average_nees_interval(int dof, int n_runs, double confidence = 0.95);

struct MetricsSummary {
  double ate_rmse_m = 0.0;
  double rpe_trans_rmse = 0.0;
  double rpe_rot_rmse_rad = 0.0;
  double avg_nees = 0.0;
  std::vector<double> rpe_trans_segments;
  std::vector<double> rpe_rot_segments;
};

void write_metrics_json(const std::string& path, const MetricsSummary& metrics);
// Plot-ready per-sample errors: timestamp_ns, pos_err_m, rot_err_rad.
void write_error_csv(const std::string& path, const TrajectoryPair& pair);

}  // namespace vinkit
