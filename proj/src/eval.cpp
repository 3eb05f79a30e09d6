#include "vinkit/eval.hpp"

#include <json.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace vinkit {

namespace {

UnitQuaternion quat_from_rotmat(const Mat3& r) {
  const Eigen::Quaterniond q(r);
  return UnitQuaternion(q.w(), q.x(), q.y(), q.z());
}

// 17 significant digits round-trips a double exactly, keeping file output
// byte-stable across runs.
std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double rmse(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double sq = 0.0;
  for (double v : values) sq += v * v;
  return std::sqrt(sq / static_cast<double>(values.size()));
}

void check_pair(const TrajectoryPair& pair) {
  VINKIT_REQUIRE(pair.estimate.size() == pair.timestamps_ns.size() &&
                     pair.truth.size() == pair.timestamps_ns.size(),
                 "trajectory pair arrays must have equal length");
  VINKIT_REQUIRE(!pair.timestamps_ns.empty(), "trajectory pair is empty");
}

}  // namespace

TrajectoryPair associate(const std::vector<TimedState>& estimate,
                         const std::vector<TimedState>& truth,
                         std::int64_t tolerance_ns) {
  VINKIT_REQUIRE(tolerance_ns > 0, "association tolerance must be positive");
  for (std::size_t i = 1; i < truth.size(); ++i) {
    VINKIT_REQUIRE(truth[i].timestamp_ns > truth[i - 1].timestamp_ns,
                   "truth timestamps must be strictly increasing");
  }

  std::vector<std::int64_t> truth_ts(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) truth_ts[i] = truth[i].timestamp_ns;

  TrajectoryPair pair;
  for (const TimedState& est : estimate) {
    auto it = std::lower_bound(truth_ts.begin(), truth_ts.end(), est.timestamp_ns);
    std::size_t best = truth.size();
    std::int64_t best_gap = tolerance_ns + 1;
    if (it != truth_ts.end()) {
      const std::int64_t gap = *it - est.timestamp_ns;
      if (gap < best_gap) {
        best_gap = gap;
        best = static_cast<std::size_t>(it - truth_ts.begin());
      }
    }
    if (it != truth_ts.begin()) {
      const std::int64_t gap = est.timestamp_ns - *(it - 1);
      if (gap < best_gap) {
        best_gap = gap;
        best = static_cast<std::size_t>(it - 1 - truth_ts.begin());
      }
    }
    if (best == truth.size()) continue;  // no truth sample inside the tolerance
    pair.timestamps_ns.push_back(est.timestamp_ns);
    pair.estimate.push_back(est.state);
    pair.truth.push_back(truth[best].state);
  }
  return pair;
}

Alignment align(const TrajectoryPair& pair, AlignMode mode) {
  check_pair(pair);
  const std::size_t n = pair.size();

  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (std::size_t i = 0; i < n; ++i) {
    src.col(i) = pair.estimate[i].position;
    dst.col(i) = pair.truth[i].position;
  }
  const Vec3 mean_src = src.rowwise().mean();
  const Vec3 mean_dst = dst.rowwise().mean();
  const Eigen::Matrix3Xd src_c = src.colwise() - mean_src;
  const Eigen::Matrix3Xd dst_c = dst.colwise() - mean_dst;

  Alignment result;
  if (mode == AlignMode::kSe3) {
    VINKIT_REQUIRE(n >= 3, "se3 alignment needs at least three poses");
    // Rotation about the principal axis of a collinear cloud is unobservable.
    const Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(src_c);
    const Vec3 sv = svd.singularValues();
    if (sv(0) <= 0.0 || sv(1) <= 1e-9 * sv(0)) {
      throw EstimationError("se3 alignment degenerate: positions are collinear");
    }
    const Eigen::Matrix4d T = Eigen::umeyama(src, dst, /*with_scaling=*/false);
    result.r = T.topLeftCorner<3, 3>();
    result.t = T.topRightCorner<3, 1>();
  } else {
    VINKIT_REQUIRE(n >= 2, "four_dof alignment needs at least two poses");
    // Yaw maximizes b cos(psi) + a sin(psi) over the centered horizontal
    // coordinates; both vanish iff either cloud has no horizontal extent.
    double a = 0.0, b = 0.0, spread_src = 0.0, spread_dst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double xe = src_c(0, i), ye = src_c(1, i);
      const double xg = dst_c(0, i), yg = dst_c(1, i);
      a += xe * yg - ye * xg;
      b += xe * xg + ye * yg;
      spread_src += xe * xe + ye * ye;
      spread_dst += xg * xg + yg * yg;
    }
    if (spread_src <= 0.0 || spread_dst <= 0.0 ||
        a * a + b * b <= 1e-24 * spread_src * spread_dst) {
      throw EstimationError("four_dof alignment degenerate: yaw unobservable");
    }
    const double psi = std::atan2(a, b);
    result.r = Eigen::AngleAxisd(psi, Vec3::UnitZ()).toRotationMatrix();
    result.t = mean_dst - result.r * mean_src;
  }
  return result;
}

TrajectoryPair apply_alignment(const TrajectoryPair& pair, const Alignment& alignment) {
  check_pair(pair);
  const UnitQuaternion q_align = quat_from_rotmat(alignment.r);
  TrajectoryPair out = pair;
  for (ImuState& state : out.estimate) {
    state.position = alignment.r * state.position + alignment.t;
    state.orientation = quat_mul(q_align, state.orientation);
    state.velocity = alignment.r * state.velocity;
  }
  return out;
}

double ate(const TrajectoryPair& pair) {
  check_pair(pair);
  std::vector<double> errors(pair.size());
  for (std::size_t i = 0; i < pair.size(); ++i) {
    errors[i] = (pair.estimate[i].position - pair.truth[i].position).norm();
  }
  return rmse(errors);
}

RpeResult rpe(const TrajectoryPair& pair, const RpeDelta& delta) {
  check_pair(pair);
  VINKIT_REQUIRE(std::isfinite(delta.value) && delta.value > 0.0,
                 "rpe delta must be positive");
  const std::size_t n = pair.size();

  // Segment spans measured on the ground truth: elapsed time or arc length.
  std::vector<double> span(n, 0.0);
  if (delta.unit == RpeDelta::Unit::kSeconds) {
    for (std::size_t i = 0; i < n; ++i) {
      span[i] = static_cast<double>(pair.timestamps_ns[i] - pair.timestamps_ns[0]) * 1e-9;
    }
  } else {
    for (std::size_t i = 1; i < n; ++i) {
      span[i] = span[i - 1] + (pair.truth[i].position - pair.truth[i - 1].position).norm();
    }
  }

  RpeResult result;
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (j < i + 1) j = i + 1;
    while (j < n && span[j] - span[i] < delta.value) ++j;
    if (j == n) break;

    const ImuState& ei = pair.estimate[i];
    const ImuState& ej = pair.estimate[j];
    const ImuState& gi = pair.truth[i];
    const ImuState& gj = pair.truth[j];

    const Vec3 t_est = ei.orientation.conjugate().rotate(ej.position - ei.position);
    const Vec3 t_gt = gi.orientation.conjugate().rotate(gj.position - gi.position);
    const UnitQuaternion q_est = quat_mul(ei.orientation.conjugate(), ej.orientation);
    const UnitQuaternion q_gt = quat_mul(gi.orientation.conjugate(), gj.orientation);

    result.translation_errors.push_back((t_est - t_gt).norm());
    result.rotation_errors.push_back(boxminus(q_est, q_gt).norm());
  }
  VINKIT_REQUIRE(!result.translation_errors.empty(),
                 "rpe delta exceeds the trajectory span");
  result.translation_rmse = rmse(result.translation_errors);
  result.rotation_rmse = rmse(result.rotation_errors);
  return result;
}

NeesResult nees(const TrajectoryPair& pair, const std::vector<Mat15>& covariances,
                NeesVariant variant) {
  check_pair(pair);
  VINKIT_REQUIRE(covariances.size() == pair.size(),
                 "one covariance per trajectory sample required");
  const int dim = variant == NeesVariant::kFull15 ? kStateDim : 6;

  NeesResult result;
  result.per_step.resize(pair.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < pair.size(); ++k) {
    const Vec15 delta15 = boxminus(pair.estimate[k], pair.truth[k]);
    const VecX d = delta15.head(dim);
    const MatX p = covariances[k].topLeftCorner(dim, dim);

    const Eigen::SelfAdjointEigenSolver<MatX> eig(0.5 * (p + p.transpose()));
    VINKIT_REQUIRE(eig.info() == Eigen::Success && eig.eigenvalues().minCoeff() > 0.0,
                   "nees covariance is singular or indefinite");
    const VecX proj = eig.eigenvectors().transpose() * d;
    double e = 0.0;
    for (int i = 0; i < dim; ++i) e += proj(i) * proj(i) / eig.eigenvalues()(i);
    result.per_step[k] = e;
    sum += e;
  }
  result.average = sum / static_cast<double>(pair.size());
  return result;
}

double gamma_p(double a, double x) {
  VINKIT_REQUIRE(a > 0.0 && x >= 0.0, "gamma_p needs a > 0 and x >= 0");
  if (x == 0.0) return 0.0;
  const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    // Power series for P(a, x); each term multiplies by x / (a + n).
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 1000; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-17) break;
    }
    return sum * std::exp(log_prefactor);
  }
  // Modified Lentz continued fraction for Q(a, x), stable for x >= a + 1.
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-17) break;
  }
  return 1.0 - std::exp(log_prefactor) * h;
}

double chi2_cdf(double x, int dof) {
  VINKIT_REQUIRE(dof >= 1, "chi2 dof must be positive");
  VINKIT_REQUIRE(std::isfinite(x), "chi2_cdf needs finite x");
  if (x <= 0.0) return 0.0;
  return gamma_p(0.5 * dof, 0.5 * x);
}

double chi2_quantile(double p, int dof) {
  VINKIT_REQUIRE(dof >= 1, "chi2 dof must be positive");
  VINKIT_REQUIRE(p > 0.0 && p < 1.0, "chi2 quantile needs p in (0, 1)");
  double lo = 0.0;
  double hi = dof + 10.0 * std::sqrt(2.0 * dof) + 10.0;
  while (chi2_cdf(hi, dof) < p) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-13 * std::max(1.0, hi); ++i) {
    const double mid = 0.5 * (lo + hi);
    (chi2_cdf(mid, dof) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Interval average_nees_interval(int dof, int n_runs, double confidence) {
  VINKIT_REQUIRE(dof >= 1 && n_runs >= 1, "dof and run count must be positive");
  VINKIT_REQUIRE(confidence > 0.0 && confidence < 1.0, "confidence must be in (0, 1)");
  // The sum of n iid chi-square(d) variables is chi-square(n d); divide its
  // quantiles by n to bound the average.
  const double alpha = 1.0 - confidence;
  Interval interval;
  interval.lo = chi2_quantile(0.5 * alpha, dof * n_runs) / n_runs;
  interval.hi = chi2_quantile(1.0 - 0.5 * alpha, dof * n_runs) / n_runs;
  return interval;
}

void write_metrics_json(const std::string& path, const MetricsSummary& metrics) {
  nlohmann::json j;
  j["ate_rmse_m"] = metrics.ate_rmse_m;
  j["rpe_trans_rmse"] = metrics.rpe_trans_rmse;
  j["rpe_rot_rmse_rad"] = metrics.rpe_rot_rmse_rad;
  j["avg_nees"] = metrics.avg_nees;
  j["rpe_trans_segments"] = metrics.rpe_trans_segments;
  j["rpe_rot_segments"] = metrics.rpe_rot_segments;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

void write_error_csv(const std::string& path, const TrajectoryPair& pair) {
  check_pair(pair);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "timestamp_ns,pos_err_m,rot_err_rad\n";
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const double pos_err = (pair.estimate[i].position - pair.truth[i].position).norm();
    const double rot_err =
        boxminus(pair.estimate[i].orientation, pair.truth[i].orientation).norm();
    out << pair.timestamps_ns[i] << "," << format_double(pos_err) << ","
        << format_double(rot_err) << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace vinkit
