#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "test_support.hpp"
#include "vinkit/eval.hpp"

#include <json.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Geometry>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace vinkit;

namespace {

TrajectoryPair identical_pair(int n = 8, unsigned seed = 11) {
  std::mt19937_64 rng(seed);
  TrajectoryPair pair;
  for (int i = 0; i < n; ++i) {
    const ImuState s = testsup::random_state(rng);
    pair.timestamps_ns.push_back(100000000LL * i);
    pair.estimate.push_back(s);
    pair.truth.push_back(s);
  }
  return pair;
}

std::vector<ImuState> transform_states(const std::vector<ImuState>& states,
                                       const UnitQuaternion& q0, const Vec3& t0) {
  const Mat3 r0 = quat_to_rotmat(q0);
  std::vector<ImuState> out = states;
  for (ImuState& s : out) {
    s.position = r0 * s.position + t0;
    s.orientation = quat_mul(q0, s.orientation);
    s.velocity = r0 * s.velocity;
  }
  return out;
}

double alignment_sse(const TrajectoryPair& pair, const Mat3& r, const Vec3& t) {
  double sse = 0.0;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    sse += (r * pair.estimate[i].position + t - pair.truth[i].position).squaredNorm();
  }
  return sse;
}

// Chi-square density through the log form so large dof stays finite.
double chi2_pdf(double x, int dof) {
  if (x <= 0.0) return 0.0;
  const double k2 = 0.5 * dof;
  return std::exp((k2 - 1.0) * std::log(x) - 0.5 * x - std::lgamma(k2) -
                  k2 * std::log(2.0));
}

// Composite Simpson integral of the density, an oracle independent of the
// incomplete-gamma evaluation in the library.
double chi2_cdf_simpson(double x, int dof, int intervals = 200000) {
  const double h = x / intervals;
  double sum = chi2_pdf(0.0, dof) + chi2_pdf(x, dof);
  for (int i = 1; i < intervals; ++i) {
    sum += (i % 2 == 1 ? 4.0 : 2.0) * chi2_pdf(i * h, dof);
  }
  return sum * h / 3.0;
}

}  // namespace

TEST_CASE("chi-square cdf matches analytic and integral oracles") {
  // dof 1 reduces to the error function, dof 2 to an exponential.
  for (double x : {0.04, 0.5, 1.0, 3.841, 9.0, 25.0}) {
    CHECK(chi2_cdf(x, 1) == doctest::Approx(std::erf(std::sqrt(0.5 * x))).epsilon(1e-12));
    CHECK(chi2_cdf(x, 2) == doctest::Approx(1.0 - std::exp(-0.5 * x)).epsilon(1e-12));
  }
  const std::vector<std::pair<int, double>> probes = {
      {3, 0.35}, {5, 7.3}, {10, 20.483}, {40, 52.0}};
  for (const auto& [dof, x] : probes) {
    CHECK(chi2_cdf(x, dof) == doctest::Approx(chi2_cdf_simpson(x, dof)).epsilon(1e-9));
  }
  CHECK(chi2_cdf(0.0, 5) == 0.0);
  CHECK(chi2_cdf(-1.0, 5) == 0.0);
  CHECK_THROWS_AS(chi2_cdf(1.0, 0), ContractViolation);
}

TEST_CASE("chi-square quantile hits table anchors and inverts the cdf") {
  // Published table values.
  CHECK(chi2_quantile(0.95, 1) == doctest::Approx(3.841459).epsilon(1e-6));
  CHECK(chi2_quantile(0.95, 3) == doctest::Approx(7.814728).epsilon(1e-6));
  CHECK(chi2_quantile(0.975, 10) == doctest::Approx(20.48318).epsilon(1e-6));
  CHECK(chi2_quantile(0.025, 10) == doctest::Approx(3.246973).epsilon(1e-6));
  CHECK(chi2_quantile(0.99, 5) == doctest::Approx(15.086).epsilon(1e-4));

  // dof 2 in closed form: q(p) = -2 log(1 - p).
  for (double p : {0.01, 0.025, 0.3, 0.5, 0.9, 0.975, 0.999}) {
    CHECK(chi2_quantile(p, 2) ==
          doctest::Approx(-2.0 * std::log1p(-p)).epsilon(1e-10));
  }

  for (int dof : {1, 2, 6, 15, 100, 750}) {
    for (double p : {0.025, 0.5, 0.975}) {
      CHECK(chi2_cdf(chi2_quantile(p, dof), dof) == doctest::Approx(p).epsilon(1e-11));
    }
    CHECK(chi2_quantile(0.9, dof) < chi2_quantile(0.95, dof));
  }

  CHECK_THROWS_AS(chi2_quantile(0.0, 5), ContractViolation);
  CHECK_THROWS_AS(chi2_quantile(1.0, 5), ContractViolation);
  CHECK_THROWS_AS(chi2_quantile(0.5, 0), ContractViolation);
}

TEST_CASE("average nees interval brackets the dof") {
  const Interval i50 = average_nees_interval(15, 50);
  CHECK(i50.lo == chi2_quantile(0.025, 750) / 50.0);
  CHECK(i50.hi == chi2_quantile(0.975, 750) / 50.0);
  CHECK(i50.lo < 15.0);
  CHECK(i50.hi > 15.0);
  CHECK(i50.contains(15.0));
  CHECK_FALSE(i50.contains(0.0));

  // Wilson-Hilferty closed-form approximation of the chi-square quantile as
  // an independent anchor at the consistency-test operating point.
  const double z = 1.959963984540054;
  const auto wh = [](int k, double zq) {
    const double c = 2.0 / (9.0 * k);
    return k * std::pow(1.0 - c + zq * std::sqrt(c), 3.0);
  };
  CHECK(i50.hi * 50.0 == doctest::Approx(wh(750, z)).epsilon(1e-3));
  CHECK(i50.lo * 50.0 == doctest::Approx(wh(750, -z)).epsilon(1e-3));

  // More runs concentrate the interval around the dof; the width scales as
  // the inverse square root of the run count (0.1 exactly in the limit).
  const Interval i5000 = average_nees_interval(15, 5000);
  CHECK(i5000.hi - i5000.lo < 0.12 * (i50.hi - i50.lo));
  CHECK(i5000.contains(15.0));

  CHECK_THROWS_AS(average_nees_interval(0, 50), ContractViolation);
  CHECK_THROWS_AS(average_nees_interval(15, 0), ContractViolation);
  CHECK_THROWS_AS(average_nees_interval(15, 50, 0.0), ContractViolation);
  CHECK_THROWS_AS(average_nees_interval(15, 50, 1.0), ContractViolation);
}

TEST_CASE("associate keeps nearest matches inside the tolerance") {
  std::vector<TimedState> truth;
  for (int k = 0; k < 10; ++k) {
    TimedState n;
    n.timestamp_ns = 100000000LL * k;
    n.state.position = Vec3(k, 0.0, 0.0);  // marker identifying the node
    truth.push_back(n);
  }

  std::vector<TimedState> est(6);
  est[0].timestamp_ns = 200000000LL + 900000;    // 0.9 ms late -> node 2
  est[1].timestamp_ns = 300000000LL;             // exact -> node 3
  est[2].timestamp_ns = 400000000LL + 1100000;   // 1.1 ms late -> dropped
  est[3].timestamp_ns = 700000000LL - 999000;    // 0.999 ms early -> node 7
  est[4].timestamp_ns = -500000000LL;            // before the stream -> dropped
  est[5].timestamp_ns = 2000000000LL;            // past the stream -> dropped

  const TrajectoryPair pair = associate(est, truth);
  REQUIRE(pair.size() == 3);
  CHECK(pair.timestamps_ns[0] == est[0].timestamp_ns);  // estimate stamps kept
  CHECK(pair.truth[0].position.x() == 2.0);
  CHECK(pair.truth[1].position.x() == 3.0);
  CHECK(pair.truth[2].position.x() == 7.0);

  // Equidistant-ish probe picks the strictly nearer neighbor.
  std::vector<TimedState> close(2);
  close[0].timestamp_ns = 0;
  close[0].state.position = Vec3(10.0, 0.0, 0.0);
  close[1].timestamp_ns = 2000000;
  close[1].state.position = Vec3(20.0, 0.0, 0.0);
  std::vector<TimedState> probe(1);
  probe[0].timestamp_ns = 1300000;
  const TrajectoryPair near = associate(probe, close);
  REQUIRE(near.size() == 1);
  CHECK(near.truth[0].position.x() == 20.0);

  CHECK(associate(est, {}).size() == 0);
  CHECK_THROWS_AS(associate(est, truth, 0), ContractViolation);
  std::vector<TimedState> unsorted = truth;
  std::swap(unsorted[2], unsorted[3]);
  CHECK_THROWS_AS(associate(est, unsorted), ContractViolation);
}

TEST_CASE("alignment is identity for identical trajectories") {
  const TrajectoryPair pair = identical_pair();
  for (AlignMode mode : {AlignMode::kSe3, AlignMode::kFourDof}) {
    const Alignment a = align(pair, mode);
    CHECK((a.r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(a.t.norm() < 1e-12);
  }
}

TEST_CASE("alignment recovers a known rigid offset") {
  const TrajectoryPair base = identical_pair(10, 23);

  // Full se3 offset.
  {
    const UnitQuaternion q0 = quat_exp(Vec3(0.3, -0.2, 0.5));
    const Vec3 t0(1.5, -2.0, 0.7);
    TrajectoryPair pair = base;
    pair.estimate = transform_states(base.truth, q0, t0);

    const Alignment a = align(pair, AlignMode::kSe3);
    const Mat3 r0 = quat_to_rotmat(q0);
    CHECK((a.r - r0.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.t - (-r0.transpose() * t0)).norm() < 1e-10);

    const TrajectoryPair aligned = apply_alignment(pair, a);
    CHECK(ate(aligned) < 1e-10);
    for (std::size_t i = 0; i < aligned.size(); ++i) {
      CHECK(boxminus(aligned.estimate[i].orientation, aligned.truth[i].orientation)
                .norm() < 1e-10);
      CHECK((aligned.estimate[i].velocity - aligned.truth[i].velocity).norm() < 1e-10);
    }
  }

  // Yaw plus translation offset recovered by the constrained mode.
  {
    const UnitQuaternion q0 = quat_exp(Vec3(0.0, 0.0, 0.8));
    const Vec3 t0(-0.4, 2.2, -1.1);
    TrajectoryPair pair = base;
    pair.estimate = transform_states(base.truth, q0, t0);

    const Alignment a = align(pair, AlignMode::kFourDof);
    const Mat3 r0 = quat_to_rotmat(q0);
    CHECK((a.r - r0.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.t - (-r0.transpose() * t0)).norm() < 1e-10);
    CHECK(ate(apply_alignment(pair, a)) < 1e-10);
  }
}

TEST_CASE("four dof alignment matches a brute-force yaw search") {
  // Three noisy poses, small enough for an exhaustive scan over the yaw.
  const std::vector<Vec3> gt = {
      Vec3(0.0, 0.0, 0.0), Vec3(1.0, 0.2, -0.1), Vec3(0.4, 1.3, 0.5)};
  const std::vector<Vec3> noise = {
      Vec3(0.03, -0.05, 0.02), Vec3(-0.04, 0.01, 0.03), Vec3(0.02, 0.04, -0.05)};
  const Mat3 r_true = Eigen::AngleAxisd(0.6, Vec3::UnitZ()).toRotationMatrix();
  const Vec3 t_true(0.3, -0.2, 0.1);

  TrajectoryPair pair;
  for (int i = 0; i < 3; ++i) {
    pair.timestamps_ns.push_back(100000000LL * i);
    ImuState g, e;
    g.position = gt[i];
    e.position = r_true * gt[i] + t_true + noise[i];
    pair.truth.push_back(g);
    pair.estimate.push_back(e);
  }

  // Grid-refined scan: for each yaw the optimal translation re-centers the
  // clouds, so the search is one-dimensional.
  const auto cost_at = [&](double psi) {
    const Mat3 r = Eigen::AngleAxisd(psi, Vec3::UnitZ()).toRotationMatrix();
    Vec3 mean_e = Vec3::Zero(), mean_g = Vec3::Zero();
    for (int i = 0; i < 3; ++i) {
      mean_e += pair.estimate[i].position;
      mean_g += pair.truth[i].position;
    }
    mean_e /= 3.0;
    mean_g /= 3.0;
    return alignment_sse(pair, r, mean_g - r * mean_e);
  };
  double best_psi = 0.0, best_cost = cost_at(0.0);
  double lo = -M_PI, hi = M_PI;
  for (int round = 0; round < 4; ++round) {
    const int steps = 20000;
    for (int i = 0; i <= steps; ++i) {
      const double psi = lo + (hi - lo) * i / steps;
      const double c = cost_at(psi);
      if (c < best_cost) {
        best_cost = c;
        best_psi = psi;
      }
    }
    const double step = (hi - lo) / steps;
    lo = best_psi - 2.0 * step;
    hi = best_psi + 2.0 * step;
  }

  const Alignment a = align(pair, AlignMode::kFourDof);
  const double sse = alignment_sse(pair, a.r, a.t);
  const double psi = std::atan2(a.r(1, 0), a.r(0, 0));
  CHECK(sse <= best_cost + 1e-12);
  CHECK(std::abs(sse - best_cost) < 1e-8);
  CHECK(std::abs(psi - best_psi) < 1e-6);
}

TEST_CASE("se3 alignment sits at a local cost minimum") {
  std::mt19937_64 rng(31);
  const UnitQuaternion q0 = quat_exp(Vec3(-0.4, 0.25, 1.1));
  const Vec3 t0(0.8, -1.2, 2.0);
  const Mat3 r0 = quat_to_rotmat(q0);

  TrajectoryPair pair;
  for (int i = 0; i < 10; ++i) {
    ImuState g, e;
    g.position = oracles::random_vec3(rng, 3.0);
    e.position = r0 * g.position + t0 + oracles::random_vec3(rng, 0.05);
    pair.timestamps_ns.push_back(100000000LL * i);
    pair.truth.push_back(g);
    pair.estimate.push_back(e);
  }

  const Alignment a = align(pair, AlignMode::kSe3);
  const double sse = alignment_sse(pair, a.r, a.t);

  // No nearby transform does better: first-order optimality certificate.
  for (int trial = 0; trial < 300; ++trial) {
    const Vec3 dtheta = oracles::random_vec3(rng, 1e-4);
    const Vec3 dt = oracles::random_vec3(rng, 1e-4);
    const Mat3 r_pert = a.r * oracles::rodrigues(dtheta);
    CHECK(alignment_sse(pair, r_pert, a.t + dt) >= sse - 1e-12);
  }
  // And it beats the translation-only fit while a rotation offset exists.
  Vec3 mean_diff = Vec3::Zero();
  for (std::size_t i = 0; i < pair.size(); ++i) {
    mean_diff += pair.truth[i].position - pair.estimate[i].position;
  }
  mean_diff /= static_cast<double>(pair.size());
  CHECK(sse < alignment_sse(pair, Mat3::Identity(), mean_diff));
}

TEST_CASE("alignment rejects degenerate geometry") {
  // Exactly collinear cloud: rotation about the line is unobservable.
  TrajectoryPair line;
  for (int i = 0; i < 5; ++i) {
    ImuState s;
    s.position = i * Vec3(1.0, 1.0, 0.5);
    line.timestamps_ns.push_back(i);
    line.estimate.push_back(s);
    line.truth.push_back(s);
  }
  CHECK_THROWS_AS(align(line, AlignMode::kSe3), EstimationError);

  // Vertical line: yaw is unobservable for the four-dof fit.
  TrajectoryPair vertical;
  for (int i = 0; i < 5; ++i) {
    ImuState s;
    s.position = Vec3(0.0, 0.0, 0.3 * i);
    vertical.timestamps_ns.push_back(i);
    vertical.estimate.push_back(s);
    vertical.truth.push_back(s);
  }
  CHECK_THROWS_AS(align(vertical, AlignMode::kFourDof), EstimationError);

  // Too few poses or no poses at all break the precondition.
  TrajectoryPair two = identical_pair(2);
  CHECK_THROWS_AS(align(two, AlignMode::kSe3), ContractViolation);
  TrajectoryPair one = identical_pair(1);
  CHECK_THROWS_AS(align(one, AlignMode::kFourDof), ContractViolation);
  CHECK_THROWS_AS(align(TrajectoryPair{}, AlignMode::kSe3), ContractViolation);
}

TEST_CASE("ate matches hand-computed values") {
  TrajectoryPair pair = identical_pair(3);
  CHECK(ate(pair) == 0.0);

  // Differences (1,0,0), (0,2,0), (0,0,2): mean square (1+4+4)/3 = 3.
  pair.estimate[0].position = pair.truth[0].position + Vec3(1.0, 0.0, 0.0);
  pair.estimate[1].position = pair.truth[1].position + Vec3(0.0, 2.0, 0.0);
  pair.estimate[2].position = pair.truth[2].position + Vec3(0.0, 0.0, 2.0);
  CHECK(ate(pair) == std::sqrt(3.0));

  // Constant unit offset with alignment skipped stays a 1 m error.
  TrajectoryPair offset = identical_pair(6);
  for (ImuState& s : offset.estimate) s.position += Vec3(1.0, 0.0, 0.0);
  CHECK(ate(offset) == 1.0);

  CHECK_THROWS_AS(ate(TrajectoryPair{}), ContractViolation);
}

TEST_CASE("ate is invariant to a common rigid transform") {
  std::mt19937_64 rng(41);
  TrajectoryPair pair = identical_pair(12, 47);
  for (ImuState& s : pair.estimate) {
    s = boxplus(s, 0.1 * oracles::random_vecx(rng, 15, 1.0));
  }
  const double before = ate(pair);

  const UnitQuaternion q0 = quat_exp(Vec3(0.7, -0.3, 0.4));
  const Vec3 t0(5.0, 2.0, -3.0);
  TrajectoryPair moved = pair;
  moved.estimate = transform_states(pair.estimate, q0, t0);
  moved.truth = transform_states(pair.truth, q0, t0);
  CHECK(ate(moved) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("rpe reproduces a constant velocity drift") {
  const Vec3 v(0.3, -0.1, 0.2);
  const Vec3 v_err(0.01, -0.02, 0.005);
  TrajectoryPair pair;
  for (int i = 0; i <= 100; ++i) {
    const double t = 0.1 * i;
    ImuState g, e;
    g.position = v * t;
    g.velocity = v;
    e.position = (v + v_err) * t;
    e.velocity = v + v_err;
    pair.timestamps_ns.push_back(100000000LL * i);
    pair.truth.push_back(g);
    pair.estimate.push_back(e);
  }

  // delta 1.95 s lands between grid points, so every segment spans 2.0 s.
  const RpeResult by_time = rpe(pair, {RpeDelta::Unit::kSeconds, 1.95});
  REQUIRE(by_time.translation_errors.size() == 81);
  for (double err : by_time.translation_errors) {
    CHECK(err == doctest::Approx(v_err.norm() * 2.0).epsilon(1e-12));
  }
  for (double err : by_time.rotation_errors) CHECK(err == 0.0);
  CHECK(by_time.translation_rmse == doctest::Approx(v_err.norm() * 2.0).epsilon(1e-12));
  CHECK(by_time.rotation_rmse == 0.0);

  // Unit-speed straight line: 2.95 m of ground-truth arc snaps to 3.0 s.
  TrajectoryPair level;
  for (int i = 0; i <= 100; ++i) {
    const double t = 0.1 * i;
    ImuState g, e;
    g.position = Vec3(t, 0.0, 0.0);
    e.position = Vec3(t, 0.0, 0.0) + v_err * t;
    level.timestamps_ns.push_back(100000000LL * i);
    level.truth.push_back(g);
    level.estimate.push_back(e);
  }
  const RpeResult by_path = rpe(level, {RpeDelta::Unit::kMeters, 2.95});
  REQUIRE(!by_path.translation_errors.empty());
  for (double err : by_path.translation_errors) {
    CHECK(err == doctest::Approx(v_err.norm() * 3.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(rpe(pair, {RpeDelta::Unit::kSeconds, 11.0}), ContractViolation);
  CHECK_THROWS_AS(rpe(level, {RpeDelta::Unit::kMeters, 11.0}), ContractViolation);
  CHECK_THROWS_AS(rpe(pair, {RpeDelta::Unit::kSeconds, 0.0}), ContractViolation);
  CHECK_THROWS_AS(rpe(pair, {RpeDelta::Unit::kSeconds, -1.0}), ContractViolation);
}

TEST_CASE("rpe matches an independent isometry-based evaluation") {
  std::mt19937_64 rng(53);
  TrajectoryPair pair;
  for (int i = 0; i < 40; ++i) {
    const ImuState g = testsup::random_state(rng);
    const ImuState e = boxplus(g, 0.05 * oracles::random_vecx(rng, 15, 1.0));
    pair.timestamps_ns.push_back(100000000LL * i);
    pair.truth.push_back(g);
    pair.estimate.push_back(e);
  }
  const double delta_s = 0.55;
  const RpeResult result = rpe(pair, {RpeDelta::Unit::kSeconds, delta_s});

  const auto iso = [](const ImuState& s) {
    Eigen::Isometry3d T = Eigen::Isometry3d::Identity();
    T.linear() = quat_to_rotmat(s.orientation);
    T.translation() = s.position;
    return T;
  };
  std::vector<double> t_ref, r_ref;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    std::size_t j = i + 1;
    while (j < pair.size() &&
           (pair.timestamps_ns[j] - pair.timestamps_ns[i]) * 1e-9 < delta_s) {
      ++j;
    }
    if (j == pair.size()) break;
    const Eigen::Isometry3d rel_est = iso(pair.estimate[i]).inverse() * iso(pair.estimate[j]);
    const Eigen::Isometry3d rel_gt = iso(pair.truth[i]).inverse() * iso(pair.truth[j]);
    const Eigen::Isometry3d err = rel_gt.inverse() * rel_est;
    t_ref.push_back(err.translation().norm());
    r_ref.push_back(Eigen::AngleAxisd(err.rotation()).angle());
  }
  REQUIRE(result.translation_errors.size() == t_ref.size());
  for (std::size_t k = 0; k < t_ref.size(); ++k) {
    CHECK(result.translation_errors[k] == doctest::Approx(t_ref[k]).epsilon(1e-9));
    CHECK(result.rotation_errors[k] == doctest::Approx(r_ref[k]).epsilon(1e-9));
  }
}

TEST_CASE("rpe is invariant to a global transform of either trajectory") {
  std::mt19937_64 rng(61);
  TrajectoryPair pair;
  for (int i = 0; i < 30; ++i) {
    const ImuState g = testsup::random_state(rng);
    pair.timestamps_ns.push_back(100000000LL * i);
    pair.truth.push_back(g);
    pair.estimate.push_back(boxplus(g, 0.05 * oracles::random_vecx(rng, 15, 1.0)));
  }
  const RpeDelta delta{RpeDelta::Unit::kSeconds, 0.55};
  const RpeResult base = rpe(pair, delta);

  const UnitQuaternion q0 = quat_exp(Vec3(1.2, -0.7, 0.3));
  const Vec3 t0(-4.0, 8.0, 1.5);

  TrajectoryPair est_moved = pair;
  est_moved.estimate = transform_states(pair.estimate, q0, t0);
  TrajectoryPair gt_moved = pair;
  gt_moved.truth = transform_states(pair.truth, q0, t0);

  for (const TrajectoryPair* moved : {&est_moved, &gt_moved}) {
    const RpeResult r = rpe(*moved, delta);
    REQUIRE(r.translation_errors.size() == base.translation_errors.size());
    for (std::size_t k = 0; k < base.translation_errors.size(); ++k) {
      CHECK(r.translation_errors[k] ==
            doctest::Approx(base.translation_errors[k]).epsilon(1e-9));
      CHECK(r.rotation_errors[k] ==
            doctest::Approx(base.rotation_errors[k]).epsilon(1e-9));
    }
  }
}

TEST_CASE("nees is exact on hand-built cases") {
  std::mt19937_64 rng(71);
  const ImuState truth = testsup::random_state(rng);

  Vec15 delta;
  for (int i = 0; i < 15; ++i) delta(i) = 0.001 * (i + 1) * (i % 2 == 0 ? 1.0 : -1.0);
  Vec15 var;
  for (int i = 0; i < 15; ++i) var(i) = 0.002 + 0.001 * i;

  TrajectoryPair pair;
  pair.timestamps_ns.push_back(0);
  pair.truth.push_back(truth);
  pair.estimate.push_back(boxplus(truth, delta));
  const std::vector<Mat15> cov = {Mat15(var.asDiagonal())};

  double expect_full = 0.0, expect_pose = 0.0;
  for (int i = 0; i < 15; ++i) {
    const double term = delta(i) * delta(i) / var(i);
    expect_full += term;
    if (i < 6) expect_pose += term;
  }
  const NeesResult full = nees(pair, cov, NeesVariant::kFull15);
  REQUIRE(full.per_step.size() == 1);
  CHECK(full.per_step[0] == doctest::Approx(expect_full).epsilon(1e-9));
  CHECK(full.average == full.per_step[0]);
  const NeesResult pose = nees(pair, cov, NeesVariant::kPose6);
  CHECK(pose.per_step[0] == doctest::Approx(expect_pose).epsilon(1e-9));

  // Zero error scores zero. FMA contraction in the quaternion product keeps
  // the attitude residual of identical states from cancelling bitwise, so
  // allow the squared rounding floor.
  TrajectoryPair same = pair;
  same.estimate = same.truth;
  CHECK(nees(same, cov, NeesVariant::kFull15).average < 1e-24);

  // Doubling the covariance halves the score.
  const std::vector<Mat15> cov2 = {Mat15(2.0 * cov[0])};
  CHECK(nees(pair, cov2, NeesVariant::kFull15).per_step[0] ==
        doctest::Approx(0.5 * expect_full).epsilon(1e-12));

  // Singular or indefinite covariance is rejected; a defect confined to the
  // bias block only breaks the full-state variant.
  Mat15 bias_singular = cov[0];
  bias_singular(12, 12) = 0.0;
  CHECK_THROWS_AS(nees(pair, {bias_singular}, NeesVariant::kFull15), ContractViolation);
  CHECK(nees(pair, {bias_singular}, NeesVariant::kPose6).per_step[0] ==
        doctest::Approx(expect_pose).epsilon(1e-9));
  Mat15 indefinite = cov[0];
  indefinite(2, 2) = -0.01;
  CHECK_THROWS_AS(nees(pair, {indefinite}, NeesVariant::kPose6), ContractViolation);

  CHECK_THROWS_AS(nees(pair, {}, NeesVariant::kFull15), ContractViolation);
}

TEST_CASE("nees of exact gaussian errors is chi-square consistent") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Fixed well-conditioned covariance shared by every sample.
  MatX a(15, 15);
  for (int r = 0; r < 15; ++r) {
    for (int c = 0; c < 15; ++c) a(r, c) = gauss(rng);
  }
  const Mat15 p = 0.01 * (a * a.transpose() / 15.0 + Mat15::Identity());
  const Mat15 chol_l = p.llt().matrixL();

  const int n = 2000;
  TrajectoryPair pair;
  std::vector<Mat15> cov(n, p);
  for (int k = 0; k < n; ++k) {
    const ImuState truth = testsup::random_state(rng);
    Vec15 eta;
    for (int i = 0; i < 15; ++i) eta(i) = gauss(rng);
    pair.timestamps_ns.push_back(k);
    pair.truth.push_back(truth);
    pair.estimate.push_back(boxplus(truth, chol_l * eta));
  }

  const double avg15 = nees(pair, cov, NeesVariant::kFull15).average;
  CHECK(average_nees_interval(15, n).contains(avg15));
  CHECK(std::abs(avg15 - 15.0) < 3.0 * std::sqrt(2.0 * 15.0 / n));

  // The leading 6x6 marginal stays exact for the pose-only variant.
  const double avg6 = nees(pair, cov, NeesVariant::kPose6).average;
  CHECK(average_nees_interval(6, n).contains(avg6));
  CHECK(std::abs(avg6 - 6.0) < 3.0 * std::sqrt(2.0 * 6.0 / n));
}

TEST_CASE("metrics json writes parseable canonical output") {
  MetricsSummary m;
  m.ate_rmse_m = 0.123456789012345;
  m.rpe_trans_rmse = 0.05;
  m.rpe_rot_rmse_rad = 0.0017;
  m.avg_nees = 14.73;
  m.rpe_trans_segments = {0.1, 0.22, 0.05};
  m.rpe_rot_segments = {0.01, 0.002, 0.0004};

  const auto dir = std::filesystem::temp_directory_path();
  const std::string path1 = (dir / "vinkit_metrics_a.json").string();
  const std::string path2 = (dir / "vinkit_metrics_b.json").string();
  write_metrics_json(path1, m);
  write_metrics_json(path2, m);

  std::ifstream in(path1);
  REQUIRE(in.good());
  nlohmann::json j;
  in >> j;
  CHECK(j["ate_rmse_m"].get<double>() == m.ate_rmse_m);
  CHECK(j["rpe_trans_rmse"].get<double>() == m.rpe_trans_rmse);
  CHECK(j["rpe_rot_rmse_rad"].get<double>() == m.rpe_rot_rmse_rad);
  CHECK(j["avg_nees"].get<double>() == m.avg_nees);
  CHECK(j["rpe_trans_segments"].get<std::vector<double>>() == m.rpe_trans_segments);
  CHECK(j["rpe_rot_segments"].get<std::vector<double>>() == m.rpe_rot_segments);

  // Same metrics serialize to identical bytes.
  const auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  CHECK(slurp(path1) == slurp(path2));
  std::filesystem::remove(path1);
  std::filesystem::remove(path2);

  CHECK_THROWS_AS(write_metrics_json("/nonexistent_dir_vinkit/m.json", m), IoError);
}

TEST_CASE("error csv lists one row per matched sample") {
  TrajectoryPair pair = identical_pair(3, 83);
  pair.estimate[1].position += Vec3(0.0, 0.25, 0.0);
  pair.estimate[2].orientation =
      boxplus(pair.estimate[2].orientation, Vec3(0.0, 0.0, 0.02));

  const auto path =
      (std::filesystem::temp_directory_path() / "vinkit_errors.csv").string();
  write_error_csv(path, pair);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "timestamp_ns,pos_err_m,rot_err_rad");
  int rows = 0;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string ts, pos, rot;
    std::getline(ss, ts, ',');
    std::getline(ss, pos, ',');
    std::getline(ss, rot, ',');
    CHECK(std::stoll(ts) == pair.timestamps_ns[rows]);
    if (rows == 1) CHECK(std::stod(pos) == 0.25);
    if (rows == 2) CHECK(std::stod(rot) == doctest::Approx(0.02).epsilon(1e-12));
    ++rows;
  }
  CHECK(rows == 3);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(write_error_csv(path, TrajectoryPair{}), ContractViolation);
}
