#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "test_support.hpp"
#include "vinkit/camera.hpp"

#include <cmath>
#include <random>

using namespace vinkit;

namespace {

CameraModel plain_model() {
  CameraModel m;
  m.fx = 460.0;
  m.fy = 455.0;
  m.cx = 319.5;
  m.cy = 239.5;
  m.width = 640;
  m.height = 480;
  return m;
}

// Mild rational-plus-tangential lens; strong enough to matter (several
// pixels at the corners), weak enough that ten fixed-point sweeps invert it
// far below measurement noise.
CameraModel distorted_model() {
  CameraModel m = plain_model();
  m.k << -0.1, 0.02, 0.001, 0.005, -0.002, 0.0003;
  m.p << 2e-4, -3e-4;
  return m;
}

// Forward-looking extrinsic: camera z along IMU x.
CameraModel offset_model() {
  CameraModel m = plain_model();
  m.r_ci << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  m.t_ci = Vec3(0.02, -0.01, 0.005);
  return m;
}

// Independent evaluation of the rational-radial + tangential formula,
// written against the displayed polynomial rather than the production
// helpers.
Vec2 distortion_oracle(const Eigen::Matrix<double, 6, 1>& k, const Vec2& p, const Vec2& z) {
  const double x = z.x(), y = z.y();
  const double r2 = x * x + y * y;
  const double rad = (1.0 + k(0) * r2 + k(1) * std::pow(r2, 2) + k(2) * std::pow(r2, 3)) /
                     (1.0 + k(3) * r2 + k(4) * std::pow(r2, 2) + k(5) * std::pow(r2, 3));
  const double dx = 2.0 * p(0) * x * y + p(1) * (r2 + 2.0 * x * x);
  const double dy = p(0) * (r2 + 2.0 * y * y) + 2.0 * p(1) * x * y;
  return Vec2(rad * x + dx, rad * y + dy);
}

}  // namespace

TEST_CASE("camera frame transform round trips and degenerates to identity") {
  const CameraModel model = offset_model();
  ImuState identity;
  CameraModel trivial = plain_model();

  const Vec3 l_w(1.0, 2.0, 3.0);
  CHECK(transform_to_camera(identity, l_w, trivial) == l_w);
  CHECK(inverse_transform(identity, l_w, trivial) == l_w);

  // Zero lever arm: a landmark at the body origin lands on t_ci.
  ImuState at_landmark;
  at_landmark.position = l_w;
  CHECK(transform_to_camera(at_landmark, l_w, model) == model.t_ci);

  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const ImuState state = testsup::random_state(rng);
    const Vec3 p = 5.0 * oracles::random_vec3(rng);
    const Vec3 back = inverse_transform(state, transform_to_camera(state, p, model), model);
    CHECK((back - p).norm() < 1e-12);
    // The optical center is the preimage of the camera origin.
    const Vec3 center = camera_center(state, model);
    CHECK(transform_to_camera(state, center, model).norm() < 1e-12);
  }
}

TEST_CASE("perspective division and cheirality") {
  const auto z = project(Vec3(0.0, 0.0, 1.0));
  REQUIRE(z.has_value());
  CHECK(z->x() == 0.0);
  CHECK(z->y() == 0.0);

  const auto z2 = project(Vec3(1.0, 2.0, 4.0));
  REQUIRE(z2.has_value());
  CHECK(*z2 == Vec2(0.25, 0.5));

  CHECK(!project(Vec3(0.0, 0.0, -1.0)).has_value());
  CHECK(!project(Vec3(0.1, 0.1, 1e-9)).has_value());
  CHECK(project(Vec3(0.1, 0.1, 2e-6)).has_value());
}

TEST_CASE("distortion matches an independent polynomial evaluation") {
  CameraModel none = plain_model();
  const Vec2 z(0.37, -0.81);
  CHECK(distort(none, z) == z);
  CHECK(undistort(none, z) == z);

  const CameraModel model = distorted_model();
  CHECK(distort(model, Vec2(0.0, 0.0)) == Vec2(0.0, 0.0));

  // Pure k1 = 0.1 at (0.5, 0): scale 1 + 0.1 * 0.25 by hand.
  CameraModel k1 = plain_model();
  k1.k(0) = 0.1;
  const Vec2 d = distort(k1, Vec2(0.5, 0.0));
  CHECK(d.x() == doctest::Approx(0.5125).epsilon(1e-12));
  CHECK(d.y() == 0.0);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> span(-0.8, 0.8);
  for (int trial = 0; trial < 500; ++trial) {
    const Vec2 zp(span(rng), span(rng));
    const Vec2 got = distort(model, zp);
    const Vec2 want = distortion_oracle(model.k, model.p, zp);
    CHECK((got - want).norm() < 1e-13);
  }
}

TEST_CASE("undistort inverts distort across the image") {
  const CameraModel model = distorted_model();
  for (int v = 0; v < model.height; v += 24) {
    for (int u = 0; u < model.width; u += 32) {
      const Vec2 z = invert_intrinsics(model, Vec2(u, v));
      const Vec2 round = undistort(model, distort(model, z));
      CHECK((round - z).norm() < 1e-9);
    }
  }
}

TEST_CASE("intrinsics map fixed values and inverse") {
  CameraModel unit = plain_model();
  unit.fx = 1.0;
  unit.fy = 1.0;
  unit.cx = 0.0;
  unit.cy = 0.0;
  const Vec2 z(0.3, -0.7);
  CHECK(apply_intrinsics(unit, z) == z);

  CameraModel m = plain_model();
  m.fx = 500.0;
  m.fy = 500.0;
  m.cx = 320.0;
  m.cy = 240.0;
  CHECK(apply_intrinsics(m, Vec2(0.0, 0.0)) == Vec2(320.0, 240.0));
  const Vec2 px = apply_intrinsics(m, Vec2(0.1, -0.2));
  CHECK(px.x() == doctest::Approx(370.0).epsilon(1e-14));
  CHECK(px.y() == doctest::Approx(140.0).epsilon(1e-14));

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> span(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec2 zd(span(rng), span(rng));
    CHECK((invert_intrinsics(m, apply_intrinsics(m, zd)) - zd).norm() < 1e-14);
  }
}

TEST_CASE("observe fixed values and stage composition") {
  CameraModel simple = plain_model();
  simple.fx = 100.0;
  simple.fy = 100.0;
  simple.cx = 320.0;
  simple.cy = 240.0;
  const ImuState identity;
  const Observation center = observe(identity, Vec3(0.0, 0.0, 1.0), simple, true);
  CHECK(center.ok());
  CHECK(center.pixel == Vec2(320.0, 240.0));
  const Observation off = observe(identity, Vec3(0.5, 0.0, 1.0), simple, true);
  CHECK(off.pixel == Vec2(370.0, 240.0));

  const CameraModel model = [] {
    CameraModel m = offset_model();
    m.k = distorted_model().k;
    m.p = distorted_model().p;
    return m;
  }();
  std::mt19937_64 rng(21);
  int visible = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const ImuState state = testsup::random_state(rng);
    const Vec3 l_w = state.position + 8.0 * oracles::random_unit3(rng);
    const Observation obs = observe(state, l_w, model, true);
    const Vec3 l_c = transform_to_camera(state, l_w, model);
    const auto z_p = project(l_c);
    if (!z_p) {
      CHECK(obs.status == ObserveStatus::kBehindCamera);
      continue;
    }
    const Vec2 manual = apply_intrinsics(model, distort(model, *z_p));
    CHECK(obs.pixel == manual);
    CHECK(obs.status ==
          (in_image(model, manual) ? ObserveStatus::kOk : ObserveStatus::kOutsideImage));
    if (obs.ok()) ++visible;

    const Observation plain = observe(state, l_w, model, false);
    if (plain.status != ObserveStatus::kBehindCamera) {
      CHECK(plain.pixel == apply_intrinsics(model, *z_p));
    }
  }
  CHECK(visible > 20);
}

TEST_CASE("back-projected rays align with the camera-frame landmark") {
  const CameraModel model = offset_model();
  CHECK(back_project_ray(model, Vec2(model.cx, model.cy)) == Vec3(0.0, 0.0, 1.0));

  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> du(0.0, model.width - 1.0);
  std::uniform_real_distribution<double> dv(0.0, model.height - 1.0);

  // Pixel -> ray -> observe at a fixed depth recovers the pixel.
  const ImuState identity;
  CameraModel trivial = plain_model();
  for (int trial = 0; trial < 200; ++trial) {
    const Vec2 pixel(du(rng), dv(rng));
    const Vec3 ray = back_project_ray(trivial, pixel);
    CHECK(std::abs(ray.normalized().norm() - 1.0) < 1e-15);
    const Observation obs = observe(identity, 3.0 * ray, trivial, false);
    REQUIRE(obs.status != ObserveStatus::kBehindCamera);
    CHECK((obs.pixel - pixel).norm() < 1e-10);
  }

  int done = 0;
  while (done < 1000) {
    const ImuState state = testsup::random_state(rng);
    const Vec3 l_w = state.position + 8.0 * oracles::random_unit3(rng);
    const Observation obs = observe(state, l_w, model, false);
    if (!obs.ok()) continue;
    ++done;
    const Vec3 ray = back_project_ray(model, obs.pixel);
    const Vec3 l_c = transform_to_camera(state, l_w, model);
    CHECK(ray.normalized().cross(l_c.normalized()).norm() < 1e-10);
  }
}

TEST_CASE("inverse-depth back-projection hits the stated range") {
  const CameraModel model = plain_model();
  const Vec3 at = back_project_idp(model, Vec2(model.cx, model.cy), 0.5);
  CHECK((at - Vec3(0.0, 0.0, 2.0)).norm() < 1e-14);

  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> du(0.0, model.width - 1.0);
  std::uniform_real_distribution<double> dv(0.0, model.height - 1.0);
  std::uniform_real_distribution<double> drho(0.05, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double rho = drho(rng);
    const Vec3 l_c = back_project_idp(model, Vec2(du(rng), dv(rng)), rho);
    CHECK(l_c.norm() * rho == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(back_project_idp(model, Vec2(100.0, 100.0), 0.0), ContractViolation);
  CHECK_THROWS_AS(back_project_idp(model, Vec2(100.0, 100.0), -0.5), ContractViolation);
}

TEST_CASE("undistorting a rendered pixel recovers the distortion-free chain") {
  CameraModel model = distorted_model();
  model.r_ci = offset_model().r_ci;
  model.t_ci = offset_model().t_ci;
  std::mt19937_64 rng(51);
  int done = 0;
  while (done < 300) {
    const ImuState state = testsup::random_state(rng);
    const Vec3 l_w = state.position + 6.0 * oracles::random_unit3(rng);
    const Observation with = observe(state, l_w, model, true);
    const Observation without = observe(state, l_w, model, false);
    // The lens model is only invertible over the calibrated field of view,
    // which is all preprocessing ever sees.
    if (!with.ok()) continue;
    ++done;
    CHECK((undistort_pixel(model, with.pixel) - without.pixel).norm() < 1e-6);
  }
}

TEST_CASE("observation jacobians match central differences") {
  const CameraModel model = offset_model();
  std::mt19937_64 rng(61);
  int checked = 0;
  while (checked < 200) {
    const ImuState state = testsup::random_state(rng);
    // Seed the point in front of the camera, one to nine meters out.
    const Vec3 dir_c = (Vec3(0.0, 0.0, 1.0) + 0.5 * oracles::random_vec3(rng)).normalized();
    const double range = 1.0 + 8.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const Vec3 l_w = inverse_transform(state, range * dir_c, model);
    const auto jac = observe_jacobians(state, l_w, model);
    if (!jac) continue;
    ++checked;

    const Observation obs = observe(state, l_w, model, false);
    CHECK((jac->pixel - obs.pixel).norm() < 1e-12);

    const auto h_state_num = oracles::numeric_jacobian(
        [&](const VecX& d) -> VecX {
          const ImuState moved = boxplus(state, Vec15(d));
          return VecX(observe(moved, l_w, model, false).pixel);
        },
        VecX(VecX::Zero(15)), 1e-6);
    const double state_scale = std::max(1.0, h_state_num.cwiseAbs().maxCoeff());
    CHECK((jac->h_state - h_state_num).cwiseAbs().maxCoeff() / state_scale < 1e-5);
    // Velocity and bias columns are exactly zero.
    CHECK(jac->h_state.rightCols<9>().cwiseAbs().maxCoeff() == 0.0);

    const auto h_lm_num = oracles::numeric_jacobian(
        [&](const VecX& d) -> VecX {
          return VecX(observe(state, Vec3(l_w + d), model, false).pixel);
        },
        VecX(VecX::Zero(3)), 1e-6);
    const double lm_scale = std::max(1.0, h_lm_num.cwiseAbs().maxCoeff());
    CHECK((jac->h_landmark - h_lm_num).cwiseAbs().maxCoeff() / lm_scale < 1e-5);
  }
}

TEST_CASE("inverse depth parametrization round trips") {
  const CameraModel model = offset_model();
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 200; ++trial) {
    const ImuState anchor = testsup::random_state(rng);
    const Vec3 dir_c = (Vec3(0.0, 0.0, 1.0) + 0.4 * oracles::random_vec3(rng)).normalized();
    const double range = 0.5 + 12.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const Vec3 l_w = inverse_transform(anchor, range * dir_c, model);

    const IdpLandmark idp = idp_from_world(anchor, l_w, model, 7);
    CHECK(idp.anchor_frame == 7);
    CHECK(std::abs(idp.bearing.norm() - 1.0) < 1e-14);
    CHECK(idp.rho == doctest::Approx(1.0 / range).epsilon(1e-12));
    CHECK((world_from_idp(anchor, idp, model) - l_w).norm() < 1e-10);

    const Vec4 h = homogeneous_from_idp(idp);
    const IdpLandmark back = idp_from_homogeneous(2.5 * h, idp.anchor_frame);
    CHECK((back.bearing - idp.bearing).norm() < 1e-13);
    CHECK(back.rho == doctest::Approx(idp.rho).epsilon(1e-13));
  }

  const ImuState anchor;
  CHECK_THROWS_AS(idp_from_world(anchor, Vec3(0.0, 0.0, -2.0), plain_model(), 0),
                  ContractViolation);
  IdpLandmark bad;
  bad.rho = -0.1;
  CHECK_THROWS_AS(world_from_idp(anchor, bad, plain_model()), ContractViolation);

  Landmark euclid;
  euclid.id = 3;
  euclid.geometry = Vec3(1.0, 2.0, 3.0);
  Landmark anchored;
  anchored.id = 4;
  anchored.geometry = bad;
  CHECK(std::holds_alternative<Vec3>(euclid.geometry));
  CHECK(std::holds_alternative<IdpLandmark>(anchored.geometry));
}

TEST_CASE("geometric residual metrics vanish together at the true pixel") {
  const CameraModel model = offset_model();
  std::mt19937_64 rng(81);
  const ResidualMetric metrics[] = {ResidualMetric::kImagePlane, ResidualMetric::kUnitPlane,
                                    ResidualMetric::kUnitBearing, ResidualMetric::kBearingAngle};
  const int dims[] = {2, 2, 3, 1};
  for (int trial = 0; trial < 100; ++trial) {
    const ImuState state = testsup::random_state(rng);
    const Vec3 dir_c = (Vec3(0.0, 0.0, 1.0) + 0.3 * oracles::random_vec3(rng)).normalized();
    const Vec3 l_w = inverse_transform(state, 5.0 * dir_c, model);
    const Vec2 truth = observe(state, l_w, model, false).pixel;
    for (int i = 0; i < 4; ++i) {
      const auto r = geometric_residual(truth, state, l_w, model, metrics[i]);
      REQUIRE(r.has_value());
      CHECK(r->size() == dims[i]);
      CHECK(r->cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("plane metrics reject cheirality failures, bearing metrics tolerate them") {
  const CameraModel model = plain_model();
  const ImuState state;
  const Vec3 behind(0.3, -0.2, -4.0);
  const Vec2 z(320.0, 240.0);
  CHECK(!geometric_residual(z, state, behind, model, ResidualMetric::kImagePlane).has_value());
  CHECK(!geometric_residual(z, state, behind, model, ResidualMetric::kUnitPlane).has_value());
  CHECK(geometric_residual(z, state, behind, model, ResidualMetric::kUnitBearing).has_value());
  const auto angle =
      geometric_residual(z, state, behind, model, ResidualMetric::kBearingAngle);
  REQUIRE(angle.has_value());
  CHECK((*angle)(0) > 2.0);  // nearly opposite rays

  // Orthogonal rays: measurement through the principal point against a
  // sideways landmark.
  const Vec2 principal(model.cx, model.cy);
  const auto right_angle = geometric_residual(principal, state, Vec3(1.0, 0.0, 0.0), model,
                                              ResidualMetric::kBearingAngle);
  REQUIRE(right_angle.has_value());
  CHECK((*right_angle)(0) == doctest::Approx(M_PI / 2).epsilon(1e-12));

  // Only the optical center itself has no direction to compare.
  CHECK(!geometric_residual(z, state, Vec3::Zero(), model, ResidualMetric::kUnitBearing)
             .has_value());
}

TEST_CASE("bearing angle matches the unit bearing norm to first order") {
  const CameraModel model = plain_model();
  const ImuState state;
  std::mt19937_64 rng(91);
  std::uniform_real_distribution<double> span(-0.1, 0.1);
  int usable = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 l_w(span(rng), span(rng), 3.0);
    const Vec2 truth = observe(state, l_w, model, false).pixel;
    // ~0.046 px of offset is about 1e-4 rad at this focal length.
    const Vec2 nudged = truth + 0.046 * Vec2(std::cos(trial), std::sin(trial));
    const auto bearing =
        geometric_residual(nudged, state, l_w, model, ResidualMetric::kUnitBearing);
    const auto angle =
        geometric_residual(nudged, state, l_w, model, ResidualMetric::kBearingAngle);
    REQUIRE(bearing.has_value());
    REQUIRE(angle.has_value());
    const double a = (*angle)(0);
    if (a < 1e-5) continue;
    ++usable;
    // Exact chord-angle relation, then the first-order agreement itself.
    CHECK(bearing->norm() == doctest::Approx(2.0 * std::sin(0.5 * a)).epsilon(1e-9));
    CHECK(std::abs(a - bearing->norm()) < 1e-8 * a + 1e-12);
  }
  CHECK(usable > 150);
}

TEST_CASE("metric names round trip and reject unknowns") {
  for (const auto metric : {ResidualMetric::kImagePlane, ResidualMetric::kUnitPlane,
                            ResidualMetric::kUnitBearing, ResidualMetric::kBearingAngle}) {
    CHECK(metric_from_string(to_string(metric)) == metric);
  }
  CHECK_THROWS_AS(metric_from_string("reprojection"), ContractViolation);
}

TEST_CASE("intensity field reproduces bilinear images exactly") {
  // Bilinear interpolation is exact on a + b u + c v + d u v.
  const auto f = [](double u, double v) { return 3.0 + 2.0 * u + 0.5 * v + 0.1 * u * v; };
  IntensityField field(32, 24);
  for (int v = 0; v < 24; ++v)
    for (int u = 0; u < 32; ++u) field.at(v, u) = f(u, v);

  std::mt19937_64 rng(111);
  std::uniform_real_distribution<double> du(0.0, 31.0), dv(0.0, 23.0);
  for (int trial = 0; trial < 500; ++trial) {
    const double u = du(rng), v = dv(rng);
    const auto s = field.sample(Vec2(u, v));
    REQUIRE(s.has_value());
    CHECK(*s == doctest::Approx(f(u, v)).epsilon(1e-12));
  }

  CHECK(field.sample(Vec2(31.0, 23.0)).has_value());
  CHECK(field.sample(Vec2(0.0, 0.0)).has_value());
  CHECK(!field.sample(Vec2(-0.1, 5.0)).has_value());
  CHECK(!field.sample(Vec2(5.0, 23.1)).has_value());
  CHECK_THROWS_AS(IntensityField(1, 5), ContractViolation);
}

TEST_CASE("warp is the identity under equal poses") {
  const CameraModel model = offset_model();
  std::mt19937_64 rng(121);
  for (int trial = 0; trial < 100; ++trial) {
    const ImuState state = testsup::random_state(rng);
    const Vec2 pixel(40.0 + 560.0 * std::uniform_real_distribution<double>(0, 1)(rng),
                     40.0 + 400.0 * std::uniform_real_distribution<double>(0, 1)(rng));
    const double rho = 0.05 + std::uniform_real_distribution<double>(0, 1)(rng);
    const auto warped = warp(pixel, rho, state, state, model);
    REQUIRE(warped.has_value());
    CHECK((*warped - pixel).norm() < 1e-10);
  }
  CHECK_THROWS_AS(warp(Vec2(320, 240), 0.0, ImuState(), ImuState(), model), ContractViolation);
}

TEST_CASE("moving toward a landmark magnifies its warped offset") {
  const CameraModel model = plain_model();
  const ImuState state1;
  ImuState state2;
  state2.position = Vec3(0.0, 0.0, 1.0);  // one meter toward the scene

  const Vec3 l_w(0.4, 0.25, 4.0);
  const Vec2 pixel1 = observe(state1, l_w, model, false).pixel;
  const double rho = 1.0 / transform_to_camera(state1, l_w, model).norm();
  const auto pixel2 = warp(pixel1, rho, state1, state2, model);
  REQUIRE(pixel2.has_value());
  const Vec2 principal(model.cx, model.cy);
  CHECK((*pixel2 - principal).norm() > (pixel1 - principal).norm());
}

TEST_CASE("warp agrees with directly observing the true landmark") {
  const CameraModel model = offset_model();
  std::mt19937_64 rng(131);
  int done = 0;
  while (done < 200) {
    const ImuState state1 = testsup::random_state(rng);
    ImuState state2 = state1;
    state2.position += 0.3 * oracles::random_vec3(rng);
    state2.orientation = quat_mul(state2.orientation, quat_exp(0.05 * oracles::random_vec3(rng)));

    const Vec3 dir_c = (Vec3(0.0, 0.0, 1.0) + 0.3 * oracles::random_vec3(rng)).normalized();
    const double range = 2.0 + 8.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const Vec3 l_w = inverse_transform(state1, range * dir_c, model);

    const Observation obs1 = observe(state1, l_w, model, false);
    const Observation obs2 = observe(state2, l_w, model, false);
    if (!obs1.ok() || !obs2.ok()) continue;
    ++done;

    const double rho = 1.0 / transform_to_camera(state1, l_w, model).norm();
    const auto warped = warp(obs1.pixel, rho, state1, state2, model);
    REQUIRE(warped.has_value());
    CHECK((*warped - obs2.pixel).norm() < 1e-9);
  }
}

TEST_CASE("warp round trips through the induced inverse depth") {
  const CameraModel model = plain_model();
  std::mt19937_64 rng(141);
  ImuState state1;
  int done = 0;
  while (done < 100) {
    ImuState state2;
    state2.position = 0.4 * oracles::random_vec3(rng);
    state2.orientation = quat_exp(0.05 * oracles::random_vec3(rng));
    const Vec2 pixel(60.0 + 520.0 * std::uniform_real_distribution<double>(0, 1)(rng),
                     60.0 + 360.0 * std::uniform_real_distribution<double>(0, 1)(rng));
    const double rho = 1.0 / (2.0 + 6.0 * std::uniform_real_distribution<double>(0, 1)(rng));

    const auto forward = warp(pixel, rho, state1, state2, model);
    if (!forward) continue;
    // Induced inverse depth in the second frame from the same world point.
    const Vec3 l_w = inverse_transform(state1, back_project_idp(model, pixel, rho), model);
    const double rho2 = 1.0 / transform_to_camera(state2, l_w, model).norm();
    const auto back = warp(*forward, rho2, state2, state1, model);
    if (!back) continue;
    CHECK((*back - pixel).norm() < 1e-8);
    ++done;
  }
}

TEST_CASE("photometric residual vanishes at the true inverse depth") {
  CameraModel model = plain_model();
  model.width = 320;
  model.height = 240;
  model.fx = 260.0;
  model.fy = 260.0;
  model.cx = 159.5;
  model.cy = 119.5;

  PlaneScene scene;
  scene.point = Vec3(0.0, 0.0, 4.0);
  scene.normal = Vec3(0.0, 0.0, 1.0);
  scene.texture = [](const Vec3& l) {
    return 10.0 + 3.0 * std::sin(0.8 * l.x()) + 2.0 * std::cos(0.6 * l.y()) + 0.5 * l.x() * l.y();
  };

  ImuState state1;
  ImuState state2;
  state2.position = Vec3(0.3, -0.2, 0.5);
  state2.orientation = quat_exp(Vec3(0.02, -0.03, 0.01));

  const IntensityField i1 = render_plane(scene, state1, model);
  const IntensityField i2 = render_plane(scene, state2, model);

  // Identical frames and poses: only warp round-off, orders below 1e-9.
  const auto same = photometric_residual(Vec2(100.25, 80.75), 0.25, state1, state1, i1, i1, model);
  REQUIRE(same.has_value());
  CHECK(std::abs(*same) < 1e-9);

  // A constant offset between the frames passes straight through.
  IntensityField lifted = i1;
  for (int v = 0; v < model.height; ++v)
    for (int u = 0; u < model.width; ++u) lifted.at(v, u) += 2.5;
  const auto offset =
      photometric_residual(Vec2(100.25, 80.75), 0.25, state1, state1, i1, lifted, model);
  REQUIRE(offset.has_value());
  CHECK(*offset == doctest::Approx(-2.5).epsilon(1e-9));

  double min_i = 1e300, max_i = -1e300;
  for (int v = 0; v < model.height; ++v) {
    for (int u = 0; u < model.width; ++u) {
      min_i = std::min(min_i, i1.at(v, u));
      max_i = std::max(max_i, i1.at(v, u));
    }
  }
  const double range = max_i - min_i;
  REQUIRE(range > 1.0);

  int evaluated = 0;
  for (int v = 30; v < model.height - 30; v += 20) {
    for (int u = 30; u < model.width - 30; u += 20) {
      const Vec2 pixel(u, v);
      // True inverse depth from the ray-plane intersection.
      const Vec3 dir = back_project_ray(model, pixel);
      const double t = scene.point.z() / dir.z();
      const double rho = 1.0 / (t * dir).norm();
      const auto r = photometric_residual(pixel, rho, state1, state2, i1, i2, model);
      if (!r) continue;
      ++evaluated;
      CHECK(std::abs(*r) < 1e-3 * range);
    }
  }
  CHECK(evaluated > 50);

  // A constant scene zeroes the residual regardless of the depth guess.
  PlaneScene flat = scene;
  flat.texture = [](const Vec3&) { return 7.25; };
  const IntensityField f1 = render_plane(flat, state1, model);
  const IntensityField f2 = render_plane(flat, state2, model);
  const auto r = photometric_residual(Vec2(120.0, 100.0), 0.3, state1, state2, f1, f2, model);
  REQUIRE(r.has_value());
  CHECK(*r == 0.0);
}
