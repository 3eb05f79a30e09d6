#include "vinkit/manifold.hpp"

#include <cmath>

namespace vinkit {

namespace {

// Canonical sign: w > 0, or if w == 0 the first nonzero imaginary part is
// positive. Keeps q and -q mapped to one representative.
bool needs_flip(double w, double x, double y, double z) {
  if (w != 0.0) return w < 0.0;
  if (x != 0.0) return x < 0.0;
  if (y != 0.0) return y < 0.0;
  return z < 0.0;
}

}  // namespace

UnitQuaternion::UnitQuaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  VINKIT_REQUIRE(n > 0.0 && std::isfinite(n), "quaternion norm must be finite and nonzero");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  if (needs_flip(w, x, y, z)) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  w_ = w;
  x_ = x;
  y_ = y;
  z_ = z;
}

UnitQuaternion UnitQuaternion::conjugate() const {
  return UnitQuaternion(w_, -x_, -y_, -z_);
}

Vec3 UnitQuaternion::rotate(const Vec3& v) const {
  return quat_to_rotmat(*this) * v;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return m;
}

UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b) {
  const double w = a.w() * b.w() - a.x() * b.x() - a.y() * b.y() - a.z() * b.z();
  const double x = a.w() * b.x() + a.x() * b.w() + a.y() * b.z() - a.z() * b.y();
  const double y = a.w() * b.y() - a.x() * b.z() + a.y() * b.w() + a.z() * b.x();
  const double z = a.w() * b.z() + a.x() * b.y() - a.y() * b.x() + a.z() * b.w();
  return UnitQuaternion(w, x, y, z);
}

Mat3 quat_to_rotmat(const UnitQuaternion& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  Mat3 r;
  r << w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
       2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
       2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z;
  return r;
}

UnitQuaternion quat_exp(const Vec3& theta) {
  const double angle = theta.norm();
  if (angle < kSmallAngle) {
    // First-order branch; constructor renormalizes.
    return UnitQuaternion(1.0, 0.5 * theta.x(), 0.5 * theta.y(), 0.5 * theta.z());
  }
  const double half = 0.5 * angle;
  const double s = std::sin(half) / angle;
  return UnitQuaternion(std::cos(half), s * theta.x(), s * theta.y(), s * theta.z());
}

Vec3 quat_log(const UnitQuaternion& q) {
  const Vec3 v = q.vec();
  const double s = v.norm();
  // w >= 0 by canonicalization, so atan2 lands in [0, pi/2] and the
  // recovered angle in [0, pi].
  if (s < kSmallAngle) {
    // atan2(s, w)/s -> 1/w as s -> 0; w is 1 to within rounding here.
    return (2.0 / q.w()) * v;
  }
  const double angle = 2.0 * std::atan2(s, q.w());
  return (angle / s) * v;
}

Mat3 right_jacobian_so3(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 s = skew(theta);
  if (angle < kSmallAngle) {
    return Mat3::Identity() - 0.5 * s;
  }
  const double a2 = angle * angle;
  const double c1 = (1.0 - std::cos(angle)) / a2;
  const double c2 = (angle - std::sin(angle)) / (a2 * angle);
  return Mat3::Identity() - c1 * s + c2 * s * s;
}

Mat3 right_jacobian_inv_so3(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 s = skew(theta);
  if (angle < kSmallAngle) {
    return Mat3::Identity() + 0.5 * s;
  }
  const double a2 = angle * angle;
  // 1/a^2 - (1 + cos a) / (2 a sin a), stable away from a = 0 and a = 2 pi.
  const double c = 1.0 / a2 - (1.0 + std::cos(angle)) / (2.0 * angle * std::sin(angle));
  return Mat3::Identity() + 0.5 * s + c * s * s;
}

UnitQuaternion boxplus(const UnitQuaternion& q, const Vec3& tau) {
  return quat_mul(q, quat_exp(tau));
}

Vec3 boxminus(const UnitQuaternion& y, const UnitQuaternion& x) {
  return quat_log(quat_mul(x.conjugate(), y));
}

VecX boxplus(const VecX& x, const VecX& tau) {
  VINKIT_REQUIRE(x.size() == tau.size(), "boxplus: dimension mismatch");
  return x + tau;
}

VecX boxminus(const VecX& y, const VecX& x) {
  VINKIT_REQUIRE(y.size() == x.size(), "boxminus: dimension mismatch");
  return y - x;
}

}  // namespace vinkit
