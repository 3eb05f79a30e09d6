#pragma once

#include "vinkit/types.hpp"

namespace vinkit {

// Rotation-vector norms below this use the first-order Taylor branch of
// exp/log and the Jacobian helpers.
inline constexpr double kSmallAngle = 1e-8;

// Hamiltonian unit quaternion, scalar first (w, x, y, z). q_WI rotates
// vectors from the IMU frame into the world frame: v_W = R(q_WI) v_I.
// Construction normalizes and canonicalizes to w >= 0, so -q and q collapse
// to the same representative and boxminus stays on the short arc.
class UnitQuaternion {
 public:
  UnitQuaternion() : w_(1.0), x_(0.0), y_(0.0), z_(0.0) {}
  UnitQuaternion(double w, double x, double y, double z);

  static UnitQuaternion identity() { return UnitQuaternion(); }

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

  Vec3 vec() const { return Vec3(x_, y_, z_); }
  Vec4 wxyz() const { return Vec4(w_, x_, y_, z_); }

  // Inverse rotation; equals the inverse since the norm is one.
  UnitQuaternion conjugate() const;

  Vec3 rotate(const Vec3& v) const;

 private:
  double w_, x_, y_, z_;
};

Mat3 skew(const Vec3& v);

// Hamilton product a (x) b, renormalized to keep drift out of long chains.
UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b);

// Rotation matrix of q, written out so the entries match the quadratic
// form exactly (no reliance on unit norm shortcuts).
Mat3 quat_to_rotmat(const UnitQuaternion& q);

// exp maps a full rotation vector theta (angle * axis) to the quaternion
// [cos(|theta|/2), sin(|theta|/2) * theta/|theta|]; the half angle lives
// inside. log is the inverse and returns the rotation vector with angle in
// [0, pi]. For a pi rotation the axis sign follows the canonical (w >= 0,
// first nonzero imaginary part positive) representative.
UnitQuaternion quat_exp(const Vec3& theta);
Vec3 quat_log(const UnitQuaternion& q);

// Right Jacobian of the exponential map and its inverse:
//   exp(theta + d) = exp(theta) * exp(Jr(theta) d) + O(|d|^2).
// Used to move measurement Jacobians between tangent charts.
Mat3 right_jacobian_so3(const Vec3& theta);
Mat3 right_jacobian_inv_so3(const Vec3& theta);

// Right-convention retraction pair:
//   boxplus(X, tau)  = X * exp(tau)
//   boxminus(Y, X)   = log(X^-1 * Y)
// so boxminus(boxplus(X, tau), X) == tau for |tau| < pi.
UnitQuaternion boxplus(const UnitQuaternion& q, const Vec3& tau);
Vec3 boxminus(const UnitQuaternion& y, const UnitQuaternion& x);

// Vector-space specialization (plain addition / subtraction). Dimension
// mismatch is a contract violation, matching the quaternion overloads'
// insistence on 3-vectors.
VecX boxplus(const VecX& x, const VecX& tau);
VecX boxminus(const VecX& y, const VecX& x);

}  // namespace vinkit
