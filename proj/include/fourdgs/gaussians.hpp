#pragma once

#include <Eigen/Core>

#include "fourdgs/common.hpp"

namespace fourdgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Unit quaternion, component order w-first.
struct Quaternion {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    static Quaternion identity() { return {1.0, 0.0, 0.0, 0.0}; }

    double norm() const;

    // L2 normalization. A near-zero vector (norm < 1e-8) falls back to the
    // identity quaternion so that decoding stays total.
    Quaternion normalized() const;

    Quaternion conjugate() const { return {w, -x, -y, -z}; }

    // Hamilton product.
    Quaternion operator*(const Quaternion& o) const;

    Vec4 coeffs() const { return Vec4(w, x, y, z); }
    static Quaternion from_coeffs(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
};

// One space-time primitive: 4D mean (x, y, z, t), per-axis scales, a
// left/right isoclinic rotation pair, zero-order SH color and opacity.
struct Gaussian4D {
    Vec4 mu = Vec4::Zero();
    Vec4 scale = Vec4::Ones();
    Quaternion q_left = Quaternion::identity();
    Quaternion q_right = Quaternion::identity();
    Vec3 rgb = Vec3::Zero();
    double opacity = 0.5;

    // Checks the type invariants; throws ValidationError on violation.
    void validate() const;
};

// Symmetric PSD 4x4 space-time covariance.
struct Covariance4 {
    Mat4 sigma = Mat4::Identity();
};

// Time-sliced 3D Gaussian with its unnormalized temporal-marginal weight.
struct ConditionalGaussian3 {
    Vec3 mu_xyz = Vec3::Zero();
    Mat3 sigma_xyz = Mat3::Identity();
    double temporal_weight = 1.0;
    Vec3 rgb = Vec3::Zero();
    double opacity = 0.5;
};

// Per-Gaussian parameter gradients,one slot per field of Gaussian4D.
struct GaussianGrad {
    Vec4 mu = Vec4::Zero();
    Vec4 scale = Vec4::Zero();
    Vec4 q_left = Vec4::Zero();
    Vec4 q_right = Vec4::Zero();
    Vec3 rgb = Vec3::Zero();
    double opacity = 0.0;

    GaussianGrad& operator+=(const GaussianGrad& o);
};

// The two 4x4 quaternion multiplication matrices: v -> q*v and v -> v*q,
// with the 4-vector (x, y, z, t) read as the quaternion x + yi + zj + tk.
Mat4 left_isoclinic(const Quaternion& q);
Mat4 right_isoclinic(const Quaternion& q);

// R = L(q_l) * R(q_r). Both quaternions must be unit within 1e-3.
Mat4 build_rotation4(const Quaternion& q_left, const Quaternion& q_right);

// Sigma = R * diag(s^2) * R^T. All scales must be strictly positive and the
// rotation orthogonal.
Covariance4 build_covariance4(const Vec4& scale, const Mat4& rotation);

// Covariance of a Gaussian4D, normalizing its quaternions first.
Covariance4 covariance4(const Gaussian4D& g);

// Inverse of build_rotation4: recovers an isoclinic quaternion pair from a
// proper 4D rotation. The pair is unique up to a joint sign flip.
std::pair<Quaternion, Quaternion> isoclinic_decompose(const Mat4& rotation);

// Unnormalized temporal density exp(-1/2 (t-mu_t)^2 / Sigma_44); peak 1 at
// t = mu_t.
double temporal_marginal(const Gaussian4D& g, double t);

// Slices the 4D Gaussian at time t via multivariate-Gaussian conditioning.
// temporal_weight carries the unnormalized marginal at t.
ConditionalGaussian3 condition_on_time(const Gaussian4D& g, double t);

// Unnormalized 4D density at (x, t) in (0, 1].
double density_4d(const Gaussian4D& g, const Vec3& x, double t);

}  // namespace fourdgs
