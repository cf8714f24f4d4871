#include "fourdgs/gaussians.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace fourdgs {

namespace {
constexpr double kZeroQuatNorm = 1e-8;
constexpr double kUnitTolerance = 1e-3;
constexpr double kDegenerateVar = 1e-12;
constexpr double kMaxCondition = 1e12;
}  // namespace

double Quaternion::norm() const {
    return std::sqrt(w * w + x * x + y * y + z * z);
}

Quaternion Quaternion::normalized() const {
    const double n = norm();
    if (n < kZeroQuatNorm) return identity();
    return {w / n, x / n, y / n, z / n};
}

Quaternion Quaternion::operator*(const Quaternion& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
}

void Gaussian4D::validate() const {
    for (int i = 0; i < 4; ++i) {
        if (!(scale[i] > 0.0)) throw ValidationError("Gaussian4D: non-positive scale component");
        if (!std::isfinite(mu[i]) || !std::isfinite(scale[i]))
            throw ValidationError("Gaussian4D: non-finite mean or scale");
    }
    if (!(opacity > 0.0 && opacity < 1.0)) throw ValidationError("Gaussian4D: opacity outside (0,1)");
    for (int i = 0; i < 3; ++i) {
        if (!(rgb[i] >= 0.0 && rgb[i] <= 1.0)) throw ValidationError("Gaussian4D: rgb outside [0,1]");
    }
    if (std::abs(q_left.norm() - 1.0) > 1e-4 || std::abs(q_right.norm() - 1.0) > 1e-4)
        throw ValidationError("Gaussian4D: quaternion not unit norm");
}

GaussianGrad& GaussianGrad::operator+=(const GaussianGrad& o) {
    mu += o.mu;
    scale += o.scale;
    q_left += o.q_left;
    q_right += o.q_right;
    rgb += o.rgb;
    opacity += o.opacity;
    return *this;
}

Mat4 left_isoclinic(const Quaternion& q) {
    const double a = q.w, b = q.x, c = q.y, d = q.z;
    Mat4 m;
    m << a, -b, -c, -d,
         b,  a, -d,  c,
         c,  d,  a, -b,
         d, -c,  b,  a;
    return m;
}

Mat4 right_isoclinic(const Quaternion& q) {
    const double p = q.w, r = q.x, s = q.y, t = q.z;
    Mat4 m;
    m << p, -r, -s, -t,
         r,  p,  t, -s,
         s, -t,  p,  r,
         t,  s, -r,  p;
    return m;
}

Mat4 build_rotation4(const Quaternion& q_left, const Quaternion& q_right) {
    if (std::abs(q_left.norm() - 1.0) > kUnitTolerance ||
        std::abs(q_right.norm() - 1.0) > kUnitTolerance) {
        throw InvalidInput("build_rotation4: quaternions must be unit norm");
    }
    return left_isoclinic(q_left) * right_isoclinic(q_right);
}

Covariance4 build_covariance4(const Vec4& scale, const Mat4& rotation) {
    for (int i = 0; i < 4; ++i) {
        if (!(scale[i] > 0.0)) throw InvalidInput("build_covariance4: scale components must be positive");
    }
    const Mat4 rs = rotation * scale.asDiagonal();
    Covariance4 cov;
    cov.sigma = rs * rs.transpose();
    return cov;
}

Covariance4 covariance4(const Gaussian4D& g) {
    const Mat4 rot = build_rotation4(g.q_left.normalized(), g.q_right.normalized());
    return build_covariance4(g.scale, rot);
}

std::pair<Quaternion, Quaternion> isoclinic_decompose(const Mat4& rotation) {
    if ((rotation.transpose() * rotation - Mat4::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
        rotation.determinant() < 0.0) {
        throw InvalidInput("isoclinic_decompose: matrix is not a proper rotation");
    }
    // First column is q_l * q_r; the remaining columns, right-multiplied by
    // conj(q_l q_r), are the images of i, j, k under conjugation by q_l.
    const Quaternion c0 = Quaternion::from_coeffs(rotation.col(0));
    Mat3 basis;  // columns: rot3(q_l) applied to i, j, k
    for (int i = 1; i < 4; ++i) {
        const Quaternion u = Quaternion::from_coeffs(rotation.col(i)) * c0.conjugate();
        basis.col(i - 1) = Vec3(u.x, u.y, u.z);
    }
    // Shepperd-style quaternion extraction from the 3x3 rotation.
    Quaternion ql;
    const double tr = basis.trace();
    if (tr > 0.0) {
        double s = std::sqrt(tr + 1.0) * 2.0;
        ql = {0.25 * s, (basis(2, 1) - basis(1, 2)) / s, (basis(0, 2) - basis(2, 0)) / s,
              (basis(1, 0) - basis(0, 1)) / s};
    } else if (basis(0, 0) > basis(1, 1) && basis(0, 0) > basis(2, 2)) {
        double s = std::sqrt(1.0 + basis(0, 0) - basis(1, 1) - basis(2, 2)) * 2.0;
        ql = {(basis(2, 1) - basis(1, 2)) / s, 0.25 * s, (basis(0, 1) + basis(1, 0)) / s,
              (basis(0, 2) + basis(2, 0)) / s};
    } else if (basis(1, 1) > basis(2, 2)) {
        double s = std::sqrt(1.0 + basis(1, 1) - basis(0, 0) - basis(2, 2)) * 2.0;
        ql = {(basis(0, 2) - basis(2, 0)) / s, (basis(0, 1) + basis(1, 0)) / s, 0.25 * s,
              (basis(1, 2) + basis(2, 1)) / s};
    } else {
        double s = std::sqrt(1.0 + basis(2, 2) - basis(0, 0) - basis(1, 1)) * 2.0;
        ql = {(basis(1, 0) - basis(0, 1)) / s, (basis(0, 2) + basis(2, 0)) / s,
              (basis(1, 2) + basis(2, 1)) / s, 0.25 * s};
    }
    ql = ql.normalized();
    const Quaternion qr = (ql.conjugate() * c0).normalized();
    return {ql, qr};
}

double temporal_marginal(const Gaussian4D& g, double t) {
    const Mat4 sigma = covariance4(g).sigma;
    const double var_t = sigma(3, 3);
    if (var_t <= kDegenerateVar) throw DegenerateCovariance("temporal_marginal: Sigma_44 is degenerate");
    const double d = t - g.mu[3];
    return std::exp(-0.5 * d * d / var_t);
}

ConditionalGaussian3 condition_on_time(const Gaussian4D& g, double t) {
    const Mat4 sigma = covariance4(g).sigma;
    const double var_t = sigma(3, 3);
    if (var_t <= kDegenerateVar) throw DegenerateCovariance("condition_on_time: Sigma_44 is degenerate");
    const Vec3 cross = sigma.block<3, 1>(0, 3);
    ConditionalGaussian3 cg;
    cg.mu_xyz = g.mu.head<3>() + cross * ((t - g.mu[3]) / var_t);
    cg.sigma_xyz = sigma.block<3, 3>(0, 0) - cross * cross.transpose() / var_t;
    const double d = t - g.mu[3];
    cg.temporal_weight = std::exp(-0.5 * d * d / var_t);
    cg.rgb = g.rgb;
    cg.opacity = g.opacity;
    return cg;
}

double density_4d(const Gaussian4D& g, const Vec3& x, double t) {
    const Mat4 sigma = covariance4(g).sigma;
    Eigen::SelfAdjointEigenSolver<Mat4> es(sigma);
    const Vec4 ev = es.eigenvalues();
    if (ev.minCoeff() <= kDegenerateVar || ev.maxCoeff() / ev.minCoeff() > kMaxCondition)
        throw DegenerateCovariance("density_4d: covariance is singular or ill-conditioned");
    Vec4 d;
    d << x - g.mu.head<3>(), t - g.mu[3];
    return std::exp(-0.5 * d.dot(sigma.inverse() * d));
}

}  // namespace fourdgs
