#include "fourdgs/head.hpp"

#include <cmath>

namespace fourdgs {

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Vec3 clamp_box(const Vec3& p, double half_extent) {
    Vec3 out;
    for (int i = 0; i < 3; ++i) out[i] = std::clamp(p[i], -half_extent, half_extent);
    return out;
}

// Shared decode of the channels that do not depend on the anchoring mode.
void decode_common(const RawVec20& g, const HeadConfig& cfg, Gaussian4D& out) {
    for (int i = 0; i < 3; ++i) out.rgb[i] = std::clamp((g[raw::kRgb + i] + 1.0) * 0.5, 0.0, 1.0);
    for (int i = 0; i < 3; ++i)
        out.scale[i] = std::min(std::exp(g[raw::kScaleXyz + i] - cfg.scale_bias), cfg.scale_cap_xyz);
    out.scale[3] = std::min(std::exp(g[raw::kScaleT] - cfg.scale_bias), cfg.scale_cap_t);
    out.q_left = Quaternion::from_coeffs(g.segment<4>(raw::kQLeft)).normalized();
    out.q_right = Quaternion::from_coeffs(g.segment<4>(raw::kQRight)).normalized();
    out.opacity = sigmoid(g[raw::kOpacity] - cfg.opacity_bias);
}

// VJP of quaternion L2 normalization with the zero-vector identity fallback.
Vec4 normalize_backward(const Vec4& raw_q, const Vec4& d_unit) {
    const double n = raw_q.norm();
    if (n < 1e-8) return Vec4::Zero();
    const Vec4 u = raw_q / n;
    return (d_unit - u * u.dot(d_unit)) / n;
}

void decode_common_backward(const RawVec20& g, const HeadConfig& cfg, const GaussianGrad& grad,
                            RawVec20& out) {
    for (int i = 0; i < 3; ++i) {
        const double r = g[raw::kRgb + i];
        out[raw::kRgb + i] = (r >= -1.0 && r <= 1.0) ? 0.5 * grad.rgb[i] : 0.0;
    }
    for (int i = 0; i < 3; ++i) {
        const double s = std::exp(g[raw::kScaleXyz + i] - cfg.scale_bias);
        out[raw::kScaleXyz + i] = (s < cfg.scale_cap_xyz) ? grad.scale[i] * s : 0.0;
    }
    const double st = std::exp(g[raw::kScaleT] - cfg.scale_bias);
    out[raw::kScaleT] = (st < cfg.scale_cap_t) ? grad.scale[3] * st : 0.0;
    out.segment<4>(raw::kQLeft) = normalize_backward(g.segment<4>(raw::kQLeft), grad.q_left);
    out.segment<4>(raw::kQRight) = normalize_backward(g.segment<4>(raw::kQRight), grad.q_right);
    const double a = sigmoid(g[raw::kOpacity] - cfg.opacity_bias);
    out[raw::kOpacity] = grad.opacity * a * (1.0 - a);
}

// Flattens a decoded Gaussian to 20 numbers for finite differencing.
RawVec20 pack(const Gaussian4D& g) {
    RawVec20 v;
    v.segment<4>(0) = g.mu;
    v.segment<4>(4) = g.scale;
    v.segment<4>(8) = g.q_left.coeffs();
    v.segment<4>(12) = g.q_right.coeffs();
    v.segment<3>(16) = g.rgb;
    v[19] = g.opacity;
    return v;
}

GaussianGrad seed_grad(int k) {
    GaussianGrad grad;
    if (k < 4) grad.mu[k] = 1.0;
    else if (k < 8) grad.scale[k - 4] = 1.0;
    else if (k < 12) grad.q_left[k - 8] = 1.0;
    else if (k < 16) grad.q_right[k - 12] = 1.0;
    else if (k < 19) grad.rgb[k - 16] = 1.0;
    else grad.opacity = 1.0;
    return grad;
}

}  // namespace

void HeadConfig::validate() const {
    if (!(delta_near > 0.0 && delta_near < delta_far))
        throw ValidationError("HeadConfig: need 0 < delta_near < delta_far");
    if (!(scale_cap_xyz > 0.0 && scale_cap_t > 0.0 && spatial_clip > 0.0))
        throw ValidationError("HeadConfig: caps and clip must be positive");
}

Gaussian4D decode_pixel_aligned(const RawVec20& g, const Vec3& ray_o, const Vec3& ray_d,
                                const HeadConfig& cfg) {
    cfg.validate();
    Gaussian4D out;
    const double w = sigmoid((g[0] + g[1] + g[2]) / 3.0);
    const double delta = (1.0 - w) * cfg.delta_near + w * cfg.delta_far;
    out.mu.head<3>() = clamp_box(ray_o + delta * ray_d, cfg.spatial_clip);
    out.mu[3] = g[raw::kT];
    decode_common(g, cfg, out);
    return out;
}

Gaussian4D decode_free(const RawVec20& g, const HeadConfig& cfg) {
    cfg.validate();
    Gaussian4D out;
    for (int i = 0; i < 3; ++i) out.mu[i] = cfg.spatial_clip * std::tanh(g[i]);
    out.mu[3] = std::tanh(g[raw::kT]);
    decode_common(g, cfg, out);
    return out;
}

RawVec20 decode_pixel_aligned_backward(const RawVec20& g, const Vec3& ray_o, const Vec3& ray_d,
                                       const HeadConfig& cfg, const GaussianGrad& grad) {
    RawVec20 out = RawVec20::Zero();
    const double w = sigmoid((g[0] + g[1] + g[2]) / 3.0);
    const double delta = (1.0 - w) * cfg.delta_near + w * cfg.delta_far;
    const Vec3 center = ray_o + delta * ray_d;
    double d_delta = 0.0;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(center[i]) <= cfg.spatial_clip) d_delta += grad.mu[i] * ray_d[i];
    }
    const double d_mean = d_delta * (cfg.delta_far - cfg.delta_near) * w * (1.0 - w);
    out[0] = out[1] = out[2] = d_mean / 3.0;
    out[raw::kT] = grad.mu[3];
    decode_common_backward(g, cfg, grad, out);
    return out;
}

RawVec20 decode_free_backward(const RawVec20& g, const HeadConfig& cfg, const GaussianGrad& grad) {
    RawVec20 out = RawVec20::Zero();
    for (int i = 0; i < 3; ++i) {
        const double th = std::tanh(g[i]);
        out[i] = grad.mu[i] * cfg.spatial_clip * (1.0 - th * th);
    }
    const double tht = std::tanh(g[raw::kT]);
    out[raw::kT] = grad.mu[3] * (1.0 - tht * tht);
    decode_common_backward(g, cfg, grad, out);
    return out;
}

double head_jacobian_check(const RawVec20& g, const Vec3& ray_o, const Vec3& ray_d,
                           const HeadConfig& cfg, int* skipped) {
    const double h = 1e-6;
    const double boundary_margin = 1e-4;
    if (skipped) *skipped = 0;

    // Boundary proximity per decoded channel: caps, clip box, rgb clamp.
    const double w = sigmoid((g[0] + g[1] + g[2]) / 3.0);
    const double delta = (1.0 - w) * cfg.delta_near + w * cfg.delta_far;
    const Vec3 center = ray_o + delta * ray_d;
    auto output_at_boundary = [&](int k) {
        if (k < 3) return std::abs(std::abs(center[k]) - cfg.spatial_clip) < boundary_margin;
        if (k >= 4 && k < 7)
            return std::abs(g[raw::kScaleXyz + (k - 4)] - cfg.scale_bias - std::log(cfg.scale_cap_xyz)) <
                   boundary_margin;
        if (k == 7)
            return std::abs(g[raw::kScaleT] - cfg.scale_bias - std::log(cfg.scale_cap_t)) < boundary_margin;
        if (k >= 16 && k < 19) return std::abs(std::abs(g[raw::kRgb + (k - 16)]) - 1.0) < boundary_margin;
        return false;
    };

    double max_rel = 0.0;
    for (int k = 0; k < 20; ++k) {
        if (output_at_boundary(k)) {
            if (skipped) ++(*skipped);
            continue;
        }
        const RawVec20 analytic = decode_pixel_aligned_backward(g, ray_o, ray_d, cfg, seed_grad(k));
        for (int i = 0; i < 20; ++i) {
            RawVec20 gp = g, gm = g;
            gp[i] += h;
            gm[i] -= h;
            const double fd = (pack(decode_pixel_aligned(gp, ray_o, ray_d, cfg))[k] -
                               pack(decode_pixel_aligned(gm, ray_o, ray_d, cfg))[k]) /
                              (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
            max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
        }
    }
    return max_rel;
}

}  // namespace fourdgs
