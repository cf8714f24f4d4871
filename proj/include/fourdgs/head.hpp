#pragma once

#include "fourdgs/gaussians.hpp"

namespace fourdgs {

// Raw 20-channel pre-activation vector, split [3,1,3,3,1,4,4,1]:
// xyz, t, rgb, scale_xyz, scale_t, q_left, q_right, opacity.
using RawVec20 = Eigen::Matrix<double, 20, 1>;

namespace raw {
constexpr int kXyz = 0;
constexpr int kT = 3;
constexpr int kRgb = 4;
constexpr int kScaleXyz = 7;
constexpr int kScaleT = 10;
constexpr int kQLeft = 11;
constexpr int kQRight = 15;
constexpr int kOpacity = 19;
}  // namespace raw

struct HeadConfig {
    double delta_near = 0.1;
    double delta_far = 4.5;
    double scale_bias = 2.3;
    double scale_cap_xyz = 0.3;
    double scale_cap_t = 1.0;
    double opacity_bias = 2.0;
    double spatial_clip = 1.0;

    void validate() const;
};

// Ray-anchored decode: the spatial center lies at distance
// delta = (1-w)*near + w*far along the pixel ray, w = sigmoid(mean(g_xyz)),
// then gets clamped to the clip box. Total over all real inputs.
Gaussian4D decode_pixel_aligned(const RawVec20& g, const Vec3& ray_o, const Vec3& ray_d,
                                const HeadConfig& cfg);

// Free-token decode: center = spatial_clip * tanh(g_xyz), mu_t = tanh(g_t);
// all other channels match the pixel-aligned path.
Gaussian4D decode_free(const RawVec20& g, const HeadConfig& cfg);

// Vector-Jacobian products of the two decodes: map gradients w.r.t. the
// decoded Gaussian back to the raw 20 channels. Clip/cap boundaries use
// subgradient 0 outside, 1 inside.
RawVec20 decode_pixel_aligned_backward(const RawVec20& g, const Vec3& ray_o, const Vec3& ray_d,
                                       const HeadConfig& cfg, const GaussianGrad& grad);
RawVec20 decode_free_backward(const RawVec20& g, const HeadConfig& cfg, const GaussianGrad& grad);

// Compares the analytic decode Jacobian against central finite differences
// and returns the max relative error. Channels sitting at a cap or clip
// boundary are skipped (counted in *skipped when provided).
double head_jacobian_check(const RawVec20& g, const Vec3& ray_o, const Vec3& ray_d,
                           const HeadConfig& cfg, int* skipped = nullptr);

}  // namespace fourdgs
