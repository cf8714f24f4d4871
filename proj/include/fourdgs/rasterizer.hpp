#pragma once

#include <vector>

#include "fourdgs/camera.hpp"
#include "fourdgs/gaussians.hpp"

namespace fourdgs {

// Ordered cloud of 4D Gaussians plus its declared time domain.
struct Scene4D {
    std::vector<Gaussian4D> gaussians;
    double t_min = -1.0;
    double t_max = 1.0;

    void validate() const;
};

enum class RenderMode { kTraining, kInference };

struct RenderOptions {
    RenderMode mode = RenderMode::kInference;
    Vec3 background = Vec3::Ones();
    int tile_size = 16;
    double marginal_threshold = 0.05;
    double opacity_threshold = 0.05;
    double sigma_cutoff = 3.0;
    // Per-tile compositing stops once transmittance falls below this value;
    // set to 0 to disable (gradient checks need the full tail).
    double early_stop_transmittance = 1e-4;

    void validate() const;
};

// H x W x 3 image, row-major, channels interleaved, values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, fill) {}

    double& at(int v, int u, int c) { return data[(static_cast<size_t>(v) * width + u) * 3 + c]; }
    double at(int v, int u, int c) const { return data[(static_cast<size_t>(v) * width + u) * 3 + c]; }
};

// A scene Gaussian that survived culling, ready for compositing.
struct ActiveSplat {
    int index = 0;  // position in the scene's Gaussian list
    ConditionalGaussian3 cg;
    SplatProjection splat;
};

// Optional per-render diagnostics.
struct RenderStats {
    int degenerate_skipped = 0;
    // Filled when requested: per-pixel accumulated blend weight and final
    // transmittance (their sum is 1 up to roundoff).
    std::vector<double> alpha_sum;
    std::vector<double> transmittance;
};

// Slices the scene at time t and drops behind-camera Gaussians. In inference
// mode additionally drops splats with p(t) < marginal_threshold or
// p(t) * alpha < opacity_threshold. Scene order is preserved.
std::vector<ActiveSplat> cull_and_filter(const Scene4D& scene, double t, const CameraView& view,
                                         const RenderOptions& opts);

// Stable front-to-back ordering: non-decreasing depth, ties by scene index.
std::vector<size_t> depth_sort(const std::vector<ActiveSplat>& splats);

// Brute-force oracle: every pixel composites every sorted splat, no tiling,
// no extent cutoff, no early termination.
Image render_dense(const Scene4D& scene, const CameraView& view, double t, const RenderOptions& opts,
                   RenderStats* stats = nullptr);

// Tile-binned production renderer; matches render_dense within 1e-5 per
// channel at sigma_cutoff 6.
Image render_tiled(const Scene4D& scene, const CameraView& view, double t, const RenderOptions& opts,
                   RenderStats* stats = nullptr);

// Analytic gradients of sum(dL_dImage .* I) w.r.t. every Gaussian parameter.
// Training mode only; thresholding would break differentiability.
std::vector<GaussianGrad> render_backward(const Scene4D& scene, const CameraView& view, double t,
                                          const RenderOptions& opts, const Image& dL_dImage);

}  // namespace fourdgs
