#pragma once

#include <cstdint>
#include <vector>

#include "fourdgs/head.hpp"
#include "fourdgs/rasterizer.hpp"
#include "fourdgs/transformer.hpp"

namespace fourdgs {

// Peak signal-to-noise ratio in dB for [0,1] images; capped at 99 dB.
double psnr(const Image& a, const Image& b);

// Mean SSIM over 11x11 Gaussian-weighted windows (sigma 1.5), K1=0.01,
// K2=0.03, dynamic range 1, averaged over channels. Valid windows only.
double ssim(const Image& a, const Image& b);

// SSIM plus its analytic gradient with respect to the first image.
double ssim_with_gradient(const Image& a, const Image& b, Image& d_ssim_da);

struct LossReport {
    double total = 0.0;
    double mse_term = 0.0;
    double structural_term = 0.0;  // mean (1 - SSIM)
    double lambda = 0.5;
    std::vector<double> per_view_mse;
    std::vector<double> per_view_structural;
};

// Mean over views of MSE + lambda * (1 - SSIM).
LossReport training_loss(const std::vector<Image>& rendered, const std::vector<Image>& targets,
                         double lambda);

// Same, plus d(total)/d(rendered image) per view.
LossReport training_loss_with_gradient(const std::vector<Image>& rendered,
                                       const std::vector<Image>& targets, double lambda,
                                       std::vector<Image>& grads);

// Bias-corrected Adam over a flat parameter vector.
struct AdamState {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
    long step = 0;
    Eigen::VectorXd m;
    Eigen::VectorXd v;

    void init(Eigen::Index n);
};

void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads,
               const std::string& block_name = "params");

struct TraceRow {
    long iter = 0;
    double loss = 0.0;
    double mse = 0.0;
    double structural = 0.0;
    double psnr_train = 0.0;
    double psnr_holdout = 0.0;
};

void write_trace(const std::string& path, const std::vector<TraceRow>& rows);

struct ViewTarget {
    Image image;
    CameraView view;
};

struct FitOptions {
    int n_gaussians = 64;
    long iters = 2000;
    uint64_t seed = 0;
    double lr = 1e-2;
    double lambda = 0.5;
    HeadConfig head;
    RenderOptions render;  // training-mode settings applied internally
    long trace_every = 1;
    // Optional warm start: raw pre-activation parameters, 20 per Gaussian.
    std::vector<RawVec20> initial_raw;
};

struct FitResult {
    Scene4D scene;
    std::vector<TraceRow> trace;
};

// Direct scene fitting: Adam on per-Gaussian pre-activation vectors routed
// through the free-center head decode. Rendering runs in training mode.
FitResult fit_scene(const std::vector<ViewTarget>& targets, const FitOptions& opts,
                    const std::vector<ViewTarget>& holdout = {});

struct Episode {
    std::vector<ViewTarget> inputs;
    std::vector<ViewTarget> supervision;
};

struct TrainToyOptions {
    long iters = 5000;
    uint64_t seed = 0;
    double lr = 4e-4;
    double lambda = 0.5;
    HeadConfig head;
    RenderOptions render;
    long trace_every = 1;
};

// One full pipeline pass for an episode: transformer forward, training-mode
// renders of every supervision view, the training loss, and gradients for every
// weight tensor via render_backward + head Jacobians + token backward.
std::pair<LossReport, ModelWeights> forward_backward(const std::vector<ViewTarget>& inputs,
                                                     const std::vector<ViewTarget>& supervision,
                                                     const ModelConfig& cfg,
                                                     const ModelWeights& weights,
                                                     const HeadConfig& head_cfg,
                                                     const RenderOptions& render, double lambda);

struct TrainToyResult {
    ModelWeights weights;
    std::vector<TraceRow> trace;
};

// Toy transformer training: Adam over all weight tensors, episodes visited
// round-robin. Deterministic under a fixed seed.
TrainToyResult train_toy(const std::vector<Episode>& dataset, const ModelConfig& cfg,
                         const TrainToyOptions& opts);

}  // namespace fourdgs
