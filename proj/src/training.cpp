#include <cmath>
#include <random>
#include <string>

#include "fourdgs/common.hpp"
#include "fourdgs/optimizer.hpp"

namespace fourdgs {

namespace {

Scene4D decode_raw_scene(const Eigen::VectorXd& params, int n, const HeadConfig& head) {
    Scene4D scene;
    scene.gaussians.resize(n);
    for (int i = 0; i < n; ++i) {
        const RawVec20 g = params.segment<20>(20 * i);
        scene.gaussians[i] = decode_free(g, head);
    }
    return scene;
}

double mean_psnr(const Scene4D& scene, const std::vector<ViewTarget>& views,
                 const RenderOptions& opts) {
    if (views.empty()) return 0.0;
    double acc = 0.0;
    for (const ViewTarget& vt : views)
        acc += psnr(render_tiled(scene, vt.view, vt.view.time, opts), vt.image);
    return acc / views.size();
}

void check_finite_loss(const LossReport& report, long iter) {
    if (std::isfinite(report.total)) return;
    for (size_t vi = 0; vi < report.per_view_mse.size(); ++vi)
        if (!std::isfinite(report.per_view_mse[vi]) ||
            !std::isfinite(report.per_view_structural[vi]))
            throw ValidationError("non-finite loss at iteration " + std::to_string(iter) +
                                  ", view " + std::to_string(vi));
    throw ValidationError("non-finite loss at iteration " + std::to_string(iter));
}

}  // namespace

FitResult fit_scene(const std::vector<ViewTarget>& targets, const FitOptions& opts,
                    const std::vector<ViewTarget>& holdout) {
    if (targets.size() < 2) throw InvalidInput("fit_scene needs at least two targets");
    if (opts.n_gaussians < 1) throw InvalidInput("fit_scene needs at least one Gaussian");
    const int n = opts.n_gaussians;

    Eigen::VectorXd params = Eigen::VectorXd::Zero(20 * n);
    if (!opts.initial_raw.empty()) {
        if (static_cast<int>(opts.initial_raw.size()) != n)
            throw InvalidInput("initial_raw size does not match n_gaussians");
        for (int i = 0; i < n; ++i) params.segment<20>(20 * i) = opts.initial_raw[i];
    } else {
        std::mt19937_64 rng(opts.seed);
        std::uniform_real_distribution<double> uni(-0.95, 0.95);
        for (int i = 0; i < n; ++i) {
            RawVec20 g = RawVec20::Zero();
            for (int k = 0; k < 3; ++k) g[k] = std::atanh(uni(rng));
            // Stratified time coverage: one Gaussian per time stratum.
            g[raw::kT] = std::atanh(-1.0 + 2.0 * (i + 0.5) / n);
            g[raw::kQLeft] = 1.0;
            g[raw::kQRight] = 1.0;
            params.segment<20>(20 * i) = g;
        }
    }

    RenderOptions ropts = opts.render;
    ropts.mode = RenderMode::kTraining;
    RenderOptions eval_opts = opts.render;
    eval_opts.mode = RenderMode::kInference;

    AdamState adam;
    adam.lr = opts.lr;
    adam.eps = 1e-15;
    adam.init(params.size());

    FitResult result;
    for (long iter = 0; iter < opts.iters; ++iter) {
        Scene4D scene = decode_raw_scene(params, n, opts.head);

        std::vector<Image> rendered;
        rendered.reserve(targets.size());
        std::vector<Image> target_images;
        target_images.reserve(targets.size());
        for (const ViewTarget& vt : targets) {
            rendered.push_back(render_tiled(scene, vt.view, vt.view.time, ropts));
            target_images.push_back(vt.image);
        }

        std::vector<Image> img_grads;
        const LossReport report =
            training_loss_with_gradient(rendered, target_images, opts.lambda, img_grads);
        check_finite_loss(report, iter);

        std::vector<GaussianGrad> ggrads(n);
        for (size_t vi = 0; vi < targets.size(); ++vi) {
            const auto view_grads =
                render_backward(scene, targets[vi].view, targets[vi].view.time, ropts,
                                img_grads[vi]);
            for (int i = 0; i < n; ++i) ggrads[i] += view_grads[i];
        }

        Eigen::VectorXd grad_vec(params.size());
        for (int i = 0; i < n; ++i) {
            const RawVec20 g = params.segment<20>(20 * i);
            grad_vec.segment<20>(20 * i) = decode_free_backward(g, opts.head, ggrads[i]);
        }

        adam_step(adam, params, grad_vec, "scene");

        if (opts.trace_every > 0 && (iter % opts.trace_every == 0 || iter + 1 == opts.iters)) {
            TraceRow row;
            row.iter = iter;
            row.loss = report.total;
            row.mse = report.mse_term;
            row.structural = report.structural_term;
            double acc = 0.0;
            for (size_t vi = 0; vi < targets.size(); ++vi)
                acc += psnr(rendered[vi], target_images[vi]);
            row.psnr_train = acc / targets.size();
            row.psnr_holdout = mean_psnr(scene, holdout, eval_opts);
            result.trace.push_back(row);
        }
    }

    result.scene = decode_raw_scene(params, n, opts.head);
    return result;
}

std::pair<LossReport, ModelWeights> forward_backward(const std::vector<ViewTarget>& inputs,
                                                     const std::vector<ViewTarget>& supervision,
                                                     const ModelConfig& cfg,
                                                     const ModelWeights& weights,
                                                     const HeadConfig& head_cfg,
                                                     const RenderOptions& render, double lambda) {
    if (inputs.empty() || supervision.empty())
        throw InvalidInput("forward_backward needs input and supervision views");

    std::vector<std::pair<Image, CameraView>> ins;
    ins.reserve(inputs.size());
    for (const ViewTarget& vt : inputs) ins.emplace_back(vt.image, vt.view);

    ForwardCachePtr cache;
    const Scene4D scene = forward(ins, cfg, weights, head_cfg, cache.ptr);

    RenderOptions ropts = render;
    ropts.mode = RenderMode::kTraining;

    std::vector<Image> rendered;
    std::vector<Image> target_images;
    for (const ViewTarget& vt : supervision) {
        rendered.push_back(render_tiled(scene, vt.view, vt.view.time, ropts));
        target_images.push_back(vt.image);
    }

    std::vector<Image> img_grads;
    const LossReport report =
        training_loss_with_gradient(rendered, target_images, lambda, img_grads);
    check_finite_loss(report, 0);

    std::vector<GaussianGrad> ggrads(scene.gaussians.size());
    for (size_t vi = 0; vi < supervision.size(); ++vi) {
        const auto view_grads = render_backward(scene, supervision[vi].view,
                                                supervision[vi].view.time, ropts, img_grads[vi]);
        for (size_t i = 0; i < ggrads.size(); ++i) ggrads[i] += view_grads[i];
    }

    // Head VJPs: pixel-aligned Gaussians follow the forward's view-major,
    // row-major pixel order; free tokens come last.
    const std::vector<RawVec20>& raw = cached_raw_vectors(*cache.ptr);
    std::vector<RawVec20> d_raw(raw.size());
    size_t gi = 0;
    for (const ViewTarget& vt : inputs) {
        const RayMap rays = compute_ray_map(vt.view);
        for (int v = 0; v < rays.height; ++v)
            for (int u = 0; u < rays.width; ++u, ++gi)
                d_raw[gi] = decode_pixel_aligned_backward(raw[gi], rays.origin(v, u),
                                                          rays.direction(v, u), head_cfg,
                                                          ggrads[gi]);
    }
    for (; gi < raw.size(); ++gi)
        d_raw[gi] = decode_free_backward(raw[gi], head_cfg, ggrads[gi]);

    return {report, backward(*cache.ptr, d_raw)};
}

TrainToyResult train_toy(const std::vector<Episode>& dataset, const ModelConfig& cfg,
                         const TrainToyOptions& opts) {
    if (dataset.empty()) throw InvalidInput("train_toy needs at least one episode");
    cfg.validate();

    ModelConfig seeded = cfg;
    seeded.seed = static_cast<uint32_t>(opts.seed);
    ModelWeights weights = init_weights(seeded);

    // One flat Adam state covering every tensor, visited in declaration order.
    Eigen::Index total = 0;
    for_each_tensor(weights, [&](const char*, auto& t) { total += t.size(); });
    AdamState adam;
    adam.lr = opts.lr;
    adam.eps = 1e-8;
    adam.init(total);

    Eigen::VectorXd params(total);
    Eigen::Index off = 0;
    for_each_tensor(weights, [&](const char*, auto& t) {
        params.segment(off, t.size()) = Eigen::Map<Eigen::VectorXd>(t.data(), t.size());
        off += t.size();
    });

    TrainToyResult result;
    for (long iter = 0; iter < opts.iters; ++iter) {
        // Scatter the flat vector back into tensor shapes.
        off = 0;
        for_each_tensor(weights, [&](const char*, auto& t) {
            Eigen::Map<Eigen::VectorXd>(t.data(), t.size()) = params.segment(off, t.size());
            off += t.size();
        });

        const Episode& ep = dataset[iter % dataset.size()];
        auto [report, grads] =
            forward_backward(ep.inputs, ep.supervision, seeded, weights, opts.head, opts.render,
                             opts.lambda);
        check_finite_loss(report, iter);

        Eigen::VectorXd grad_vec(total);
        off = 0;
        for_each_tensor(grads, [&](const char*, auto& t) {
            grad_vec.segment(off, t.size()) = Eigen::Map<Eigen::VectorXd>(t.data(), t.size());
            off += t.size();
        });

        adam_step(adam, params, grad_vec, "model");

        if (opts.trace_every > 0 && (iter % opts.trace_every == 0 || iter + 1 == opts.iters)) {
            TraceRow row;
            row.iter = iter;
            row.loss = report.total;
            row.mse = report.mse_term;
            row.structural = report.structural_term;
            row.psnr_train = 10.0 * std::log10(1.0 / std::max(report.mse_term, 1e-10));
            result.trace.push_back(row);
        }
    }

    off = 0;
    for_each_tensor(weights, [&](const char*, auto& t) {
        Eigen::Map<Eigen::VectorXd>(t.data(), t.size()) = params.segment(off, t.size());
        off += t.size();
    });
    result.weights = weights;
    return result;
}

}  // namespace fourdgs
