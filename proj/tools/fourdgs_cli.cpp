#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fourdgs/common.hpp"
#include "fourdgs/harness.hpp"
#include "fourdgs/image_io.hpp"
#include "fourdgs/optimizer.hpp"

namespace {

using namespace fourdgs;

Vec3 parse_background(const std::string& s) {
    Vec3 bg;
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &bg[0], &bg[1], &bg[2]) == 3) return bg;
    double g;
    if (std::sscanf(s.c_str(), "%lf", &g) == 1) return Vec3::Constant(g);
    throw InvalidInput("background must be 'r,g,b' or a single gray value");
}

std::vector<double> parse_times(const std::string& s) {
    double lo, hi;
    int n;
    if (std::sscanf(s.c_str(), "%lf:%lf:%d", &lo, &hi, &n) != 3 || n < 1)
        throw InvalidInput("--times expects start:end:n with n >= 1");
    std::vector<double> ts;
    for (int k = 0; k < n; ++k) ts.push_back(n > 1 ? lo + (hi - lo) * k / (n - 1) : lo);
    return ts;
}

std::string indexed_path(const std::string& base, int vi, int ti) {
    const size_t dot = base.find_last_of('.');
    const std::string stem = dot == std::string::npos ? base : base.substr(0, dot);
    const std::string ext = dot == std::string::npos ? ".png" : base.substr(dot);
    return stem + "_view" + std::to_string(vi) + "_t" + std::to_string(ti) + ext;
}

Image load_image(const std::string& path) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".raw") return read_raw(path);
    return read_png(path);
}

int run_render(const std::string& scene_path, const std::string& cameras_path,
               const std::string& time_str, const std::string& times_str, const std::string& out,
               const std::string& bg_str, const std::string& mode) {
    const Scene4D scene = scene_read(scene_path);
    const std::vector<CameraView> views = load_views(cameras_path);
    if (views.empty()) throw InvalidInput("camera file contains no views");

    std::vector<double> times;
    if (!times_str.empty()) times = parse_times(times_str);
    else if (!time_str.empty()) times.push_back(std::stod(time_str));

    RenderOptions opts;
    opts.background = parse_background(bg_str);
    if (mode == "training") opts.mode = RenderMode::kTraining;
    else if (mode == "inference") opts.mode = RenderMode::kInference;
    else throw InvalidInput("--mode must be training or inference");

    const bool single = views.size() == 1 && times.size() <= 1;
    for (size_t vi = 0; vi < views.size(); ++vi) {
        // No explicit time: use each view's own timestamp.
        const std::vector<double> ts = times.empty() ? std::vector<double>{views[vi].time} : times;
        for (size_t ti = 0; ti < ts.size(); ++ti) {
            const Image img = render_tiled(scene, views[vi], ts[ti], opts);
            const std::string path =
                single ? out : indexed_path(out, static_cast<int>(vi), static_cast<int>(ti));
            if (path.size() > 4 && path.substr(path.size() - 4) == ".raw") write_raw(path, img);
            else write_png(path, img);
        }
    }
    return 0;
}

int run_fit(const std::string& targets_dir, const std::string& cameras_path, int n, long iters,
            uint64_t seed, const std::string& out, const std::string& trace_path) {
    const std::vector<CameraView> views = load_views(cameras_path);
    std::vector<ViewTarget> targets;
    for (size_t i = 0; i < views.size(); ++i) {
        const std::string base = targets_dir + "/target" + std::to_string(i);
        ViewTarget vt;
        vt.view = views[i];
        try {
            vt.image = load_image(base + ".png");
        } catch (const std::exception&) {
            vt.image = load_image(base + ".raw");
        }
        targets.push_back(std::move(vt));
    }
    FitOptions opts;
    opts.n_gaussians = n;
    opts.iters = iters;
    opts.seed = seed;
    opts.trace_every = 10;
    const FitResult result = fit_scene(targets, opts);
    scene_write(out, result.scene);
    if (!trace_path.empty()) write_trace(trace_path, result.trace);
    std::printf("fit: %zu targets, %d gaussians, final loss %.6g\n", targets.size(), n,
                result.trace.empty() ? 0.0 : result.trace.back().loss);
    return 0;
}

int run_train_toy(const std::string& config_path, const std::string& data_dir, long iters,
                  uint64_t seed, const std::string& out, const std::string& trace_path) {
    nlohmann::json j;
    {
        std::ifstream in(config_path);
        if (!in) throw InvalidInput("cannot open config: " + config_path);
        in >> j;
    }
    ModelConfig cfg;
    cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
    cfg.layers = j.value("layers", cfg.layers);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
    cfg.patch_size = j.value("patch_size", cfg.patch_size);
    cfg.free_tokens = j.value("free_tokens", cfg.free_tokens);

    auto load_episode_half = [&](const std::string& stem) {
        const std::vector<CameraView> views = load_views(data_dir + "/" + stem + ".json");
        std::vector<ViewTarget> out_views;
        for (size_t i = 0; i < views.size(); ++i) {
            ViewTarget vt;
            vt.view = views[i];
            vt.image = load_image(data_dir + "/" + stem + std::to_string(i) + ".png");
            out_views.push_back(std::move(vt));
        }
        return out_views;
    };
    Episode ep;
    ep.inputs = load_episode_half("input");
    ep.supervision = load_episode_half("sup");

    TrainToyOptions opts;
    opts.iters = iters;
    opts.seed = seed;
    opts.trace_every = 50;
    const TrainToyResult result = train_toy({ep}, cfg, opts);
    ModelConfig saved = cfg;
    saved.seed = static_cast<uint32_t>(seed);
    save_checkpoint(out, saved, result.weights);
    if (!trace_path.empty()) write_trace(trace_path, result.trace);
    std::printf("train-toy: %ld iters, final loss %.6g\n", iters,
                result.trace.empty() ? 0.0 : result.trace.back().loss);
    return 0;
}

int run_eval(const std::string& scene_path, const std::string& ref, const std::string& setup_path,
             const std::string& report_path) {
    const Scene4D scene = scene_read(scene_path);
    nlohmann::json j;
    {
        std::ifstream in(setup_path);
        if (!in) throw InvalidInput("cannot open setup: " + setup_path);
        in >> j;
    }
    CameraSetupSpec spec;
    spec.kind = setup_kind_from_string(j.value("kind", "orbit"));
    spec.n_frames = j.value("n_frames", spec.n_frames);
    spec.radius = j.value("radius", spec.radius);
    spec.elevation_deg = j.value("elevation_deg", spec.elevation_deg);
    spec.seed = j.value("seed", spec.seed);
    spec.resolution = j.value("resolution", spec.resolution);
    const std::vector<CameraView> views = make_camera_setup(spec);

    EvalReport rep;
    if (ref.size() > 5 && ref.substr(ref.size() - 5) == ".4dgs") {
        rep = evaluate(scene, views, scene_read(ref));
    } else {
        rep = evaluate(scene, views, ref);
    }

    nlohmann::json out;
    out["mean_psnr"] = rep.mean_psnr;
    out["mean_ssim"] = rep.mean_ssim;
    out["entries"] = nlohmann::json::array();
    for (const EvalEntry& e : rep.entries)
        out["entries"].push_back({{"view", e.view_index},
                                  {"time_index", e.time_index},
                                  {"time", e.time},
                                  {"psnr", e.psnr},
                                  {"ssim", e.ssim}});
    if (!report_path.empty()) {
        std::ofstream f(report_path);
        f << out.dump(2) << "\n";
    }
    std::printf("eval: mean PSNR %.3f dB, mean SSIM %.4f over %zu view-times\n", rep.mean_psnr,
                rep.mean_ssim, rep.entries.size());
    return 0;
}

// Central-difference check of render_backward on a small random scene.
// Prints the max relative error over all parameter channels.
int run_gradcheck(const std::string& module, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    if (module == "head") {
        double worst = 0.0;
        for (int trial = 0; trial < 64; ++trial) {
            RawVec20 g;
            for (int i = 0; i < 20; ++i) g[i] = 2.0 * uni(rng) - 1.0;
            const Vec3 ray_o(uni(rng) - 0.5, uni(rng) - 0.5, -2.0);
            Vec3 ray_d(0.2 * (uni(rng) - 0.5), 0.2 * (uni(rng) - 0.5), 1.0);
            ray_d.normalize();
            worst = std::max(worst, head_jacobian_check(g, ray_o, ray_d, HeadConfig{}));
        }
        std::printf("gradcheck head: max rel err %.3e\n", worst);
        return worst < 1e-6 ? 0 : 1;
    }
    if (module != "rasterizer") throw InvalidInput("gradcheck module must be head or rasterizer");

    const Scene4D scene = make_synthetic_scene(seed, 6, 2);
    CameraSetupSpec spec;
    spec.kind = SetupKind::kOrbit;
    spec.n_frames = 2;
    spec.resolution = 16;
    const std::vector<CameraView> views = make_camera_setup(spec);
    RenderOptions opts;
    opts.mode = RenderMode::kTraining;
    opts.early_stop_transmittance = 0.0;
    const double t = 0.3;
    const double h = 1e-5;

    double worst = 0.0;
    for (const CameraView& view : views) {
        Image dl(view.intrinsics.height, view.intrinsics.width);
        for (double& x : dl.data) x = uni(rng) - 0.5;
        auto objective = [&](const Scene4D& s) {
            const Image img = render_dense(s, view, t, opts);
            double acc = 0.0;
            for (size_t i = 0; i < img.data.size(); ++i) acc += dl.data[i] * img.data[i];
            return acc;
        };
        const auto grads = render_backward(scene, view, t, opts, dl);
        for (size_t gi = 0; gi < scene.gaussians.size(); ++gi) {
            auto check = [&](double analytic, auto&& poke) {
                Scene4D plus = scene, minus = scene;
                poke(plus.gaussians[gi], h);
                poke(minus.gaussians[gi], -h);
                const double fd = (objective(plus) - objective(minus)) / (2.0 * h);
                const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-6});
                worst = std::max(worst, std::abs(fd - analytic) / denom);
            };
            for (int k = 0; k < 4; ++k)
                check(grads[gi].mu[k], [k](Gaussian4D& g, double d) { g.mu[k] += d; });
            for (int k = 0; k < 4; ++k)
                check(grads[gi].scale[k], [k](Gaussian4D& g, double d) { g.scale[k] += d; });
            const auto poke_q = [](Quaternion& q, int k, double d) {
                if (k == 0) q.w += d;
                else if (k == 1) q.x += d;
                else if (k == 2) q.y += d;
                else q.z += d;
            };
            for (int k = 0; k < 4; ++k)
                check(grads[gi].q_left[k],
                      [&, k](Gaussian4D& g, double d) { poke_q(g.q_left, k, d); });
            for (int k = 0; k < 4; ++k)
                check(grads[gi].q_right[k],
                      [&, k](Gaussian4D& g, double d) { poke_q(g.q_right, k, d); });
            for (int k = 0; k < 3; ++k)
                check(grads[gi].rgb[k], [k](Gaussian4D& g, double d) { g.rgb[k] += d; });
            check(grads[gi].opacity, [](Gaussian4D& g, double d) { g.opacity += d; });
        }
    }
    std::printf("gradcheck rasterizer: max rel err %.3e\n", worst);
    return worst < 1e-4 ? 0 : 1;
}

int run_make_scene(uint64_t seed, int moving, int n_static, const std::string& out) {
    scene_write(out, make_synthetic_scene(seed, moving, n_static));
    return 0;
}

int run_make_setup(const std::string& kind, int frames, double radius, double elevation,
                   uint64_t seed, int resolution, const std::string& out) {
    CameraSetupSpec spec;
    spec.kind = setup_kind_from_string(kind);
    spec.n_frames = frames;
    spec.radius = radius;
    spec.elevation_deg = elevation;
    spec.seed = seed;
    spec.resolution = resolution;
    save_views(out, make_camera_setup(spec));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"4D Gaussian splatting toolkit"};
    app.require_subcommand(1);

    std::string scene_path, cameras_path, out, time_str, times_str, mode = "inference";
    std::string bg_str = "1,1,1", targets_dir, trace_path, config_path, data_dir, ref_path;
    std::string setup_path, report_path, module, kind = "orbit";
    int n = 64, frames = 24, moving = 24, n_static = 8, resolution = 64;
    long iters = 2000;
    uint64_t seed = 0;
    double radius = 2.7, elevation = 0.0;

    auto* render = app.add_subcommand("render", "Render a scene at given views/times");
    render->add_option("--scene", scene_path)->required();
    render->add_option("--cameras", cameras_path)->required();
    render->add_option("--time", time_str);
    render->add_option("--times", times_str)->description("start:end:n");
    render->add_option("--out", out)->required();
    render->add_option("--background", bg_str);
    render->add_option("--mode", mode);

    auto* fit = app.add_subcommand("fit", "Fit a scene to posed target images");
    fit->add_option("--targets", targets_dir)->required();
    fit->add_option("--cameras", cameras_path)->required();
    fit->add_option("--n", n);
    fit->add_option("--iters", iters);
    fit->add_option("--seed", seed);
    fit->add_option("--out", out)->required();
    fit->add_option("--trace", trace_path);

    auto* toy = app.add_subcommand("train-toy", "Train the toy image-to-4DGS model");
    toy->add_option("--config", config_path)->required();
    toy->add_option("--data", data_dir)->required();
    toy->add_option("--iters", iters);
    toy->add_option("--seed", seed);
    toy->add_option("--out", out)->required();
    toy->add_option("--trace", trace_path);

    auto* ev = app.add_subcommand("eval", "Evaluate a scene against a reference");
    ev->add_option("--scene", scene_path)->required();
    ev->add_option("--ref", ref_path)->required();
    ev->add_option("--setup", setup_path)->required();
    ev->add_option("--report", report_path);

    auto* mkscene = app.add_subcommand("make-scene", "Generate a synthetic ground-truth scene");
    mkscene->add_option("--seed", seed);
    mkscene->add_option("--moving", moving);
    mkscene->add_option("--static", n_static);
    mkscene->add_option("--out", out)->required();

    auto* mksetup = app.add_subcommand("make-setup", "Generate a camera setup JSON");
    mksetup->add_option("--kind", kind);
    mksetup->add_option("--frames", frames);
    mksetup->add_option("--radius", radius);
    mksetup->add_option("--elevation", elevation);
    mksetup->add_option("--seed", seed);
    mksetup->add_option("--resolution", resolution);
    mksetup->add_option("--out", out)->required();

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gc->add_option("--module", module)->required();
    gc->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (render->parsed())
            return run_render(scene_path, cameras_path, time_str, times_str, out, bg_str, mode);
        if (fit->parsed())
            return run_fit(targets_dir, cameras_path, n, iters, seed, out, trace_path);
        if (toy->parsed())
            return run_train_toy(config_path, data_dir, iters, seed, out, trace_path);
        if (ev->parsed()) return run_eval(scene_path, ref_path, setup_path, report_path);
        if (mkscene->parsed()) return run_make_scene(seed, moving, n_static, out);
        if (mksetup->parsed())
            return run_make_setup(kind, frames, radius, elevation, seed, resolution, out);
        if (gc->parsed()) return run_gradcheck(module, seed);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
