#include "fourdgs/harness.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <random>

#include "fourdgs/common.hpp"
#include "fourdgs/image_io.hpp"
#include "fourdgs/optimizer.hpp"

namespace fourdgs {

namespace {

constexpr double kDeg = M_PI / 180.0;

double frame_time(int k, int n) { return n > 1 ? -1.0 + 2.0 * k / (n - 1) : 0.0; }

const std::vector<Vec3>& palette() {
    static const std::vector<Vec3> p = {
        Vec3(0.90, 0.15, 0.15), Vec3(0.15, 0.70, 0.20), Vec3(0.15, 0.25, 0.90),
        Vec3(0.95, 0.80, 0.10), Vec3(0.80, 0.15, 0.80), Vec3(0.10, 0.80, 0.80),
        Vec3(0.95, 0.50, 0.10), Vec3(0.35, 0.35, 0.35),
    };
    return p;
}

void write_f32(FILE* f, float x) {
    static_assert(sizeof(float) == 4);
    std::fwrite(&x, 4, 1, f);
}

void write_u32(FILE* f, uint32_t x) { std::fwrite(&x, 4, 1, f); }

float read_f32(FILE* f) {
    float x;
    if (std::fread(&x, 4, 1, f) != 1) throw FormatError("scene file truncated");
    return x;
}

uint32_t read_u32(FILE* f) {
    uint32_t x;
    if (std::fread(&x, 4, 1, f) != 1) throw FormatError("scene file truncated");
    return x;
}

}  // namespace

SetupKind setup_kind_from_string(const std::string& name) {
    if (name == "alternating_canonical") return SetupKind::kAlternatingCanonical;
    if (name == "frame_interpolation") return SetupKind::kFrameInterpolation;
    if (name == "two_rotating") return SetupKind::kTwoRotating;
    if (name == "random_input") return SetupKind::kRandomInput;
    if (name == "single_view_video") return SetupKind::kSingleViewVideo;
    if (name == "orbit") return SetupKind::kOrbit;
    throw InvalidInput("unknown camera setup kind: " + name);
}

std::string to_string(SetupKind kind) {
    switch (kind) {
        case SetupKind::kAlternatingCanonical: return "alternating_canonical";
        case SetupKind::kFrameInterpolation: return "frame_interpolation";
        case SetupKind::kTwoRotating: return "two_rotating";
        case SetupKind::kRandomInput: return "random_input";
        case SetupKind::kSingleViewVideo: return "single_view_video";
        case SetupKind::kOrbit: return "orbit";
    }
    throw InvalidInput("unknown camera setup kind");
}

void CameraSetupSpec::validate() const {
    if (n_frames < 1) throw InvalidInput("n_frames must be >= 1");
    if (radius <= 0.0) throw InvalidInput("radius must be positive");
    if (resolution < 1) throw InvalidInput("resolution must be >= 1");
    if (fov_y_deg <= 0.0 || fov_y_deg >= 180.0) throw InvalidInput("fov must be in (0, 180)");
}

CameraPose look_at(const Vec3& position, const Vec3& target) {
    const Vec3 up(0.0, 1.0, 0.0);
    Vec3 forward = target - position;
    if (forward.norm() < 1e-12) throw InvalidInput("look_at: position equals target");
    forward.normalize();
    Vec3 x_cam = forward.cross(up);
    if (x_cam.norm() < 1e-9) {
        // Looking straight along the up axis; pick an arbitrary horizontal x.
        x_cam = Vec3(1.0, 0.0, 0.0);
    }
    x_cam.normalize();
    const Vec3 y_cam = forward.cross(x_cam);

    CameraPose pose;
    pose.c2w = Mat4::Identity();
    pose.c2w.block<3, 1>(0, 0) = x_cam;
    pose.c2w.block<3, 1>(0, 1) = y_cam;
    pose.c2w.block<3, 1>(0, 2) = forward;
    pose.c2w.block<3, 1>(0, 3) = position;
    return pose;
}

CameraView make_orbit_view(const CameraSetupSpec& spec, double azimuth_deg, double elevation_deg,
                           double time) {
    const double az = azimuth_deg * kDeg;
    const double el = elevation_deg * kDeg;
    const Vec3 pos(spec.radius * std::cos(el) * std::sin(az), spec.radius * std::sin(el),
                   -spec.radius * std::cos(el) * std::cos(az));

    CameraView view;
    const double res = spec.resolution;
    const double f = 0.5 * res / std::tan(0.5 * spec.fov_y_deg * kDeg);
    view.intrinsics = {f, f, res / 2.0, res / 2.0, spec.resolution, spec.resolution};
    view.pose = look_at(pos, Vec3::Zero());
    view.time = time;
    return view;
}

std::vector<CameraView> make_camera_setup(const CameraSetupSpec& spec) {
    spec.validate();
    const int n = spec.n_frames;
    const double canonical[4] = {0.0, 90.0, 180.0, 270.0};  // front, left, back, right
    std::vector<CameraView> views;

    switch (spec.kind) {
        case SetupKind::kAlternatingCanonical:
            for (int k = 0; k < n; ++k)
                views.push_back(
                    make_orbit_view(spec, canonical[k % 4], spec.elevation_deg, frame_time(k, n)));
            break;
        case SetupKind::kFrameInterpolation:
            // Odd frames omitted; the surviving even frames get two opposing
            // canonical views each.
            for (int k = 0; k < n; k += 2) {
                views.push_back(
                    make_orbit_view(spec, canonical[0], spec.elevation_deg, frame_time(k, n)));
                views.push_back(
                    make_orbit_view(spec, canonical[2], spec.elevation_deg, frame_time(k, n)));
            }
            break;
        case SetupKind::kTwoRotating: {
            // One camera sweeps front-to-back over the left arc on odd frames,
            // a second sweeps the right arc on even frames.
            const int n_even = (n + 1) / 2;
            const int n_odd = n / 2;
            int e = 0, o = 0;
            for (int k = 0; k < n; ++k) {
                if (k % 2 == 0) {
                    const double az = -180.0 * e / std::max(n_even - 1, 1);
                    views.push_back(make_orbit_view(spec, az, spec.elevation_deg, frame_time(k, n)));
                    ++e;
                } else {
                    const double az = 180.0 * o / std::max(n_odd - 1, 1);
                    views.push_back(make_orbit_view(spec, az, spec.elevation_deg, frame_time(k, n)));
                    ++o;
                }
            }
            break;
        }
        case SetupKind::kRandomInput: {
            std::mt19937_64 rng(spec.seed);
            std::uniform_real_distribution<double> az(0.0, 360.0);
            for (int k = 0; k < n; ++k)
                views.push_back(make_orbit_view(spec, az(rng), spec.elevation_deg, frame_time(k, n)));
            break;
        }
        case SetupKind::kSingleViewVideo:
            // Four canonical poses on the first frame plus a front-view video.
            for (double a : canonical)
                views.push_back(make_orbit_view(spec, a, spec.elevation_deg, frame_time(0, n)));
            for (int k = 1; k < n; ++k)
                views.push_back(
                    make_orbit_view(spec, canonical[0], spec.elevation_deg, frame_time(k, n)));
            break;
        case SetupKind::kOrbit:
            for (int k = 0; k < n; ++k)
                views.push_back(
                    make_orbit_view(spec, 360.0 * k / n, spec.elevation_deg, frame_time(k, n)));
            break;
    }
    return views;
}

Scene4D make_synthetic_scene(uint64_t seed, int n_moving, int n_static) {
    if (n_moving < 0 || n_static < 0 || n_moving + n_static < 1)
        throw InvalidInput("need at least one Gaussian");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

    Scene4D scene;
    int color_index = 0;
    auto next_color = [&]() { return palette()[color_index++ % palette().size()]; };

    for (int i = 0; i < n_moving; ++i) {
        const Vec3 mu(range(-0.55, 0.55), range(-0.55, 0.55), range(-0.55, 0.55));
        const double mu_t = range(-0.4, 0.4);
        const Vec3 vel(range(-0.2, 0.2), range(-0.2, 0.2), range(-0.2, 0.2));
        const double sigma_t = range(0.5, 0.9);

        // Random spatial orientation from a uniform quaternion.
        Quaternion q3{range(-1, 1), range(-1, 1), range(-1, 1), range(-1, 1)};
        q3 = q3.normalized();
        Mat3 r3;
        {
            const double w = q3.w, x = q3.x, y = q3.y, z = q3.z;
            r3 << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
        }
        Vec3 s(range(0.06, 0.16), range(0.06, 0.16), range(0.06, 0.16));
        const Mat3 a = r3 * s.array().square().matrix().asDiagonal() * r3.transpose();

        // Cross-covariance sigma_t^2 * v makes the conditional mean translate
        // at exactly `vel` per unit time.
        Mat4 sigma = Mat4::Zero();
        const double st2 = sigma_t * sigma_t;
        sigma.block<3, 3>(0, 0) = a + st2 * vel * vel.transpose();
        sigma.block<3, 1>(0, 3) = st2 * vel;
        sigma.block<1, 3>(3, 0) = st2 * vel.transpose();
        sigma(3, 3) = st2;

        Eigen::SelfAdjointEigenSolver<Mat4> eig(sigma);
        Mat4 u = eig.eigenvectors();
        if (u.determinant() < 0.0) u.col(0) *= -1.0;
        const auto [ql, qr] = isoclinic_decompose(u);

        Gaussian4D g;
        g.mu << mu, mu_t;
        g.scale = eig.eigenvalues().cwiseSqrt();
        g.q_left = ql;
        g.q_right = qr;
        g.rgb = next_color();
        g.opacity = range(0.65, 0.95);
        scene.gaussians.push_back(g);
    }
    for (int i = 0; i < n_static; ++i) {
        Gaussian4D g;
        g.mu << range(-0.6, 0.6), range(-0.6, 0.6), range(-0.6, 0.6), range(-0.5, 0.5);
        g.scale << range(0.06, 0.16), range(0.06, 0.16), range(0.06, 0.16), 1e4;
        g.q_left = Quaternion::identity();
        g.q_right = Quaternion::identity();
        g.rgb = next_color();
        g.opacity = range(0.65, 0.95);
        scene.gaussians.push_back(g);
    }
    scene.validate();
    return scene;
}

namespace {

EvalReport evaluate_impl(const Scene4D& scene, const std::vector<CameraView>& eval_views,
                         const RenderOptions& opts, const Scene4D* reference,
                         const std::string* reference_dir) {
    RenderOptions ropts = opts;
    ropts.mode = RenderMode::kInference;

    // Pose / time indices follow first appearance order so file naming and
    // report keys are deterministic.
    std::vector<Mat4> poses;
    std::vector<double> times;
    EvalReport report;
    for (const CameraView& view : eval_views) {
        EvalEntry entry;
        entry.time = view.time;
        int pi = -1;
        for (size_t i = 0; i < poses.size(); ++i)
            if (poses[i] == view.pose.c2w) pi = static_cast<int>(i);
        if (pi < 0) {
            pi = static_cast<int>(poses.size());
            poses.push_back(view.pose.c2w);
        }
        int ti = -1;
        for (size_t i = 0; i < times.size(); ++i)
            if (times[i] == view.time) ti = static_cast<int>(i);
        if (ti < 0) {
            ti = static_cast<int>(times.size());
            times.push_back(view.time);
        }
        entry.view_index = pi;
        entry.time_index = ti;

        const Image rendered = render_tiled(scene, view, view.time, ropts);
        Image ref;
        if (reference != nullptr) {
            ref = render_tiled(*reference, view, view.time, ropts);
        } else {
            const std::string path = *reference_dir + "/view" + std::to_string(pi) + "_t" +
                                     std::to_string(ti) + ".png";
            try {
                ref = read_png(path);
            } catch (const InvalidInput&) {
                throw InvalidInput("missing reference image for view " + std::to_string(pi) +
                                   ", time " + std::to_string(ti) + ": " + path);
            }
        }
        entry.psnr = psnr(rendered, ref);
        entry.ssim = ssim(rendered, ref);
        report.entries.push_back(entry);
    }
    for (const EvalEntry& e : report.entries) {
        report.mean_psnr += e.psnr / report.entries.size();
        report.mean_ssim += e.ssim / report.entries.size();
    }
    return report;
}

}  // namespace

EvalReport evaluate(const Scene4D& scene, const std::vector<CameraView>& eval_views,
                    const Scene4D& reference, const RenderOptions& opts) {
    if (eval_views.empty()) throw InvalidInput("evaluate needs at least one view");
    return evaluate_impl(scene, eval_views, opts, &reference, nullptr);
}

EvalReport evaluate(const Scene4D& scene, const std::vector<CameraView>& eval_views,
                    const std::string& reference_dir, const RenderOptions& opts) {
    if (eval_views.empty()) throw InvalidInput("evaluate needs at least one view");
    return evaluate_impl(scene, eval_views, opts, nullptr, &reference_dir);
}

void scene_write(const std::string& path, const Scene4D& scene) {
    scene.validate();
    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw InvalidInput("cannot open scene file for writing: " + path);
    std::fwrite("4DGS", 1, 4, f);
    write_u32(f, 1);
    write_u32(f, static_cast<uint32_t>(scene.gaussians.size()));
    write_f32(f, static_cast<float>(scene.t_min));
    write_f32(f, static_cast<float>(scene.t_max));
    for (const Gaussian4D& g : scene.gaussians) {
        for (int i = 0; i < 4; ++i) write_f32(f, static_cast<float>(g.mu[i]));
        for (int i = 0; i < 4; ++i) write_f32(f, static_cast<float>(g.scale[i]));
        for (double c : {g.q_left.w, g.q_left.x, g.q_left.y, g.q_left.z})
            write_f32(f, static_cast<float>(c));
        for (double c : {g.q_right.w, g.q_right.x, g.q_right.y, g.q_right.z})
            write_f32(f, static_cast<float>(c));
        for (int i = 0; i < 3; ++i) write_f32(f, static_cast<float>(g.rgb[i]));
        write_f32(f, static_cast<float>(g.opacity));
    }
    std::fclose(f);
}

Scene4D scene_read(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (f == nullptr) throw InvalidInput("cannot open scene file: " + path);
    try {
        char magic[4];
        if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "4DGS", 4) != 0)
            throw FormatError("bad scene file magic");
        if (read_u32(f) != 1) throw FormatError("unsupported scene file version");
        const uint32_t count = read_u32(f);
        Scene4D scene;
        scene.t_min = read_f32(f);
        scene.t_max = read_f32(f);
        scene.gaussians.reserve(count);
        for (uint32_t i = 0; i < count; ++i) {
            Gaussian4D g;
            for (int k = 0; k < 4; ++k) g.mu[k] = read_f32(f);
            for (int k = 0; k < 4; ++k) g.scale[k] = read_f32(f);
            g.q_left.w = read_f32(f);
            g.q_left.x = read_f32(f);
            g.q_left.y = read_f32(f);
            g.q_left.z = read_f32(f);
            g.q_right.w = read_f32(f);
            g.q_right.x = read_f32(f);
            g.q_right.y = read_f32(f);
            g.q_right.z = read_f32(f);
            for (int k = 0; k < 3; ++k) g.rgb[k] = read_f32(f);
            g.opacity = read_f32(f);
            try {
                g.validate();
            } catch (const std::exception& e) {
                throw ValidationError("scene record " + std::to_string(i) + ": " + e.what());
            }
            scene.gaussians.push_back(g);
        }
        std::fclose(f);
        scene.validate();
        return scene;
    } catch (...) {
        std::fclose(f);
        throw;
    }
}

}  // namespace fourdgs
