#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fourdgs/camera.hpp"
#include "fourdgs/rasterizer.hpp"

namespace fourdgs {

enum class SetupKind {
    kAlternatingCanonical,
    kFrameInterpolation,
    kTwoRotating,
    kRandomInput,
    kSingleViewVideo,
    kOrbit,
};

SetupKind setup_kind_from_string(const std::string& name);
std::string to_string(SetupKind kind);

struct CameraSetupSpec {
    SetupKind kind = SetupKind::kOrbit;
    int n_frames = 24;
    double radius = 2.7;
    double elevation_deg = 0.0;
    uint64_t seed = 0;
    int resolution = 64;
    double fov_y_deg = 50.0;

    void validate() const;
};

// Camera pose at `position` looking at `target`, +y down, world up (0,1,0).
CameraPose look_at(const Vec3& position, const Vec3& target);

// Origin-centered camera with the spec's intrinsics, at the given azimuth
// (degrees, 0 = front = -z side) and elevation (degrees above the xz plane).
CameraView make_orbit_view(const CameraSetupSpec& spec, double azimuth_deg, double elevation_deg,
                           double time);

// Deterministic view-time trajectories. Frame k of n maps to
// t = -1 + 2k/(n-1) (t = 0 when n = 1).
std::vector<CameraView> make_camera_setup(const CameraSetupSpec& spec);

// Ground-truth generator: n_static Gaussians with no space-time correlation
// and a huge temporal scale, n_moving Gaussians whose conditional means
// translate linearly in t. Everything stays inside the unit clip box over
// t in [-1, 1]; colors come from a fixed palette.
Scene4D make_synthetic_scene(uint64_t seed, int n_moving, int n_static);

struct EvalEntry {
    int view_index = 0;
    int time_index = 0;
    double time = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalEntry> entries;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

// Renders `scene` in inference mode at every eval view and scores against
// references rendered from a ground-truth scene.
EvalReport evaluate(const Scene4D& scene, const std::vector<CameraView>& eval_views,
                    const Scene4D& reference, const RenderOptions& opts = {});

// Same, with references loaded from a directory of PNGs named
// view{i}_t{k}.png, where i / k index distinct poses / times in order of
// first appearance in eval_views.
EvalReport evaluate(const Scene4D& scene, const std::vector<CameraView>& eval_views,
                    const std::string& reference_dir, const RenderOptions& opts = {});

// Binary scene container: magic "4DGS", version u32 = 1, count u32,
// time domain as 2 f32, then 20 little-endian f32 per Gaussian in order
// (mu, scale, q_left, q_right, rgb, opacity). Reading validates every record.
void scene_write(const std::string& path, const Scene4D& scene);
Scene4D scene_read(const std::string& path);

}  // namespace fourdgs
