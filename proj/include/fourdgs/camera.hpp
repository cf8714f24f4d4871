#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fourdgs/gaussians.hpp"

namespace fourdgs {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat23 = Eigen::Matrix<double, 2, 3>;

struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.5;
    double cy = 0.5;
    int width = 1;
    int height = 1;

    void validate() const;
};

// Camera-to-world transform. Camera frame: +z forward, +x right, +y down.
struct CameraPose {
    Mat4 c2w = Mat4::Identity();

    void validate() const;
    Mat3 rotation() const { return c2w.block<3, 3>(0, 0); }
    Vec3 center() const { return c2w.block<3, 1>(0, 3); }
    // World-to-camera rotation via the orthonormality of the rotation block.
    Mat3 world_to_cam() const { return rotation().transpose(); }
};

struct CameraView {
    CameraIntrinsics intrinsics;
    CameraPose pose;
    double time = 0.0;
};

// Per-pixel world-space rays, row-major H x W.
struct RayMap {
    int height = 0;
    int width = 0;
    std::vector<Vec3> origins;
    std::vector<Vec3> directions;  // unit norm

    const Vec3& origin(int v, int u) const { return origins[v * width + u]; }
    const Vec3& direction(int v, int u) const { return directions[v * width + u]; }
};

// Screen-space splat: 2D mean, 2x2 covariance, camera-frame depth of the mean.
struct SplatProjection {
    Vec2 mu_uv = Vec2::Zero();
    Mat2 sigma_uv = Mat2::Identity();
    double depth = 0.0;
};

// Rays through pixel centers (u + 0.5, v + 0.5), expressed in world frame.
RayMap compute_ray_map(const CameraView& view);

// Plucker-style ray encoding: [ray_d, closest point of the ray to the
// world origin]. Invariant to sliding ray_o along ray_d.
Vec6 plucker_encode(const Vec3& ray_o, const Vec3& ray_d);

// Jacobian of (u, v) = (fx*x/z + cx, fy*y/z + cy) at a camera-frame point.
Mat23 projection_jacobian(const Vec3& point_cam, const CameraIntrinsics& intr);

// Linearized projection of a conditional 3D Gaussian to image space.
// Returns nullopt when the mean is behind the camera.
std::optional<SplatProjection> project_gaussian(const ConditionalGaussian3& cg, const CameraView& view);

// Camera JSON files: a list of {fx, fy, cx, cy, width, height, c2w, time}.
std::vector<CameraView> load_views(const std::string& path);
void save_views(const std::string& path, const std::vector<CameraView>& views);

}  // namespace fourdgs
