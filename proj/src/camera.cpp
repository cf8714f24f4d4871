#include "fourdgs/camera.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace fourdgs {

namespace {
constexpr double kMinDepth = 1e-6;
}

void CameraIntrinsics::validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ValidationError("CameraIntrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ValidationError("CameraIntrinsics: resolution must be positive");
    if (cx < 0.0 || cx > width || cy < 0.0 || cy > height)
        throw ValidationError("CameraIntrinsics: principal point outside image");
}

void CameraPose::validate() const {
    if ((c2w.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() != 0.0)
        throw ValidationError("CameraPose: bottom row must be (0,0,0,1)");
    const Mat3 r = rotation();
    if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
        throw ValidationError("CameraPose: rotation block is not orthonormal");
}

RayMap compute_ray_map(const CameraView& view) {
    view.intrinsics.validate();
    view.pose.validate();
    const CameraIntrinsics& k = view.intrinsics;
    const Mat3 r = view.pose.rotation();
    const Vec3 origin = view.pose.center();

    RayMap map;
    map.height = k.height;
    map.width = k.width;
    map.origins.assign(static_cast<size_t>(k.height) * k.width, origin);
    map.directions.resize(static_cast<size_t>(k.height) * k.width);
    for (int v = 0; v < k.height; ++v) {
        for (int u = 0; u < k.width; ++u) {
            const Vec3 dir_cam((u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0);
            map.directions[static_cast<size_t>(v) * k.width + u] = (r * dir_cam).normalized();
        }
    }
    return map;
}

Vec6 plucker_encode(const Vec3& ray_o, const Vec3& ray_d) {
    if (std::abs(ray_d.norm() - 1.0) > 1e-6) throw InvalidInput("plucker_encode: direction must be unit norm");
    Vec6 out;
    out.head<3>() = ray_d;
    out.tail<3>() = ray_o - ray_o.dot(ray_d) * ray_d;
    return out;
}

Mat23 projection_jacobian(const Vec3& point_cam, const CameraIntrinsics& intr) {
    const double x = point_cam[0], y = point_cam[1], z = point_cam[2];
    if (z <= kMinDepth) throw InvalidInput("projection_jacobian: point behind camera");
    Mat23 j;
    j << intr.fx / z, 0.0, -intr.fx * x / (z * z),
         0.0, intr.fy / z, -intr.fy * y / (z * z);
    return j;
}

std::optional<SplatProjection> project_gaussian(const ConditionalGaussian3& cg, const CameraView& view) {
    const Mat3 w2c = view.pose.world_to_cam();
    const Vec3 p_cam = w2c * (cg.mu_xyz - view.pose.center());
    if (p_cam[2] <= kMinDepth) return std::nullopt;

    const CameraIntrinsics& k = view.intrinsics;
    SplatProjection sp;
    sp.mu_uv = Vec2(k.fx * p_cam[0] / p_cam[2] + k.cx, k.fy * p_cam[1] / p_cam[2] + k.cy);
    const Mat23 jw = projection_jacobian(p_cam, k) * w2c;
    sp.sigma_uv = jw * cg.sigma_xyz * jw.transpose();
    sp.depth = p_cam[2];
    return sp;
}

std::vector<CameraView> load_views(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open camera file: " + path);
    nlohmann::json doc;
    in >> doc;
    if (!doc.is_array()) throw FormatError("camera file must hold a JSON array: " + path);

    std::vector<CameraView> views;
    views.reserve(doc.size());
    for (const auto& item : doc) {
        CameraView view;
        view.intrinsics.fx = item.at("fx").get<double>();
        view.intrinsics.fy = item.at("fy").get<double>();
        view.intrinsics.cx = item.at("cx").get<double>();
        view.intrinsics.cy = item.at("cy").get<double>();
        view.intrinsics.width = item.at("width").get<int>();
        view.intrinsics.height = item.at("height").get<int>();
        const auto& m = item.at("c2w");
        if (!m.is_array() || m.size() != 16) throw FormatError("c2w must hold 16 numbers");
        for (int i = 0; i < 16; ++i) view.pose.c2w(i / 4, i % 4) = m[i].get<double>();
        view.time = item.at("time").get<double>();
        view.intrinsics.validate();
        view.pose.validate();
        views.push_back(view);
    }
    return views;
}

void save_views(const std::string& path, const std::vector<CameraView>& views) {
    nlohmann::json doc = nlohmann::json::array();
    for (const CameraView& view : views) {
        nlohmann::json item;
        item["fx"] = view.intrinsics.fx;
        item["fy"] = view.intrinsics.fy;
        item["cx"] = view.intrinsics.cx;
        item["cy"] = view.intrinsics.cy;
        item["width"] = view.intrinsics.width;
        item["height"] = view.intrinsics.height;
        nlohmann::json m = nlohmann::json::array();
        for (int i = 0; i < 16; ++i) m.push_back(view.pose.c2w(i / 4, i % 4));
        item["c2w"] = std::move(m);
        item["time"] = view.time;
        doc.push_back(std::move(item));
    }
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write camera file: " + path);
    out << doc.dump(2) << "\n";
}

}  // namespace fourdgs
