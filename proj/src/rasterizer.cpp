#include "fourdgs/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fourdgs {

namespace {

constexpr double kDegenerateDet = 1e-12;

// A culled splat with its screen-space quadratic form precomputed.
struct PreparedSplat {
    int scene_index = 0;
    Vec2 mu_uv = Vec2::Zero();
    Mat2 precision = Mat2::Identity();  // inverse of sigma_uv
    double temporal = 1.0;
    double alpha = 0.0;
    Vec3 color = Vec3::Zero();
    double radius = 0.0;  // sigma_cutoff * sqrt(max eigenvalue)
};

std::vector<PreparedSplat> prepare_sorted_splats(const std::vector<ActiveSplat>& active,
                                                 const RenderOptions& opts, RenderStats* stats) {
    const std::vector<size_t> order = depth_sort(active);
    std::vector<PreparedSplat> out;
    out.reserve(active.size());
    for (size_t idx : order) {
        const ActiveSplat& a = active[idx];
        const Mat2& s = a.splat.sigma_uv;
        const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
        if (det < kDegenerateDet) {
            if (stats) ++stats->degenerate_skipped;
            continue;
        }
        PreparedSplat p;
        p.scene_index = a.index;
        p.mu_uv = a.splat.mu_uv;
        p.precision << s(1, 1) / det, -s(0, 1) / det, -s(1, 0) / det, s(0, 0) / det;
        p.temporal = a.cg.temporal_weight;
        p.alpha = a.cg.opacity;
        p.color = a.cg.rgb;
        const double half_trace = 0.5 * (s(0, 0) + s(1, 1));
        const double disc = std::sqrt(std::max(0.0, half_trace * half_trace - det));
        p.radius = opts.sigma_cutoff * std::sqrt(half_trace + disc);
        out.push_back(p);
    }
    return out;
}

// Bins sorted splat indices into tiles their cutoff AABB overlaps.
std::vector<std::vector<int>> bin_splats(const std::vector<PreparedSplat>& splats, int width,
                                         int height, int tile_size, int tiles_x, int tiles_y) {
    std::vector<std::vector<int>> bins(static_cast<size_t>(tiles_x) * tiles_y);
    for (int i = 0; i < static_cast<int>(splats.size()); ++i) {
        const PreparedSplat& p = splats[i];
        const double r = p.radius;
        const int u0 = std::clamp(static_cast<int>(std::floor((p.mu_uv[0] - r) / tile_size)), 0, tiles_x - 1);
        const int u1 = std::clamp(static_cast<int>(std::floor((p.mu_uv[0] + r) / tile_size)), 0, tiles_x - 1);
        const int v0 = std::clamp(static_cast<int>(std::floor((p.mu_uv[1] - r) / tile_size)), 0, tiles_y - 1);
        const int v1 = std::clamp(static_cast<int>(std::floor((p.mu_uv[1] + r) / tile_size)), 0, tiles_y - 1);
        if (p.mu_uv[0] + r < 0.0 || p.mu_uv[0] - r > width || p.mu_uv[1] + r < 0.0 ||
            p.mu_uv[1] - r > height) {
            continue;
        }
        for (int ty = v0; ty <= v1; ++ty)
            for (int tx = u0; tx <= u1; ++tx) bins[static_cast<size_t>(ty) * tiles_x + tx].push_back(i);
    }
    return bins;
}

void fill_stats_maps(RenderStats* stats, int height, int width) {
    if (!stats) return;
    stats->alpha_sum.assign(static_cast<size_t>(height) * width, 0.0);
    stats->transmittance.assign(static_cast<size_t>(height) * width, 1.0);
}

}  // namespace

void Scene4D::validate() const {
    for (size_t i = 0; i < gaussians.size(); ++i) {
        try {
            gaussians[i].validate();
        } catch (const ValidationError& e) {
            throw ValidationError("Scene4D: gaussian " + std::to_string(i) + ": " + e.what());
        }
    }
    if (!(t_min < t_max)) throw ValidationError("Scene4D: empty time domain");
}

void RenderOptions::validate() const {
    if (tile_size < 8) throw ValidationError("RenderOptions: tile_size must be >= 8");
    if (marginal_threshold < 0.0 || marginal_threshold >= 1.0 || opacity_threshold < 0.0 ||
        opacity_threshold >= 1.0)
        throw ValidationError("RenderOptions: thresholds must lie in [0,1)");
    if (!(sigma_cutoff > 0.0)) throw ValidationError("RenderOptions: sigma_cutoff must be positive");
}

std::vector<ActiveSplat> cull_and_filter(const Scene4D& scene, double t, const CameraView& view,
                                         const RenderOptions& opts) {
    std::vector<ActiveSplat> out;
    out.reserve(scene.gaussians.size());
    for (int i = 0; i < static_cast<int>(scene.gaussians.size()); ++i) {
        const Gaussian4D& g = scene.gaussians[i];
        ConditionalGaussian3 cg = condition_on_time(g, t);
        if (opts.mode == RenderMode::kInference) {
            if (cg.temporal_weight < opts.marginal_threshold) continue;
            if (cg.temporal_weight * cg.opacity < opts.opacity_threshold) continue;
        }
        std::optional<SplatProjection> sp = project_gaussian(cg, view);
        if (!sp) continue;  // behind camera
        out.push_back({i, std::move(cg), *sp});
    }
    return out;
}

std::vector<size_t> depth_sort(const std::vector<ActiveSplat>& splats) {
    std::vector<size_t> order(splats.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (splats[a].splat.depth != splats[b].splat.depth)
            return splats[a].splat.depth < splats[b].splat.depth;
        return splats[a].index < splats[b].index;
    });
    return order;
}

Image render_dense(const Scene4D& scene, const CameraView& view, double t, const RenderOptions& opts,
                   RenderStats* stats) {
    opts.validate();
    const std::vector<ActiveSplat> active = cull_and_filter(scene, t, view, opts);
    const std::vector<PreparedSplat> splats = prepare_sorted_splats(active, opts, stats);
    const int h = view.intrinsics.height, w = view.intrinsics.width;
    fill_stats_maps(stats, h, w);

    Image img(h, w);
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const Vec2 pix(u + 0.5, v + 0.5);
            Vec3 color = Vec3::Zero();
            double transmittance = 1.0;
            double alpha_sum = 0.0;
            for (const PreparedSplat& p : splats) {
                const Vec2 d = pix - p.mu_uv;
                const double q = 0.5 * d.dot(p.precision * d);
                const double weight = p.temporal * p.alpha * std::exp(-q);
                color += transmittance * weight * p.color;
                alpha_sum += transmittance * weight;
                transmittance *= 1.0 - weight;
            }
            color += transmittance * opts.background;
            for (int c = 0; c < 3; ++c) img.at(v, u, c) = std::clamp(color[c], 0.0, 1.0);
            if (stats && !stats->alpha_sum.empty()) {
                stats->alpha_sum[static_cast<size_t>(v) * w + u] = alpha_sum;
                stats->transmittance[static_cast<size_t>(v) * w + u] = transmittance;
            }
        }
    }
    return img;
}

Image render_tiled(const Scene4D& scene, const CameraView& view, double t, const RenderOptions& opts,
                   RenderStats* stats) {
    opts.validate();
    const std::vector<ActiveSplat> active = cull_and_filter(scene, t, view, opts);
    const std::vector<PreparedSplat> splats = prepare_sorted_splats(active, opts, stats);
    const int h = view.intrinsics.height, w = view.intrinsics.width;
    fill_stats_maps(stats, h, w);

    const int tiles_x = (w + opts.tile_size - 1) / opts.tile_size;
    const int tiles_y = (h + opts.tile_size - 1) / opts.tile_size;
    const std::vector<std::vector<int>> bins = bin_splats(splats, w, h, opts.tile_size, tiles_x, tiles_y);
    const double cutoff_q = 0.5 * opts.sigma_cutoff * opts.sigma_cutoff;

    Image img(h, w);
    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            const std::vector<int>& bin = bins[static_cast<size_t>(ty) * tiles_x + tx];
            const int v1 = std::min(h, (ty + 1) * opts.tile_size);
            const int u1 = std::min(w, (tx + 1) * opts.tile_size);
            for (int v = ty * opts.tile_size; v < v1; ++v) {
                for (int u = tx * opts.tile_size; u < u1; ++u) {
                    const Vec2 pix(u + 0.5, v + 0.5);
                    Vec3 color = Vec3::Zero();
                    double transmittance = 1.0;
                    double alpha_sum = 0.0;
                    for (int si : bin) {
                        const PreparedSplat& p = splats[si];
                        const Vec2 d = pix - p.mu_uv;
                        const double q = 0.5 * d.dot(p.precision * d);
                        if (q > cutoff_q) continue;
                        const double weight = p.temporal * p.alpha * std::exp(-q);
                        color += transmittance * weight * p.color;
                        alpha_sum += transmittance * weight;
                        transmittance *= 1.0 - weight;
                        if (opts.early_stop_transmittance > 0.0 &&
                            transmittance < opts.early_stop_transmittance)
                            break;
                    }
                    color += transmittance * opts.background;
                    for (int c = 0; c < 3; ++c) img.at(v, u, c) = std::clamp(color[c], 0.0, 1.0);
                    if (stats && !stats->alpha_sum.empty()) {
                        stats->alpha_sum[static_cast<size_t>(v) * w + u] = alpha_sum;
                        stats->transmittance[static_cast<size_t>(v) * w + u] = transmittance;
                    }
                }
            }
        }
    }
    return img;
}

std::vector<GaussianGrad> render_backward(const Scene4D& scene, const CameraView& view, double t,
                                          const RenderOptions& opts, const Image& dL_dImage) {
    opts.validate();
    if (opts.mode != RenderMode::kTraining)
        throw ContractViolation("render_backward: requires training mode (filters break differentiability)");
    if (dL_dImage.height != view.intrinsics.height || dL_dImage.width != view.intrinsics.width)
        throw InvalidInput("render_backward: gradient image does not match view resolution");

    const std::vector<ActiveSplat> active = cull_and_filter(scene, t, view, opts);
    const std::vector<PreparedSplat> splats = prepare_sorted_splats(active, opts, nullptr);
    const int h = view.intrinsics.height, w = view.intrinsics.width;
    const int n_splats = static_cast<int>(splats.size());

    // Per-splat screen-space accumulators, filled by the pixel loop.
    std::vector<Vec2> d_mu_uv(n_splats, Vec2::Zero());
    std::vector<Mat2> d_precision(n_splats, Mat2::Zero());
    std::vector<double> d_temporal(n_splats, 0.0);
    std::vector<double> d_alpha(n_splats, 0.0);
    std::vector<Vec3> d_color(n_splats, Vec3::Zero());

    const int tiles_x = (w + opts.tile_size - 1) / opts.tile_size;
    const int tiles_y = (h + opts.tile_size - 1) / opts.tile_size;
    const std::vector<std::vector<int>> bins = bin_splats(splats, w, h, opts.tile_size, tiles_x, tiles_y);
    const double cutoff_q = 0.5 * opts.sigma_cutoff * opts.sigma_cutoff;

    struct PixelHit {
        int splat = 0;
        double weight = 0.0;
        double density = 0.0;  // exp(-q)
        double pre_transmittance = 0.0;
        Vec2 offset = Vec2::Zero();
    };
    std::vector<PixelHit> hits;

    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            const std::vector<int>& bin = bins[static_cast<size_t>(ty) * tiles_x + tx];
            const int v1 = std::min(h, (ty + 1) * opts.tile_size);
            const int u1 = std::min(w, (tx + 1) * opts.tile_size);
            for (int v = ty * opts.tile_size; v < v1; ++v) {
                for (int u = tx * opts.tile_size; u < u1; ++u) {
                    const Vec2 pix(u + 0.5, v + 0.5);
                    const Vec3 dL_pix(dL_dImage.at(v, u, 0), dL_dImage.at(v, u, 1), dL_dImage.at(v, u, 2));

                    hits.clear();
                    double transmittance = 1.0;
                    for (int si : bin) {
                        const PreparedSplat& p = splats[si];
                        const Vec2 d = pix - p.mu_uv;
                        const double q = 0.5 * d.dot(p.precision * d);
                        if (q > cutoff_q) continue;
                        const double density = std::exp(-q);
                        const double weight = p.temporal * p.alpha * density;
                        hits.push_back({si, weight, density, transmittance, d});
                        transmittance *= 1.0 - weight;
                        if (opts.early_stop_transmittance > 0.0 &&
                            transmittance < opts.early_stop_transmittance)
                            break;
                    }

                    // Reverse sweep: suffix holds the color contribution of
                    // everything behind the current splat (incl. background).
                    Vec3 suffix = transmittance * opts.background;
                    for (int k = static_cast<int>(hits.size()) - 1; k >= 0; --k) {
                        const PixelHit& hit = hits[k];
                        const PreparedSplat& p = splats[hit.splat];
                        const Vec3 own = hit.pre_transmittance * hit.weight * p.color;
                        const double d_weight =
                            dL_pix.dot(hit.pre_transmittance * p.color - suffix / (1.0 - hit.weight));
                        suffix += own;

                        d_color[hit.splat] += dL_pix * (hit.pre_transmittance * hit.weight);
                        d_temporal[hit.splat] += d_weight * p.alpha * hit.density;
                        d_alpha[hit.splat] += d_weight * p.temporal * hit.density;
                        const double d_density = d_weight * p.temporal * p.alpha;
                        d_mu_uv[hit.splat] += d_density * hit.density * (p.precision * hit.offset);
                        d_precision[hit.splat] +=
                            d_density * hit.density * (-0.5) * (hit.offset * hit.offset.transpose());
                    }
                }
            }
        }
    }

    // Geometric chain, once per splat: screen-space gradients back to the
    // 20 Gaussian parameters.
    std::vector<GaussianGrad> grads(scene.gaussians.size());
    const Mat3 w2c = view.pose.world_to_cam();
    const CameraIntrinsics& intr = view.intrinsics;

    // Map prepared index -> active splat (prepare preserves sorted order).
    const std::vector<size_t> order = depth_sort(active);
    std::vector<const ActiveSplat*> by_prepared;
    by_prepared.reserve(n_splats);
    {
        size_t pi = 0;
        for (size_t idx : order) {
            const Mat2& s = active[idx].splat.sigma_uv;
            if (s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0) < kDegenerateDet) continue;
            by_prepared.push_back(&active[idx]);
            ++pi;
        }
    }

    for (int si = 0; si < n_splats; ++si) {
        const ActiveSplat& a = *by_prepared[si];
        const Gaussian4D& g = scene.gaussians[a.index];
        GaussianGrad& out = grads[a.index];

        out.rgb += d_color[si];
        out.opacity += d_alpha[si];

        // Recompute forward intermediates.
        const Quaternion ql = g.q_left.normalized();
        const Quaternion qr = g.q_right.normalized();
        const Mat4 lmat = left_isoclinic(ql);
        const Mat4 rmat = right_isoclinic(qr);
        const Mat4 rot = lmat * rmat;
        const Mat4 sigma4 = build_covariance4(g.scale, rot).sigma;
        const double var_t = sigma4(3, 3);
        const Vec3 cross = sigma4.block<3, 1>(0, 3);
        const double dt = t - g.mu[3];
        const double slope = dt / var_t;
        const Vec3 mu_cond = g.mu.head<3>() + cross * slope;
        const Mat3 sigma_cond = sigma4.block<3, 3>(0, 0) - cross * cross.transpose() / var_t;
        const double p_t = a.cg.temporal_weight;
        const Vec3 p_cam = w2c * (mu_cond - view.pose.center());
        const double x = p_cam[0], y = p_cam[1], z = p_cam[2];
        const Mat23 jac = projection_jacobian(p_cam, intr);
        const Mat23 b_mat = jac * w2c;

        // Screen covariance adjoint: precision -> sigma_uv -> (sigma_cond, J).
        const Mat2 prec = splats[si].precision;
        const Mat2 d_sigma_uv = -prec * d_precision[si] * prec;
        Mat3 d_sigma_cond = b_mat.transpose() * d_sigma_uv * b_mat;
        const Mat23 d_b = (d_sigma_uv + d_sigma_uv.transpose()) * b_mat * sigma_cond;
        const Mat23 d_jac = d_b * w2c.transpose();

        // Mean adjoint plus the Jacobian's dependence on the camera point.
        Vec3 d_p_cam = jac.transpose() * d_mu_uv[si];
        const double z2 = z * z, z3 = z2 * z;
        d_p_cam[0] += d_jac(0, 2) * (-intr.fx / z2);
        d_p_cam[1] += d_jac(1, 2) * (-intr.fy / z2);
        d_p_cam[2] += d_jac(0, 0) * (-intr.fx / z2) + d_jac(1, 1) * (-intr.fy / z2) +
                      d_jac(0, 2) * (2.0 * intr.fx * x / z3) + d_jac(1, 2) * (2.0 * intr.fy * y / z3);
        const Vec3 d_mu_cond = w2c.transpose() * d_p_cam;

        // Conditioning adjoint: back to the 4D mean and covariance blocks.
        out.mu.head<3>() += d_mu_cond;
        Vec3 d_cross = slope * d_mu_cond - (d_sigma_cond + d_sigma_cond.transpose()) * cross / var_t;
        double d_var_t = -cross.dot(d_mu_cond) * slope / var_t +
                         cross.dot(d_sigma_cond * cross) / (var_t * var_t);
        double d_mu_t = -cross.dot(d_mu_cond) / var_t;

        // Temporal marginal adjoint.
        d_mu_t += d_temporal[si] * p_t * dt / var_t;
        d_var_t += d_temporal[si] * p_t * 0.5 * dt * dt / (var_t * var_t);
        out.mu[3] += d_mu_t;

        // Assemble the full-matrix covariance adjoint.
        Mat4 g4 = Mat4::Zero();
        g4.block<3, 3>(0, 0) = d_sigma_cond;
        g4.block<3, 1>(0, 3) = d_cross;
        g4(3, 3) = d_var_t;

        // Sigma = R diag(s^2) R^T.
        const Vec4 s2 = g.scale.array().square();
        const Mat4 d_rot = (g4 + g4.transpose()) * rot * s2.asDiagonal();
        const Mat4 rtgr = rot.transpose() * g4 * rot;
        for (int k = 0; k < 4; ++k) out.scale[k] += 2.0 * g.scale[k] * rtgr(k, k);

        // Rotation adjoint down to the quaternion pair, through L2
        // normalization of the stored (near-unit) quaternions.
        const Mat4 d_lmat = d_rot * rmat.transpose();
        const Mat4 d_rmat = lmat.transpose() * d_rot;
        Vec4 d_ql_unit, d_qr_unit;
        for (int m = 0; m < 4; ++m) {
            Vec4 e = Vec4::Zero();
            e[m] = 1.0;
            d_ql_unit[m] = d_lmat.cwiseProduct(left_isoclinic(Quaternion::from_coeffs(e))).sum();
            d_qr_unit[m] = d_rmat.cwiseProduct(right_isoclinic(Quaternion::from_coeffs(e))).sum();
        }
        const Vec4 ql_raw = g.q_left.coeffs();
        const Vec4 qr_raw = g.q_right.coeffs();
        const double nl = ql_raw.norm(), nr = qr_raw.norm();
        const Vec4 ul = ql_raw / nl, ur = qr_raw / nr;
        out.q_left += (d_ql_unit - ul * ul.dot(d_ql_unit)) / nl;
        out.q_right += (d_qr_unit - ur * ur.dot(d_qr_unit)) / nr;
    }
    return grads;
}

}  // namespace fourdgs
