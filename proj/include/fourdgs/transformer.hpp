#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fourdgs/camera.hpp"
#include "fourdgs/head.hpp"
#include "fourdgs/rasterizer.hpp"

namespace fourdgs {

// H x W x 10 conditioning map: [rgb in [-1,1], time, ray_d, closest point].
struct FeatureMap {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // row-major, 10 channels interleaved

    double& at(int v, int u, int c) { return data[(static_cast<size_t>(v) * width + u) * 10 + c]; }
    double at(int v, int u, int c) const { return data[(static_cast<size_t>(v) * width + u) * 10 + c]; }
};

struct ModelConfig {
    int hidden_dim = 64;
    int layers = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int patch_size = 8;
    int free_tokens = 0;
    uint32_t seed = 0;

    void validate() const;
    int head_dim() const { return hidden_dim / heads; }
};

struct AttentionWeights {
    Eigen::MatrixXd wq, wk, wv, wo;  // each D x D
    Eigen::VectorXd bq, bk, bv, bo;
};

struct BlockWeights {
    Eigen::VectorXd ln1_gamma, ln1_beta;
    AttentionWeights attn;
    Eigen::VectorXd ln2_gamma, ln2_beta;
    Eigen::MatrixXd mlp_w1;  // (mlp_ratio*D) x D
    Eigen::VectorXd mlp_b1;
    Eigen::MatrixXd mlp_w2;  // D x (mlp_ratio*D)
    Eigen::VectorXd mlp_b2;
};

struct ModelWeights {
    Eigen::MatrixXd patch_embed_w;  // D x (10*P^2)
    Eigen::VectorXd patch_embed_b;
    Eigen::VectorXd embed_ln_gamma, embed_ln_beta;
    std::vector<BlockWeights> blocks;
    Eigen::VectorXd final_ln_gamma, final_ln_beta;
    Eigen::MatrixXd unpatch_w;  // (20*P^2) x D
    Eigen::VectorXd unpatch_b;
    Eigen::MatrixXd free_embed;     // N x D
    Eigen::MatrixXd free_decode_w;  // 20 x D
    Eigen::VectorXd free_decode_b;
};

// Visits every weight tensor in checkpoint declaration order.
// F is invoked as f(name, Eigen::MatrixXd&) or f(name, Eigen::VectorXd&).
template <typename W, typename F>
void for_each_tensor(W& w, F&& f) {
    f("patch_embed_w", w.patch_embed_w);
    f("patch_embed_b", w.patch_embed_b);
    f("embed_ln_gamma", w.embed_ln_gamma);
    f("embed_ln_beta", w.embed_ln_beta);
    for (size_t i = 0; i < w.blocks.size(); ++i) {
        auto& b = w.blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        f((p + "ln1_gamma").c_str(), b.ln1_gamma);
        f((p + "ln1_beta").c_str(), b.ln1_beta);
        f((p + "wq").c_str(), b.attn.wq);
        f((p + "bq").c_str(), b.attn.bq);
        f((p + "wk").c_str(), b.attn.wk);
        f((p + "bk").c_str(), b.attn.bk);
        f((p + "wv").c_str(), b.attn.wv);
        f((p + "bv").c_str(), b.attn.bv);
        f((p + "wo").c_str(), b.attn.wo);
        f((p + "bo").c_str(), b.attn.bo);
        f((p + "ln2_gamma").c_str(), b.ln2_gamma);
        f((p + "ln2_beta").c_str(), b.ln2_beta);
        f((p + "mlp_w1").c_str(), b.mlp_w1);
        f((p + "mlp_b1").c_str(), b.mlp_b1);
        f((p + "mlp_w2").c_str(), b.mlp_w2);
        f((p + "mlp_b2").c_str(), b.mlp_b2);
    }
    f("final_ln_gamma", w.final_ln_gamma);
    f("final_ln_beta", w.final_ln_beta);
    f("unpatch_w", w.unpatch_w);
    f("unpatch_b", w.unpatch_b);
    f("free_embed", w.free_embed);
    f("free_decode_w", w.free_decode_w);
    f("free_decode_b", w.free_decode_b);
}

// Allocates tensors with truncated-normal (std 0.02) linears, zero biases,
// unit norm scales; the unpatchify bias starts at zero so the initial decode
// lands on the head defaults.
ModelWeights init_weights(const ModelConfig& cfg);

// Same shapes, all zeros; used for gradients and Adam moments.
ModelWeights zero_like(const ModelWeights& w);

// Checkpoint: magic "4DLW", version u32, 7 u32 config fields, then tensors
// in declaration order as little-endian f32 with a u64 length prefix each.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelWeights& w);
std::pair<ModelConfig, ModelWeights> load_checkpoint(const std::string& path);

// Concatenates [-1,1]-scaled RGB, broadcast time, and the Plucker channels.
FeatureMap build_feature_map(const Image& image, const RayMap& rays, double time);

// Non-overlapping P x P patches, row-major; within a patch pixels are
// row-major with channels fastest. unpatchify is the exact inverse.
std::vector<Eigen::VectorXd> patchify(const FeatureMap& fm, int patch_size);

struct ForwardCache;  // opaque; holds activations for the backward pass

// Full image-to-4DGS forward pass. The returned scene holds V*H*W
// pixel-aligned Gaussians in view-major pixel-row-major order, followed by
// the free Gaussians. Pass a cache to enable backward().
Scene4D forward(const std::vector<std::pair<Image, CameraView>>& inputs, const ModelConfig& cfg,
                const ModelWeights& weights, const HeadConfig& head_cfg,
                ForwardCache* cache = nullptr);

// Backpropagates per-pixel raw-head-vector gradients (same order as the
// forward scene) through the transformer stack into weight gradients.
ModelWeights backward(const ForwardCache& cache, const std::vector<RawVec20>& d_raw);

ForwardCache* new_forward_cache();
void free_forward_cache(ForwardCache* cache);

// RAII wrapper for the opaque cache.
struct ForwardCachePtr {
    ForwardCache* ptr;
    ForwardCachePtr() : ptr(new_forward_cache()) {}
    ~ForwardCachePtr() { free_forward_cache(ptr); }
    ForwardCachePtr(const ForwardCachePtr&) = delete;
    ForwardCachePtr& operator=(const ForwardCachePtr&) = delete;
};

// The raw head vectors produced by the last forward pass through `cache`,
// in scene order (pixel-aligned tokens, then free tokens).
const std::vector<RawVec20>& cached_raw_vectors(const ForwardCache& cache);

}  // namespace fourdgs
