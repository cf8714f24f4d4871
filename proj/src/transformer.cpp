#include "fourdgs/transformer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <random>
#include <utility>

#include "fourdgs/common.hpp"

namespace fourdgs {

namespace {

constexpr double kLnEps = 1e-5;
constexpr char kMagic[4] = {'4', 'D', 'L', 'W'};
constexpr uint32_t kVersion = 1;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * pdf;
}

// Row-wise layernorm. Returns normalized pre-affine values and per-row
// mean / inverse stddev for the backward pass.
struct LnCache {
    Eigen::MatrixXd xhat;    // T x D
    Eigen::VectorXd inv_sd;  // T
};

Eigen::MatrixXd layernorm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gamma,
                          const Eigen::VectorXd& beta, LnCache* cache) {
    const Eigen::Index t_count = x.rows();
    const Eigen::Index d = x.cols();
    Eigen::MatrixXd out(t_count, d);
    Eigen::MatrixXd xhat(t_count, d);
    Eigen::VectorXd inv_sd(t_count);
    for (Eigen::Index t = 0; t < t_count; ++t) {
        const double mu = x.row(t).mean();
        const double var = (x.row(t).array() - mu).square().mean();
        const double isd = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(t) = (x.row(t).array() - mu) * isd;
        out.row(t) = xhat.row(t).cwiseProduct(gamma.transpose()) + beta.transpose();
        inv_sd(t) = isd;
    }
    if (cache != nullptr) {
        cache->xhat = xhat;
        cache->inv_sd = inv_sd;
    }
    return out;
}

Eigen::MatrixXd layernorm_backward(const Eigen::MatrixXd& d_out, const LnCache& cache,
                                   const Eigen::VectorXd& gamma, Eigen::VectorXd& d_gamma,
                                   Eigen::VectorXd& d_beta) {
    const Eigen::Index t_count = d_out.rows();
    const Eigen::Index d = d_out.cols();
    Eigen::MatrixXd d_x(t_count, d);
    for (Eigen::Index t = 0; t < t_count; ++t) {
        const Eigen::RowVectorXd g = d_out.row(t);
        d_gamma += g.cwiseProduct(cache.xhat.row(t)).transpose();
        d_beta += g.transpose();
        const Eigen::RowVectorXd d_xhat = g.cwiseProduct(gamma.transpose());
        const double mean_dxhat = d_xhat.mean();
        const double mean_dxhat_xhat = d_xhat.cwiseProduct(cache.xhat.row(t)).mean();
        d_x.row(t) = cache.inv_sd(t) *
                     (d_xhat.array() - mean_dxhat - cache.xhat.row(t).array() * mean_dxhat_xhat);
    }
    return d_x;
}

struct AttnCache {
    Eigen::MatrixXd q, k, v;              // T x D (heads packed along columns)
    std::vector<Eigen::MatrixXd> probs;   // per head, T x T
    Eigen::MatrixXd concat;               // T x D, pre-output-projection
};

struct BlockCache {
    Eigen::MatrixXd x_in;      // residual stream entering the block
    LnCache ln1;
    AttnCache attn;
    Eigen::MatrixXd x_mid;     // after attention residual
    LnCache ln2;
    Eigen::MatrixXd ln2_out;
    Eigen::MatrixXd mlp_pre;   // T x (ratio*D), pre-GeLU
    Eigen::MatrixXd mlp_act;   // post-GeLU
};

Eigen::MatrixXd attention(const Eigen::MatrixXd& x_ln, const AttentionWeights& w, int heads,
                          AttnCache* cache) {
    const Eigen::Index t_count = x_ln.rows();
    const Eigen::Index d = x_ln.cols();
    const Eigen::Index dh = d / heads;
    Eigen::MatrixXd q = (x_ln * w.wq.transpose()).rowwise() + w.bq.transpose();
    Eigen::MatrixXd k = (x_ln * w.wk.transpose()).rowwise() + w.bk.transpose();
    Eigen::MatrixXd v = (x_ln * w.wv.transpose()).rowwise() + w.bv.transpose();
    Eigen::MatrixXd concat(t_count, d);
    std::vector<Eigen::MatrixXd> probs(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        const auto qh = q.middleCols(h * dh, dh);
        const auto kh = k.middleCols(h * dh, dh);
        const auto vh = v.middleCols(h * dh, dh);
        Eigen::MatrixXd scores = scale * (qh * kh.transpose());
        for (Eigen::Index r = 0; r < t_count; ++r) {
            const double mx = scores.row(r).maxCoeff();
            scores.row(r) = (scores.row(r).array() - mx).exp();
            scores.row(r) /= scores.row(r).sum();
        }
        concat.middleCols(h * dh, dh) = scores * vh;
        probs[h] = std::move(scores);
    }
    if (cache != nullptr) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs = probs;
        cache->concat = concat;
    }
    return (concat * w.wo.transpose()).rowwise() + w.bo.transpose();
}

Eigen::MatrixXd attention_backward(const Eigen::MatrixXd& d_out, const Eigen::MatrixXd& x_ln,
                                   const AttentionWeights& w, int heads, const AttnCache& cache,
                                   AttentionWeights& dw) {
    const Eigen::Index t_count = x_ln.rows();
    const Eigen::Index d = x_ln.cols();
    const Eigen::Index dh = d / heads;
    dw.wo += d_out.transpose() * cache.concat;
    dw.bo += d_out.colwise().sum().transpose();
    const Eigen::MatrixXd d_concat = d_out * w.wo;
    Eigen::MatrixXd d_q = Eigen::MatrixXd::Zero(t_count, d);
    Eigen::MatrixXd d_k = Eigen::MatrixXd::Zero(t_count, d);
    Eigen::MatrixXd d_v = Eigen::MatrixXd::Zero(t_count, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        const auto dah = d_concat.middleCols(h * dh, dh);
        const auto qh = cache.q.middleCols(h * dh, dh);
        const auto kh = cache.k.middleCols(h * dh, dh);
        const auto vh = cache.v.middleCols(h * dh, dh);
        const Eigen::MatrixXd& p = cache.probs[h];
        d_v.middleCols(h * dh, dh) = p.transpose() * dah;
        Eigen::MatrixXd d_p = dah * vh.transpose();
        // softmax backward per row: ds = p .* (dp - sum(dp .* p))
        Eigen::MatrixXd d_scores(t_count, t_count);
        for (Eigen::Index r = 0; r < t_count; ++r) {
            const double dot = d_p.row(r).cwiseProduct(p.row(r)).sum();
            d_scores.row(r) = p.row(r).array() * (d_p.row(r).array() - dot);
        }
        d_q.middleCols(h * dh, dh) = scale * (d_scores * kh);
        d_k.middleCols(h * dh, dh) = scale * (d_scores.transpose() * qh);
    }
    dw.wq += d_q.transpose() * x_ln;
    dw.bq += d_q.colwise().sum().transpose();
    dw.wk += d_k.transpose() * x_ln;
    dw.bk += d_k.colwise().sum().transpose();
    dw.wv += d_v.transpose() * x_ln;
    dw.bv += d_v.colwise().sum().transpose();
    return d_q * w.wq + d_k * w.wk + d_v * w.wv;
}

void write_u32(FILE* f, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    std::fwrite(b, 1, 4, f);
}

uint32_t read_u32(FILE* f) {
    unsigned char b[4];
    if (std::fread(b, 1, 4, f) != 4) throw FormatError("checkpoint truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_u64(FILE* f, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    std::fwrite(b, 1, 8, f);
}

uint64_t read_u64(FILE* f) {
    unsigned char b[8];
    if (std::fread(b, 1, 8, f) != 8) throw FormatError("checkpoint truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void ModelConfig::validate() const {
    if (hidden_dim <= 0 || layers <= 0 || heads <= 0 || mlp_ratio <= 0 || patch_size <= 0)
        throw InvalidInput("model config fields must be positive");
    if (hidden_dim % heads != 0) throw InvalidInput("hidden_dim must be divisible by heads");
    if (free_tokens < 0) throw InvalidInput("free_tokens must be non-negative");
}

ModelWeights init_weights(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937 rng(cfg.seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto trunc = [&]() {
        double x;
        do {
            x = dist(rng);
        } while (std::abs(x) > 0.04);
        return x;
    };

    ModelWeights w;
    const int d = cfg.hidden_dim;
    const int pd = 10 * cfg.patch_size * cfg.patch_size;
    const int od = 20 * cfg.patch_size * cfg.patch_size;
    auto mat = [&](int r, int c) {
        Eigen::MatrixXd m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = trunc();
        return m;
    };
    w.patch_embed_w = mat(d, pd);
    w.patch_embed_b = Eigen::VectorXd::Zero(d);
    w.embed_ln_gamma = Eigen::VectorXd::Ones(d);
    w.embed_ln_beta = Eigen::VectorXd::Zero(d);
    w.blocks.resize(cfg.layers);
    for (auto& b : w.blocks) {
        b.ln1_gamma = Eigen::VectorXd::Ones(d);
        b.ln1_beta = Eigen::VectorXd::Zero(d);
        b.attn.wq = mat(d, d);
        b.attn.wk = mat(d, d);
        b.attn.wv = mat(d, d);
        b.attn.wo = mat(d, d);
        b.attn.bq = Eigen::VectorXd::Zero(d);
        b.attn.bk = Eigen::VectorXd::Zero(d);
        b.attn.bv = Eigen::VectorXd::Zero(d);
        b.attn.bo = Eigen::VectorXd::Zero(d);
        b.ln2_gamma = Eigen::VectorXd::Ones(d);
        b.ln2_beta = Eigen::VectorXd::Zero(d);
        b.mlp_w1 = mat(cfg.mlp_ratio * d, d);
        b.mlp_b1 = Eigen::VectorXd::Zero(cfg.mlp_ratio * d);
        b.mlp_w2 = mat(d, cfg.mlp_ratio * d);
        b.mlp_b2 = Eigen::VectorXd::Zero(d);
    }
    w.final_ln_gamma = Eigen::VectorXd::Ones(d);
    w.final_ln_beta = Eigen::VectorXd::Zero(d);
    w.unpatch_w = mat(od, d);
    w.unpatch_b = Eigen::VectorXd::Zero(od);
    w.free_embed = mat(std::max(cfg.free_tokens, 0), d);
    w.free_decode_w = mat(20, d);
    w.free_decode_b = Eigen::VectorXd::Zero(20);
    return w;
}

ModelWeights zero_like(const ModelWeights& w) {
    ModelWeights z = w;
    for_each_tensor(z, [](const char*, auto& t) { t.setZero(); });
    return z;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelWeights& w) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw InvalidInput("cannot open checkpoint for writing: " + path);
    std::fwrite(kMagic, 1, 4, f);
    write_u32(f, kVersion);
    write_u32(f, static_cast<uint32_t>(cfg.hidden_dim));
    write_u32(f, static_cast<uint32_t>(cfg.layers));
    write_u32(f, static_cast<uint32_t>(cfg.heads));
    write_u32(f, static_cast<uint32_t>(cfg.mlp_ratio));
    write_u32(f, static_cast<uint32_t>(cfg.patch_size));
    write_u32(f, static_cast<uint32_t>(cfg.free_tokens));
    write_u32(f, cfg.seed);
    for_each_tensor(const_cast<ModelWeights&>(w), [&](const char*, auto& t) {
        const uint64_t n = static_cast<uint64_t>(t.size());
        write_u64(f, n);
        std::vector<float> buf(n);
        const double* src = t.data();
        for (uint64_t i = 0; i < n; ++i) buf[i] = static_cast<float>(src[i]);
        std::fwrite(buf.data(), sizeof(float), n, f);
    });
    std::fclose(f);
}

std::pair<ModelConfig, ModelWeights> load_checkpoint(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (f == nullptr) throw InvalidInput("cannot open checkpoint: " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        std::fclose(f);
        throw FormatError("bad checkpoint magic");
    }
    try {
        const uint32_t version = read_u32(f);
        if (version != kVersion) throw FormatError("unsupported checkpoint version");
        ModelConfig cfg;
        cfg.hidden_dim = static_cast<int>(read_u32(f));
        cfg.layers = static_cast<int>(read_u32(f));
        cfg.heads = static_cast<int>(read_u32(f));
        cfg.mlp_ratio = static_cast<int>(read_u32(f));
        cfg.patch_size = static_cast<int>(read_u32(f));
        cfg.free_tokens = static_cast<int>(read_u32(f));
        cfg.seed = read_u32(f);
        cfg.validate();
        ModelWeights w = init_weights(cfg);
        for_each_tensor(w, [&](const char* name, auto& t) {
            const uint64_t n = read_u64(f);
            if (n != static_cast<uint64_t>(t.size()))
                throw FormatError(std::string("tensor size mismatch for ") + name);
            std::vector<float> buf(n);
            if (std::fread(buf.data(), sizeof(float), n, f) != n)
                throw FormatError("checkpoint truncated");
            double* dst = t.data();
            for (uint64_t i = 0; i < n; ++i) dst[i] = static_cast<double>(buf[i]);
        });
        std::fclose(f);
        return {cfg, w};
    } catch (...) {
        std::fclose(f);
        throw;
    }
}

FeatureMap build_feature_map(const Image& image, const RayMap& rays, double time) {
    if (image.height != rays.height || image.width != rays.width)
        throw InvalidInput("image and ray map dimensions disagree");
    FeatureMap fm;
    fm.height = image.height;
    fm.width = image.width;
    fm.data.resize(static_cast<size_t>(fm.height) * fm.width * 10);
    for (int v = 0; v < fm.height; ++v) {
        for (int u = 0; u < fm.width; ++u) {
            for (int c = 0; c < 3; ++c) fm.at(v, u, c) = 2.0 * image.at(v, u, c) - 1.0;
            fm.at(v, u, 3) = time;
            const Vec6 pl = plucker_encode(rays.origin(v, u), rays.direction(v, u));
            const Vec3 d = pl.head<3>();
            const Vec3 m = pl.tail<3>();
            // The moment of a unit-direction Plucker line is o - <o,d>d: the
            // point on the ray closest to the origin.
            for (int c = 0; c < 3; ++c) fm.at(v, u, 4 + c) = d(c);
            for (int c = 0; c < 3; ++c) fm.at(v, u, 7 + c) = m(c);
        }
    }
    return fm;
}

std::vector<Eigen::VectorXd> patchify(const FeatureMap& fm, int patch_size) {
    if (patch_size <= 0 || fm.height % patch_size != 0 || fm.width % patch_size != 0)
        throw InvalidInput("feature map dimensions must be divisible by patch size");
    const int pv_count = fm.height / patch_size;
    const int pu_count = fm.width / patch_size;
    std::vector<Eigen::VectorXd> patches;
    patches.reserve(static_cast<size_t>(pv_count) * pu_count);
    for (int pv = 0; pv < pv_count; ++pv) {
        for (int pu = 0; pu < pu_count; ++pu) {
            Eigen::VectorXd p(10 * patch_size * patch_size);
            int idx = 0;
            for (int dv = 0; dv < patch_size; ++dv)
                for (int du = 0; du < patch_size; ++du)
                    for (int c = 0; c < 10; ++c)
                        p(idx++) = fm.at(pv * patch_size + dv, pu * patch_size + du, c);
            patches.push_back(std::move(p));
        }
    }
    return patches;
}

struct ForwardCache {
    ModelConfig cfg;
    ModelWeights weights;
    std::vector<Eigen::VectorXd> patches;  // all views, concatenated
    Eigen::MatrixXd tokens0;               // after embed + free concat, pre-LN
    LnCache embed_ln;
    std::vector<BlockCache> blocks;
    Eigen::MatrixXd x_final_in;
    LnCache final_ln;
    Eigen::MatrixXd x_final;               // after final LN
    std::vector<RawVec20> raw;             // scene order
    int patch_tokens = 0;
    int views = 0;
    int height = 0;
    int width = 0;
};

ForwardCache* new_forward_cache() { return new ForwardCache(); }
void free_forward_cache(ForwardCache* cache) { delete cache; }

const std::vector<RawVec20>& cached_raw_vectors(const ForwardCache& cache) { return cache.raw; }

Scene4D forward(const std::vector<std::pair<Image, CameraView>>& inputs, const ModelConfig& cfg,
                const ModelWeights& weights, const HeadConfig& head_cfg, ForwardCache* cache) {
    cfg.validate();
    if (inputs.empty()) throw InvalidInput("forward requires at least one input view");
    const int h = inputs.front().first.height;
    const int w = inputs.front().first.width;
    const int p = cfg.patch_size;
    if (h % p != 0 || w % p != 0)
        throw InvalidInput("input resolution must be divisible by patch size");

    std::vector<Eigen::VectorXd> patches;
    std::vector<RayMap> ray_maps;
    for (const auto& [img, view] : inputs) {
        if (img.height != h || img.width != w)
            throw InvalidInput("all input views must share one resolution");
        ray_maps.push_back(compute_ray_map(view));
        const FeatureMap fm = build_feature_map(img, ray_maps.back(), view.time);
        auto vp = patchify(fm, p);
        patches.insert(patches.end(), vp.begin(), vp.end());
    }
    const int patch_tokens = static_cast<int>(patches.size());
    const int t_total = patch_tokens + cfg.free_tokens;
    const int d = cfg.hidden_dim;

    Eigen::MatrixXd x(t_total, d);
    for (int t = 0; t < patch_tokens; ++t)
        x.row(t) = (weights.patch_embed_w * patches[t] + weights.patch_embed_b).transpose();
    for (int t = 0; t < cfg.free_tokens; ++t) x.row(patch_tokens + t) = weights.free_embed.row(t);

    LnCache embed_ln_cache;
    Eigen::MatrixXd tokens0 = x;
    x = layernorm(x, weights.embed_ln_gamma, weights.embed_ln_beta,
                  cache != nullptr ? &embed_ln_cache : nullptr);

    std::vector<BlockCache> block_caches(cache != nullptr ? cfg.layers : 0);
    for (int l = 0; l < cfg.layers; ++l) {
        const BlockWeights& b = weights.blocks[l];
        BlockCache* bc = cache != nullptr ? &block_caches[l] : nullptr;
        if (bc != nullptr) bc->x_in = x;
        const Eigen::MatrixXd ln1_out =
            layernorm(x, b.ln1_gamma, b.ln1_beta, bc != nullptr ? &bc->ln1 : nullptr);
        x += attention(ln1_out, b.attn, cfg.heads, bc != nullptr ? &bc->attn : nullptr);
        if (bc != nullptr) bc->x_mid = x;
        const Eigen::MatrixXd ln2_out =
            layernorm(x, b.ln2_gamma, b.ln2_beta, bc != nullptr ? &bc->ln2 : nullptr);
        Eigen::MatrixXd pre = (ln2_out * b.mlp_w1.transpose()).rowwise() + b.mlp_b1.transpose();
        Eigen::MatrixXd act = pre.unaryExpr([](double v) { return gelu(v); });
        x += (act * b.mlp_w2.transpose()).rowwise() + b.mlp_b2.transpose();
        if (bc != nullptr) {
            bc->ln2_out = ln2_out;
            bc->mlp_pre = std::move(pre);
            bc->mlp_act = std::move(act);
        }
    }

    LnCache final_ln_cache;
    Eigen::MatrixXd x_final_in = x;
    x = layernorm(x, weights.final_ln_gamma, weights.final_ln_beta,
                  cache != nullptr ? &final_ln_cache : nullptr);

    const int views = static_cast<int>(inputs.size());
    const int pu_count = w / p;
    std::vector<RawVec20> raw(static_cast<size_t>(views) * h * w + cfg.free_tokens);
    Scene4D scene;
    scene.gaussians.resize(raw.size());
    for (int vi = 0; vi < views; ++vi) {
        for (int t = 0; t < (h / p) * pu_count; ++t) {
            const int token = vi * (h / p) * pu_count + t;
            const Eigen::VectorXd out =
                weights.unpatch_w * x.row(token).transpose() + weights.unpatch_b;
            const int pv = t / pu_count;
            const int pu = t % pu_count;
            for (int dv = 0; dv < p; ++dv) {
                for (int du = 0; du < p; ++du) {
                    const int v_pix = pv * p + dv;
                    const int u_pix = pu * p + du;
                    const size_t gi =
                        static_cast<size_t>(vi) * h * w + static_cast<size_t>(v_pix) * w + u_pix;
                    raw[gi] = out.segment<20>((dv * p + du) * 20);
                    scene.gaussians[gi] =
                        decode_pixel_aligned(raw[gi], ray_maps[vi].origin(v_pix, u_pix),
                                             ray_maps[vi].direction(v_pix, u_pix), head_cfg);
                }
            }
        }
    }
    for (int t = 0; t < cfg.free_tokens; ++t) {
        const size_t gi = static_cast<size_t>(views) * h * w + t;
        raw[gi] = weights.free_decode_w * x.row(patch_tokens + t).transpose() +
                  weights.free_decode_b;
        scene.gaussians[gi] = decode_free(raw[gi], head_cfg);
    }

    if (cache != nullptr) {
        cache->cfg = cfg;
        cache->weights = weights;
        cache->patches = std::move(patches);
        cache->tokens0 = std::move(tokens0);
        cache->embed_ln = std::move(embed_ln_cache);
        cache->blocks = std::move(block_caches);
        cache->x_final_in = std::move(x_final_in);
        cache->final_ln = std::move(final_ln_cache);
        cache->x_final = x;
        cache->raw = raw;
        cache->patch_tokens = patch_tokens;
        cache->views = views;
        cache->height = h;
        cache->width = w;
    }
    return scene;
}

ModelWeights backward(const ForwardCache& cache, const std::vector<RawVec20>& d_raw) {
    const ModelConfig& cfg = cache.cfg;
    const ModelWeights& w = cache.weights;
    if (d_raw.size() != cache.raw.size())
        throw InvalidInput("gradient count does not match forward output count");
    const int p = cfg.patch_size;
    const int h = cache.height;
    const int wd = cache.width;
    const int pu_count = wd / p;
    const int t_total = cache.patch_tokens + cfg.free_tokens;
    const int d = cfg.hidden_dim;

    ModelWeights grads = zero_like(w);
    Eigen::MatrixXd d_x = Eigen::MatrixXd::Zero(t_total, d);

    // Output projections: unpatchify for pixel tokens, linear decode for free.
    for (int vi = 0; vi < cache.views; ++vi) {
        for (int t = 0; t < (h / p) * pu_count; ++t) {
            const int token = vi * (h / p) * pu_count + t;
            Eigen::VectorXd d_out = Eigen::VectorXd::Zero(20 * p * p);
            const int pv = t / pu_count;
            const int pu = t % pu_count;
            for (int dv = 0; dv < p; ++dv)
                for (int du = 0; du < p; ++du) {
                    const size_t gi = static_cast<size_t>(vi) * h * wd +
                                      static_cast<size_t>(pv * p + dv) * wd + (pu * p + du);
                    d_out.segment<20>((dv * p + du) * 20) = d_raw[gi];
                }
            grads.unpatch_w += d_out * cache.x_final.row(token);
            grads.unpatch_b += d_out;
            d_x.row(token) += (w.unpatch_w.transpose() * d_out).transpose();
        }
    }
    for (int t = 0; t < cfg.free_tokens; ++t) {
        const size_t gi = static_cast<size_t>(cache.views) * h * wd + t;
        const Eigen::VectorXd g = d_raw[gi];
        grads.free_decode_w += g * cache.x_final.row(cache.patch_tokens + t);
        grads.free_decode_b += g;
        d_x.row(cache.patch_tokens + t) += (w.free_decode_w.transpose() * g).transpose();
    }

    d_x = layernorm_backward(d_x, cache.final_ln, w.final_ln_gamma, grads.final_ln_gamma,
                             grads.final_ln_beta);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const BlockWeights& b = w.blocks[l];
        BlockWeights& gb = grads.blocks[l];
        const BlockCache& bc = cache.blocks[l];

        // MLP sub-block (residual: d_x passes through unchanged, plus branch).
        const Eigen::MatrixXd d_mlp_out = d_x;
        gb.mlp_w2 += d_mlp_out.transpose() * bc.mlp_act;
        gb.mlp_b2 += d_mlp_out.colwise().sum().transpose();
        Eigen::MatrixXd d_act = d_mlp_out * b.mlp_w2;
        Eigen::MatrixXd d_pre =
            d_act.cwiseProduct(bc.mlp_pre.unaryExpr([](double v) { return gelu_grad(v); }));
        gb.mlp_w1 += d_pre.transpose() * bc.ln2_out;
        gb.mlp_b1 += d_pre.colwise().sum().transpose();
        Eigen::MatrixXd d_ln2_out = d_pre * b.mlp_w1;
        d_x += layernorm_backward(d_ln2_out, bc.ln2, b.ln2_gamma, gb.ln2_gamma, gb.ln2_beta);

        // Attention sub-block.
        const Eigen::MatrixXd d_attn_out = d_x;
        const Eigen::MatrixXd ln1_out =
            (bc.ln1.xhat.array().rowwise() * b.ln1_gamma.transpose().array()).matrix().rowwise() +
            b.ln1_beta.transpose();
        Eigen::MatrixXd d_ln1_out =
            attention_backward(d_attn_out, ln1_out, b.attn, cfg.heads, bc.attn, gb.attn);
        d_x += layernorm_backward(d_ln1_out, bc.ln1, b.ln1_gamma, gb.ln1_gamma, gb.ln1_beta);
    }

    d_x = layernorm_backward(d_x, cache.embed_ln, w.embed_ln_gamma, grads.embed_ln_gamma,
                             grads.embed_ln_beta);

    for (int t = 0; t < cache.patch_tokens; ++t) {
        grads.patch_embed_w += d_x.row(t).transpose() * cache.patches[t].transpose();
        grads.patch_embed_b += d_x.row(t).transpose();
    }
    for (int t = 0; t < cfg.free_tokens; ++t)
        grads.free_embed.row(t) += d_x.row(cache.patch_tokens + t);

    return grads;
}

}  // namespace fourdgs
