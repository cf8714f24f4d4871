#include "fourdgs/optimizer.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "fourdgs/common.hpp"

namespace fourdgs {

namespace {

constexpr int kWin = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * dynamic_range)^2
constexpr double kC2 = 0.03 * 0.03;

const double* ssim_window() {
    static double w[kWin * kWin];
    static bool ready = false;
    if (!ready) {
        double sum = 0.0;
        for (int i = 0; i < kWin; ++i) {
            for (int j = 0; j < kWin; ++j) {
                const double di = i - (kWin - 1) / 2.0;
                const double dj = j - (kWin - 1) / 2.0;
                w[i * kWin + j] = std::exp(-(di * di + dj * dj) / (2.0 * kSsimSigma * kSsimSigma));
                sum += w[i * kWin + j];
            }
        }
        for (double& x : w) x /= sum;
        ready = true;
    }
    return w;
}

void check_dims(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw InvalidInput("image dimensions disagree");
}

double ssim_impl(const Image& a, const Image& b, Image* grad) {
    check_dims(a, b);
    if (a.height < kWin || a.width < kWin)
        throw InvalidInput("ssim requires images of at least 11x11");
    const double* w = ssim_window();
    const int vv = a.height - kWin + 1;
    const int uu = a.width - kWin + 1;
    const long n_terms = static_cast<long>(vv) * uu * 3;
    if (grad != nullptr) {
        grad->height = a.height;
        grad->width = a.width;
        grad->data.assign(static_cast<size_t>(a.height) * a.width * 3, 0.0);
    }
    double total = 0.0;
    for (int v0 = 0; v0 < vv; ++v0) {
        for (int u0 = 0; u0 < uu; ++u0) {
            for (int c = 0; c < 3; ++c) {
                double mu_a = 0.0, mu_b = 0.0, ea2 = 0.0, eb2 = 0.0, eab = 0.0;
                for (int i = 0; i < kWin; ++i) {
                    for (int j = 0; j < kWin; ++j) {
                        const double wij = w[i * kWin + j];
                        const double av = a.at(v0 + i, u0 + j, c);
                        const double bv = b.at(v0 + i, u0 + j, c);
                        mu_a += wij * av;
                        mu_b += wij * bv;
                        ea2 += wij * av * av;
                        eb2 += wij * bv * bv;
                        eab += wij * av * bv;
                    }
                }
                const double var_a = ea2 - mu_a * mu_a;
                const double var_b = eb2 - mu_b * mu_b;
                const double cov = eab - mu_a * mu_b;
                const double a1 = 2.0 * mu_a * mu_b + kC1;
                const double a2 = 2.0 * cov + kC2;
                const double b1 = mu_a * mu_a + mu_b * mu_b + kC1;
                const double b2 = var_a + var_b + kC2;
                const double s = (a1 * a2) / (b1 * b2);
                total += s;
                if (grad != nullptr) {
                    // d s / d a_p = (2 w_p / (b1 b2)) *
                    //   [mu_b a2 + a1 (b_p - mu_b) - s (mu_a b2 + b1 (a_p - mu_a))]
                    const double coef = 2.0 / (b1 * b2 * n_terms);
                    for (int i = 0; i < kWin; ++i) {
                        for (int j = 0; j < kWin; ++j) {
                            const double wij = w[i * kWin + j];
                            const double av = a.at(v0 + i, u0 + j, c);
                            const double bv = b.at(v0 + i, u0 + j, c);
                            grad->at(v0 + i, u0 + j, c) +=
                                coef * wij *
                                (mu_b * a2 + a1 * (bv - mu_b) -
                                 s * (mu_a * b2 + b1 * (av - mu_a)));
                        }
                    }
                }
            }
        }
    }
    return total / n_terms;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
    check_dims(a, b);
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse < 1e-10) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b) { return ssim_impl(a, b, nullptr); }

double ssim_with_gradient(const Image& a, const Image& b, Image& d_ssim_da) {
    return ssim_impl(a, b, &d_ssim_da);
}

namespace {

LossReport loss_impl(const std::vector<Image>& rendered, const std::vector<Image>& targets,
                     double lambda, std::vector<Image>* grads) {
    if (rendered.size() != targets.size())
        throw InvalidInput("rendered/target view counts disagree");
    if (rendered.empty()) throw InvalidInput("training loss needs at least one view");
    const size_t n_views = rendered.size();
    const bool want_grads = grads != nullptr;
    if (want_grads) grads->resize(n_views);

    LossReport report;
    report.lambda = lambda;
    for (size_t vi = 0; vi < n_views; ++vi) {
        const Image& a = rendered[vi];
        const Image& b = targets[vi];
        check_dims(a, b);
        double mse = 0.0;
        for (size_t i = 0; i < a.data.size(); ++i) {
            const double d = a.data[i] - b.data[i];
            mse += d * d;
        }
        mse /= static_cast<double>(a.data.size());

        Image d_ssim;
        const double s = ssim_impl(a, b, want_grads ? &d_ssim : nullptr);

        report.per_view_mse.push_back(mse);
        report.per_view_structural.push_back(1.0 - s);

        if (want_grads) {
            Image& g = (*grads)[vi];
            g.height = a.height;
            g.width = a.width;
            g.data.assign(a.data.size(), 0.0);
            const double mse_scale = 2.0 / (static_cast<double>(a.data.size()) * n_views);
            const double ssim_scale = -lambda / static_cast<double>(n_views);
            for (size_t i = 0; i < a.data.size(); ++i)
                g.data[i] = mse_scale * (a.data[i] - b.data[i]) + ssim_scale * d_ssim.data[i];
        }
    }
    for (size_t vi = 0; vi < n_views; ++vi) {
        report.mse_term += report.per_view_mse[vi] / n_views;
        report.structural_term += report.per_view_structural[vi] / n_views;
    }
    report.total = report.mse_term + lambda * report.structural_term;
    return report;
}

}  // namespace

LossReport training_loss(const std::vector<Image>& rendered, const std::vector<Image>& targets,
                         double lambda) {
    return loss_impl(rendered, targets, lambda, nullptr);
}

LossReport training_loss_with_gradient(const std::vector<Image>& rendered,
                                       const std::vector<Image>& targets, double lambda,
                                       std::vector<Image>& grads) {
    return loss_impl(rendered, targets, lambda, &grads);
}

void AdamState::init(Eigen::Index n) {
    step = 0;
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
}

void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads,
               const std::string& block_name) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw InvalidInput("adam shapes disagree for block " + block_name);
    if (!grads.allFinite())
        throw ValidationError("non-finite gradient in block " + block_name);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v.array() + (1.0 - state.beta2) * grads.array().square();
    params.array() -=
        state.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + state.eps);
}

void write_trace(const std::string& path, const std::vector<TraceRow>& rows) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw InvalidInput("cannot open trace file: " + path);
    std::fputs("iter,loss,mse,structural,psnr_train,psnr_holdout\n", f);
    for (const TraceRow& r : rows)
        std::fprintf(f, "%ld,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iter, r.loss, r.mse, r.structural,
                     r.psnr_train, r.psnr_holdout);
    std::fclose(f);
}

}  // namespace fourdgs
