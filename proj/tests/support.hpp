#pragma once

// Test fixtures and independent reference implementations. The references use plain
// loops over std::vector and share no code with the library's kernels.

#include <cmath>
#include <cstdlib>
#include <unistd.h>
#include <filesystem>
#include <string>
#include <vector>

#include "kblam/adapters.hpp"
#include "kblam/model.hpp"
#include "kblam/random.hpp"

namespace test {

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("kblam-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline kblam::ModelConfig tiny_config() {
    kblam::ModelConfig c;
    c.layers = 2;
    c.dim = 16;
    c.heads = 2;
    c.ffn_dim = 32;
    c.max_prompt_len = 128;
    c.retrieval_layer = 1;
    return c;
}

/// Frozen weights with gains perturbed away from one so every parameter matters.
inline kblam::TransformerWeights random_weights(const kblam::ModelConfig& cfg, std::uint64_t seed) {
    auto w = kblam::TransformerWeights::init(cfg, seed);
    kblam::Rng rng(seed ^ 0x5eedULL);
    for (auto& [name, t] : w.named_tensors())
        if (name.find("norm") != std::string::npos)
            for (auto& g : t.data()) g = 1.0 + 0.3 * rng.normal();
    // larger projections than the 0.02 init: attention far from uniform, logits far
    // from flat, so gradients are well above finite-difference roundoff
    for (auto& l : w.layers) {
        for (auto* t : {&l.wq, &l.wk})
            for (auto& v : t->data()) v *= 20.0;
        for (auto* t : {&l.wv, &l.wo})
            for (auto& v : t->data()) v *= 10.0;
    }
    for (auto& v : w.output_head.data()) v *= 10.0;
    w.set_trainable(false);
    return w;
}

inline std::vector<kblam::BaseEmbeddingPair> random_bases(std::size_t m, std::size_t p, kblam::Rng& rng) {
    std::vector<kblam::BaseEmbeddingPair> out(m);
    for (auto& b : out) {
        b.key_base.resize(p);
        b.value_base.resize(p);
        for (auto& x : b.key_base) x = rng.normal();
        for (auto& x : b.value_base) x = rng.normal();
    }
    return out;
}

inline std::vector<int> random_tokens(std::size_t n, kblam::Rng& rng) {
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng.index(256));
    return t;
}

// ---- reference transformer ------------------------------------------------------------

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const kblam::Tensor& t) {
    const std::size_t r = t.dim(0), c = t.dim(1);
    Mat m(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data()[i * c + j];
    return m;
}

inline Mat matmul_ref(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

inline std::vector<double> rmsnorm_ref(const std::vector<double>& x, std::span<const double> g) {
    double ms = 0.0;
    for (double v : x) ms += v * v / static_cast<double>(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[i] * x[i] / std::sqrt(ms + 1e-6);
    return out;
}

/// Rotary encoding as a sequence of explicit 2-D rotations of (x_j, x_{j+d/2}) per head.
inline std::vector<double> rope_ref(std::vector<double> x, std::size_t heads, std::size_t pos, double base) {
    const std::size_t d = x.size() / heads;
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < d / 2; ++j) {
            const double theta = static_cast<double>(pos) / std::pow(base, static_cast<double>(2 * j) / d);
            const double a = x[h * d + j], b = x[h * d + j + d / 2];
            x[h * d + j] = a * std::cos(theta) - b * std::sin(theta);
            x[h * d + j + d / 2] = a * std::sin(theta) + b * std::cos(theta);
        }
    return x;
}

struct RefKnowledge {
    std::vector<Mat> keys;     // per layer [M x D]
    std::vector<Mat> values;   // per layer [M x D]
};

/// Scores of one layer kept for inspection: [head][row] -> (kb probs, prompt probs).
struct RefLayerScores {
    std::vector<std::vector<std::vector<double>>> kb;
    std::vector<std::vector<std::vector<double>>> prompt;
};

/// Logits [N x V] of the frozen model, optionally with knowledge tokens entering the
/// layers where cfg.is_injection_layer holds. The attention here is written as the
/// textbook two-block form: concatenate knowledge scores before prompt scores, mask
/// the future, softmax, then mix [values_kb ; values_prompt].
inline Mat reference_forward(const kblam::TransformerWeights& w, const kblam::AdapterSet* adapters,
                             const RefKnowledge* kb, const std::vector<int>& ids, double kb_shift = 0.0,
                             std::vector<RefLayerScores>* scores = nullptr) {
    const auto& cfg = w.config;
    const std::size_t N = ids.size(), D = cfg.dim, H = cfg.heads, d = D / H;
    const Mat emb = to_mat(w.token_embedding);
    Mat x(N);
    for (std::size_t n = 0; n < N; ++n) x[n] = emb[static_cast<std::size_t>(ids[n])];

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& lw = w.layers[l];
        Mat h(N);
        for (std::size_t n = 0; n < N; ++n) h[n] = rmsnorm_ref(x[n], lw.attn_norm.data());
        Mat q = matmul_ref(h, to_mat(lw.wq)), k = matmul_ref(h, to_mat(lw.wk)), v = matmul_ref(h, to_mat(lw.wv));
        for (std::size_t n = 0; n < N; ++n) {
            q[n] = rope_ref(q[n], H, n, cfg.rope_base);
            k[n] = rope_ref(k[n], H, n, cfg.rope_base);
        }
        const bool inject = kb && !kb->keys.empty() && cfg.is_injection_layer(l);
        const std::size_t M = inject ? kb->keys[l].size() : 0;
        Mat qt;
        if (inject) qt = matmul_ref(h, to_mat(adapters->query_heads[l]));

        RefLayerScores ls;
        Mat att(N, std::vector<double>(D, 0.0));
        for (std::size_t hh = 0; hh < H; ++hh) {
            ls.kb.emplace_back();
            ls.prompt.emplace_back();
            for (std::size_t n = 0; n < N; ++n) {
                std::vector<double> logits(M + N, -INFINITY);
                for (std::size_t m = 0; m < M; ++m) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < d; ++c) s += qt[n][hh * d + c] * kb->keys[l][m][hh * d + c];
                    logits[m] = s / std::sqrt(static_cast<double>(d)) + kb_shift;
                }
                for (std::size_t i = 0; i <= n; ++i) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < d; ++c) s += q[n][hh * d + c] * k[i][hh * d + c];
                    logits[M + i] = s / std::sqrt(static_cast<double>(d));
                }
                double mx = -INFINITY;
                for (double s : logits) mx = std::max(mx, s);
                double z = 0.0;
                for (double& s : logits) z += (s = std::exp(s - mx));
                for (double& s : logits) s /= z;
                for (std::size_t j = 0; j < M + N; ++j) {
                    const auto& val = j < M ? kb->values[l][j] : v[j - M];
                    for (std::size_t c = 0; c < d; ++c) att[n][hh * d + c] += logits[j] * val[hh * d + c];
                }
                ls.kb.back().emplace_back(logits.begin(), logits.begin() + static_cast<long>(M));
                ls.prompt.back().emplace_back(logits.begin() + static_cast<long>(M), logits.end());
            }
        }
        if (scores) scores->push_back(std::move(ls));
        const Mat o = matmul_ref(att, to_mat(lw.wo));
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < D; ++c) x[n][c] += o[n][c];
        Mat h2(N);
        for (std::size_t n = 0; n < N; ++n) h2[n] = rmsnorm_ref(x[n], lw.ffn_norm.data());
        Mat f = matmul_ref(h2, to_mat(lw.w1));
        for (auto& row : f)
            for (auto& u : row) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
        const Mat f2 = matmul_ref(f, to_mat(lw.w2));
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < D; ++c) x[n][c] += f2[n][c];
    }
    Mat hf(N);
    for (std::size_t n = 0; n < N; ++n) hf[n] = rmsnorm_ref(x[n], w.final_norm.data());
    return matmul_ref(hf, to_mat(w.output_head));
}

/// k~ = W_K^T e per layer, written as explicit sums over the encoder dimension.
inline RefKnowledge reference_knowledge(const kblam::AdapterSet& a, const std::vector<kblam::BaseEmbeddingPair>& b) {
    RefKnowledge out;
    for (std::size_t l = 0; l < a.layers; ++l) {
        Mat keys, values;
        const Mat wk = to_mat(a.key_adapters[l]), wv = to_mat(a.value_adapters[l]);
        for (const auto& pair : b) {
            std::vector<double> k(a.dim, 0.0), v(a.dim, 0.0);
            for (std::size_t p = 0; p < a.embed_dim; ++p)
                for (std::size_t c = 0; c < a.dim; ++c) {
                    k[c] += pair.key_base[p] * wk[p][c];
                    v[c] += pair.value_base[p] * wv[p][c];
                }
            keys.push_back(k);
            values.push_back(v);
        }
        out.keys.push_back(keys);
        out.values.push_back(values);
    }
    return out;
}

inline double max_abs_diff(const Mat& a, const kblam::Tensor& b) {
    double m = 0.0;
    const std::size_t c = b.dim(1);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) m = std::max(m, std::abs(a[i][j] - b.data()[i * c + j]));
    return m;
}

inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-300}));
    return m;
}

} // namespace test
