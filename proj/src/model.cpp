#include "kblam/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "kblam/adapters.hpp"
#include "kblam/checkpoint.hpp"
#include "kblam/error.hpp"

namespace kblam {

// ---- tokenizer --------------------------------------------------------------------

std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(c);
    return out;
}

std::string decode_bytes(std::span<const int> ids) {
    std::string out;
    for (int id : ids)
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
}

std::vector<int> prompt_tokens(std::string_view question) {
    std::vector<int> out{tokens::kBos};
    for (unsigned char c : question) out.push_back(c);
    out.push_back(tokens::kSep);
    return out;
}

// ---- config -----------------------------------------------------------------------

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("model.layers: must be >= 1");
    if (heads == 0 || dim % heads != 0) throw ConfigError("model.heads: must divide model.dim");
    if (head_dim() % 2 != 0) throw ConfigError("model.heads: head dimension must be even for rotary encoding");
    if (ffn_dim == 0) throw ConfigError("model.ffn_dim: must be >= 1");
    if (vocab_size == 0) throw ConfigError("model.vocab_size: must be >= 1");
    if (max_prompt_len == 0) throw ConfigError("model.max_prompt_len: must be >= 1");
    if (inject_every < 1 || inject_every > layers) throw ConfigError("model.inject_every: must be in [1, layers]");
    if (!(scale_C > 0)) throw ConfigError("model.scale_C: must be > 0");
    if (retrieval_layer >= layers) throw ConfigError("model.retrieval_layer: must be < layers");
    if (!(rope_base > 1)) throw ConfigError("model.rope_base: must be > 1");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"layers", layers},
                          {"dim", dim},
                          {"heads", heads},
                          {"ffn_dim", ffn_dim},
                          {"vocab_size", vocab_size},
                          {"max_prompt_len", max_prompt_len},
                          {"inject_every", inject_every},
                          {"scale_C", scale_C},
                          {"scale_enabled", scale_enabled},
                          {"retrieval_layer", retrieval_layer},
                          {"rope_base", rope_base}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    static const std::set<std::string> known{"layers",        "dim",          "heads",       "ffn_dim",
                                             "vocab_size",    "max_prompt_len", "inject_every", "scale_C",
                                             "scale_enabled", "retrieval_layer", "rope_base"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("model." + it.key() + ": unknown key");
    auto read = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("model.") + key + ": wrong type");
        }
    };
    read("layers", c.layers);
    read("dim", c.dim);
    read("heads", c.heads);
    read("ffn_dim", c.ffn_dim);
    read("vocab_size", c.vocab_size);
    read("max_prompt_len", c.max_prompt_len);
    read("inject_every", c.inject_every);
    read("scale_C", c.scale_C);
    read("scale_enabled", c.scale_enabled);
    read("retrieval_layer", c.retrieval_layer);
    read("rope_base", c.rope_base);
    c.validate();
    return c;
}

// ---- weights ----------------------------------------------------------------------

TransformerWeights TransformerWeights::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "base-weights"));
    const std::size_t D = cfg.dim, F = cfg.ffn_dim, V = cfg.vocab_size;
    const double std_in = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    auto ones = [](std::size_t n) { return Tensor::from({n}, std::vector<double>(n, 1.0)); };

    TransformerWeights w;
    w.config = cfg;
    w.token_embedding = Tensor::randn({V, D}, rng, std_in);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = ones(D);
        lw.wq = Tensor::randn({D, D}, rng, std_in);
        lw.wk = Tensor::randn({D, D}, rng, std_in);
        lw.wv = Tensor::randn({D, D}, rng, std_in);
        lw.wo = Tensor::randn({D, D}, rng, std_out);
        lw.ffn_norm = ones(D);
        lw.w1 = Tensor::randn({D, F}, rng, std_in);
        lw.w2 = Tensor::randn({F, D}, rng, std_out);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = ones(D);
    w.output_head = Tensor::randn({D, V}, rng, std_in);
    return w;
}

std::vector<std::pair<std::string, Tensor>> TransformerWeights::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out{{"token_embedding", token_embedding}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto p = "layer." + std::to_string(l) + ".";
        const auto& lw = layers[l];
        out.emplace_back(p + "attn_norm", lw.attn_norm);
        out.emplace_back(p + "wq", lw.wq);
        out.emplace_back(p + "wk", lw.wk);
        out.emplace_back(p + "wv", lw.wv);
        out.emplace_back(p + "wo", lw.wo);
        out.emplace_back(p + "ffn_norm", lw.ffn_norm);
        out.emplace_back(p + "w1", lw.w1);
        out.emplace_back(p + "w2", lw.w2);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("output_head", output_head);
    return out;
}

std::vector<Tensor> TransformerWeights::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
}

void TransformerWeights::set_trainable(bool on) {
    for (auto& t : parameters()) t.set_requires_grad(on);
}

bool TransformerWeights::frozen() const {
    for (const auto& t : parameters())
        if (t.requires_grad() || t.has_grad()) return false;
    return true;
}

std::uint64_t TransformerWeights::hash() const { return tensors_hash(parameters()); }

void TransformerWeights::save(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    ckpt.header_json = nlohmann::json{{"kind", "base"}, {"model", config.to_json()}}.dump();
    for (const auto& [name, t] : named_tensors())
        ckpt.tensors.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    write_checkpoint(path, ckpt);
}

TransformerWeights TransformerWeights::load(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(ckpt.header_json);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": bad checkpoint header: " + e.what());
    }
    if (header.value("kind", "") != "base") throw ParseError(path.string() + " is not a base-model checkpoint");
    TransformerWeights w = init(ModelConfig::from_json(header.at("model")), 0);
    for (auto& [name, t] : w.named_tensors()) {
        const auto& src = ckpt.at(name);
        if (src.shape != t.shape())
            throw ShapeError("checkpoint tensor " + name + " has shape " + shape_string(src.shape) + ", expected " +
                             shape_string(t.shape()));
        std::copy(src.data.begin(), src.data.end(), t.data().begin());
    }
    return w;
}

// ---- attention --------------------------------------------------------------------

double LayerTrace::kb_head_mean(std::size_t row, std::size_t col) const {
    double s = 0.0;
    for (std::size_t h = 0; h < heads; ++h) s += kb_at(h, row, col);
    return s / static_cast<double>(heads);
}

double kb_score_shift(const ModelConfig& cfg, std::size_t m, bool enabled) {
    if (!enabled || m == 0) return 0.0;
    return std::log(cfg.scale_C) - std::log(static_cast<double>(m));
}

namespace {

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

} // namespace

Tensor rectangular_attention(const AttentionInputs& in, std::size_t heads, double kb_shift, AttentionStats* stats,
                             LayerTrace* trace) {
    const std::size_t N = in.q.rows(), D = in.q.cols();
    if (in.k.shape() != in.q.shape() || in.v.shape() != in.q.shape())
        throw ShapeError("rectangular_attention: q/k/v shapes differ: " + shape_string(in.q.shape()) + ", " +
                         shape_string(in.k.shape()) + ", " + shape_string(in.v.shape()));
    if (heads == 0 || D % heads != 0) throw ShapeError("rectangular_attention: heads must divide width");
    const std::size_t M = in.kb_keys.defined() ? in.kb_keys.rows() : 0;
    const bool use_kb = M > 0;
    if (use_kb) {
        if (!in.kb_query.defined())
            throw ConfigError("rectangular_attention: knowledge tokens given without an adapter query head");
        if (in.kb_query.shape() != in.q.shape())
            throw ShapeError("rectangular_attention: knowledge query shape " + shape_string(in.kb_query.shape()));
        if (in.kb_keys.cols() != D || !in.kb_values.defined() || in.kb_values.shape() != in.kb_keys.shape())
            throw ShapeError("rectangular_attention: knowledge keys/values must be [M x " + std::to_string(D) + "]");
    }

    const std::size_t d = D / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    auto probs = std::make_shared<std::vector<double>>(heads * N * N, 0.0);
    auto kb_probs = std::make_shared<std::vector<double>>(heads * N * M, 0.0);

    const double* q = in.q.data().data();
    const double* k = in.k.data().data();
    const double* v = in.v.data().data();
    const double* kq = use_kb ? in.kb_query.data().data() : nullptr;
    const double* kk = use_kb ? in.kb_keys.data().data() : nullptr;
    const double* kv = use_kb ? in.kb_values.data().data() : nullptr;

    std::vector<double> out(N * D, 0.0);
    std::uint64_t kb_count = 0, prompt_count = 0;
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * d;
        double* pk_h = kb_probs->data() + h * N * M;
        // knowledge rows outermost so each key/value row is read once per head
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n)
                pk_h[n * M + m] = dot(kq + n * D + off, kk + m * D + off, d) * inv_sqrt_d + kb_shift;
        kb_count += N * M;
        for (std::size_t n = 0; n < N; ++n) {
            double* pk = pk_h + n * M;
            double* pp = probs->data() + (h * N + n) * N;
            double mx = -INFINITY;
            for (std::size_t m = 0; m < M; ++m) mx = std::max(mx, pk[m]);
            for (std::size_t i = 0; i <= n; ++i) {
                pp[i] = dot(q + n * D + off, k + i * D + off, d) * inv_sqrt_d;
                mx = std::max(mx, pp[i]);
            }
            prompt_count += n + 1;
            double z = 0.0;
            for (std::size_t m = 0; m < M; ++m) z += (pk[m] = std::exp(pk[m] - mx));
            for (std::size_t i = 0; i <= n; ++i) z += (pp[i] = std::exp(pp[i] - mx));
            const double inv_z = 1.0 / z;
            for (std::size_t m = 0; m < M; ++m) pk[m] *= inv_z;
            for (std::size_t i = 0; i <= n; ++i) pp[i] *= inv_z;
        }
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n) axpy(pk_h[n * M + m], kv + m * D + off, out.data() + n * D + off, d);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i <= n; ++i)
                axpy(probs->data()[(h * N + n) * N + i], v + i * D + off, out.data() + n * D + off, d);
    }
    if (stats) {
        stats->kb_entries += kb_count;
        stats->prompt_entries += prompt_count;
    }
    if (trace) {
        trace->injected = use_kb;
        trace->heads = heads;
        trace->n = N;
        trace->m = M;
        trace->kb = *kb_probs;
        trace->prompt = *probs;
    }

    std::vector<Tensor> parents{in.q, in.k, in.v};
    if (use_kb) {
        parents.push_back(in.kb_query);
        parents.push_back(in.kb_keys);
        parents.push_back(in.kb_values);
    }
    AttentionInputs saved = in;
    return make_op(
        {N, D}, std::move(out), std::move(parents),
        [saved, probs, kb_probs, N, D, M, heads, d, inv_sqrt_d, use_kb](std::span<const double> g,
                                                                        std::span<double* const> pg) {
            const double* q = saved.q.data().data();
            const double* k = saved.k.data().data();
            const double* v = saved.v.data().data();
            const double* kq = use_kb ? saved.kb_query.data().data() : nullptr;
            const double* kk = use_kb ? saved.kb_keys.data().data() : nullptr;
            const double* kv = use_kb ? saved.kb_values.data().data() : nullptr;
            double* dq = pg[0];
            double* dk = pg[1];
            double* dv = pg[2];
            double* dkq = use_kb ? pg[3] : nullptr;
            double* dkk = use_kb ? pg[4] : nullptr;
            double* dkv = use_kb ? pg[5] : nullptr;
            std::vector<double> dp(N), dpk(M);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * d;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* gr = g.data() + n * D + off;
                    const double* pk = kb_probs->data() + (h * N + n) * M;
                    const double* pp = probs->data() + (h * N + n) * N;
                    double r = 0.0;
                    for (std::size_t m = 0; m < M; ++m) {
                        dpk[m] = dot(gr, kv + m * D + off, d);
                        r += pk[m] * dpk[m];
                    }
                    for (std::size_t i = 0; i <= n; ++i) {
                        dp[i] = dot(gr, v + i * D + off, d);
                        r += pp[i] * dp[i];
                    }
                    for (std::size_t m = 0; m < M; ++m) {
                        if (dkv) axpy(pk[m], gr, dkv + m * D + off, d);
                        const double ds = pk[m] * (dpk[m] - r) * inv_sqrt_d;
                        if (dkq) axpy(ds, kk + m * D + off, dkq + n * D + off, d);
                        if (dkk) axpy(ds, kq + n * D + off, dkk + m * D + off, d);
                    }
                    for (std::size_t i = 0; i <= n; ++i) {
                        if (dv) axpy(pp[i], gr, dv + i * D + off, d);
                        const double ds = pp[i] * (dp[i] - r) * inv_sqrt_d;
                        if (dq) axpy(ds, k + i * D + off, dq + n * D + off, d);
                        if (dk) axpy(ds, q + n * D + off, dk + i * D + off, d);
                    }
                }
            }
        });
}

// ---- forward ----------------------------------------------------------------------

namespace {

void check_knowledge(const ModelConfig& cfg, const AdapterSet* adapters, const KnowledgeBlock& kb) {
    if (kb.empty()) return;
    if (!adapters) throw ConfigError("forward: knowledge tokens supplied without adapters");
    if (adapters->query_heads.size() != cfg.layers)
        throw ShapeError("forward: adapter set has " + std::to_string(adapters->query_heads.size()) +
                         " query heads for " + std::to_string(cfg.layers) + " layers");
    if (kb.keys.size() != cfg.layers || kb.values.size() != cfg.layers)
        throw ShapeError("forward: knowledge block must have one key/value tensor per layer");
    for (std::size_t l = 0; l < cfg.layers; ++l)
        if (kb.keys[l].rows() != kb.size() || kb.keys[l].cols() != cfg.dim || kb.values[l].shape() != kb.keys[l].shape())
            throw ShapeError("forward: knowledge block layer " + std::to_string(l) + " has shape " +
                             shape_string(kb.keys[l].shape()));
}

} // namespace

ForwardResult forward(const TransformerWeights& w, const AdapterSet* adapters, const KnowledgeBlock& kb,
                      std::span<const int> ids, const ForwardOptions& opts) {
    const ModelConfig& cfg = w.config;
    if (ids.empty()) throw ConfigError("forward: empty prompt");
    if (ids.size() > cfg.max_prompt_len)
        throw ConfigError("forward: prompt length " + std::to_string(ids.size()) + " exceeds max_prompt_len " +
                          std::to_string(cfg.max_prompt_len));
    check_knowledge(cfg, adapters, kb);
    const std::size_t M = kb.size();
    const double shift = kb_score_shift(cfg, M, opts.scale_enabled.value_or(cfg.scale_enabled));

    ForwardResult res;
    Tensor x = embedding_lookup(w.token_embedding, ids);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        Tensor h = rmsnorm(x, lw.attn_norm);
        AttentionInputs in;
        in.q = rope(matmul(h, lw.wq), cfg.heads, 0, cfg.rope_base);
        in.k = rope(matmul(h, lw.wk), cfg.heads, 0, cfg.rope_base);
        in.v = matmul(h, lw.wv);
        if (M > 0 && cfg.is_injection_layer(l)) {
            in.kb_query = matmul(h, adapters->query_heads[l]);
            in.kb_keys = kb.keys[l];
            in.kb_values = kb.values[l];
        }
        LayerTrace* trace = nullptr;
        if (opts.capture_trace) {
            trace = &res.traces.emplace_back();
            trace->layer = l;
        }
        Tensor att = rectangular_attention(in, cfg.heads, shift, opts.stats, trace);
        x = add(x, matmul(att, lw.wo));
        Tensor h2 = rmsnorm(x, lw.ffn_norm);
        x = add(x, matmul(gelu(matmul(h2, lw.w1)), lw.w2));
    }
    res.logits = matmul(rmsnorm(x, w.final_norm), w.output_head);
    return res;
}

// ---- incremental decoding ----------------------------------------------------------

namespace {

void rmsnorm_row(const double* x, const Tensor& gain, double* out, std::size_t d) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += x[c] * x[c];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + 1e-6);
    auto g = gain.data();
    for (std::size_t c = 0; c < d; ++c) out[c] = g[c] * x[c] * inv;
}

// out[j] = sum_i x[i] * W[i, j]
void vecmat(const double* x, const Tensor& W, double* out) {
    const std::size_t in = W.dim(0), cols = W.dim(1);
    const double* w = W.data().data();
    std::fill(out, out + cols, 0.0);
    for (std::size_t i = 0; i < in; ++i) axpy(x[i], w + i * cols, out, cols);
}

} // namespace

DecodeSession::DecodeSession(const TransformerWeights& weights, const AdapterSet* adapters,
                             const KnowledgeBlock& knowledge, bool scale_enabled)
    : w_(weights), adapters_(adapters), kb_(knowledge),
      shift_(kb_score_shift(weights.config, knowledge.size(), scale_enabled)),
      k_cache_(weights.config.layers), v_cache_(weights.config.layers) {
    check_knowledge(weights.config, adapters, knowledge);
}

std::vector<double> DecodeSession::step(int token) {
    const ModelConfig& cfg = w_.config;
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size)
        throw ShapeError("decode: token id " + std::to_string(token) + " outside vocabulary");
    const std::size_t D = cfg.dim, H = cfg.heads, d = cfg.head_dim(), F = cfg.ffn_dim;
    const std::size_t M = kb_.size();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> x(w_.token_embedding.data().begin() + static_cast<std::ptrdiff_t>(token * D),
                          w_.token_embedding.data().begin() + static_cast<std::ptrdiff_t>((token + 1) * D));
    std::vector<double> h(D), q(D), k(D), v(D), kq(D), att(D), proj(D), ff(F), scores;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w_.layers[l];
        rmsnorm_row(x.data(), lw.attn_norm, h.data(), D);
        vecmat(h.data(), lw.wq, q.data());
        vecmat(h.data(), lw.wk, k.data());
        vecmat(h.data(), lw.wv, v.data());
        rope_row(q, H, pos_, cfg.rope_base);
        rope_row(k, H, pos_, cfg.rope_base);
        auto& kc = k_cache_[l];
        auto& vc = v_cache_[l];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());
        const std::size_t T = pos_ + 1;

        const bool use_kb = M > 0 && cfg.is_injection_layer(l);
        const double* kk = nullptr;
        const double* kv = nullptr;
        if (use_kb) {
            vecmat(h.data(), adapters_->query_heads[l], kq.data());
            kk = kb_.keys[l].data().data();
            kv = kb_.values[l].data().data();
        }
        std::fill(att.begin(), att.end(), 0.0);
        scores.assign((use_kb ? M : 0) + T, 0.0);
        for (std::size_t hh = 0; hh < H; ++hh) {
            const std::size_t off = hh * d;
            double mx = -INFINITY;
            std::size_t s = 0;
            if (use_kb)
                for (std::size_t m = 0; m < M; ++m, ++s) {
                    scores[s] = dot(kq.data() + off, kk + m * D + off, d) * inv_sqrt_d + shift_;
                    mx = std::max(mx, scores[s]);
                }
            for (std::size_t i = 0; i < T; ++i, ++s) {
                scores[s] = dot(q.data() + off, kc.data() + i * D + off, d) * inv_sqrt_d;
                mx = std::max(mx, scores[s]);
            }
            double z = 0.0;
            for (double& sc : scores) z += (sc = std::exp(sc - mx));
            const double inv_z = 1.0 / z;
            s = 0;
            if (use_kb)
                for (std::size_t m = 0; m < M; ++m, ++s) axpy(scores[s] * inv_z, kv + m * D + off, att.data() + off, d);
            for (std::size_t i = 0; i < T; ++i, ++s) axpy(scores[s] * inv_z, vc.data() + i * D + off, att.data() + off, d);
        }
        vecmat(att.data(), lw.wo, proj.data());
        for (std::size_t c = 0; c < D; ++c) x[c] += proj[c];

        rmsnorm_row(x.data(), lw.ffn_norm, h.data(), D);
        vecmat(h.data(), lw.w1, ff.data());
        for (double& f : ff) f = 0.5 * f * (1.0 + std::erf(f * 0.70710678118654752440));
        vecmat(ff.data(), lw.w2, proj.data());
        for (std::size_t c = 0; c < D; ++c) x[c] += proj[c];
    }
    rmsnorm_row(x.data(), w_.final_norm, h.data(), D);
    std::vector<double> logits(cfg.vocab_size);
    vecmat(h.data(), w_.output_head, logits.data());
    ++pos_;
    return logits;
}

std::vector<int> generate(const TransformerWeights& weights, const AdapterSet* adapters,
                          const KnowledgeBlock& knowledge, std::span<const int> prompt, const GenerateOptions& opts) {
    if (opts.max_new == 0) return {};
    if (prompt.empty()) throw ConfigError("generate: empty prompt");
    const ModelConfig& cfg = weights.config;
    if (prompt.size() > cfg.max_prompt_len) throw ConfigError("generate: prompt exceeds max_prompt_len");
    DecodeSession session(weights, adapters, knowledge, opts.scale_enabled.value_or(cfg.scale_enabled));
    std::vector<double> logits;
    for (int t : prompt) logits = session.step(t);
    std::vector<int> out;
    while (out.size() < opts.max_new) {
        const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (next == tokens::kEos && opts.stop_at_eos) break;
        out.push_back(next);
        if (session.position() >= cfg.max_prompt_len || out.size() == opts.max_new) break;
        logits = session.step(next);
    }
    return out;
}

// ---- pretraining ------------------------------------------------------------------

TransformerWeights pretrain_base(const std::vector<std::vector<int>>& corpus, const ModelConfig& cfg,
                                 const PretrainConfig& pcfg, std::vector<PretrainLogEntry>* log,
                                 const std::function<void(const PretrainLogEntry&)>& on_step) {
    if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
    if (pcfg.batch_size == 0) throw ConfigError("pretrain.batch_size: must be >= 1");
    for (const auto& seq : corpus)
        if (seq.size() < 2 || seq.size() > cfg.max_prompt_len + 1)
            throw ConfigError("pretrain: corpus sequence length " + std::to_string(seq.size()) + " out of range");

    TransformerWeights w = TransformerWeights::init(cfg, pcfg.seed);
    w.set_trainable(true);
    OptimizerConfig ocfg = pcfg.optimizer;
    ocfg.total_steps = pcfg.steps;
    AdamW opt(w.parameters(), ocfg);
    Rng rng(derive_seed(pcfg.seed, "pretrain-batches"));
    const KnowledgeBlock no_kb;

    for (std::size_t step = 0; step < pcfg.steps; ++step) {
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < pcfg.batch_size; ++b) {
            const auto& seq = corpus[rng.index(corpus.size())];
            std::span<const int> inputs(seq.data(), seq.size() - 1);
            std::span<const int> targets(seq.data() + 1, seq.size() - 1);
            auto res = forward(w, nullptr, no_kb, inputs);
            Tensor loss = scale(cross_entropy(res.logits, targets), 1.0 / static_cast<double>(pcfg.batch_size));
            batch_loss += loss.item();
            backward(loss);
        }
        if (!std::isfinite(batch_loss)) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        const double lr = cosine_lr(ocfg, step);
        opt.step(lr);
        PretrainLogEntry entry{step, batch_loss, lr};
        if (log) log->push_back(entry);
        if (on_step) on_step(entry);
    }
    w.set_trainable(false);
    return w;
}

} // namespace kblam
