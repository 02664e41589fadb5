#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kblam/optim.hpp"
#include "kblam/tensor.hpp"

namespace kblam {

struct AdapterSet;

// ---- tokenizer ------------------------------------------------------------------

/// Byte-level vocabulary: 256 byte values plus four specials.
namespace tokens {
inline constexpr int kBos = 256;
inline constexpr int kSep = 257;
inline constexpr int kEos = 258;
inline constexpr int kPad = 259;
inline constexpr std::size_t kVocabSize = 260;
} // namespace tokens

std::vector<int> encode_bytes(std::string_view text);
/// Drops special tokens.
std::string decode_bytes(std::span<const int> ids);
/// [BOS] question [SEP]
std::vector<int> prompt_tokens(std::string_view question);

// ---- configuration ----------------------------------------------------------------

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = tokens::kVocabSize;
    std::size_t max_prompt_len = 384;
    /// Knowledge tokens take part in layer l iff l % inject_every == 0.
    std::size_t inject_every = 1;
    /// Shift log(C) - log(M) on knowledge scores when scale_enabled.
    double scale_C = 100.0;
    bool scale_enabled = false;
    std::size_t retrieval_layer = 1;
    double rope_base = 10000.0;

    std::size_t head_dim() const { return dim / heads; }
    bool is_injection_layer(std::size_t layer) const { return layer % inject_every == 0; }
    void validate() const;

    nlohmann::json to_json() const;
    /// Unknown keys are rejected with a ConfigError naming them.
    static ModelConfig from_json(const nlohmann::json& j);
};

// ---- weights ----------------------------------------------------------------------

struct LayerWeights {
    Tensor attn_norm;  // [D]
    Tensor wq, wk, wv; // [D x D], applied as x * W
    Tensor wo;         // [D x D]
    Tensor ffn_norm;   // [D]
    Tensor w1;         // [D x F]
    Tensor w2;         // [F x D]
};

/// Frozen base-model parameters. Stored as [in x out] so projections are x * W.
struct TransformerWeights {
    ModelConfig config;
    Tensor token_embedding; // [V x D]
    std::vector<LayerWeights> layers;
    Tensor final_norm; // [D]
    Tensor output_head; // [D x V]

    static TransformerWeights init(const ModelConfig& cfg, std::uint64_t seed);

    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::vector<Tensor> parameters() const;
    void set_trainable(bool on);
    bool frozen() const;
    std::uint64_t hash() const;

    void save(const std::filesystem::path& path) const;
    static TransformerWeights load(const std::filesystem::path& path);
};

// ---- attention --------------------------------------------------------------------

/// Score entries computed per head, summed over layers and heads.
struct AttentionStats {
    std::uint64_t kb_entries = 0;
    std::uint64_t prompt_entries = 0;
};

/// Post-softmax scores of one layer. kb is [H x N x M], prompt is [H x N x N] with
/// zeros above the diagonal. Each (head, row) sums to one across both parts.
struct LayerTrace {
    std::size_t layer = 0;
    bool injected = false;
    std::size_t heads = 0, n = 0, m = 0;
    std::vector<double> kb;
    std::vector<double> prompt;

    double kb_at(std::size_t h, std::size_t row, std::size_t col) const { return kb[(h * n + row) * m + col]; }
    double prompt_at(std::size_t h, std::size_t row, std::size_t col) const {
        return prompt[(h * n + row) * n + col];
    }
    /// Knowledge-part score averaged over heads.
    double kb_head_mean(std::size_t row, std::size_t col) const;
};

/// Inputs to one rectangular attention evaluation. q and k carry rotary encoding;
/// the knowledge-side tensors (kb_query from the adapter query head, kb_keys,
/// kb_values) are used raw and may be left undefined to skip the knowledge part.
struct AttentionInputs {
    Tensor q, k, v;                      // [N x D]
    Tensor kb_query;                     // [N x D]
    Tensor kb_keys, kb_values;           // [M x D]
};

/// One softmax over [knowledge scores | causal prompt scores] per head and row; the
/// output row is the probability-weighted mix of knowledge values and prompt values.
/// `kb_shift` is added to every knowledge score before the softmax.
Tensor rectangular_attention(const AttentionInputs& in, std::size_t heads, double kb_shift,
                             AttentionStats* stats = nullptr, LayerTrace* trace = nullptr);

/// Per-layer knowledge keys/values, each [M x D]. Empty vectors mean no KB.
struct KnowledgeBlock {
    std::vector<Tensor> keys;
    std::vector<Tensor> values;

    std::size_t size() const { return keys.empty() ? 0 : keys.front().rows(); }
    bool empty() const { return size() == 0; }
};

struct ForwardOptions {
    bool capture_trace = false;
    AttentionStats* stats = nullptr;
    /// Overrides config.scale_enabled when set.
    std::optional<bool> scale_enabled;
};

struct ForwardResult {
    Tensor logits; // [N x V]
    std::vector<LayerTrace> traces;
};

/// Full-sequence forward pass. `adapters` may be null only when the KB is empty.
ForwardResult forward(const TransformerWeights& weights, const AdapterSet* adapters,
                      const KnowledgeBlock& knowledge, std::span<const int> tokens,
                      const ForwardOptions& opts = {});

/// Knowledge-score shift for a KB of m tokens (zero when disabled or m == 0).
double kb_score_shift(const ModelConfig& cfg, std::size_t m, bool enabled);

// ---- incremental decoding ----------------------------------------------------------

/// Token-by-token decoder with a prompt KV cache. Knowledge keys/values are read from
/// the block as-is on every step; they are never recomputed.
class DecodeSession {
public:
    DecodeSession(const TransformerWeights& weights, const AdapterSet* adapters, const KnowledgeBlock& knowledge,
                  bool scale_enabled);

    /// Feeds one token and returns next-token logits.
    std::vector<double> step(int token);
    std::size_t position() const noexcept { return pos_; }

private:
    const TransformerWeights& w_;
    const AdapterSet* adapters_;
    const KnowledgeBlock& kb_;
    double shift_;
    std::size_t pos_ = 0;
    std::vector<std::vector<double>> k_cache_, v_cache_; // per layer, row-major [pos x D]
};

struct GenerateOptions {
    std::size_t max_new = 96;
    bool stop_at_eos = true;
    std::optional<bool> scale_enabled;
};

/// Greedy decoding (lowest index wins ties). The returned sequence excludes the prompt and EOS.
std::vector<int> generate(const TransformerWeights& weights, const AdapterSet* adapters,
                          const KnowledgeBlock& knowledge, std::span<const int> prompt,
                          const GenerateOptions& opts = {});

// ---- base-model pretraining ---------------------------------------------------------

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    OptimizerConfig optimizer{3e-3, 3e-4, 2000};
    std::uint64_t seed = 0;
};

struct PretrainLogEntry {
    std::size_t step;
    double loss;
    double lr;
};

/// Next-token language modelling on token sequences; returns frozen weights.
TransformerWeights pretrain_base(const std::vector<std::vector<int>>& corpus, const ModelConfig& cfg,
                                 const PretrainConfig& pcfg, std::vector<PretrainLogEntry>* log = nullptr,
                                 const std::function<void(const PretrainLogEntry&)>& on_step = {});

} // namespace kblam
