#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kblam/embed.hpp"
#include "kblam/kb.hpp"
#include "kblam/model.hpp"
#include "kblam/tensor.hpp"

namespace kblam {

/// Trainable parameters: per-layer linear key/value adapters from encoder space
/// (P) to the model's key/value space (D), and per-layer query heads for the
/// knowledge part of attention.
struct AdapterSet {
    std::size_t layers = 0;
    std::size_t dim = 0;
    std::size_t embed_dim = 0;
    std::vector<Tensor> key_adapters;   // per layer [P x D]
    std::vector<Tensor> value_adapters; // per layer [P x D]
    std::vector<Tensor> query_heads;    // per layer [D x D]

    /// Key/value adapters ~ N(0, 1/P); query heads copied from the base W_Q.
    static AdapterSet init(const TransformerWeights& base, std::size_t embed_dim, std::uint64_t seed);

    std::vector<Tensor> parameters() const;
    std::uint64_t hash() const;
    AdapterSet clone() const;

    void save(const std::filesystem::path& path) const;
    static AdapterSet load(const std::filesystem::path& path);
};

/// Per-layer key/value vectors for one triple, flattened as [L x D].
struct KnowledgeToken {
    std::vector<double> keys;
    std::vector<double> values;
    std::size_t source_position = 0;
    std::uint64_t fingerprint = 0;

    bool operator==(const KnowledgeToken&) const = default;
};

KnowledgeToken encode_token(const AdapterSet& adapters, const BaseEmbeddingPair& base);

/// Same arithmetic as encode_token, laid out as one matrix product per layer.
std::vector<KnowledgeToken> encode_tokens(const AdapterSet& adapters, std::span<const BaseEmbeddingPair> bases);

/// Differentiable knowledge block for training: gradients flow into the adapters.
KnowledgeBlock encode_block(const AdapterSet& adapters, std::span<const BaseEmbeddingPair> bases);

/// Constant block built from stored tokens.
KnowledgeBlock make_block(std::span<const KnowledgeToken> tokens, std::size_t layers, std::size_t dim);

/// Knowledge tokens aligned with KB positions, plus the base embeddings they came from.
///
/// Not internally synchronized: readers may share a store, writers need exclusive access.
class TokenStore {
public:
    TokenStore() = default;

    static TokenStore build(const KnowledgeBase& kb, const AdapterSet& adapters, EmbeddingBackend& backend);

    std::size_t size() const noexcept { return tokens_.size(); }
    const KnowledgeToken& operator[](std::size_t i) const { return tokens_.at(i); }
    const std::vector<KnowledgeToken>& tokens() const noexcept { return tokens_; }
    bool has_base_pairs() const noexcept { return base_pairs_.size() == tokens_.size(); }
    const std::vector<BaseEmbeddingPair>& base_pairs() const noexcept { return base_pairs_; }

    std::size_t layers() const noexcept { return layers_; }
    std::size_t dim() const noexcept { return dim_; }
    std::uint64_t adapter_hash() const noexcept { return adapter_hash_; }

    /// Count of single-token encodes performed by this store.
    std::size_t encode_calls() const noexcept { return encode_calls_; }

    const std::set<std::size_t>& dirty() const noexcept { return dirty_; }
    void mark_dirty(std::size_t pos);

    /// Constant block over all tokens (or a subset). Throws if any token is dirty.
    KnowledgeBlock block() const;
    KnowledgeBlock block(std::span<const std::size_t> positions) const;

    /// Re-encodes dirty tokens from the current KB.
    void refresh(const KnowledgeBase& kb, const AdapterSet& adapters, EmbeddingBackend& backend);

    /// Rebuilds every token from the stored base embeddings (no re-embedding).
    void rematerialize(const AdapterSet& adapters);

    /// Throws StaleStoreError listing positions whose fingerprint no longer matches.
    void check_consistent(const KnowledgeBase& kb) const;

    bool operator==(const TokenStore& o) const { return tokens_ == o.tokens_; }

    friend std::size_t upsert_triple(TokenStore&, KnowledgeBase&, const KnowledgeTriple&, const AdapterSet&,
                                     EmbeddingBackend&);
    friend void remove_triple(TokenStore&, KnowledgeBase&, std::string_view, std::string_view);
    friend void save_tokens(const TokenStore&, const std::filesystem::path&);
    friend TokenStore load_tokens(const std::filesystem::path&, const KnowledgeBase&, std::optional<std::uint64_t>);

private:
    KnowledgeToken encode_one(const AdapterSet& adapters, const BaseEmbeddingPair& base, std::size_t pos,
                              std::uint64_t fingerprint);

    std::vector<KnowledgeToken> tokens_;
    std::vector<BaseEmbeddingPair> base_pairs_;
    std::set<std::size_t> dirty_;
    std::size_t layers_ = 0;
    std::size_t dim_ = 0;
    std::uint64_t adapter_hash_ = 0;
    std::size_t encode_calls_ = 0;
};

/// Inserts or replaces the triple keyed by (name, property); re-encodes exactly one token.
/// Returns its position.
std::size_t upsert_triple(TokenStore& store, KnowledgeBase& kb, const KnowledgeTriple& triple,
                          const AdapterSet& adapters, EmbeddingBackend& backend);

/// Removes the triple and its token; later positions shift down. NotFoundError if absent.
void remove_triple(TokenStore& store, KnowledgeBase& kb, std::string_view name, std::string_view property);

/// Layout: magic "KBLMTOKS", u32 version, u32 L, u32 D, u64 M, u64 adapter hash,
/// M x (u64 position, u64 fingerprint), then M x (keys [L x D], values [L x D]) as f64.
void save_tokens(const TokenStore& store, const std::filesystem::path& path);

/// Throws StaleStoreError when the file does not match `kb` (or `expected_adapter_hash`).
TokenStore load_tokens(const std::filesystem::path& path, const KnowledgeBase& kb,
                       std::optional<std::uint64_t> expected_adapter_hash = std::nullopt);

std::size_t token_file_header_bytes(std::size_t m);

} // namespace kblam
