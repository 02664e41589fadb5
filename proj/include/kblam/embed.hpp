#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kblam/kb.hpp"

namespace kblam {

using Vector = std::vector<double>;

enum class BackendKind { HashNgram, FileCache, HttpRemote };

/// Sentence encoder f(.) mapping text to a P-dimensional vector.
///
/// Implementations must be pure functions of (configuration, text); fingerprint()
/// identifies the configuration so cached vectors from different encoders never alias.
class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;

    virtual BackendKind kind() const = 0;
    virtual std::size_t dim() const = 0;
    virtual std::string fingerprint() const = 0;
    virtual Vector embed(std::string_view text) = 0;
    virtual std::vector<Vector> embed_batch(std::span<const std::string> texts);

    /// Number of texts actually encoded (cache hits excluded).
    std::size_t calls() const noexcept { return calls_.load(); }

protected:
    void count_calls(std::size_t n) noexcept { calls_ += n; }

private:
    std::atomic<std::size_t> calls_{0};
};

/// Signed feature hashing of character n-grams, L2-normalized.
class HashNgramBackend final : public EmbeddingBackend {
public:
    explicit HashNgramBackend(std::size_t dim = 256, std::size_t min_n = 3, std::size_t max_n = 5);

    BackendKind kind() const override { return BackendKind::HashNgram; }
    std::size_t dim() const override { return dim_; }
    std::string fingerprint() const override;
    Vector embed(std::string_view text) override;

private:
    std::size_t dim_;
    std::size_t min_n_;
    std::size_t max_n_;
};

struct HttpRemoteConfig {
    /// Full URL, e.g. "https://host/v1/embeddings".
    std::string endpoint;
    std::string model;
    std::size_t dim = 1536;
    double timeout_seconds = 30.0;
    int retries = 3;
    /// Read from EMBED_API_KEY; never from files or flags.
    std::string api_key;

    /// Reads {endpoint, model, dim, timeout_seconds, retries} from a JSON file, then applies
    /// EMBED_ENDPOINT / EMBED_API_KEY from the environment. A file carrying a key is rejected.
    static HttpRemoteConfig from_file(const std::filesystem::path& path);
    static HttpRemoteConfig from_env(HttpRemoteConfig base);
    static HttpRemoteConfig from_env();
};

/// POST {"input": [...]} -> {"data": [{"embedding": [...]}, ...]}.
/// Transport failures surface as RetryableError after the retry budget; a returned
/// vector of the wrong length is a hard ShapeError.
class HttpRemoteBackend final : public EmbeddingBackend {
public:
    explicit HttpRemoteBackend(HttpRemoteConfig cfg);

    BackendKind kind() const override { return BackendKind::HttpRemote; }
    std::size_t dim() const override { return cfg_.dim; }
    std::string fingerprint() const override;
    Vector embed(std::string_view text) override;
    std::vector<Vector> embed_batch(std::span<const std::string> texts) override;

private:
    HttpRemoteConfig cfg_;
};

/// Append-only on-disk store of vectors keyed by (backend fingerprint, text).
///
/// Record layout, little endian: u64 fingerprint hash, u64 text hash, u32 P, P x f64.
class EmbeddingCache {
public:
    explicit EmbeddingCache(std::filesystem::path path);

    std::optional<Vector> get(std::string_view fingerprint, std::string_view text) const;
    void put(std::string_view fingerprint, std::string_view text, const Vector& v);

    std::size_t size() const;
    const std::filesystem::path& path() const noexcept { return path_; }

    static constexpr std::size_t record_bytes(std::size_t dim) { return 8 + 8 + 4 + 8 * dim; }

private:
    using Key = std::pair<std::uint64_t, std::uint64_t>;

    std::filesystem::path path_;
    mutable std::shared_mutex mutex_;
    std::map<Key, Vector> entries_;
};

/// Backend decorator that serves repeated texts from an EmbeddingCache.
class CachedBackend final : public EmbeddingBackend {
public:
    CachedBackend(std::shared_ptr<EmbeddingBackend> inner, std::shared_ptr<EmbeddingCache> cache);

    BackendKind kind() const override { return BackendKind::FileCache; }
    std::size_t dim() const override { return inner_->dim(); }
    std::string fingerprint() const override { return inner_->fingerprint(); }
    Vector embed(std::string_view text) override;

    const EmbeddingBackend& inner() const noexcept { return *inner_; }

private:
    std::shared_ptr<EmbeddingBackend> inner_;
    std::shared_ptr<EmbeddingCache> cache_;
};

/// Base key/value embeddings of one triple.
struct BaseEmbeddingPair {
    Vector key_base;
    Vector value_base;

    bool operator==(const BaseEmbeddingPair&) const = default;
};

/// "The <property> of <name>"
std::string key_string(const KnowledgeTriple& t);

BaseEmbeddingPair encode_triple(EmbeddingBackend& backend, const KnowledgeTriple& t);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

} // namespace kblam
