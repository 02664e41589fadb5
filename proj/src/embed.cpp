#include "kblam/embed.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>

#include <httplib.h>
#include <json.hpp>

#include "kblam/error.hpp"
#include "kblam/random.hpp"

namespace kblam {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

std::vector<Vector> EmbeddingBackend::embed_batch(std::span<const std::string> texts) {
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t));
    return out;
}

HashNgramBackend::HashNgramBackend(std::size_t dim, std::size_t min_n, std::size_t max_n)
    : dim_(dim), min_n_(min_n), max_n_(max_n) {
    if (dim < 8) throw ConfigError("embed.dim: must be >= 8");
    if (min_n == 0 || max_n < min_n) throw ConfigError("embed.ngram: invalid n-gram range");
}

std::string HashNgramBackend::fingerprint() const {
    return "hash-ngram/v1/P=" + std::to_string(dim_) + "/n=" + std::to_string(min_n_) + "-" +
           std::to_string(max_n_);
}

Vector HashNgramBackend::embed(std::string_view text) {
    if (text.empty()) throw ConfigError("embed: empty text");
    count_calls(1);
    Vector v(dim_, 0.0);
    auto add_gram = [&](std::string_view gram) {
        const std::uint64_t h = derive_seed(fnv1a64(gram), "ngram");
        const double sign = (h >> 63) ? -1.0 : 1.0;
        v[h % dim_] += sign;
    };
    if (text.size() < min_n_) {
        add_gram(text);
    } else {
        for (std::size_t n = min_n_; n <= max_n_; ++n)
            for (std::size_t i = 0; i + n <= text.size(); ++i) add_gram(text.substr(i, n));
    }
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    if (norm2 == 0.0) {
        // every feature cancelled; fall back to a single deterministic bucket
        v[fnv1a64(text) % dim_] = 1.0;
        return v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

HttpRemoteConfig HttpRemoteConfig::from_env() { return from_env(HttpRemoteConfig{}); }

HttpRemoteConfig HttpRemoteConfig::from_env(HttpRemoteConfig base) {
    if (const char* ep = std::getenv("EMBED_ENDPOINT"); ep && *ep) base.endpoint = ep;
    if (const char* key = std::getenv("EMBED_API_KEY"); key && *key) base.api_key = key;
    return base;
}

HttpRemoteConfig HttpRemoteConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embedder config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    if (j.contains("api_key"))
        throw ConfigError("api_key: secrets must come from EMBED_API_KEY, not config files");
    HttpRemoteConfig cfg;
    try {
        cfg.endpoint = j.value("endpoint", std::string());
        cfg.model = j.value("model", std::string());
        cfg.dim = j.value("dim", cfg.dim);
        cfg.timeout_seconds = j.value("timeout_seconds", cfg.timeout_seconds);
        cfg.retries = j.value("retries", cfg.retries);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return from_env(std::move(cfg));
}

HttpRemoteBackend::HttpRemoteBackend(HttpRemoteConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.endpoint.empty()) throw ConfigError("endpoint: remote embedder needs an endpoint");
    if (cfg_.dim < 8) throw ConfigError("dim: must be >= 8");
    if (cfg_.retries < 0) throw ConfigError("retries: must be >= 0");
}

std::string HttpRemoteBackend::fingerprint() const {
    return "http/" + cfg_.endpoint + "/" + cfg_.model + "/P=" + std::to_string(cfg_.dim);
}

Vector HttpRemoteBackend::embed(std::string_view text) {
    std::string s(text);
    return embed_batch(std::span<const std::string>(&s, 1)).front();
}

std::vector<Vector> HttpRemoteBackend::embed_batch(std::span<const std::string> texts) {
    for (const auto& t : texts)
        if (t.empty()) throw ConfigError("embed: empty text");

    // split "scheme://host[:port]" from the request path
    const auto scheme_end = cfg_.endpoint.find("://");
    const auto path_begin =
        cfg_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const std::string origin = cfg_.endpoint.substr(0, path_begin);
    const std::string path = path_begin == std::string::npos ? "/" : cfg_.endpoint.substr(path_begin);

    nlohmann::json body;
    body["input"] = texts;
    if (!cfg_.model.empty()) body["model"] = cfg_.model;

    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

    std::string last_cause;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
        httplib::Client client(origin);
        const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
        const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        auto res = client.Post(path, headers, body.dump(), "application/json");
        if (!res) {
            last_cause = httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_cause = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw Error("remote embedder returned HTTP " + std::to_string(res->status) + ": " + res->body);

        std::vector<Vector> out;
        try {
            auto j = nlohmann::json::parse(res->body);
            for (const auto& item : j.at("data")) out.push_back(item.at("embedding").get<Vector>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("remote embedder response: ") + e.what());
        }
        if (out.size() != texts.size())
            throw ShapeError("remote embedder returned " + std::to_string(out.size()) + " vectors for " +
                             std::to_string(texts.size()) + " inputs");
        for (const auto& v : out)
            if (v.size() != cfg_.dim)
                throw ShapeError("remote embedder returned dim " + std::to_string(v.size()) + ", expected " +
                                 std::to_string(cfg_.dim));
        count_calls(texts.size());
        return out;
    }
    throw RetryableError("remote embedder unavailable after " + std::to_string(cfg_.retries + 1) +
                         " attempt(s): " + last_cause);
}

namespace {

template <typename T>
void write_le(std::ostream& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(buf, sizeof(T));
}

template <typename T>
bool read_le(std::istream& in, T& value) {
    char buf[sizeof(T)];
    if (!in.read(buf, sizeof(T))) return false;
    std::memcpy(&value, buf, sizeof(T));
    return true;
}

} // namespace

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    for (;;) {
        std::uint64_t fp = 0, th = 0;
        std::uint32_t dim = 0;
        if (!read_le(in, fp)) break;
        if (!read_le(in, th) || !read_le(in, dim)) throw ParseError("truncated embedding cache " + path_.string());
        Vector v(dim);
        if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(8 * dim)))
            throw ParseError("truncated embedding cache " + path_.string());
        entries_[{fp, th}] = std::move(v);
    }
}

std::optional<Vector> EmbeddingCache::get(std::string_view fingerprint, std::string_view text) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find({fnv1a64(fingerprint), fnv1a64(text)});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void EmbeddingCache::put(std::string_view fingerprint, std::string_view text, const Vector& v) {
    std::unique_lock lock(mutex_);
    const Key key{fnv1a64(fingerprint), fnv1a64(text)};
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to embedding cache " + path_.string());
    write_le(out, key.first);
    write_le(out, key.second);
    write_le(out, static_cast<std::uint32_t>(v.size()));
    for (double x : v) write_le(out, x);
    if (!out) throw IoError("write failed: " + path_.string());
    entries_[key] = v;
}

std::size_t EmbeddingCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

CachedBackend::CachedBackend(std::shared_ptr<EmbeddingBackend> inner, std::shared_ptr<EmbeddingCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {
    if (!inner_ || !cache_) throw ConfigError("cached backend needs an inner backend and a cache");
}

Vector CachedBackend::embed(std::string_view text) {
    const std::string fp = inner_->fingerprint();
    if (auto hit = cache_->get(fp, text); hit && hit->size() == inner_->dim()) return *hit;
    Vector v = inner_->embed(text);
    count_calls(1);
    cache_->put(fp, text, v);
    return v;
}

std::string key_string(const KnowledgeTriple& t) { return "The " + t.property + " of " + t.name; }

BaseEmbeddingPair encode_triple(EmbeddingBackend& backend, const KnowledgeTriple& t) {
    validate_triple(t);
    BaseEmbeddingPair pair{backend.embed(key_string(t)), backend.embed(t.value)};
    for (const Vector* v : {&pair.key_base, &pair.value_base}) {
        if (v->size() != backend.dim()) throw ShapeError("embedding length differs from backend dim");
        for (double x : *v)
            if (!std::isfinite(x)) throw NumericError("non-finite embedding for '" + t.name + "'");
    }
    return pair;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / std::sqrt(na * nb);
}

} // namespace kblam
