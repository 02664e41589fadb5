#include "kblam/adapters.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "kblam/checkpoint.hpp"
#include "kblam/error.hpp"

namespace kblam {

AdapterSet AdapterSet::init(const TransformerWeights& base, std::size_t embed_dim, std::uint64_t seed) {
    if (embed_dim == 0) throw ConfigError("adapters.embed_dim: must be >= 1");
    const auto& cfg = base.config;
    Rng rng(derive_seed(seed, "adapters"));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    AdapterSet a;
    a.layers = cfg.layers;
    a.dim = cfg.dim;
    a.embed_dim = embed_dim;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        a.key_adapters.push_back(Tensor::randn({embed_dim, cfg.dim}, rng, stddev, true));
        a.value_adapters.push_back(Tensor::randn({embed_dim, cfg.dim}, rng, stddev, true));
        const auto& wq = base.layers[l].wq;
        a.query_heads.push_back(Tensor::from(wq.shape(), std::vector<double>(wq.data().begin(), wq.data().end()), true));
    }
    return a;
}

std::vector<Tensor> AdapterSet::parameters() const {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < layers; ++l) {
        out.push_back(key_adapters[l]);
        out.push_back(value_adapters[l]);
        out.push_back(query_heads[l]);
    }
    return out;
}

std::uint64_t AdapterSet::hash() const { return tensors_hash(parameters()); }

AdapterSet AdapterSet::clone() const {
    AdapterSet a;
    a.layers = layers;
    a.dim = dim;
    a.embed_dim = embed_dim;
    auto copy = [](const Tensor& t) {
        return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
    };
    for (std::size_t l = 0; l < layers; ++l) {
        a.key_adapters.push_back(copy(key_adapters[l]));
        a.value_adapters.push_back(copy(value_adapters[l]));
        a.query_heads.push_back(copy(query_heads[l]));
    }
    return a;
}

void AdapterSet::save(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    ckpt.header_json =
        nlohmann::json{{"kind", "adapters"}, {"layers", layers}, {"dim", dim}, {"embed_dim", embed_dim}}.dump();
    for (std::size_t l = 0; l < layers; ++l) {
        const auto sfx = "." + std::to_string(l);
        for (const auto& [name, t] : {std::pair<std::string, const Tensor*>{"key_adapter" + sfx, &key_adapters[l]},
                                      {"value_adapter" + sfx, &value_adapters[l]},
                                      {"query_head" + sfx, &query_heads[l]}})
            ckpt.tensors.push_back({name, t->shape(), std::vector<double>(t->data().begin(), t->data().end())});
    }
    write_checkpoint(path, ckpt);
}

AdapterSet AdapterSet::load(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(ckpt.header_json);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": bad checkpoint header: " + e.what());
    }
    if (header.value("kind", "") != "adapters") throw ParseError(path.string() + " is not an adapter checkpoint");
    AdapterSet a;
    a.layers = header.at("layers").get<std::size_t>();
    a.dim = header.at("dim").get<std::size_t>();
    a.embed_dim = header.at("embed_dim").get<std::size_t>();
    auto take = [&](const std::string& name, const Shape& shape) {
        const auto& t = ckpt.at(name);
        if (t.shape != shape) throw ShapeError("adapter tensor " + name + " has shape " + shape_string(t.shape));
        return Tensor::from(t.shape, t.data, true);
    };
    for (std::size_t l = 0; l < a.layers; ++l) {
        const auto sfx = "." + std::to_string(l);
        a.key_adapters.push_back(take("key_adapter" + sfx, {a.embed_dim, a.dim}));
        a.value_adapters.push_back(take("value_adapter" + sfx, {a.embed_dim, a.dim}));
        a.query_heads.push_back(take("query_head" + sfx, {a.dim, a.dim}));
    }
    return a;
}

namespace {

// rows x P times P x D, accumulated in p order for every output element.
void project_rows(const std::vector<const double*>& rows, const Tensor& W, std::size_t layer, std::size_t L,
                  std::size_t D, std::vector<KnowledgeToken>& out, bool keys) {
    const std::size_t P = W.dim(0);
    const double* w = W.data().data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        double* dst = (keys ? out[r].keys.data() : out[r].values.data()) + layer * D;
        std::fill(dst, dst + D, 0.0);
        for (std::size_t p = 0; p < P; ++p) {
            const double a = rows[r][p];
            const double* wr = w + p * D;
            for (std::size_t c = 0; c < D; ++c) dst[c] += a * wr[c];
        }
    }
    (void)L;
}

void check_base(const AdapterSet& a, const BaseEmbeddingPair& b) {
    if (b.key_base.size() != a.embed_dim || b.value_base.size() != a.embed_dim)
        throw ShapeError("encode_token: base embedding length " + std::to_string(b.key_base.size()) + "/" +
                         std::to_string(b.value_base.size()) + " but adapters expect " + std::to_string(a.embed_dim));
}

} // namespace

std::vector<KnowledgeToken> encode_tokens(const AdapterSet& adapters, std::span<const BaseEmbeddingPair> bases) {
    const std::size_t L = adapters.layers, D = adapters.dim;
    std::vector<KnowledgeToken> out(bases.size());
    std::vector<const double*> krows, vrows;
    for (std::size_t i = 0; i < bases.size(); ++i) {
        check_base(adapters, bases[i]);
        out[i].keys.assign(L * D, 0.0);
        out[i].values.assign(L * D, 0.0);
        krows.push_back(bases[i].key_base.data());
        vrows.push_back(bases[i].value_base.data());
    }
    for (std::size_t l = 0; l < L; ++l) {
        project_rows(krows, adapters.key_adapters[l], l, L, D, out, true);
        project_rows(vrows, adapters.value_adapters[l], l, L, D, out, false);
    }
    return out;
}

KnowledgeToken encode_token(const AdapterSet& adapters, const BaseEmbeddingPair& base) {
    return encode_tokens(adapters, std::span<const BaseEmbeddingPair>(&base, 1)).front();
}

KnowledgeBlock encode_block(const AdapterSet& adapters, std::span<const BaseEmbeddingPair> bases) {
    KnowledgeBlock block;
    if (bases.empty()) return block;
    const std::size_t P = adapters.embed_dim, M = bases.size();
    std::vector<double> kmat, vmat;
    kmat.reserve(M * P);
    vmat.reserve(M * P);
    for (const auto& b : bases) {
        check_base(adapters, b);
        kmat.insert(kmat.end(), b.key_base.begin(), b.key_base.end());
        vmat.insert(vmat.end(), b.value_base.begin(), b.value_base.end());
    }
    const Tensor K = Tensor::from({M, P}, std::move(kmat));
    const Tensor V = Tensor::from({M, P}, std::move(vmat));
    for (std::size_t l = 0; l < adapters.layers; ++l) {
        block.keys.push_back(matmul(K, adapters.key_adapters[l]));
        block.values.push_back(matmul(V, adapters.value_adapters[l]));
    }
    return block;
}

KnowledgeBlock make_block(std::span<const KnowledgeToken> toks, std::size_t layers, std::size_t dim) {
    KnowledgeBlock block;
    if (toks.empty()) return block;
    const std::size_t M = toks.size();
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> k(M * dim), v(M * dim);
        for (std::size_t m = 0; m < M; ++m) {
            if (toks[m].keys.size() != layers * dim) throw ShapeError("make_block: token has wrong size");
            std::memcpy(k.data() + m * dim, toks[m].keys.data() + l * dim, dim * sizeof(double));
            std::memcpy(v.data() + m * dim, toks[m].values.data() + l * dim, dim * sizeof(double));
        }
        block.keys.push_back(Tensor::from({M, dim}, std::move(k)));
        block.values.push_back(Tensor::from({M, dim}, std::move(v)));
    }
    return block;
}

// ---- TokenStore ------------------------------------------------------------------

KnowledgeToken TokenStore::encode_one(const AdapterSet& adapters, const BaseEmbeddingPair& base, std::size_t pos,
                                      std::uint64_t fingerprint) {
    KnowledgeToken t = encode_token(adapters, base);
    t.source_position = pos;
    t.fingerprint = fingerprint;
    ++encode_calls_;
    return t;
}

TokenStore TokenStore::build(const KnowledgeBase& kb, const AdapterSet& adapters, EmbeddingBackend& backend) {
    TokenStore s;
    s.layers_ = adapters.layers;
    s.dim_ = adapters.dim;
    s.adapter_hash_ = adapters.hash();
    s.base_pairs_.reserve(kb.size());
    for (const auto& t : kb.triples()) s.base_pairs_.push_back(encode_triple(backend, t));
    s.tokens_ = encode_tokens(adapters, s.base_pairs_);
    for (std::size_t i = 0; i < kb.size(); ++i) {
        s.tokens_[i].source_position = i;
        s.tokens_[i].fingerprint = triple_fingerprint(kb[i]);
    }
    return s;
}

void TokenStore::mark_dirty(std::size_t pos) {
    if (pos >= tokens_.size()) throw NotFoundError("no token at position " + std::to_string(pos));
    dirty_.insert(pos);
}

KnowledgeBlock TokenStore::block() const {
    if (!dirty_.empty()) throw StaleStoreError("token store has un-refreshed entries");
    return make_block(tokens_, layers_, dim_);
}

KnowledgeBlock TokenStore::block(std::span<const std::size_t> positions) const {
    if (!dirty_.empty()) throw StaleStoreError("token store has un-refreshed entries");
    std::vector<KnowledgeToken> sel;
    sel.reserve(positions.size());
    for (std::size_t p : positions) sel.push_back(tokens_.at(p));
    return make_block(sel, layers_, dim_);
}

void TokenStore::refresh(const KnowledgeBase& kb, const AdapterSet& adapters, EmbeddingBackend& backend) {
    if (kb.size() != tokens_.size()) throw StaleStoreError("token store size differs from KB size");
    for (std::size_t pos : dirty_) {
        BaseEmbeddingPair base = encode_triple(backend, kb[pos]);
        tokens_[pos] = encode_one(adapters, base, pos, triple_fingerprint(kb[pos]));
        if (has_base_pairs()) base_pairs_[pos] = std::move(base);
    }
    dirty_.clear();
}

void TokenStore::rematerialize(const AdapterSet& adapters) {
    if (!has_base_pairs()) throw StaleStoreError("token store has no base embeddings to rematerialize from");
    auto fresh = encode_tokens(adapters, base_pairs_);
    for (std::size_t i = 0; i < fresh.size(); ++i) {
        fresh[i].source_position = tokens_[i].source_position;
        fresh[i].fingerprint = tokens_[i].fingerprint;
    }
    tokens_ = std::move(fresh);
    adapter_hash_ = adapters.hash();
}

void TokenStore::check_consistent(const KnowledgeBase& kb) const {
    std::vector<std::size_t> stale;
    const std::size_t n = std::max(kb.size(), tokens_.size());
    for (std::size_t i = 0; i < n; ++i)
        if (i >= kb.size() || i >= tokens_.size() || tokens_[i].fingerprint != triple_fingerprint(kb[i]))
            stale.push_back(i);
    if (stale.empty()) return;
    std::string list;
    for (std::size_t i = 0; i < stale.size() && i < 32; ++i) list += (i ? "," : "") + std::to_string(stale[i]);
    if (stale.size() > 32) list += ",...";
    throw StaleStoreError("token store is stale at positions [" + list + "]");
}

std::size_t upsert_triple(TokenStore& store, KnowledgeBase& kb, const KnowledgeTriple& triple,
                          const AdapterSet& adapters, EmbeddingBackend& backend) {
    validate_triple(triple);
    if (store.size() != kb.size()) throw StaleStoreError("token store size differs from KB size");
    if (adapters.hash() != store.adapter_hash_)
        throw StaleStoreError("token store was built with different adapters");
    BaseEmbeddingPair base = encode_triple(backend, triple);
    if (auto pos = kb.find(triple.name, triple.property)) {
        kb.set_value(*pos, triple.value);
        store.tokens_[*pos] = store.encode_one(adapters, base, *pos, triple_fingerprint(triple));
        if (store.has_base_pairs()) store.base_pairs_[*pos] = std::move(base);
        store.dirty_.erase(*pos);
        return *pos;
    }
    const bool had_bases = store.has_base_pairs();
    const std::size_t pos = kb.add(triple);
    store.tokens_.push_back(store.encode_one(adapters, base, pos, triple_fingerprint(triple)));
    if (had_bases) store.base_pairs_.push_back(std::move(base));
    return pos;
}

void remove_triple(TokenStore& store, KnowledgeBase& kb, std::string_view name, std::string_view property) {
    auto pos = kb.find(name, property);
    if (!pos) throw NotFoundError("no triple (" + std::string(name) + ", " + std::string(property) + ")");
    if (store.size() != kb.size()) throw StaleStoreError("token store size differs from KB size");
    const bool had_bases = store.has_base_pairs();
    kb.remove(*pos);
    store.tokens_.erase(store.tokens_.begin() + static_cast<std::ptrdiff_t>(*pos));
    if (had_bases) store.base_pairs_.erase(store.base_pairs_.begin() + static_cast<std::ptrdiff_t>(*pos));
    for (std::size_t i = *pos; i < store.tokens_.size(); ++i) store.tokens_[i].source_position = i;
    std::set<std::size_t> dirty;
    for (std::size_t d : store.dirty_)
        if (d != *pos) dirty.insert(d > *pos ? d - 1 : d);
    store.dirty_ = std::move(dirty);
}

// ---- token file --------------------------------------------------------------------

namespace {

constexpr char kTokMagic[8] = {'K', 'B', 'L', 'M', 'T', 'O', 'K', 'S'};
constexpr std::uint32_t kTokVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError("truncated token file");
    return v;
}

} // namespace

std::size_t token_file_header_bytes(std::size_t m) { return 8 + 4 + 4 + 4 + 8 + 8 + 16 * m; }

void save_tokens(const TokenStore& store, const std::filesystem::path& path) {
    if (!store.dirty_.empty()) throw StaleStoreError("refusing to save a token store with dirty entries");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write token file " + path.string());
    out.write(kTokMagic, 8);
    put<std::uint32_t>(out, kTokVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.layers_));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim_));
    put<std::uint64_t>(out, store.tokens_.size());
    put<std::uint64_t>(out, store.adapter_hash_);
    for (const auto& t : store.tokens_) {
        put<std::uint64_t>(out, t.source_position);
        put<std::uint64_t>(out, t.fingerprint);
    }
    for (const auto& t : store.tokens_) {
        out.write(reinterpret_cast<const char*>(t.keys.data()), static_cast<std::streamsize>(t.keys.size() * 8));
        out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

TokenStore load_tokens(const std::filesystem::path& path, const KnowledgeBase& kb,
                       std::optional<std::uint64_t> expected_adapter_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open token file " + path.string());
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kTokMagic, 8) != 0)
        throw ParseError(path.string() + " is not a token file");
    if (get<std::uint32_t>(in) != kTokVersion) throw ParseError("unsupported token file version");
    TokenStore s;
    s.layers_ = get<std::uint32_t>(in);
    s.dim_ = get<std::uint32_t>(in);
    const auto M = get<std::uint64_t>(in);
    s.adapter_hash_ = get<std::uint64_t>(in);
    s.tokens_.resize(M);
    for (auto& t : s.tokens_) {
        t.source_position = get<std::uint64_t>(in);
        t.fingerprint = get<std::uint64_t>(in);
    }
    const std::size_t n = s.layers_ * s.dim_;
    for (auto& t : s.tokens_) {
        t.keys.resize(n);
        t.values.resize(n);
        if (!in.read(reinterpret_cast<char*>(t.keys.data()), static_cast<std::streamsize>(n * 8)) ||
            !in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * 8)))
            throw ParseError("truncated token file " + path.string());
    }
    if (expected_adapter_hash && *expected_adapter_hash != s.adapter_hash_)
        throw StaleStoreError("token file " + path.string() + " was built with different adapters");
    s.check_consistent(kb);
    return s;
}

} // namespace kblam
