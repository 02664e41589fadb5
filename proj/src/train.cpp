#include "kblam/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "kblam/error.hpp"

namespace kblam {

namespace {

void reject_unknown(const nlohmann::json& j, std::string_view prefix, std::initializer_list<std::string_view> known) {
    if (!j.is_object()) throw ConfigError(std::string(prefix) + ": expected an object");
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown config key " + std::string(prefix) + "." + key);
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, std::string_view prefix) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key " + std::string(prefix) + "." + key + " has the wrong type");
    }
}

constexpr std::array<InstructionKind, kInstructionKindCount> kKinds = {
    InstructionKind::Simple, InstructionKind::MultiEntity, InstructionKind::OpenEnded, InstructionKind::Unanswerable};

} // namespace

// ---- BatchSpec ------------------------------------------------------------------------

BatchSpec BatchSpec::paper_scale() {
    BatchSpec b;
    b.batch_size = 400;
    b.micro_batches = 20;
    b.micro_batch_size = 20;
    b.mixture = {6, 6, 6, 2};
    b.kb_min = 10;
    b.kb_max = 100;
    return b;
}

void BatchSpec::validate() const {
    if (micro_batches * micro_batch_size != batch_size)
        throw ConfigError("batch.batch_size: must equal micro_batches * micro_batch_size");
    std::size_t total = 0;
    for (auto c : mixture) total += c;
    if (total != micro_batches) throw ConfigError("batch.mixture: counts must sum to micro_batches");
    if (kb_min < 1 || kb_min > kb_max) throw ConfigError("batch.kb_size_range: need 1 <= min <= max");
    if (multi_entities < 2) throw ConfigError("batch.multi_entities: must be >= 2");
    if (mixture[static_cast<std::size_t>(InstructionKind::MultiEntity)] > 0 && multi_entities > kb_min)
        throw ConfigError("batch.multi_entities: exceeds the smallest sample KB");
}

nlohmann::json BatchSpec::to_json() const {
    nlohmann::json mix = nlohmann::json::object();
    for (auto k : kKinds) mix[std::string(to_string(k))] = mixture[static_cast<std::size_t>(k)];
    return {{"batch_size", batch_size},
            {"micro_batches", micro_batches},
            {"micro_batch_size", micro_batch_size},
            {"mixture", mix},
            {"kb_size_range", {kb_min, kb_max}},
            {"multi_entities", multi_entities}};
}

BatchSpec BatchSpec::from_json(const nlohmann::json& j) {
    reject_unknown(j, "batch",
                   {"batch_size", "micro_batches", "micro_batch_size", "mixture", "kb_size_range", "multi_entities"});
    BatchSpec b;
    read_key(j, "batch_size", b.batch_size, "batch");
    read_key(j, "micro_batches", b.micro_batches, "batch");
    read_key(j, "micro_batch_size", b.micro_batch_size, "batch");
    read_key(j, "multi_entities", b.multi_entities, "batch");
    if (j.contains("mixture")) {
        const auto& m = j.at("mixture");
        reject_unknown(m, "batch.mixture", {"simple", "multi_entity", "open_ended", "unanswerable"});
        for (auto k : kKinds) {
            const std::string key(to_string(k));
            read_key(m, key.c_str(), b.mixture[static_cast<std::size_t>(k)], "batch.mixture");
        }
    }
    if (j.contains("kb_size_range")) {
        const auto& r = j.at("kb_size_range");
        if (!r.is_array() || r.size() != 2) throw ConfigError("config key batch.kb_size_range must be [min, max]");
        b.kb_min = r[0].get<std::size_t>();
        b.kb_max = r[1].get<std::size_t>();
    }
    b.validate();
    return b;
}

// ---- samples ---------------------------------------------------------------------------

InstructionSample build_training_sample(const KnowledgeBase& kb, Rng& rng, InstructionKind kind,
                                        std::size_t kb_min, std::size_t kb_max, std::size_t multi_entities) {
    if (kb_min < 1 || kb_min > kb_max) throw ConfigError("kb_size_range: need 1 <= min <= max");
    if (kb.size() < kb_max)
        throw ConfigError("KB has " + std::to_string(kb.size()) + " triples; sample KBs need up to " +
                          std::to_string(kb_max));
    InstructionSample s;
    s.kind = kind;
    const auto size = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(kb_min),
                                                         static_cast<std::int64_t>(kb_max)));
    s.kb_positions = rng.sample_without_replacement(kb.size(), size);

    std::vector<KnowledgeTriple> relevant;
    switch (kind) {
    case InstructionKind::Simple:
    case InstructionKind::OpenEnded:
        s.relevant = {s.kb_positions[rng.index(size)]};
        break;
    case InstructionKind::MultiEntity: {
        if (multi_entities > size) throw ConfigError("multi-entity sample needs more triples than its KB holds");
        for (auto i : rng.sample_without_replacement(size, multi_entities)) s.relevant.push_back(s.kb_positions[i]);
        break;
    }
    case InstructionKind::Unanswerable: {
        std::set<std::string_view> present;
        for (auto p : s.kb_positions) present.insert(kb[p].name);
        std::vector<std::size_t> candidates;
        for (std::size_t p = 0; p < kb.size(); ++p)
            if (!present.contains(kb[p].name)) candidates.push_back(p);
        if (candidates.empty()) throw ConfigError("every name of the KB occurs in the sample KB; nothing to refuse");
        relevant.push_back(kb[candidates[rng.index(candidates.size())]]);
        break;
    }
    }
    for (auto p : s.relevant) relevant.push_back(kb[p]);
    s.question = make_question(kind, relevant, rng.index(question_template_count(kind)));
    s.answer = make_answer(kind, relevant);
    return s;
}

TokenizedSample tokenize_sample(const InstructionSample& sample) {
    if (sample.answer.empty()) throw ConfigError("sample has an empty answer");
    std::vector<int> seq = prompt_tokens(sample.question);
    TokenizedSample out;
    out.prompt_len = seq.size();
    for (int t : encode_bytes(sample.answer)) seq.push_back(t);
    seq.push_back(tokens::kEos);
    out.inputs.assign(seq.begin(), seq.end() - 1);
    out.targets.assign(seq.begin() + 1, seq.end());
    out.weights.assign(out.targets.size(), 0.0);
    // target index i predicts seq[i + 1]; answer tokens start at seq[prompt_len]
    for (std::size_t i = out.prompt_len - 1; i < out.targets.size(); ++i) out.weights[i] = 1.0;
    return out;
}

std::vector<std::vector<int>> pretrain_corpus(const KnowledgeBase& kb, std::size_t samples, const BatchSpec& spec,
                                              std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, "pretrain-corpus"));
    std::vector<InstructionKind> cycle;
    for (auto kind : kKinds)
        for (std::size_t i = 0; i < spec.mixture[static_cast<std::size_t>(kind)]; ++i) cycle.push_back(kind);
    std::vector<std::vector<int>> out;
    out.reserve(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        const auto s =
            build_training_sample(kb, rng, cycle[i % cycle.size()], spec.kb_min, spec.kb_max, spec.multi_entities);
        auto seq = prompt_tokens(s.question);
        for (int t : encode_bytes(s.answer)) seq.push_back(t);
        seq.push_back(tokens::kEos);
        out.push_back(std::move(seq));
    }
    return out;
}

Tensor sample_loss(const TransformerWeights& weights, const AdapterSet& adapters,
                   std::span<const BaseEmbeddingPair> bases, const InstructionSample& sample, bool scale_enabled) {
    const TokenizedSample ts = tokenize_sample(sample);
    std::vector<BaseEmbeddingPair> sel;
    sel.reserve(sample.kb_positions.size());
    for (auto p : sample.kb_positions) {
        if (p >= bases.size()) throw ShapeError("sample KB position " + std::to_string(p) + " has no base embedding");
        sel.push_back(bases[p]);
    }
    const KnowledgeBlock block = encode_block(adapters, sel);
    ForwardOptions opts;
    opts.scale_enabled = scale_enabled;
    auto res = forward(weights, &adapters, block, ts.inputs, opts);
    return cross_entropy(res.logits, ts.targets, ts.weights);
}

// ---- config ------------------------------------------------------------------------------

nlohmann::json optimizer_to_json(const OptimizerConfig& c) {
    return {{"lr_start", c.lr_start}, {"lr_end", c.lr_end},         {"total_steps", c.total_steps},
            {"beta1", c.beta1},       {"beta2", c.beta2},           {"eps", c.eps},
            {"weight_decay", c.weight_decay}};
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    reject_unknown(j, "optimizer", {"lr_start", "lr_end", "total_steps", "beta1", "beta2", "eps", "weight_decay"});
    OptimizerConfig c;
    read_key(j, "lr_start", c.lr_start, "optimizer");
    read_key(j, "lr_end", c.lr_end, "optimizer");
    read_key(j, "total_steps", c.total_steps, "optimizer");
    read_key(j, "beta1", c.beta1, "optimizer");
    read_key(j, "beta2", c.beta2, "optimizer");
    read_key(j, "eps", c.eps, "optimizer");
    read_key(j, "weight_decay", c.weight_decay, "optimizer");
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    batch.validate();
    optimizer.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"batch", batch.to_json()},
            {"optimizer", optimizer_to_json(optimizer)},
            {"seed", seed},
            {"scale_enabled", scale_enabled}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    reject_unknown(j, "train", {"batch", "optimizer", "seed", "scale_enabled"});
    TrainConfig c;
    if (j.contains("batch")) c.batch = BatchSpec::from_json(j.at("batch"));
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
    read_key(j, "seed", c.seed, "train");
    read_key(j, "scale_enabled", c.scale_enabled, "train");
    return c;
}

// ---- training loop ------------------------------------------------------------------------

TrainResult train(const KnowledgeBase& kb, std::span<const BaseEmbeddingPair> bases,
                  const TransformerWeights& weights, const AdapterSet& init, const TrainConfig& cfg,
                  const std::function<void(const TrainLogEntry&)>& on_step) {
    cfg.validate();
    if (!weights.frozen()) throw ConfigError("base weights must be frozen before instruction tuning");
    if (bases.size() != kb.size()) throw ShapeError("base embeddings do not cover the KB");

    TrainResult result{init.clone(), {}};
    AdamW opt(result.adapters.parameters(), cfg.optimizer);
    Rng rng(derive_seed(cfg.seed, "train-samples"));
    const auto& spec = cfg.batch;
    const double inv_batch = 1.0 / static_cast<double>(spec.batch_size);

    for (std::size_t step = 0; step < cfg.optimizer.total_steps; ++step) {
        TrainLogEntry entry;
        entry.step = step;
        entry.lr = cosine_lr(cfg.optimizer, step);
        std::array<double, kInstructionKindCount> kind_sum{};
        std::array<std::size_t, kInstructionKindCount> kind_n{};
        double total = 0.0;

        for (auto kind : kKinds) {
            const auto k = static_cast<std::size_t>(kind);
            for (std::size_t mb = 0; mb < spec.mixture[k]; ++mb) {
                for (std::size_t i = 0; i < spec.micro_batch_size; ++i) {
                    const auto sample =
                        build_training_sample(kb, rng, kind, spec.kb_min, spec.kb_max, spec.multi_entities);
                    Tensor loss = sample_loss(weights, result.adapters, bases, sample, cfg.scale_enabled);
                    const double v = loss.item();
                    if (!std::isfinite(v))
                        throw NumericError("non-finite loss at step " + std::to_string(step) + " (" +
                                           std::string(to_string(kind)) + " sample)");
                    Tensor scaled = scale(loss, inv_batch);
                    backward(scaled);
                    kind_sum[k] += v;
                    ++kind_n[k];
                    total += v;
                }
            }
        }
        opt.step(entry.lr);
        entry.loss = total * inv_batch;
        for (std::size_t k = 0; k < kInstructionKindCount; ++k)
            entry.kind_loss[k] = kind_n[k] ? kind_sum[k] / static_cast<double>(kind_n[k])
                                           : std::numeric_limits<double>::quiet_NaN();
        result.log.push_back(entry);
        if (on_step) on_step(entry);
    }
    return result;
}

void write_train_log(std::span<const TrainLogEntry> log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,loss,lr,loss_simple,loss_multi_entity,loss_open_ended,loss_unanswerable\n";
    char buf[64];
    auto num = [&](double v) {
        if (std::isnan(v)) return std::string();
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto& e : log) {
        out << e.step << ',' << num(e.loss) << ',' << num(e.lr);
        for (double v : e.kind_loss) out << ',' << num(v);
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<double> window_means(std::span<const TrainLogEntry> log, std::size_t window) {
    if (window == 0) throw ConfigError("window must be >= 1");
    std::vector<double> out;
    for (std::size_t start = 0; start + window <= log.size(); start += window) {
        double s = 0.0;
        for (std::size_t i = start; i < start + window; ++i) s += log[i].loss;
        out.push_back(s / static_cast<double>(window));
    }
    return out;
}

} // namespace kblam
