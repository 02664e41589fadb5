// kblam: command-line pipeline (synth, embed, pretrain, train, encode, ask, eval, bench, export).

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kblam/adapters.hpp"
#include "kblam/embed.hpp"
#include "kblam/error.hpp"
#include "kblam/eval.hpp"
#include "kblam/kb.hpp"
#include "kblam/model.hpp"
#include "kblam/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace kblam;

namespace {

// ---- configuration ------------------------------------------------------------------------

struct EmbedSettings {
    std::string backend = "hash"; // hash | http
    std::size_t dim = 256;
    std::size_t min_n = 3;
    std::size_t max_n = 5;
    std::string endpoint;
    std::string model;
    double timeout_seconds = 30.0;
    int retries = 3;
    std::string cache;

    json to_json() const {
        json j{{"backend", backend}, {"dim", dim}, {"min_n", min_n}, {"max_n", max_n}};
        if (backend == "http") {
            j["endpoint"] = endpoint;
            j["model"] = model;
            j["timeout_seconds"] = timeout_seconds;
            j["retries"] = retries;
        }
        if (!cache.empty()) j["cache"] = cache;
        return j;
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    PretrainConfig pretrain;
    std::size_t pretrain_samples = 4000;
    TrainConfig train;
    SynthesisConfig synth = SynthesisConfig::desk_default();
    EmbedSettings embed;
    std::size_t eval_questions = 100;
    bool scale_enabled = true;

    json to_json() const {
        json synth_j{{"seed", synth.seed}, {"num_names", synth.num_names}, {"properties", synth.properties}};
        return {{"seed", seed},
                {"model", model.to_json()},
                {"pretrain",
                 {{"steps", pretrain.steps},
                  {"batch_size", pretrain.batch_size},
                  {"samples", pretrain_samples},
                  {"optimizer", optimizer_to_json(pretrain.optimizer)}}},
                {"train", train.to_json()},
                {"synth", synth_j},
                {"embed", embed.to_json()},
                {"eval", {{"questions", eval_questions}, {"scale_enabled", scale_enabled}}}};
    }
};

void reject_unknown(const json& j, const std::string& prefix, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError("config section " + prefix + " must be an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (const char* kk : known) ok |= k == kk;
        if (!ok) throw ConfigError("unknown config key " + (prefix.empty() ? k : prefix + "." + k));
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& prefix) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key " + prefix + "." + key + " has the wrong type");
    }
}

void apply_file(RunConfig& rc, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    reject_unknown(j, "", {"seed", "model", "pretrain", "train", "synth", "embed", "eval"});
    read(j, "seed", rc.seed, "");
    if (j.contains("model")) rc.model = ModelConfig::from_json(j["model"]);
    if (j.contains("pretrain")) {
        const auto& p = j["pretrain"];
        reject_unknown(p, "pretrain", {"steps", "batch_size", "samples", "optimizer"});
        read(p, "steps", rc.pretrain.steps, "pretrain");
        read(p, "batch_size", rc.pretrain.batch_size, "pretrain");
        read(p, "samples", rc.pretrain_samples, "pretrain");
        rc.pretrain.optimizer.total_steps = rc.pretrain.steps;
        if (p.contains("optimizer")) rc.pretrain.optimizer = optimizer_from_json(p["optimizer"]);
    }
    if (j.contains("train")) rc.train = TrainConfig::from_json(j["train"]);
    if (j.contains("synth")) {
        const auto& s = j["synth"];
        reject_unknown(s, "synth", {"seed", "num_names", "properties"});
        read(s, "seed", rc.synth.seed, "synth");
        read(s, "num_names", rc.synth.num_names, "synth");
        read(s, "properties", rc.synth.properties, "synth");
    }
    if (j.contains("embed")) {
        const auto& e = j["embed"];
        if (e.contains("api_key")) throw ConfigError("config key embed.api_key is not allowed; use EMBED_API_KEY");
        reject_unknown(e, "embed",
                       {"backend", "dim", "min_n", "max_n", "endpoint", "model", "timeout_seconds", "retries", "cache"});
        read(e, "backend", rc.embed.backend, "embed");
        read(e, "dim", rc.embed.dim, "embed");
        read(e, "min_n", rc.embed.min_n, "embed");
        read(e, "max_n", rc.embed.max_n, "embed");
        read(e, "endpoint", rc.embed.endpoint, "embed");
        read(e, "model", rc.embed.model, "embed");
        read(e, "timeout_seconds", rc.embed.timeout_seconds, "embed");
        read(e, "retries", rc.embed.retries, "embed");
        read(e, "cache", rc.embed.cache, "embed");
        if (rc.embed.backend != "hash" && rc.embed.backend != "http")
            throw ConfigError("config key embed.backend must be \"hash\" or \"http\"");
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        reject_unknown(e, "eval", {"questions", "scale_enabled"});
        read(e, "questions", rc.eval_questions, "eval");
        read(e, "scale_enabled", rc.scale_enabled, "eval");
    }
}

std::shared_ptr<EmbeddingBackend> make_backend(const EmbedSettings& s) {
    std::shared_ptr<EmbeddingBackend> inner;
    if (s.backend == "http") {
        HttpRemoteConfig hc;
        hc.endpoint = s.endpoint;
        hc.model = s.model;
        hc.dim = s.dim;
        hc.timeout_seconds = s.timeout_seconds;
        hc.retries = s.retries;
        inner = std::make_shared<HttpRemoteBackend>(HttpRemoteConfig::from_env(hc));
    } else {
        inner = std::make_shared<HashNgramBackend>(s.dim, s.min_n, s.max_n);
    }
    if (s.cache.empty()) return inner;
    return std::make_shared<CachedBackend>(inner, std::make_shared<EmbeddingCache>(s.cache));
}

// ---- run directory ------------------------------------------------------------------------

class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".kblam.lock") {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) throw IoError("token store directory is locked (" + path_.string() + ")");
    }
    ~DirLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

fs::path prepare_out(const std::string& out, const RunConfig& rc, const std::string& command, const json& extra = {}) {
    if (out.empty()) throw ConfigError("--out is required");
    fs::create_directories(out);
    json snap = rc.to_json();
    snap["command"] = command;
    if (!extra.is_null()) snap["inputs"] = extra;
    std::ofstream f(fs::path(out) / "resolved_config.json", std::ios::trunc);
    f << snap.dump(2) << '\n';
    return out;
}

void require_file(const std::string& path, const char* flag) {
    if (path.empty()) throw ConfigError(std::string(flag) + " is required");
    if (!fs::exists(path)) throw IoError(std::string(flag) + " " + path + " does not exist");
}

std::vector<std::size_t> parse_m_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto pos = s.find(',', start);
        const auto item = s.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
        try {
            std::size_t used = 0;
            const auto v = std::stoull(item, &used);
            if (used != item.size() || v == 0) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--M-list: bad entry '" + item + "'");
        }
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

KnowledgeTriple parse_update(const std::string& s) {
    KnowledgeTriple t;
    std::size_t start = 0;
    while (start < s.size()) {
        auto eq = s.find('=', start);
        if (eq == std::string::npos) throw ConfigError("--kb-update: expected key=value pairs");
        const auto key = s.substr(start, eq - start);
        // value runs to the next ",name=" / ",property=" / ",value=" or the end
        std::size_t next = std::string::npos;
        for (const char* k : {",name=", ",property=", ",value="}) next = std::min(next, s.find(k, eq + 1));
        const auto val = s.substr(eq + 1, next == std::string::npos ? std::string::npos : next - eq - 1);
        if (key == "name") t.name = val;
        else if (key == "property") t.property = val;
        else if (key == "value") t.value = val;
        else throw ConfigError("--kb-update: unknown field '" + key + "'");
        if (next == std::string::npos) break;
        start = next + 1;
    }
    validate_triple(t);
    return t;
}

struct Loaded {
    TransformerWeights weights;
    AdapterSet adapters;
};

Loaded load_models(const std::string& base, const std::string& ckpt, const RunConfig& rc,
                   const std::optional<std::size_t>& inject_every) {
    require_file(base, "--base");
    require_file(ckpt, "--checkpoint");
    Loaded m{TransformerWeights::load(base), AdapterSet::load(ckpt)};
    m.weights.config.scale_C = rc.model.scale_C;
    if (inject_every) m.weights.config.inject_every = *inject_every;
    m.weights.config.retrieval_layer = rc.model.retrieval_layer;
    m.weights.config.validate();
    if (m.adapters.layers != m.weights.config.layers || m.adapters.dim != m.weights.config.dim)
        throw ConfigError("adapter checkpoint does not match the base model");
    return m;
}

std::vector<KnowledgeToken> tokens_for(const std::string& tokens_path, const KnowledgeBase& kb,
                                       const AdapterSet& adapters, const RunConfig& rc) {
    if (!tokens_path.empty()) {
        require_file(tokens_path, "--tokens");
        return load_tokens(tokens_path, kb, adapters.hash()).tokens();
    }
    auto backend = make_backend(rc.embed);
    return TokenStore::build(kb, adapters, *backend).tokens();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-token augmented language model pipeline"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    RunConfig rc;
    std::string config_path, kb_path, tokens_path, base_path, ckpt_path, out_dir, m_list = "16", question;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> layer, inject_every, names, holdout_names, steps, questions;
    std::optional<double> scale_c;
    bool no_scale = false, evidence = false;
    std::vector<std::string> updates;
    std::size_t bench_n = 32, repeats = 5, in_context_max = 16;

    auto common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "JSON run configuration");
        c->add_option("--seed", seed, "Random seed");
        c->add_option("--out", out_dir, "Output directory")->required();
    };
    auto model_flags = [&](CLI::App* c) {
        c->add_option("--base", base_path, "Base model checkpoint");
        c->add_option("--checkpoint", ckpt_path, "Adapter checkpoint");
        c->add_option("--kb", kb_path, "Knowledge base (JSONL)");
        c->add_option("--tokens", tokens_path, "Knowledge token file");
        c->add_option("--scale-C", scale_c, "Knowledge-score scaling constant C (default 100)");
        c->add_flag("--no-scale", no_scale, "Disable knowledge-score scaling at inference");
        c->add_option("--inject-every", inject_every, "Knowledge tokens enter every K-th layer (default 1)");
        c->add_option("--layer", layer, "Layer used for attention-based retrieval");
    };

    auto* synth = app.add_subcommand("synth", "Synthesize a knowledge base");
    common(synth);
    synth->add_option("--names", names, "Number of entity names");
    synth->add_option("--holdout-names", holdout_names, "Names written to a separate evaluation KB");

    auto* embed = app.add_subcommand("embed", "Embed a KB's key and value strings into a cache file");
    common(embed);
    embed->add_option("--kb", kb_path, "Knowledge base (JSONL)")->required();

    auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base model on synthetic Q&A text");
    common(pretrain);
    pretrain->add_option("--steps", steps, "Optimizer steps");

    auto* train_cmd = app.add_subcommand("train", "Instruction-tune adapters with the base model frozen");
    common(train_cmd);
    train_cmd->add_option("--kb", kb_path, "Training KB (JSONL)")->required();
    train_cmd->add_option("--base", base_path, "Base model checkpoint")->required();
    train_cmd->add_option("--checkpoint", ckpt_path, "Adapter checkpoint to start from");
    train_cmd->add_option("--steps", steps, "Optimizer steps");
    train_cmd->add_option("--inject-every", inject_every, "Knowledge tokens enter every K-th layer (default 1)");

    auto* encode = app.add_subcommand("encode", "Encode a KB into knowledge tokens");
    common(encode);
    encode->add_option("--kb", kb_path, "Knowledge base (JSONL)")->required();
    encode->add_option("--checkpoint", ckpt_path, "Adapter checkpoint")->required();

    auto* ask = app.add_subcommand("ask", "Answer a question against a KB");
    common(ask);
    model_flags(ask);
    ask->add_option("--question,-q", question, "Question text")->required();
    ask->add_option("--kb-update", updates, "name=...,property=...,value=... (repeatable)");
    ask->add_flag("--evidence", evidence, "Print the five most attended triples");

    auto* eval = app.add_subcommand("eval", "Evaluate retrieval, refusal or answers");
    eval->require_subcommand(1);
    auto* eval_ret = eval->add_subcommand("retrieval", "Attention-as-retriever top-1/top-5 accuracy");
    auto* eval_ref = eval->add_subcommand("refusal", "Refusal precision/recall (80/20)");
    auto* eval_ans = eval->add_subcommand("answers", "Normalized exact-match answer accuracy");
    for (auto* c : {eval_ret, eval_ref, eval_ans}) {
        common(c);
        model_flags(c);
        c->add_option("--M-list", m_list, "Comma-separated KB sizes");
        c->add_option("--questions", questions, "Questions per KB size");
    }

    auto* bench = app.add_subcommand("bench", "Scaling benchmark: knowledge tokens vs. in-context KB");
    common(bench);
    model_flags(bench);
    bench->add_option("--M-list", m_list, "Comma-separated KB sizes");
    bench->add_option("--prompt-tokens", bench_n, "Fixed prompt length N");
    bench->add_option("--repeats", repeats, "Timed repeats per point");
    bench->add_option("--in-context-max", in_context_max, "Largest M for the in-context baseline");

    auto* exp = app.add_subcommand("export", "Export attention heatmaps or per-layer token variance");
    exp->require_subcommand(1);
    auto* exp_heat = exp->add_subcommand("heatmap", "Head-averaged knowledge attention per query token");
    auto* exp_var = exp->add_subcommand("layer-variance", "Per-layer variance of knowledge keys/values");
    for (auto* c : {exp_heat, exp_var}) {
        common(c);
        model_flags(c);
    }
    exp_heat->add_option("--question,-q", question, "Question text")->required();
    exp_heat->add_option("--M-list", m_list, "KB size (first entry used)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (!config_path.empty()) apply_file(rc, config_path);
        if (seed) rc.seed = *seed;
        if (scale_c) rc.model.scale_C = *scale_c;
        if (inject_every) rc.model.inject_every = *inject_every;
        if (layer) rc.model.retrieval_layer = *layer;
        if (no_scale) rc.scale_enabled = false;
        if (questions) rc.eval_questions = *questions;
        rc.model.validate();
        const json inputs{{"kb", kb_path}, {"tokens", tokens_path}, {"base", base_path}, {"checkpoint", ckpt_path}};

        if (synth->parsed()) {
            if (seed) rc.synth.seed = *seed;
            if (names) rc.synth.num_names = *names;
            const auto out = prepare_out(out_dir, rc, "synth");
            const auto kb = synthesize_kb(rc.synth);
            const std::size_t held = holdout_names.value_or(0);
            if (held == 0) {
                save_kb(kb, out / "kb.jsonl");
                std::cout << "wrote " << kb.size() << " triples to " << (out / "kb.jsonl").string() << '\n';
                return 0;
            }
            if (held >= rc.synth.num_names) throw ConfigError("--holdout-names must be below --names");
            const std::size_t per = rc.synth.properties.size();
            const std::size_t cut = (rc.synth.num_names - held) * per;
            std::vector<KnowledgeTriple> a(kb.triples().begin(), kb.triples().begin() + static_cast<long>(cut));
            std::vector<KnowledgeTriple> b(kb.triples().begin() + static_cast<long>(cut), kb.triples().end());
            save_kb(KnowledgeBase(a), out / "kb_train.jsonl");
            save_kb(KnowledgeBase(b), out / "kb_eval.jsonl");
            std::cout << "wrote " << a.size() << " training and " << b.size() << " evaluation triples to "
                      << out.string() << '\n';
            return 0;
        }

        if (embed->parsed()) {
            const auto out = prepare_out(out_dir, rc, "embed", inputs);
            require_file(kb_path, "--kb");
            const auto kb = load_kb(kb_path);
            rc.embed.cache = (out / "embeddings.cache").string();
            auto backend = make_backend(rc.embed);
            for (const auto& t : kb.triples()) encode_triple(*backend, t);
            std::cout << "embedded " << kb.size() << " triples into " << rc.embed.cache << '\n';
            return 0;
        }

        if (pretrain->parsed()) {
            if (steps) {
                rc.pretrain.steps = *steps;
                rc.pretrain.optimizer.total_steps = *steps;
            }
            rc.pretrain.seed = rc.seed;
            const auto out = prepare_out(out_dir, rc, "pretrain");
            auto corpus_cfg = rc.synth;
            corpus_cfg.seed = derive_seed(rc.seed, "pretrain-kb");
            const auto corpus_kb = synthesize_kb(corpus_cfg);
            const auto corpus = pretrain_corpus(corpus_kb, rc.pretrain_samples, rc.train.batch, rc.seed);
            std::ofstream log(out / "pretrain_log.csv");
            log << "step,loss,lr\n";
            set_checked_mode(false);
            auto w = pretrain_base(corpus, rc.model, rc.pretrain, nullptr, [&](const PretrainLogEntry& e) {
                char buf[96];
                std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.step, e.loss, e.lr);
                log << buf;
            });
            w.save(out / "base.ckpt");
            std::cout << "wrote " << (out / "base.ckpt").string() << '\n';
            return 0;
        }

        if (train_cmd->parsed()) {
            if (steps) rc.train.optimizer.total_steps = *steps;
            rc.train.seed = rc.seed;
            const auto out = prepare_out(out_dir, rc, "train", inputs);
            require_file(kb_path, "--kb");
            require_file(base_path, "--base");
            const auto kb = load_kb(kb_path);
            auto w = TransformerWeights::load(base_path);
            if (inject_every) w.config.inject_every = *inject_every;
            auto backend = make_backend(rc.embed);
            std::vector<BaseEmbeddingPair> bases;
            for (const auto& t : kb.triples()) bases.push_back(encode_triple(*backend, t));
            const AdapterSet init = ckpt_path.empty() ? AdapterSet::init(w, backend->dim(), rc.seed)
                                                      : AdapterSet::load(ckpt_path);
            std::ofstream(out / "training_config.json") << rc.train.to_json().dump(2) << '\n';
            set_checked_mode(false);
            auto res = train(kb, bases, w, init, rc.train);
            res.adapters.save(out / "adapters.ckpt");
            write_train_log(res.log, out / "train_log.csv");
            std::cout << "wrote " << (out / "adapters.ckpt").string() << " (final loss " << res.log.back().loss
                      << ")\n";
            return 0;
        }

        if (encode->parsed()) {
            const auto out = prepare_out(out_dir, rc, "encode", inputs);
            require_file(kb_path, "--kb");
            require_file(ckpt_path, "--checkpoint");
            DirLock lock(out);
            const auto kb = load_kb(kb_path);
            const auto adapters = AdapterSet::load(ckpt_path);
            auto backend = make_backend(rc.embed);
            const auto store = TokenStore::build(kb, adapters, *backend);
            save_tokens(store, out / "tokens.bin");
            std::cout << "encoded " << store.size() << " knowledge tokens into " << (out / "tokens.bin").string()
                      << '\n';
            return 0;
        }

        if (ask->parsed()) {
            const auto out = prepare_out(out_dir, rc, "ask", inputs);
            require_file(kb_path, "--kb");
            auto m = load_models(base_path, ckpt_path, rc, inject_every);
            auto kb = load_kb(kb_path);
            auto backend = make_backend(rc.embed);
            TokenStore store;
            if (!tokens_path.empty()) {
                require_file(tokens_path, "--tokens");
                store = load_tokens(tokens_path, kb, m.adapters.hash());
            } else {
                store = TokenStore::build(kb, m.adapters, *backend);
            }
            if (!updates.empty()) {
                DirLock lock(out);
                for (const auto& u : updates) {
                    const auto pos = upsert_triple(store, kb, parse_update(u), m.adapters, *backend);
                    std::cerr << "updated position " << pos << " (" << store.encode_calls() << " token encodes)\n";
                }
                save_kb(kb, out / "kb.jsonl");
                save_tokens(store, out / "tokens.bin");
            }
            const auto block = store.block();
            const auto prompt = prompt_tokens(question);
            GenerateOptions g;
            g.scale_enabled = rc.scale_enabled;
            const auto answer = decode_bytes(generate(m.weights, &m.adapters, block, prompt, g));
            std::cout << answer << '\n';
            if (evidence) {
                NoGradGuard ng;
                ForwardOptions fo;
                fo.capture_trace = true;
                fo.scale_enabled = rc.scale_enabled;
                const auto res = forward(m.weights, &m.adapters, block, prompt, fo);
                const auto scores = retrieval_score(res.traces, m.weights.config.retrieval_layer);
                std::vector<std::size_t> order(scores.size());
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
                for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) {
                    const auto& t = kb[order[i]];
                    std::printf("  %.6f  [%zu] %s | %s | %s\n", scores[order[i]], order[i], t.name.c_str(),
                                t.property.c_str(), t.value.c_str());
                }
            }
            return 0;
        }

        if (eval->parsed()) {
            const std::string which = eval_ret->parsed() ? "retrieval" : eval_ref->parsed() ? "refusal" : "answers";
            const auto out = prepare_out(out_dir, rc, "eval " + which, inputs);
            require_file(kb_path, "--kb");
            const auto kb = load_kb(kb_path);
            auto m = load_models(base_path, ckpt_path, rc, inject_every);
            const auto toks = tokens_for(tokens_path, kb, m.adapters, rc);
            EvalModel em{&m.weights, &m.adapters, toks, rc.scale_enabled};
            const auto ms = parse_m_list(m_list);
            if (which == "retrieval") {
                const std::size_t l = m.weights.config.retrieval_layer;
                const auto res = eval_retrieval(kb, ms, rc.eval_questions, rc.seed, attention_scorer(em, l), l);
                write_retrieval_records(res, out / "retrieval.jsonl");
                write_retrieval_csv(res, out / "retrieval.csv");
                const auto bm = eval_retrieval(kb, ms, rc.eval_questions, rc.seed, bm25_scorer(kb), l);
                write_retrieval_records(bm, out / "retrieval_bm25.jsonl");
                write_retrieval_csv(bm, out / "retrieval_bm25.csv");
                for (std::size_t i = 0; i < res.size(); ++i)
                    std::printf("M=%zu top1=%.4f top5=%.4f (bm25 top1=%.4f top5=%.4f)\n", res[i].m, res[i].top1,
                                res[i].top5, bm[i].top1, bm[i].top5);
            } else if (which == "refusal") {
                const auto res = eval_refusal(em, kb, rc.eval_questions, rc.eval_questions * 4 / 5, ms.front(), rc.seed);
                write_refusal_records(res, out / "refusal.jsonl");
                write_refusal_csv(res, out / "refusal.csv");
                std::printf("tp=%zu fp=%zu tn=%zu fn=%zu precision=%.4f recall=%.4f\n", res.tp, res.fp, res.tn,
                            res.fn, res.precision, res.recall);
            } else {
                Rng rng(derive_seed(rc.seed, "answers"));
                std::vector<InstructionSample> samples;
                const std::array kinds{InstructionKind::Simple, InstructionKind::MultiEntity,
                                       InstructionKind::OpenEnded, InstructionKind::Unanswerable};
                for (std::size_t i = 0; i < rc.eval_questions; ++i)
                    samples.push_back(
                        build_training_sample(kb, rng, kinds[i % kinds.size()], ms.front(), ms.front()));
                const auto res = eval_answer_accuracy(em, samples);
                write_answer_records(res, out / "answers.jsonl");
                write_answer_csv(res, out / "answers.csv");
                std::printf("accuracy=%.4f over %zu questions\n", res.accuracy, res.records.size());
            }
            return 0;
        }

        if (bench->parsed()) {
            const auto out = prepare_out(out_dir, rc, "bench", inputs);
            require_file(kb_path, "--kb");
            const auto kb = load_kb(kb_path);
            auto m = load_models(base_path, ckpt_path, rc, inject_every);
            const auto toks = tokens_for(tokens_path, kb, m.adapters, rc);
            EvalModel em{&m.weights, &m.adapters, toks, rc.scale_enabled};
            BenchOptions bo;
            bo.n = bench_n;
            bo.repeats = repeats;
            bo.in_context_max_m = in_context_max;
            const auto ms = parse_m_list(m_list);
            const auto rows = bench_scaling(em, kb, ms, bo);
            write_scaling_csv(rows, out / "scaling.csv");
            for (const auto& r : rows)
                std::printf("%-12s M=%-6zu median_ms=%.3f entries=%llu\n", r.method.c_str(), r.m, r.median_ms,
                            static_cast<unsigned long long>(r.kb_entries + r.prompt_entries));
            return 0;
        }

        if (exp->parsed()) {
            const bool heat = exp_heat->parsed();
            const auto out = prepare_out(out_dir, rc, heat ? "export heatmap" : "export layer-variance", inputs);
            require_file(kb_path, "--kb");
            const auto kb = load_kb(kb_path);
            auto m = load_models(base_path, ckpt_path, rc, inject_every);
            const auto toks = tokens_for(tokens_path, kb, m.adapters, rc);
            if (!heat) {
                const auto rows = layer_variance_report(toks, m.adapters.layers, m.adapters.dim);
                write_layer_variance_csv(rows, out / "layer_variance.csv");
                for (const auto& r : rows)
                    std::printf("layer %zu key_var=%.6g value_var=%.6g\n", r.layer, r.key_variance, r.value_variance);
                return 0;
            }
            const std::size_t n = std::min(parse_m_list(m_list).front(), kb.size());
            std::vector<std::size_t> positions(n);
            for (std::size_t i = 0; i < n; ++i) positions[i] = i;
            EvalModel em{&m.weights, &m.adapters, toks, rc.scale_enabled};
            const auto prompt = prompt_tokens(question);
            NoGradGuard ng;
            ForwardOptions fo;
            fo.capture_trace = true;
            fo.scale_enabled = rc.scale_enabled;
            const auto res = forward(m.weights, &m.adapters, em.block(positions), prompt, fo);
            export_attention_heatmap(res.traces, m.weights.config.retrieval_layer, prompt, out / "heatmap.csv");
            std::cout << "wrote " << (out / "heatmap.csv").string() << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
