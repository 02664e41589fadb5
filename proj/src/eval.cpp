#include "kblam/eval.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "kblam/error.hpp"
#include "kblam/train.hpp"

namespace kblam {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

const LayerTrace& find_trace(std::span<const LayerTrace> traces, std::size_t layer) {
    for (const auto& t : traces)
        if (t.layer == layer) return t;
    throw ConfigError("layer " + std::to_string(layer) + " was not traced");
}

} // namespace

KnowledgeBlock EvalModel::block(std::span<const std::size_t> positions) const {
    std::vector<KnowledgeToken> sel;
    sel.reserve(positions.size());
    for (auto p : positions) {
        if (p >= tokens.size()) throw ShapeError("no knowledge token for KB position " + std::to_string(p));
        sel.push_back(tokens[p]);
    }
    return make_block(sel, adapters->layers, adapters->dim);
}

// ---- retrieval ---------------------------------------------------------------------------------

std::vector<double> retrieval_score(std::span<const LayerTrace> traces, std::size_t layer, QueryAggregation agg) {
    const LayerTrace& t = find_trace(traces, layer);
    if (!t.injected) throw ConfigError("layer " + std::to_string(layer) + " does not attend to the KB");
    std::vector<double> s(t.m, 0.0);
    const std::size_t first = agg == QueryAggregation::LastToken ? t.n - 1 : 0;
    for (std::size_t row = first; row < t.n; ++row)
        for (std::size_t col = 0; col < t.m; ++col) s[col] += t.kb_head_mean(row, col);
    return s;
}

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
    std::size_t r = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] > scores[target] || (scores[i] == scores[target] && i < target)) ++r;
    return r;
}

void aggregate_retrieval(RetrievalResult& r) {
    std::size_t t1 = 0, t5 = 0;
    for (const auto& rec : r.records) {
        t1 += rec.rank < 1;
        t5 += rec.rank < 5;
    }
    const double n = static_cast<double>(std::max<std::size_t>(r.records.size(), 1));
    r.top1 = static_cast<double>(t1) / n;
    r.top5 = static_cast<double>(t5) / n;
}

std::vector<RetrievalResult> eval_retrieval(const KnowledgeBase& kb, std::span<const std::size_t> m_list,
                                            std::size_t n_questions, std::uint64_t seed,
                                            const RetrievalScorer& scorer, std::size_t layer) {
    std::vector<RetrievalResult> out;
    for (std::size_t m : m_list) {
        RetrievalResult res;
        res.m = m;
        res.layer = layer;
        Rng rng(derive_seed(seed, "retrieval/M=" + std::to_string(m)));
        for (std::size_t i = 0; i < n_questions; ++i) {
            const auto sample = build_training_sample(kb, rng, InstructionKind::Simple, m, m);
            RetrievalRecord rec;
            rec.index = i;
            rec.question = sample.question;
            rec.kb_positions = sample.kb_positions;
            rec.true_slot = static_cast<std::size_t>(
                std::find(sample.kb_positions.begin(), sample.kb_positions.end(), sample.relevant.front()) -
                sample.kb_positions.begin());
            rec.scores = scorer(sample);
            if (rec.scores.size() != m) throw ShapeError("retrieval scorer returned the wrong number of scores");
            rec.rank = rank_of(rec.scores, rec.true_slot);
            res.records.push_back(std::move(rec));
        }
        aggregate_retrieval(res);
        out.push_back(std::move(res));
    }
    return out;
}

RetrievalScorer attention_scorer(const EvalModel& model, std::size_t layer) {
    if (!model.weights->config.is_injection_layer(layer) || layer >= model.weights->config.layers)
        throw ConfigError("retrieval layer " + std::to_string(layer) + " is not an injection layer");
    return [model, layer](const InstructionSample& s) {
        NoGradGuard ng;
        const auto prompt = prompt_tokens(s.question);
        const auto block = model.block(s.kb_positions);
        ForwardOptions opts;
        opts.capture_trace = true;
        opts.scale_enabled = model.scale_enabled;
        const auto res = forward(*model.weights, model.adapters, block, prompt, opts);
        return retrieval_score(res.traces, layer);
    };
}

RetrievalScorer bm25_scorer(const KnowledgeBase& kb) {
    return [&kb](const InstructionSample& s) {
        std::vector<KnowledgeTriple> docs;
        for (auto p : s.kb_positions) docs.push_back(kb[p]);
        return bm25_scores(docs, s.question);
    };
}

// ---- refusal -------------------------------------------------------------------------------------

bool is_refusal(std::string_view output) { return output.starts_with(kRefusalAnswer); }

void aggregate_refusal(RefusalResult& r) {
    r.tp = r.fp = r.tn = r.fn = 0;
    for (const auto& rec : r.records) {
        if (!rec.answerable) (rec.refused ? r.tp : r.fn)++;
        else (rec.refused ? r.fp : r.tn)++;
    }
    r.precision = r.tp + r.fp ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
    r.recall = r.tp + r.fn ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
}

RefusalResult eval_refusal(const EvalModel& model, const KnowledgeBase& kb, std::size_t n_questions,
                           std::size_t answerable, std::size_t kb_size, std::uint64_t seed, std::size_t max_new) {
    if (answerable > n_questions) throw ConfigError("refusal: more answerable questions than questions");
    Rng rng(derive_seed(seed, "refusal"));
    std::vector<bool> order(n_questions, false);
    std::fill(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(answerable), true);
    rng.shuffle(order);
    RefusalResult res;
    for (std::size_t i = 0; i < n_questions; ++i) {
        const auto kind = order[i] ? InstructionKind::Simple : InstructionKind::Unanswerable;
        const auto sample = build_training_sample(kb, rng, kind, kb_size, kb_size);
        RefusalRecord rec;
        rec.index = i;
        rec.question = sample.question;
        rec.answerable = order[i];
        rec.kb_positions = sample.kb_positions;
        rec.output = generate_answer(model, sample, max_new);
        rec.refused = is_refusal(rec.output);
        res.records.push_back(std::move(rec));
    }
    aggregate_refusal(res);
    return res;
}

// ---- answers -------------------------------------------------------------------------------------

std::string normalize_answer(std::string_view s) {
    std::string out;
    bool space = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            space = !out.empty();
            continue;
        }
        if (space) out += ' ';
        space = false;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

namespace {

std::vector<std::string> clauses(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(';', start);
        out.push_back(normalize_answer(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

} // namespace

bool answer_matches(std::string_view reference, std::string_view output) {
    if (reference.find(';') == std::string_view::npos) return normalize_answer(reference) == normalize_answer(output);
    const auto ref = clauses(reference);
    const auto got = clauses(output);
    const std::set<std::string> have(got.begin(), got.end());
    return std::all_of(ref.begin(), ref.end(), [&](const std::string& c) { return have.contains(c); });
}

std::string generate_answer(const EvalModel& model, const InstructionSample& sample, std::size_t max_new) {
    const auto prompt = prompt_tokens(sample.question);
    const auto block = model.block(sample.kb_positions);
    GenerateOptions g;
    g.max_new = max_new;
    g.scale_enabled = model.scale_enabled;
    const auto ids = generate(*model.weights, model.adapters, block, prompt, g);
    return decode_bytes(ids);
}

AnswerResult eval_answer_accuracy(const EvalModel& model, std::span<const InstructionSample> samples,
                                  std::size_t max_new) {
    AnswerResult res;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        AnswerRecord rec;
        rec.index = i;
        rec.kind = samples[i].kind;
        rec.question = samples[i].question;
        rec.reference = samples[i].answer;
        rec.output = generate_answer(model, samples[i], max_new);
        rec.correct = answer_matches(rec.reference, rec.output);
        correct += rec.correct;
        res.records.push_back(std::move(rec));
    }
    res.accuracy = samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(samples.size());
    return res;
}

// ---- scaling -------------------------------------------------------------------------------------

std::uint64_t rectangular_kb_entries(const ModelConfig& cfg, std::size_t n, std::size_t m) {
    std::uint64_t injected = 0;
    for (std::size_t l = 0; l < cfg.layers; ++l) injected += cfg.is_injection_layer(l);
    return static_cast<std::uint64_t>(n) * m * cfg.heads * injected;
}

std::uint64_t causal_entries(const ModelConfig& cfg, std::size_t n) {
    return static_cast<std::uint64_t>(n) * (n + 1) / 2 * cfg.heads * cfg.layers;
}

std::string flatten_kb(std::span<const KnowledgeTriple> triples) {
    std::string out;
    for (const auto& t : triples) out += "The " + t.property + " of " + t.name + ": " + t.value + ". ";
    return out;
}

std::vector<int> fixed_length_prompt(std::string_view question, std::size_t n) {
    if (n < 2) throw ConfigError("prompt length must be >= 2");
    std::vector<int> out{tokens::kBos};
    for (int t : encode_bytes(question)) {
        if (out.size() + 1 >= n) break;
        out.push_back(t);
    }
    while (out.size() + 1 < n) out.push_back(' ');
    out.push_back(tokens::kSep);
    return out;
}

namespace {

template <typename F>
double median_ms(std::size_t repeats, F&& run) {
    run(); // warm-up
    std::vector<double> ms;
    for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    const std::size_t k = ms.size();
    return k % 2 ? ms[k / 2] : 0.5 * (ms[k / 2 - 1] + ms[k / 2]);
}

} // namespace

std::vector<ScalingRow> bench_scaling(const EvalModel& model, const KnowledgeBase& kb,
                                      std::span<const std::size_t> m_list, const BenchOptions& opts) {
    if (kb.empty()) throw ConfigError("bench: empty KB");
    NoGradGuard ng;
    const auto& cfg = model.weights->config;
    const std::size_t H = cfg.heads;
    std::vector<ScalingRow> rows;
    const std::string question = make_question(InstructionKind::Simple, std::span(&kb[0], 1), 1);
    const auto prompt = fixed_length_prompt(question, opts.n);

    for (std::size_t m : m_list) {
        std::vector<std::size_t> positions(m);
        for (std::size_t i = 0; i < m; ++i) positions[i] = i % kb.size();

        ScalingRow r;
        r.method = "rectangular";
        r.m = m;
        r.n = opts.n;
        r.context_len = opts.n;
        const auto block = model.block(positions);
        AttentionStats stats;
        ForwardOptions fo;
        fo.scale_enabled = model.scale_enabled;
        fo.stats = &stats;
        forward(*model.weights, model.adapters, block, prompt, fo);
        r.kb_entries = stats.kb_entries;
        r.prompt_entries = stats.prompt_entries;
        r.expected_entries = rectangular_kb_entries(cfg, opts.n, m) + causal_entries(cfg, opts.n);
        r.score_bytes = static_cast<std::uint64_t>(H) * opts.n * (m + opts.n) * sizeof(double);
        fo.stats = nullptr;
        r.median_ms = median_ms(opts.repeats, [&] { forward(*model.weights, model.adapters, block, prompt, fo); });
        rows.push_back(r);

        if (!opts.in_context || m > opts.in_context_max_m) continue;
        std::vector<KnowledgeTriple> triples;
        for (auto p : positions) triples.push_back(kb[p]);
        std::vector<int> seq = encode_bytes(flatten_kb(triples));
        const std::size_t t_m = seq.size();
        seq.insert(seq.begin(), prompt.begin(), prompt.begin() + 1); // BOS first
        seq.insert(seq.end(), prompt.begin() + 1, prompt.end());
        TransformerWeights wide = *model.weights;
        wide.config.max_prompt_len = std::max(wide.config.max_prompt_len, seq.size());

        ScalingRow c;
        c.method = "in_context";
        c.m = m;
        c.n = opts.n;
        c.context_len = opts.n + t_m;
        AttentionStats cs;
        ForwardOptions co;
        co.stats = &cs;
        const KnowledgeBlock none;
        forward(wide, nullptr, none, seq, co);
        c.kb_entries = cs.kb_entries;
        c.prompt_entries = cs.prompt_entries;
        c.expected_entries = causal_entries(cfg, c.context_len);
        c.score_bytes = static_cast<std::uint64_t>(H) * c.context_len * c.context_len * sizeof(double);
        co.stats = nullptr;
        c.median_ms = median_ms(opts.repeats, [&] { forward(wide, nullptr, none, seq, co); });
        rows.push_back(c);
    }
    return rows;
}

void write_scaling_csv(std::span<const ScalingRow> rows, const std::filesystem::path& path, bool include_timing) {
    auto out = open_out(path);
    out << "method,M,N,context_len," << (include_timing ? "median_ms," : "")
        << "entries,kb_entries,prompt_entries,expected_entries,score_bytes\n";
    for (const auto& r : rows) {
        out << r.method << ',' << r.m << ',' << r.n << ',' << r.context_len << ',';
        if (include_timing) out << fmt(r.median_ms) << ',';
        out << r.kb_entries + r.prompt_entries << ',' << r.kb_entries << ',' << r.prompt_entries << ','
            << r.expected_entries << ',' << r.score_bytes << '\n';
    }
}

// ---- diagnostics ---------------------------------------------------------------------------------

void export_attention_heatmap(std::span<const LayerTrace> traces, std::size_t layer, std::span<const int> prompt,
                              const std::filesystem::path& path) {
    const LayerTrace& t = find_trace(traces, layer);
    if (!t.injected) throw ConfigError("layer " + std::to_string(layer) + " does not attend to the KB");
    if (prompt.size() != t.n) throw ShapeError("heatmap: prompt length differs from the traced length");
    auto out = open_out(path);
    out << "row,token";
    for (std::size_t m = 0; m < t.m; ++m) out << ",kb" << m;
    out << '\n';
    for (std::size_t row = 0; row < t.n; ++row) {
        out << row << ',' << prompt[row];
        for (std::size_t m = 0; m < t.m; ++m) out << ',' << fmt(t.kb_head_mean(row, m));
        out << '\n';
    }
}

std::vector<LayerVariance> layer_variance_report(std::span<const KnowledgeToken> toks, std::size_t layers,
                                                 std::size_t dim) {
    std::vector<LayerVariance> out;
    const double m = static_cast<double>(toks.size());
    for (std::size_t l = 0; l < layers; ++l) {
        LayerVariance lv;
        lv.layer = l;
        if (!toks.empty()) {
            auto var = [&](auto member) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dim; ++c) {
                    const std::size_t idx = l * dim + c;
                    double mean = 0.0;
                    for (const auto& t : toks) mean += (t.*member)[idx];
                    mean /= m;
                    double ss = 0.0;
                    for (const auto& t : toks) ss += ((t.*member)[idx] - mean) * ((t.*member)[idx] - mean);
                    acc += ss / m;
                }
                return acc / static_cast<double>(dim);
            };
            lv.key_variance = var(&KnowledgeToken::keys);
            lv.value_variance = var(&KnowledgeToken::values);
        }
        out.push_back(lv);
    }
    return out;
}

// ---- result files --------------------------------------------------------------------------------

void write_retrieval_records(std::span<const RetrievalResult> results, const std::filesystem::path& path) {
    auto out = open_out(path);
    for (const auto& r : results)
        for (const auto& rec : r.records)
            out << nlohmann::json{{"M", r.m},
                                  {"layer", r.layer},
                                  {"index", rec.index},
                                  {"question", rec.question},
                                  {"kb_positions", rec.kb_positions},
                                  {"true_slot", rec.true_slot},
                                  {"scores", rec.scores},
                                  {"rank", rec.rank}}
                       .dump()
                << '\n';
}

void write_retrieval_csv(std::span<const RetrievalResult> results, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "M,layer,n,top1,top5\n";
    for (const auto& r : results)
        out << r.m << ',' << r.layer << ',' << r.records.size() << ',' << fmt(r.top1) << ',' << fmt(r.top5) << '\n';
}

void write_refusal_records(const RefusalResult& r, const std::filesystem::path& path) {
    auto out = open_out(path);
    for (const auto& rec : r.records)
        out << nlohmann::json{{"index", rec.index},
                              {"question", rec.question},
                              {"answerable", rec.answerable},
                              {"kb_positions", rec.kb_positions},
                              {"output", rec.output},
                              {"refused", rec.refused}}
                   .dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)
            << '\n';
}

void write_refusal_csv(const RefusalResult& r, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "tp,fp,tn,fn,precision,recall\n"
        << r.tp << ',' << r.fp << ',' << r.tn << ',' << r.fn << ',' << fmt(r.precision) << ',' << fmt(r.recall)
        << '\n';
}

void write_answer_records(const AnswerResult& r, const std::filesystem::path& path) {
    auto out = open_out(path);
    for (const auto& rec : r.records)
        out << nlohmann::json{{"index", rec.index},
                              {"kind", std::string(to_string(rec.kind))},
                              {"question", rec.question},
                              {"reference", rec.reference},
                              {"output", rec.output},
                              {"correct", rec.correct}}
                   .dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)
            << '\n';
}

void write_answer_csv(const AnswerResult& r, const std::filesystem::path& path) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> by_kind;
    for (const auto& rec : r.records) {
        auto& [n, c] = by_kind[std::string(to_string(rec.kind))];
        ++n;
        c += rec.correct;
    }
    auto out = open_out(path);
    out << "kind,n,correct,accuracy\n";
    for (const auto& [kind, nc] : by_kind)
        out << kind << ',' << nc.first << ',' << nc.second << ','
            << fmt(static_cast<double>(nc.second) / static_cast<double>(nc.first)) << '\n';
    std::size_t correct = 0;
    for (const auto& rec : r.records) correct += rec.correct;
    out << "all," << r.records.size() << ',' << correct << ',' << fmt(r.accuracy) << '\n';
}

void write_layer_variance_csv(std::span<const LayerVariance> rows, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "layer,key_variance,value_variance\n";
    for (const auto& r : rows) out << r.layer << ',' << fmt(r.key_variance) << ',' << fmt(r.value_variance) << '\n';
}

namespace {

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what(), n);
        }
    }
    return out;
}

} // namespace

std::vector<RetrievalResult> read_retrieval_records(const std::filesystem::path& path) {
    std::vector<RetrievalResult> out;
    for (const auto& j : read_jsonl(path)) {
        const auto m = j.at("M").get<std::size_t>();
        const auto layer = j.at("layer").get<std::size_t>();
        if (out.empty() || out.back().m != m || out.back().layer != layer) {
            out.emplace_back();
            out.back().m = m;
            out.back().layer = layer;
        }
        RetrievalRecord rec;
        rec.index = j.at("index").get<std::size_t>();
        rec.question = j.at("question").get<std::string>();
        rec.kb_positions = j.at("kb_positions").get<std::vector<std::size_t>>();
        rec.true_slot = j.at("true_slot").get<std::size_t>();
        rec.scores = j.at("scores").get<std::vector<double>>();
        rec.rank = j.at("rank").get<std::size_t>();
        out.back().records.push_back(std::move(rec));
    }
    for (auto& r : out) aggregate_retrieval(r);
    return out;
}

RefusalResult read_refusal_records(const std::filesystem::path& path) {
    RefusalResult r;
    for (const auto& j : read_jsonl(path)) {
        RefusalRecord rec;
        rec.index = j.at("index").get<std::size_t>();
        rec.question = j.at("question").get<std::string>();
        rec.answerable = j.at("answerable").get<bool>();
        rec.kb_positions = j.at("kb_positions").get<std::vector<std::size_t>>();
        rec.output = j.at("output").get<std::string>();
        rec.refused = j.at("refused").get<bool>();
        r.records.push_back(std::move(rec));
    }
    aggregate_refusal(r);
    return r;
}

} // namespace kblam
