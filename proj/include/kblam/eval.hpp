#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kblam/adapters.hpp"
#include "kblam/kb.hpp"
#include "kblam/model.hpp"

namespace kblam {

/// Frozen model, adapters and the knowledge tokens of a KB (aligned with its positions).
struct EvalModel {
    const TransformerWeights* weights = nullptr;
    const AdapterSet* adapters = nullptr;
    std::span<const KnowledgeToken> tokens;
    bool scale_enabled = false;

    KnowledgeBlock block(std::span<const std::size_t> positions) const;
};

// ---- attention as retriever ---------------------------------------------------------------

enum class QueryAggregation { Sum, LastToken };

/// Knowledge-part attention of `layer`, averaged over heads and aggregated over prompt
/// query positions: one score per knowledge token. ConfigError if the layer does not
/// see the KB or was not traced.
std::vector<double> retrieval_score(std::span<const LayerTrace> traces, std::size_t layer,
                                    QueryAggregation agg = QueryAggregation::Sum);

/// Position of `target` when scores are sorted descending (ties broken by lower index).
std::size_t rank_of(std::span<const double> scores, std::size_t target);

struct RetrievalRecord {
    std::size_t index = 0;
    std::string question;
    std::vector<std::size_t> kb_positions;
    std::size_t true_slot = 0; // index into kb_positions
    std::vector<double> scores;
    std::size_t rank = 0;
};

struct RetrievalResult {
    std::size_t m = 0;
    std::size_t layer = 0;
    double top1 = 0.0;
    double top5 = 0.0;
    std::vector<RetrievalRecord> records;
};

/// Scores a sample KB (the sample's kb_positions) for its question.
using RetrievalScorer = std::function<std::vector<double>(const InstructionSample&)>;

/// For each M: n_questions simple questions, each about one triple of a fresh M-triple
/// sample KB drawn from `kb`; accuracy from the rank of the true triple under `scorer`.
std::vector<RetrievalResult> eval_retrieval(const KnowledgeBase& kb, std::span<const std::size_t> m_list,
                                            std::size_t n_questions, std::uint64_t seed,
                                            const RetrievalScorer& scorer, std::size_t layer = 0);

/// Attention-based scorer at `layer`.
RetrievalScorer attention_scorer(const EvalModel& model, std::size_t layer);
/// BM25 over the sample KB.
RetrievalScorer bm25_scorer(const KnowledgeBase& kb);

/// top1/top5 recomputed from the records alone.
void aggregate_retrieval(RetrievalResult& r);

// ---- refusal ------------------------------------------------------------------------------

struct RefusalRecord {
    std::size_t index = 0;
    std::string question;
    bool answerable = true;
    std::vector<std::size_t> kb_positions;
    std::string output;
    bool refused = false;
};

/// Unanswerable is the positive class.
struct RefusalResult {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    std::vector<RefusalRecord> records;
};

bool is_refusal(std::string_view output);

/// `n_questions` questions over sample KBs of `kb_size` triples; the first
/// `answerable` of a shuffled order ask about a triple inside the sample KB, the rest
/// about a name absent from it.
RefusalResult eval_refusal(const EvalModel& model, const KnowledgeBase& kb, std::size_t n_questions,
                           std::size_t answerable, std::size_t kb_size, std::uint64_t seed,
                           std::size_t max_new = 96);

/// Counts, precision and recall recomputed from the records alone. Precision is 0
/// when nothing was refused.
void aggregate_refusal(RefusalResult& r);

// ---- answers ------------------------------------------------------------------------------

/// Case-folded, whitespace-collapsed, trimmed.
std::string normalize_answer(std::string_view s);

/// Normalized exact match; multi-clause references ("; "-joined) need every clause
/// present among the output's clauses.
bool answer_matches(std::string_view reference, std::string_view output);

struct AnswerRecord {
    std::size_t index = 0;
    InstructionKind kind = InstructionKind::Simple;
    std::string question;
    std::string reference;
    std::string output;
    bool correct = false;
};

struct AnswerResult {
    double accuracy = 0.0;
    std::vector<AnswerRecord> records;
};

std::string generate_answer(const EvalModel& model, const InstructionSample& sample, std::size_t max_new = 160);

AnswerResult eval_answer_accuracy(const EvalModel& model, std::span<const InstructionSample> samples,
                                  std::size_t max_new = 160);

// ---- BM25 ----------------------------------------------------------------------------------

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

/// Lowercase alphanumeric runs.
std::vector<std::string> bm25_terms(std::string_view text);

/// "The <property> of <name>: <value>"
std::string bm25_document(const KnowledgeTriple& t);

/// Per-document BM25 scores with idf = ln(1 + (n - df + 0.5) / (df + 0.5)).
std::vector<double> bm25_scores(std::span<const KnowledgeTriple> docs, std::string_view query,
                                Bm25Params params = {});

/// Positions ordered by descending score, ties by position.
std::vector<std::size_t> bm25_retrieve(const KnowledgeBase& kb, std::string_view query, Bm25Params params = {});

// ---- scaling ------------------------------------------------------------------------------

struct ScalingRow {
    std::string method; // "rectangular" or "in_context"
    std::size_t m = 0;
    std::size_t n = 0;           // prompt tokens
    std::size_t context_len = 0; // N, or N + T_M for in_context
    double median_ms = 0.0;
    std::uint64_t kb_entries = 0;
    std::uint64_t prompt_entries = 0;
    std::uint64_t expected_entries = 0; // analytic count
    std::uint64_t score_bytes = 0;      // peak score-matrix bytes of one layer
};

/// Analytic score-entry counts over all layers and heads.
std::uint64_t rectangular_kb_entries(const ModelConfig& cfg, std::size_t n, std::size_t m);
std::uint64_t causal_entries(const ModelConfig& cfg, std::size_t n);

/// Verbalized KB used by the in-context baseline: "The <property> of <name>: <value>. " per triple.
std::string flatten_kb(std::span<const KnowledgeTriple> triples);

/// Prompt of exactly n tokens: [BOS] question bytes, truncated or padded with spaces, [SEP].
std::vector<int> fixed_length_prompt(std::string_view question, std::size_t n);

struct BenchOptions {
    std::size_t n = 32;
    std::size_t repeats = 5;
    bool in_context = true;
    /// in_context is skipped for M above this (its cost is quadratic).
    std::size_t in_context_max_m = 16;
};

/// Forward-pass timing with knowledge tokens vs. the verbalized KB in the prompt.
/// Triples for M > |KB| are reused cyclically.
std::vector<ScalingRow> bench_scaling(const EvalModel& model, const KnowledgeBase& kb,
                                      std::span<const std::size_t> m_list, const BenchOptions& opts);

void write_scaling_csv(std::span<const ScalingRow> rows, const std::filesystem::path& path,
                       bool include_timing = true);

// ---- diagnostics --------------------------------------------------------------------------

/// Rows = query tokens, columns = knowledge tokens, values = head-averaged scores.
void export_attention_heatmap(std::span<const LayerTrace> traces, std::size_t layer, std::span<const int> prompt,
                              const std::filesystem::path& path);

struct LayerVariance {
    std::size_t layer = 0;
    double key_variance = 0.0;
    double value_variance = 0.0;
};

/// Per layer: population variance across tokens of each coordinate, averaged over coordinates.
std::vector<LayerVariance> layer_variance_report(std::span<const KnowledgeToken> tokens, std::size_t layers,
                                                 std::size_t dim);

// ---- result files -------------------------------------------------------------------------

void write_retrieval_records(std::span<const RetrievalResult> results, const std::filesystem::path& path);
void write_retrieval_csv(std::span<const RetrievalResult> results, const std::filesystem::path& path);
void write_refusal_records(const RefusalResult& r, const std::filesystem::path& path);
void write_refusal_csv(const RefusalResult& r, const std::filesystem::path& path);
void write_answer_records(const AnswerResult& r, const std::filesystem::path& path);
void write_answer_csv(const AnswerResult& r, const std::filesystem::path& path);
void write_layer_variance_csv(std::span<const LayerVariance> rows, const std::filesystem::path& path);

/// Reads a file written by write_retrieval_records back into results (aggregates recomputed).
std::vector<RetrievalResult> read_retrieval_records(const std::filesystem::path& path);
RefusalResult read_refusal_records(const std::filesystem::path& path);

} // namespace kblam
