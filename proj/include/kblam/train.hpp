#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "kblam/adapters.hpp"
#include "kblam/embed.hpp"
#include "kblam/kb.hpp"
#include "kblam/model.hpp"
#include "kblam/optim.hpp"
#include "kblam/random.hpp"

namespace kblam {

/// One optimizer step = micro_batches x micro_batch_size samples. mixture[k] is the
/// number of micro-batches of InstructionKind k (enum order).
struct BatchSpec {
    std::size_t batch_size = 10;
    std::size_t micro_batches = 10;
    std::size_t micro_batch_size = 1;
    std::array<std::size_t, kInstructionKindCount> mixture{3, 3, 3, 1};
    std::size_t kb_min = 4;
    std::size_t kb_max = 16;
    /// Triples per multi-entity question.
    std::size_t multi_entities = 2;

    /// 400 pairs as 20 x 20, 6/6/6/2, KBs of 10..100 triples.
    static BatchSpec paper_scale();

    void validate() const;
    nlohmann::json to_json() const;
    static BatchSpec from_json(const nlohmann::json& j);
};

/// Draws a sample KB of uniform size in [kb_min, kb_max] without replacement, then the
/// relevant triple(s) from inside it. Unanswerable samples ask about a triple of `kb`
/// whose name does not occur in the sample KB.
InstructionSample build_training_sample(const KnowledgeBase& kb, Rng& rng, InstructionKind kind,
                                        std::size_t kb_min, std::size_t kb_max, std::size_t multi_entities = 2);

/// Teacher-forcing layout of [BOS] question [SEP] answer [EOS].
struct TokenizedSample {
    std::vector<int> inputs;     // sequence minus its last token
    std::vector<int> targets;    // sequence minus its first token
    std::vector<double> weights; // 1 where the target is an answer token (or EOS)
    std::size_t prompt_len = 0;  // |[BOS] question [SEP]|
};

TokenizedSample tokenize_sample(const InstructionSample& sample);

/// Full [BOS] question [SEP] answer [EOS] sequences for base-model pretraining, with
/// kinds drawn in the batch mixture's proportions. No KB is attached, so the model
/// learns the Q&A format but not the values of `kb`.
std::vector<std::vector<int>> pretrain_corpus(const KnowledgeBase& kb, std::size_t samples, const BatchSpec& spec,
                                              std::uint64_t seed);

/// Mean cross-entropy over answer tokens given the sample KB. `bases` is indexed by KB
/// position. Gradients reach the adapters only.
Tensor sample_loss(const TransformerWeights& weights, const AdapterSet& adapters,
                   std::span<const BaseEmbeddingPair> bases, const InstructionSample& sample,
                   bool scale_enabled = false);

struct TrainConfig {
    BatchSpec batch;
    OptimizerConfig optimizer{5e-4, 5e-6, 20000};
    std::uint64_t seed = 0;
    bool scale_enabled = false;

    void validate() const;
    nlohmann::json to_json() const;
    /// Keys: "batch", "optimizer", "seed", "scale_enabled". Unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json& j);
};

nlohmann::json optimizer_to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_from_json(const nlohmann::json& j);

struct TrainLogEntry {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    /// Mean loss of this step's samples of each kind; NaN when the kind was absent.
    std::array<double, kInstructionKindCount> kind_loss{};
};

struct TrainResult {
    AdapterSet adapters;
    std::vector<TrainLogEntry> log;
};

/// Instruction tuning with the base model frozen. Deterministic for a fixed seed.
/// Throws NumericError when a step's loss is not finite.
TrainResult train(const KnowledgeBase& kb, std::span<const BaseEmbeddingPair> bases,
                  const TransformerWeights& weights, const AdapterSet& init, const TrainConfig& cfg,
                  const std::function<void(const TrainLogEntry&)>& on_step = {});

/// step,loss,lr,loss_simple,loss_multi_entity,loss_open_ended,loss_unanswerable
void write_train_log(std::span<const TrainLogEntry> log, const std::filesystem::path& path);

/// Mean loss over consecutive windows of `window` steps (a trailing partial window is dropped).
std::vector<double> window_means(std::span<const TrainLogEntry> log, std::size_t window);

} // namespace kblam
