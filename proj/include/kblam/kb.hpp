#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace kblam {

/// Canonical answer for questions the KB cannot answer.
inline constexpr std::string_view kRefusalAnswer =
    "Sorry, I cannot find relevant information in the KB.";

/// One (name, property, value) unit of external knowledge.
struct KnowledgeTriple {
    std::string name;
    std::string property;
    std::string value;

    bool operator==(const KnowledgeTriple&) const = default;
};

/// Throws ParseError if a field is empty or contains a line break.
void validate_triple(const KnowledgeTriple& t);

/// Content hash of all three fields; tokens built from a triple carry it.
std::uint64_t triple_fingerprint(const KnowledgeTriple& t);

/// Ordered triples with a unique (name, property) index.
///
/// Positions are stable until remove() shifts the tail down by one.
class KnowledgeBase {
public:
    KnowledgeBase() = default;
    explicit KnowledgeBase(std::vector<KnowledgeTriple> triples);

    std::size_t size() const noexcept { return triples_.size(); }
    bool empty() const noexcept { return triples_.empty(); }
    const KnowledgeTriple& operator[](std::size_t pos) const { return triples_.at(pos); }
    const std::vector<KnowledgeTriple>& triples() const noexcept { return triples_; }

    std::optional<std::size_t> find(std::string_view name, std::string_view property) const;
    bool has_name(std::string_view name) const;

    /// Appends; throws ConfigError on a duplicate (name, property).
    std::size_t add(KnowledgeTriple t);
    void set_value(std::size_t pos, std::string value);
    void remove(std::size_t pos);

    KnowledgeBase subset(std::span<const std::size_t> positions) const;

    bool operator==(const KnowledgeBase& other) const { return triples_ == other.triples_; }

private:
    void rebuild_index();

    std::vector<KnowledgeTriple> triples_;
    std::map<std::pair<std::string, std::string>, std::size_t, std::less<>> index_;
    std::map<std::string, std::size_t, std::less<>> name_count_;
};

enum class InstructionKind { Simple, MultiEntity, OpenEnded, Unanswerable };

inline constexpr std::size_t kInstructionKindCount = 4;

std::string_view to_string(InstructionKind kind);
InstructionKind instruction_kind_from_string(std::string_view s);

struct InstructionSample {
    std::vector<std::size_t> kb_positions;
    std::string question;
    std::string answer;
    InstructionKind kind = InstructionKind::Simple;
    std::vector<std::size_t> relevant;

    bool operator==(const InstructionSample&) const = default;
};

/// Checks relevant ⊆ kb_positions and the per-kind cardinality rules.
void validate_sample(const InstructionSample& s);

/// Template-driven KB generator. Value text is drawn from a PRNG stream that is
/// independent of the name stream, so names carry no information about values.
struct SynthesisConfig {
    std::uint64_t seed = 0;
    std::size_t num_names = 50;
    std::vector<std::string> properties{"description", "objectives", "purpose"};
    /// One part is drawn from each lexicon; parts are joined by a space.
    std::vector<std::vector<std::string>> name_part_lexicons;
    /// Format strings; `{slot}` is replaced by a word from value_lexicons[slot].
    std::vector<std::string> value_templates;
    std::map<std::string, std::vector<std::string>> value_lexicons;

    /// Lexicons and templates used by the desk-scale pipeline.
    static SynthesisConfig desk_default();

    void validate() const;
};

KnowledgeBase synthesize_kb(const SynthesisConfig& cfg);

std::size_t question_template_count(InstructionKind kind);

/// Question text for `relevant`. Unanswerable questions use the simple templates
/// with a (name, property) that the caller guarantees is absent from the KB.
std::string make_question(InstructionKind kind, std::span<const KnowledgeTriple> relevant,
                          std::size_t template_id);

std::string make_answer(InstructionKind kind, std::span<const KnowledgeTriple> relevant);

/// "The <property> of <name> is <value>"
std::string answer_clause(const KnowledgeTriple& t);

KnowledgeBase load_kb(const std::filesystem::path& path);
void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path);

void save_samples(std::span<const InstructionSample> samples, const std::filesystem::path& path);
std::vector<InstructionSample> load_samples(const std::filesystem::path& path);

} // namespace kblam
