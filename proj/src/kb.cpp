#include "kblam/kb.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "kblam/error.hpp"
#include "kblam/random.hpp"

namespace kblam {

namespace {

const std::vector<std::string> kSimpleTemplates = {
    "What <property> does <name> have?",
    "What is the <property> of <name>?",
    "Tell me about the <property> of <name>.",
    "Can you let me know the <property> of <name>?",
    "Can you inform me about the <property> of <name>?",
    "Describe the <property> of <name>.",
    "What details can you share about the <property> of <name>?",
    "What kind of <property> does <name> have?",
    "Provide details on the <property> of <name>.",
    "What features does the <property> of <name> include?",
    "Can you elaborate on the <property> of <name>?",
    "How would you describe the <property> of <name>?",
    "What can you tell me about the <property> characteristics of <name>?",
    "Can you explain the <property> of <name>?",
    "What insights can you provide about the <property> of <name>?",
    "What should I know about the <property> of <name>?",
};

// Filled with "the p1 of n1, ..., and the pG of nG".
const std::vector<std::string> kMultiTemplates = {
    "What is {}",
    "Tell me {}",
    "Can you let me know {}",
    "Can you inform me {}",
    "Describe {}",
    "Explain {}",
    "Could you describe {}",
    "What can you tell me about {}",
    "Could you provide information on {}",
    "Please enlighten me about {}",
    "Can you clarify {} for me?",
    "Could you give me a detailed description of {}",
    "I need more information on {}",
};

const std::vector<std::string> kOpinions = {
    "I think it sounds worthwhile.",
    "It seems like a sensible idea to me.",
    "I find it quite interesting.",
    "It looks useful for many people.",
    "I think it could work well.",
};

constexpr std::string_view kOpenEndedClause = " and what do you think of it?";

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

std::string fill_simple(const std::string& tmpl, const KnowledgeTriple& t) {
    return replace_all(replace_all(tmpl, "<property>", t.property), "<name>", t.name);
}

std::string join_clauses(std::span<const KnowledgeTriple> triples) {
    std::string out;
    for (std::size_t g = 0; g < triples.size(); ++g) {
        if (g > 0) out += (g + 1 == triples.size()) ? " and " : ", ";
        out += "the " + triples[g].property + " of " + triples[g].name;
    }
    return out;
}

} // namespace

void validate_triple(const KnowledgeTriple& t) {
    auto check = [](const std::string& field, const char* label) {
        if (field.empty()) throw ParseError(std::string("empty triple field '") + label + "'");
        if (field.find_first_of("\n\r") != std::string::npos)
            throw ParseError(std::string("triple field '") + label + "' contains a line break");
    };
    check(t.name, "name");
    check(t.property, "property");
    check(t.value, "value");
}

std::uint64_t triple_fingerprint(const KnowledgeTriple& t) {
    std::uint64_t h = fnv1a64(t.name);
    h = fnv1a64(std::string_view("\x1f", 1), h);
    h = fnv1a64(t.property, h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
    return fnv1a64(t.value, h);
}

KnowledgeBase::KnowledgeBase(std::vector<KnowledgeTriple> triples) {
    triples_.reserve(triples.size());
    for (auto& t : triples) add(std::move(t));
}

std::optional<std::size_t> KnowledgeBase::find(std::string_view name,
                                               std::string_view property) const {
    auto it = index_.find(std::pair<std::string, std::string>(name, property));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

bool KnowledgeBase::has_name(std::string_view name) const {
    return name_count_.find(name) != name_count_.end();
}

std::size_t KnowledgeBase::add(KnowledgeTriple t) {
    validate_triple(t);
    auto key = std::make_pair(t.name, t.property);
    if (index_.count(key))
        throw ConfigError("duplicate (name, property): (" + t.name + ", " + t.property + ")");
    const std::size_t pos = triples_.size();
    index_.emplace(std::move(key), pos);
    ++name_count_[t.name];
    triples_.push_back(std::move(t));
    return pos;
}

void KnowledgeBase::set_value(std::size_t pos, std::string value) {
    KnowledgeTriple t = triples_.at(pos);
    t.value = std::move(value);
    validate_triple(t);
    triples_[pos] = std::move(t);
}

void KnowledgeBase::remove(std::size_t pos) {
    if (pos >= triples_.size()) throw NotFoundError("no triple at position " + std::to_string(pos));
    triples_.erase(triples_.begin() + static_cast<std::ptrdiff_t>(pos));
    rebuild_index();
}

KnowledgeBase KnowledgeBase::subset(std::span<const std::size_t> positions) const {
    KnowledgeBase out;
    for (std::size_t p : positions) out.add(triples_.at(p));
    return out;
}

void KnowledgeBase::rebuild_index() {
    index_.clear();
    name_count_.clear();
    for (std::size_t i = 0; i < triples_.size(); ++i) {
        index_.emplace(std::make_pair(triples_[i].name, triples_[i].property), i);
        ++name_count_[triples_[i].name];
    }
}

std::string_view to_string(InstructionKind kind) {
    switch (kind) {
    case InstructionKind::Simple: return "simple";
    case InstructionKind::MultiEntity: return "multi_entity";
    case InstructionKind::OpenEnded: return "open_ended";
    case InstructionKind::Unanswerable: return "unanswerable";
    }
    return "?";
}

InstructionKind instruction_kind_from_string(std::string_view s) {
    for (auto k : {InstructionKind::Simple, InstructionKind::MultiEntity,
                   InstructionKind::OpenEnded, InstructionKind::Unanswerable})
        if (to_string(k) == s) return k;
    throw ParseError("unknown instruction kind '" + std::string(s) + "'");
}

void validate_sample(const InstructionSample& s) {
    std::set<std::size_t> kb(s.kb_positions.begin(), s.kb_positions.end());
    for (std::size_t r : s.relevant)
        if (!kb.count(r)) throw ConfigError("relevant position " + std::to_string(r) + " not in sample KB");
    switch (s.kind) {
    case InstructionKind::Simple:
    case InstructionKind::OpenEnded:
        if (s.relevant.size() != 1) throw ConfigError("simple sample needs exactly one relevant triple");
        break;
    case InstructionKind::MultiEntity:
        if (s.relevant.empty()) throw ConfigError("multi-entity sample needs relevant triples");
        break;
    case InstructionKind::Unanswerable:
        if (!s.relevant.empty()) throw ConfigError("unanswerable sample has relevant triples");
        if (s.answer != kRefusalAnswer) throw ConfigError("unanswerable sample must carry the refusal answer");
        break;
    }
}

SynthesisConfig SynthesisConfig::desk_default() {
    SynthesisConfig cfg;
    cfg.name_part_lexicons = {
        {"Nova", "Posh", "Silver", "Quantum", "Amber", "Crimson", "Lunar", "Solar", "Velvet", "Iron",
         "Cobalt", "Misty", "Golden", "Rapid", "Hidden", "Frosty", "Echo", "Zephyr", "Marble", "Copper",
         "Violet", "Cedar", "Granite", "Neon", "Oasis", "Pixel", "Rustic", "Sapphire", "Thunder", "Willow",
         "Aurora", "Blaze", "Coral", "Dune", "Ember", "Falcon", "Glacier", "Harbor", "Indigo", "Jade",
         "Kestrel", "Lotus", "Maple", "Nimbus", "Onyx", "Prism", "Quartz", "Raven"},
        {"Citadel", "Poodle", "Works", "Labs", "Bistro", "Forge", "Studio", "Hub", "Nest", "Garden",
         "Tower", "Bridge", "Canyon", "Compass", "Lantern", "Meadow", "Orbit", "Pavilion", "Quarry", "Reef",
         "Summit", "Temple", "Valley", "Wharf", "Atlas", "Beacon", "Cove", "Depot", "Engine", "Foundry",
         "Grove", "Haven", "Isle", "Junction", "Keep", "Lodge", "Mill", "Nook", "Outpost", "Pier",
         "Ranch", "Spire", "Tavern", "Vault", "Yard", "Zenith", "Arcade", "Bazaar"},
    };
    cfg.value_templates = {
        "to {verb} {adj} {noun}",
        "a {adj} {noun} for {group}",
        "helping {group} {verb} {noun}",
        "{adj} {noun} near the {place}",
        "to bring {noun} to {group}",
        "a {noun} service in the {place}",
        "making {adj} {noun} for {group}",
        "to {verb} {noun} at the {place}",
    };
    cfg.value_lexicons = {
        {"verb", {"share", "build", "repair", "teach", "grow", "clean", "map", "sell", "rent", "paint",
                  "sort", "track", "bake", "store", "print", "test"}},
        {"adj", {"quiet", "cheap", "fresh", "local", "small", "bright", "warm", "simple", "rare", "quick",
                 "shared", "green", "safe", "tiny", "modern", "classic"}},
        {"noun", {"maps", "bread", "tools", "music", "bikes", "books", "games", "plants", "shoes", "lamps",
                  "boats", "tea", "maths", "clocks", "soap", "rugs"}},
        {"group", {"students", "farmers", "nurses", "kids", "artists", "pilots", "cooks", "drivers",
                   "elders", "coders", "sailors", "doctors"}},
        {"place", {"harbour", "market", "station", "library", "airport", "river", "stadium", "museum",
                   "square", "school", "park", "beach"}},
    };
    return cfg;
}

void SynthesisConfig::validate() const {
    if (properties.empty()) throw ConfigError("synthesis.properties: at least one property required");
    if (name_part_lexicons.empty()) throw ConfigError("synthesis.name_part_lexicons: empty");
    for (const auto& lex : name_part_lexicons)
        if (lex.empty()) throw ConfigError("synthesis.name_part_lexicons: empty lexicon");
    if (value_templates.empty()) throw ConfigError("synthesis.value_templates: empty");
    for (const auto& [slot, words] : value_lexicons)
        if (words.empty()) throw ConfigError("synthesis.value_lexicons." + slot + ": empty lexicon");
    for (const auto& tmpl : value_templates) {
        std::size_t open = 0;
        while ((open = tmpl.find('{', open)) != std::string::npos) {
            const std::size_t close = tmpl.find('}', open);
            if (close == std::string::npos)
                throw ConfigError("synthesis.value_templates: unterminated slot in '" + tmpl + "'");
            const std::string slot = tmpl.substr(open + 1, close - open - 1);
            if (!value_lexicons.count(slot))
                throw ConfigError("synthesis.value_lexicons: no lexicon for slot '" + slot + "'");
            open = close + 1;
        }
    }
    double combos = 1.0;
    for (const auto& lex : name_part_lexicons) combos *= static_cast<double>(lex.size());
    if (static_cast<double>(num_names) > combos)
        throw ConfigError("synthesis.num_names: exceeds the number of distinct name combinations");
}

KnowledgeBase synthesize_kb(const SynthesisConfig& cfg) {
    cfg.validate();
    Rng name_rng(derive_seed(cfg.seed, "names"));
    Rng value_rng(derive_seed(cfg.seed, "values"));

    std::vector<std::string> names;
    std::set<std::string> seen;
    while (names.size() < cfg.num_names) {
        std::string name;
        for (const auto& lex : cfg.name_part_lexicons) {
            if (!name.empty()) name += ' ';
            name += lex[name_rng.index(lex.size())];
        }
        if (seen.insert(name).second) names.push_back(std::move(name));
    }

    KnowledgeBase kb;
    for (const auto& name : names) {
        for (const auto& property : cfg.properties) {
            const auto& tmpl = cfg.value_templates[value_rng.index(cfg.value_templates.size())];
            std::string value;
            for (std::size_t i = 0; i < tmpl.size();) {
                if (tmpl[i] == '{') {
                    const std::size_t close = tmpl.find('}', i);
                    const auto& words = cfg.value_lexicons.at(tmpl.substr(i + 1, close - i - 1));
                    value += words[value_rng.index(words.size())];
                    i = close + 1;
                } else {
                    value += tmpl[i++];
                }
            }
            kb.add({name, property, std::move(value)});
        }
    }
    return kb;
}

std::size_t question_template_count(InstructionKind kind) {
    return kind == InstructionKind::MultiEntity ? kMultiTemplates.size() : kSimpleTemplates.size();
}

std::string make_question(InstructionKind kind, std::span<const KnowledgeTriple> relevant,
                          std::size_t template_id) {
    if (template_id >= question_template_count(kind))
        throw ConfigError("question template index " + std::to_string(template_id) + " out of range for " +
                          std::string(to_string(kind)));
    if (relevant.empty()) throw ConfigError("make_question: no triple to ask about");

    switch (kind) {
    case InstructionKind::MultiEntity:
        return replace_all(kMultiTemplates[template_id], "{}", join_clauses(relevant));
    case InstructionKind::OpenEnded: {
        std::string q = fill_simple(kSimpleTemplates[template_id], relevant.front());
        while (!q.empty() && (q.back() == '?' || q.back() == '.')) q.pop_back();
        return q + std::string(kOpenEndedClause);
    }
    case InstructionKind::Simple:
    case InstructionKind::Unanswerable:
        break;
    }
    return fill_simple(kSimpleTemplates[template_id], relevant.front());
}

std::string answer_clause(const KnowledgeTriple& t) {
    return "The " + t.property + " of " + t.name + " is " + t.value;
}

std::string make_answer(InstructionKind kind, std::span<const KnowledgeTriple> relevant) {
    switch (kind) {
    case InstructionKind::Unanswerable:
        return std::string(kRefusalAnswer);
    case InstructionKind::MultiEntity: {
        std::string out;
        for (std::size_t g = 0; g < relevant.size(); ++g) {
            if (g) out += "; ";
            out += answer_clause(relevant[g]);
        }
        return out;
    }
    case InstructionKind::OpenEnded: {
        const auto& t = relevant.front();
        return answer_clause(t) + ". " + kOpinions[fnv1a64(t.value) % kOpinions.size()];
    }
    case InstructionKind::Simple:
        break;
    }
    return answer_clause(relevant.front());
}

KnowledgeBase load_kb(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open KB file " + path.string());
    KnowledgeBase kb;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        KnowledgeTriple t;
        try {
            auto j = nlohmann::json::parse(line);
            t.name = j.at("name").get<std::string>();
            t.property = j.at("property").get<std::string>();
            t.value = j.at("value").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": malformed record: " + e.what(), lineno);
        }
        try {
            kb.add(std::move(t));
        } catch (const Error& e) {
            throw ParseError(path.string() + ": " + e.what(), lineno);
        }
    }
    return kb;
}

void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write KB file " + path.string());
    for (const auto& t : kb.triples()) {
        nlohmann::ordered_json j;
        j["name"] = t.name;
        j["property"] = t.property;
        j["value"] = t.value;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void save_samples(std::span<const InstructionSample> samples, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write dataset file " + path.string());
    for (const auto& s : samples) {
        nlohmann::ordered_json j;
        j["kind"] = std::string(to_string(s.kind));
        j["question"] = s.question;
        j["answer"] = s.answer;
        j["kb_positions"] = s.kb_positions;
        j["relevant"] = s.relevant;
        out << j.dump() << '\n';
    }
}

std::vector<InstructionSample> load_samples(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    std::vector<InstructionSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            InstructionSample s;
            s.kind = instruction_kind_from_string(j.at("kind").get<std::string>());
            s.question = j.at("question").get<std::string>();
            s.answer = j.at("answer").get<std::string>();
            s.kb_positions = j.at("kb_positions").get<std::vector<std::size_t>>();
            s.relevant = j.at("relevant").get<std::vector<std::size_t>>();
            validate_sample(s);
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": malformed record: " + e.what(), lineno);
        } catch (const ParseError&) {
            throw;
        } catch (const Error& e) {
            throw ParseError(path.string() + ": " + e.what(), lineno);
        }
    }
    return out;
}

} // namespace kblam
