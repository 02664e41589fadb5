#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "kblam/error.hpp"
#include "kblam/kb.hpp"
#include "support.hpp"

using namespace kblam;

TEST_CASE("triples reject empty fields and line breaks", "[kb]") {
    CHECK_NOTHROW(validate_triple({"A", "b", "c"}));
    CHECK_THROWS_AS(validate_triple({"", "b", "c"}), ParseError);
    CHECK_THROWS_AS(validate_triple({"A", "", "c"}), ParseError);
    CHECK_THROWS_AS(validate_triple({"A", "b", "line\nbreak"}), ParseError);
    CHECK_THROWS_AS(validate_triple({"A", "b\r", "c"}), ParseError);
}

TEST_CASE("knowledge base keeps a consistent (name, property) index", "[kb]") {
    KnowledgeBase kb({{"A", "p", "1"}, {"A", "q", "2"}, {"B", "p", "3"}});
    CHECK(kb.size() == 3);
    CHECK(kb.find("A", "q") == 1u);
    CHECK(!kb.find("B", "q"));
    CHECK(kb.has_name("B"));
    CHECK_THROWS_AS(kb.add({"A", "p", "dup"}), ConfigError);

    kb.remove(0);
    CHECK(kb.size() == 2);
    CHECK(kb.find("A", "q") == 0u);
    CHECK(kb.find("B", "p") == 1u);
    CHECK(!kb.find("A", "p"));
    CHECK_THROWS_AS(kb.remove(5), NotFoundError);

    kb.set_value(1, "33");
    CHECK(kb[1].value == "33");
}

TEST_CASE("synthesis is deterministic and seed-sensitive", "[kb]") {
    auto cfg = SynthesisConfig::desk_default();
    cfg.seed = 7;
    cfg.num_names = 100;
    const auto a = synthesize_kb(cfg);
    const auto b = synthesize_kb(cfg);
    CHECK(a == b);
    CHECK(a.size() == 300);

    std::set<std::string> names;
    for (const auto& t : a.triples()) names.insert(t.name);
    CHECK(names.size() == 100);

    cfg.seed = 8;
    CHECK(!(synthesize_kb(cfg) == a));
}

TEST_CASE("synthesis: names and values come from independent streams", "[kb]") {
    // Changing the name lexicon must leave every value untouched.
    auto cfg = SynthesisConfig::desk_default();
    cfg.seed = 3;
    cfg.num_names = 40;
    const auto a = synthesize_kb(cfg);
    cfg.name_part_lexicons[0][0] = "Zzyzx";
    cfg.name_part_lexicons[1][0] = "Qwerty";
    const auto b = synthesize_kb(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].value == b[i].value);
}

TEST_CASE("synthesis config validation", "[kb]") {
    auto cfg = SynthesisConfig::desk_default();
    cfg.properties.clear();
    CHECK_THROWS_AS(synthesize_kb(cfg), ConfigError);
    cfg = SynthesisConfig::desk_default();
    cfg.value_templates.push_back("{missing}");
    CHECK_THROWS_AS(synthesize_kb(cfg), ConfigError);
    cfg = SynthesisConfig::desk_default();
    cfg.num_names = 48 * 48 + 1;
    CHECK_THROWS_AS(synthesize_kb(cfg), ConfigError);
}

TEST_CASE("question and answer templates", "[kb]") {
    const KnowledgeTriple t{"Nova Forge", "purpose", "to map quiet tools"};
    const KnowledgeTriple u{"Iron Mill", "description", "a rare tea for kids"};
    CHECK(question_template_count(InstructionKind::Simple) == 16);
    CHECK(question_template_count(InstructionKind::MultiEntity) == 13);

    CHECK(make_question(InstructionKind::Simple, std::span(&t, 1), 1) == "What is the purpose of Nova Forge?");
    CHECK(make_answer(InstructionKind::Simple, std::span(&t, 1)) == "The purpose of Nova Forge is to map quiet tools");

    const std::vector<KnowledgeTriple> both{t, u};
    CHECK(make_question(InstructionKind::MultiEntity, both, 0) ==
          "What is the purpose of Nova Forge and the description of Iron Mill");
    CHECK(make_answer(InstructionKind::MultiEntity, both) ==
          "The purpose of Nova Forge is to map quiet tools; The description of Iron Mill is a rare tea for kids");

    const auto open_q = make_question(InstructionKind::OpenEnded, std::span(&t, 1), 1);
    CHECK(open_q == "What is the purpose of Nova Forge and what do you think of it?");
    const auto open_a = make_answer(InstructionKind::OpenEnded, std::span(&t, 1));
    CHECK(open_a.starts_with("The purpose of Nova Forge is to map quiet tools. "));

    CHECK(make_answer(InstructionKind::Unanswerable, std::span(&t, 1)) == kRefusalAnswer);
    CHECK_THROWS_AS(make_question(InstructionKind::Simple, std::span(&t, 1), 16), ConfigError);
}

TEST_CASE("three-entity questions join clauses with commas and 'and'", "[kb]") {
    const std::vector<KnowledgeTriple> three{{"A", "p", "x"}, {"B", "q", "y"}, {"C", "r", "z"}};
    CHECK(make_question(InstructionKind::MultiEntity, three, 1) == "Tell me the p of A, the q of B and the r of C");
}

TEST_CASE("sample invariants", "[kb]") {
    InstructionSample s;
    s.kb_positions = {1, 2, 3};
    s.relevant = {2};
    s.question = "q";
    s.answer = "a";
    CHECK_NOTHROW(validate_sample(s));
    s.relevant = {4};
    CHECK_THROWS(validate_sample(s));
    s.relevant = {1, 2};
    CHECK_THROWS(validate_sample(s)); // simple needs exactly one
    s.kind = InstructionKind::Unanswerable;
    s.relevant = {};
    CHECK_THROWS(validate_sample(s)); // answer is not the refusal
    s.answer = std::string(kRefusalAnswer);
    CHECK_NOTHROW(validate_sample(s));
}

TEST_CASE("KB files round-trip and report malformed lines", "[kb]") {
    test::TempDir dir;
    auto cfg = SynthesisConfig::desk_default();
    cfg.num_names = 20;
    const auto kb = synthesize_kb(cfg);
    save_kb(kb, dir / "kb.jsonl");
    CHECK(load_kb(dir / "kb.jsonl") == kb);

    {
        std::ofstream out(dir / "bad.jsonl");
        out << R"({"name":"A","property":"p","value":"v"})" << '\n';
        out << R"({"name":"A","property":"p"})" << '\n';
    }
    try {
        load_kb(dir / "bad.jsonl");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }

    {
        std::ofstream out(dir / "dup.jsonl");
        out << R"({"name":"A","property":"p","value":"v"})" << '\n' << '\n';
        out << R"({"name":"A","property":"p","value":"w"})" << '\n';
    }
    try {
        load_kb(dir / "dup.jsonl");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(load_kb(dir / "missing.jsonl"), IoError);
}

TEST_CASE("sample files round-trip", "[kb]") {
    test::TempDir dir;
    std::vector<InstructionSample> samples(2);
    samples[0] = {{0, 4, 2}, "What is x?", "The p of x is y", InstructionKind::Simple, {4}};
    samples[1] = {{1, 3}, "Who?", std::string(kRefusalAnswer), InstructionKind::Unanswerable, {}};
    save_samples(samples, dir / "s.jsonl");
    CHECK(load_samples(dir / "s.jsonl") == samples);
}

TEST_CASE("kind names round-trip", "[kb]") {
    for (auto k : {InstructionKind::Simple, InstructionKind::MultiEntity, InstructionKind::OpenEnded,
                   InstructionKind::Unanswerable})
        CHECK(instruction_kind_from_string(to_string(k)) == k);
    CHECK_THROWS(instruction_kind_from_string("chit_chat"));
}
