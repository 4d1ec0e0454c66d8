#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "gradiend/corpus.hpp"
#include "gradiend/rng.hpp"

using namespace gradiend;

TEST_CASE("name table: exact vs ambiguous probabilities") {
    auto names = gen_name_table(20, 10, 1);
    REQUIRE(names.size() == 30);
    std::set<std::string> unique;
    double sum_pf = 0.0;
    for (size_t i = 0; i < names.size(); ++i) {
        const auto& n = names[i];
        CHECK(unique.insert(n.name).second);
        CHECK(n.p_female + n.p_male == doctest::Approx(1.0).epsilon(1e-12));
        if (i < 20) CHECK((n.p_female == 0.0 || n.p_female == 1.0));
        else {
            CHECK(n.p_female > 0.0);
            CHECK(n.p_female < 1.0);
        }
        sum_pf += n.p_female;
    }
    // gender-balanced by construction: total female mass ~ half the table
    CHECK(std::abs(sum_pf - 15.0) <= 1.0);
}

TEST_CASE("name table determinism and seed sensitivity") {
    auto a = gen_name_table(8, 4, 5);
    auto b = gen_name_table(8, 4, 5);
    auto c = gen_name_table(8, 4, 6);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].p_female == b[i].p_female);
    }
    bool any_diff = false;
    for (size_t i = 0; i < a.size() && i < c.size(); ++i)
        if (a[i].name != c[i].name || a[i].p_female != c[i].p_female) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("gender templates: structure and class isolation") {
    Lexicon lex = build_lexicon(20, 10, 2);
    auto templates = gen_templates(lex, 200, 3);
    REQUIRE(templates.size() == 200);
    std::set<std::string> class_tokens;
    for (const auto& t : lex.class_tokens()) class_tokens.insert(t);
    for (const auto& t : templates) {
        REQUIRE(t.name_slot >= 0);
        REQUIRE(t.target_slot >= 0);
        CHECK(t.name_slot < t.target_slot); // pronoun after the name
        CHECK(t.tokens.size() >= 6);
        const std::string& name = t.tokens[static_cast<size_t>(t.name_slot)];
        const std::string& target = t.tokens[static_cast<size_t>(t.target_slot)];
        CHECK(target == t.factual_target);
        const NameRecord& rec = lex.record(name);
        if (rec.p_female == 1.0) {
            CHECK(t.factual_class == lex.female_class);
            CHECK(target == lex.female_pronoun);
        } else if (rec.p_female == 0.0) {
            CHECK(t.factual_class == lex.male_class);
            CHECK(target == lex.male_pronoun);
        }
        // orthogonal target is the other pronoun at the same slot
        REQUIRE(t.orthogonal_targets.size() == 1);
        const std::string& orth = t.orthogonal_targets.begin()->second;
        CHECK(orth != target);
        CHECK((orth == lex.female_pronoun || orth == lex.male_pronoun));
        // class isolation: no class-bearing token outside the two slots
        for (size_t i = 0; i < t.tokens.size(); ++i) {
            if (static_cast<int>(i) == t.name_slot || static_cast<int>(i) == t.target_slot)
                continue;
            CHECK(class_tokens.count(t.tokens[i]) == 0);
        }
    }
}

TEST_CASE("pair dataset: both directions, alignment, swap invariance") {
    Lexicon lex = build_lexicon(10, 5, 4);
    REQUIRE(lex.pair_classes.size() >= 2);
    const ClassSpec& a = lex.pair_classes[0];
    const ClassSpec& b = lex.pair_classes[1];
    auto texts_a = gen_class_texts(lex, a, 30, 7);
    auto texts_b = gen_class_texts(lex, b, 30, 8);
    std::vector<std::vector<std::string>> texts = texts_a;
    texts.insert(texts.end(), texts_b.begin(), texts_b.end());

    auto dataset = gen_pair_dataset(a, b, texts, 9);
    size_t count_a = 0, count_b = 0;
    for (const auto& t : dataset) {
        REQUIRE(t.target_slot >= 0);
        CHECK(t.tokens[static_cast<size_t>(t.target_slot)] == t.factual_target);
        REQUIRE(t.orthogonal_targets.size() == 1);
        if (t.factual_class == a.id) {
            ++count_a;
            CHECK(t.orthogonal_targets.begin()->first == b.id);
        } else {
            REQUIRE(t.factual_class == b.id);
            ++count_b;
            CHECK(t.orthogonal_targets.begin()->first == a.id);
        }
    }
    // instance counts per direction match per-class text counts
    CHECK(count_a == texts_a.size());
    CHECK(count_b == texts_b.size());

    // swapping (a,b) yields the same instances as a set
    auto swapped = gen_pair_dataset(b, a, texts, 9);
    auto key = [](const Template& t) {
        std::string k = t.factual_class + "|" + t.factual_target + "|";
        for (const auto& tok : t.tokens) k += tok + " ";
        return k;
    };
    std::multiset<std::string> k1, k2;
    for (const auto& t : dataset) k1.insert(key(t));
    for (const auto& t : swapped) k2.insert(key(t));
    CHECK(k1 == k2);
}

TEST_CASE("neutral corpus: clean of class tokens and diverse") {
    Lexicon lex = build_lexicon(20, 10, 10);
    auto corpus = gen_neutral_corpus(lex, 1000, 11);
    REQUIRE(corpus.size() == 1000);
    std::set<std::string> class_tokens;
    for (const auto& t : lex.class_tokens()) class_tokens.insert(t);
    std::set<std::vector<std::string>> distinct;
    for (const auto& s : corpus) {
        for (const auto& tok : s) CHECK(class_tokens.count(tok) == 0);
        distinct.insert(s);
    }
    CHECK(distinct.size() >= 50);
    // determinism
    CHECK(gen_neutral_corpus(lex, 1000, 11) == corpus);
}

TEST_CASE("probe set: one name slot, no pronoun, balanced leaning") {
    Lexicon lex = build_lexicon(20, 10, 12);
    auto probes = gen_probe_set(lex, 101, 13);
    REQUIRE(probes.size() == 101);
    int lean_f = 0, lean_m = 0;
    for (const auto& p : probes) {
        REQUIRE(p.name_slot >= 0);
        CHECK(p.tokens[static_cast<size_t>(p.name_slot)] == "[NAME]");
        for (const auto& tok : p.tokens) {
            CHECK(tok != lex.female_pronoun);
            CHECK(tok != lex.male_pronoun);
        }
        if (p.leaning == lex.female_class) ++lean_f;
        else if (p.leaning == lex.male_class) ++lean_m;
    }
    CHECK(lean_f + lean_m == 101);
    CHECK(std::abs(lean_f - lean_m) <= 1);
}

TEST_CASE("stereoset probes carry three distinct single-token options") {
    Lexicon lex = build_lexicon(20, 10, 14);
    auto probes = gen_stereoset_probes(lex, 60, 15);
    REQUIRE(probes.size() == 60);
    for (const auto& p : probes) {
        REQUIRE(p.slot >= 0);
        REQUIRE(static_cast<size_t>(p.slot) < p.tokens.size());
        CHECK(p.stereotypical != p.anti_stereotypical);
        CHECK(p.stereotypical != p.meaningless);
        CHECK(p.anti_stereotypical != p.meaningless);
    }
}

TEST_CASE("judge filter applies the every-probe rule") {
    Lexicon lex = build_lexicon(6, 2, 16);
    auto templates = gen_templates(lex, 40, 17);
    std::vector<NameRecord> judges;
    for (const auto& n : lex.names) {
        if (judges.size() >= 4) break;
        if (n.p_female == 0.0 || n.p_female == 1.0) judges.push_back(n);
    }
    REQUIRE(judges.size() == 4);

    // A perfect judge keeps everything.
    ArgmaxPredictor perfect = [&](const std::vector<std::string>& toks, int slot) {
        (void)slot;
        for (const auto& tok : toks) {
            auto it = std::find_if(lex.names.begin(), lex.names.end(),
                                   [&](const NameRecord& n) { return n.name == tok; });
            if (it != lex.names.end())
                return it->p_female >= 0.5 ? lex.female_pronoun : lex.male_pronoun;
        }
        return std::string("?");
    };
    CHECK(judge_filter(perfect, templates, judges).size() == templates.size());

    // A judge that always answers "she" fails every male probe name.
    ArgmaxPredictor always_she = [&](const std::vector<std::string>&, int) {
        return lex.female_pronoun;
    };
    CHECK(judge_filter(always_she, templates, judges).empty());

    CHECK_THROWS_AS(judge_filter(perfect, templates, {}), std::invalid_argument);
}

TEST_CASE("split: sizes, disjointness, balance, determinism") {
    Lexicon lex = build_lexicon(20, 10, 18);
    auto templates = gen_templates(lex, 1000, 19);
    DatasetSplit s = split(templates, {0.875, 0.025, 0.10}, 20);
    CHECK(s.train.size() == 875);
    CHECK(s.val.size() == 25);
    CHECK(s.test.size() == 100);

    auto key = [](const Template& t) {
        std::string k;
        for (const auto& tok : t.tokens) k += tok + " ";
        return k + std::to_string(t.name_slot);
    };
    std::multiset<std::string> all, parts;
    for (const auto& t : templates) all.insert(key(t));
    for (const auto* part : {&s.train, &s.val, &s.test})
        for (const auto& t : *part) parts.insert(key(t));
    CHECK(all == parts); // union of splits == input set

    // val and test class-balanced within one instance
    auto balance = [&](const std::vector<Template>& part) {
        long f = 0, m = 0;
        for (const auto& t : part) (t.factual_class == lex.female_class ? f : m)++;
        return std::labs(f - m);
    };
    CHECK(balance(s.val) <= 1);
    CHECK(balance(s.test) <= 1);

    DatasetSplit again = split(templates, {0.875, 0.025, 0.10}, 20);
    CHECK(again.train.size() == s.train.size());
    for (size_t i = 0; i < s.train.size(); ++i) CHECK(again.train[i].tokens == s.train[i].tokens);

    CHECK_THROWS_AS(split(templates, {0.5, 0.2}, 21), std::invalid_argument);
    CHECK_THROWS_AS(split(templates, {0.5, 0.3, 0.3}, 21), std::invalid_argument);
}

TEST_CASE("jsonl round trip preserves every field") {
    Lexicon lex = build_lexicon(10, 5, 22);
    auto templates = gen_templates(lex, 25, 23);
    std::string text = templates_to_jsonl(templates);
    auto back = templates_from_jsonl(text);
    REQUIRE(back.size() == templates.size());
    for (size_t i = 0; i < templates.size(); ++i) {
        CHECK(back[i].tokens == templates[i].tokens);
        CHECK(back[i].name_slot == templates[i].name_slot);
        CHECK(back[i].target_slot == templates[i].target_slot);
        CHECK(back[i].factual_class == templates[i].factual_class);
        CHECK(back[i].factual_target == templates[i].factual_target);
        CHECK(back[i].orthogonal_targets == templates[i].orthogonal_targets);
    }
    // serialization is stable
    CHECK(templates_to_jsonl(back) == text);
}

TEST_CASE("vocab covers the lexicon and reserves control ids") {
    Lexicon lex = build_lexicon(20, 10, 24);
    TokenizerVocab vocab = build_vocab(lex, 200);
    CHECK(vocab.size() == 200);
    CHECK(TokenizerVocab::kPad == 0);
    CHECK(TokenizerVocab::kMask == 1);
    for (const auto& t : lex.class_tokens()) CHECK(vocab.contains(t));
    for (const auto& s : lex.neutral_pool)
        for (const auto& tok : s) CHECK(vocab.contains(tok));
    // bijective over ids
    for (int i = 0; i < vocab.size(); ++i) CHECK(vocab.id(vocab.tokens[static_cast<size_t>(i)]) == i);
    CHECK_THROWS_AS(vocab.id("definitely-not-a-token"), std::out_of_range);
}
