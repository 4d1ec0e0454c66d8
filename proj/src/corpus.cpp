#include "gradiend/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "gradiend/rng.hpp"

namespace gradiend {

namespace {

const std::vector<std::string> kNouns = {
    "garden", "river",  "basket",  "ladder",  "window", "candle",  "meadow",  "bridge",
    "lantern", "puzzle", "violin",  "saddle",  "kettle", "marble",  "comet",   "harbor",
    "forest", "ribbon", "anchor",  "beacon",  "canvas", "cellar",  "dome",    "ember",
    "fountain", "glacier", "hammock", "island", "jigsaw", "kayak",  "locket",  "mosaic",
    "nebula", "orchard", "pebble",  "quarry",  "raft",   "spire",   "tunnel",  "wagon"};

const std::vector<std::string> kVerbs = {
    "carried", "painted", "opened",  "watched",  "folded",   "mended",  "counted", "stacked",
    "traced",  "lifted",  "sorted",  "polished", "sketched", "tuned",   "planted", "gathered",
    "measured", "wrapped", "balanced", "repaired", "studied", "cleaned", "moved",   "tested",
    "shared",  "built",   "found",   "kept",     "made",     "took"};

const std::vector<std::string> kAdverbs = {"slowly", "quietly", "carefully", "quickly", "gently",
                                           "neatly", "early",   "late",      "twice",   "often",
                                           "rarely", "soon",    "again",     "always",  "never"};

const std::vector<std::string> kAdjectives = {"small",  "old",   "bright", "heavy", "round",
                                              "narrow", "quiet", "smooth", "plain", "spare",
                                              "broad",  "faint", "steep",  "worn",  "crisp"};

const std::vector<std::string> kFunctionWords = {"the", "a",  "and",    "then", "while", "near",
                                                 "my",  "friend", "is", "when", "."};

const std::vector<std::string> kStereoFemale = {"ribbons", "flowers", "dolls", "teapots",
                                                "scarves", "gowns",   "beads", "petals"};
const std::vector<std::string> kStereoMale = {"engines", "hammers", "footballs", "trucks",
                                              "wrenches", "anvils",  "gears",    "spanners"};

// Three aligned attribute-word classes for the non-gender feature.
const std::vector<ClassSpec> kPairClasses = {
    {"alpha", {"avoria", "almont", "axleth", "ambril", "antova", "arlock"}},
    {"beta", {"bevoria", "belmont", "bixleth", "bombril", "bentova", "barlock"}},
    {"gamma", {"gavoria", "galmont", "gixleth", "gombril", "gentova", "garlock"}}};

const std::vector<std::string> kConsonants = {"b", "d", "f", "g", "k", "l", "m",
                                              "n", "p", "r", "s", "t", "v", "z"};
const std::vector<std::string> kVowels = {"a", "e", "i", "o", "u"};

std::string synth_base(Rng& rng) {
    std::string s;
    s += kConsonants[rng.next_index(kConsonants.size())];
    s += kVowels[rng.next_index(kVowels.size())];
    s += kConsonants[rng.next_index(kConsonants.size())];
    s += kVowels[rng.next_index(kVowels.size())];
    return s;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
    return v[rng.next_index(v.size())];
}

} // namespace

std::vector<std::string> Lexicon::class_tokens() const {
    std::vector<std::string> out;
    for (const auto& n : names) out.push_back(n.name);
    out.push_back(female_pronoun);
    out.push_back(male_pronoun);
    for (const auto& c : pair_classes)
        out.insert(out.end(), c.attributes.begin(), c.attributes.end());
    out.insert(out.end(), stereo_female.begin(), stereo_female.end());
    out.insert(out.end(), stereo_male.begin(), stereo_male.end());
    return out;
}

const NameRecord& Lexicon::record(const std::string& name) const {
    for (const auto& n : names)
        if (n.name == name) return n;
    throw std::out_of_range("lexicon has no name record for " + name);
}

int TokenizerVocab::id(const std::string& token) const {
    auto it = ids.find(token);
    if (it == ids.end()) throw std::out_of_range("token not in vocabulary: " + token);
    return it->second;
}

std::vector<int> TokenizerVocab::encode(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
}

std::vector<NameRecord> gen_name_table(int count_exact, int count_ambiguous, uint64_t seed) {
    if (count_exact < 1 || count_ambiguous < 1)
        throw std::invalid_argument("gen_name_table: counts must be >= 1");
    if (count_exact + count_ambiguous > 2000)
        throw std::invalid_argument("gen_name_table: counts exceed vocabulary budget");
    Rng rng(seed);
    std::set<std::string> used;
    const std::vector<std::string> female_suffix = {"la", "ra", "na", "sa"};
    const std::vector<std::string> male_suffix = {"ro", "do", "no", "to"};
    const std::vector<std::string> ambiguous_suffix = {"is", "ey", "in", "ys"};

    auto fresh = [&](const std::vector<std::string>& suffixes) {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            std::string cand = synth_base(rng) + pick(rng, suffixes);
            if (used.insert(cand).second) return cand;
        }
        throw std::runtime_error("gen_name_table: name space exhausted");
    };

    std::vector<NameRecord> out;
    for (int i = 0; i < count_exact; ++i) {
        bool female = (i % 2 == 0); // gender-balanced by construction
        std::string name = fresh(female ? female_suffix : male_suffix);
        out.push_back({name, female ? 1.0 : 0.0, female ? 0.0 : 1.0});
    }
    // Ambiguous probabilities come in complementary pairs so the table stays
    // balanced; an odd leftover gets 0.5.
    for (int i = 0; i < count_ambiguous; i += 2) {
        if (i + 1 < count_ambiguous) {
            double p = rng.uniform(0.05, 0.95);
            std::string n1 = fresh(ambiguous_suffix);
            std::string n2 = fresh(ambiguous_suffix);
            out.push_back({n1, p, 1.0 - p});
            out.push_back({n2, 1.0 - p, p});
        } else {
            out.push_back({fresh(ambiguous_suffix), 0.5, 0.5});
        }
    }
    return out;
}

Lexicon build_lexicon(int count_exact, int count_ambiguous, uint64_t seed) {
    Lexicon lex;
    lex.names = gen_name_table(count_exact, count_ambiguous, derive_seed(seed, "names"));
    lex.pair_classes = kPairClasses;
    lex.stereo_female = kStereoFemale;
    lex.stereo_male = kStereoMale;
    lex.nouns = kNouns;
    lex.verbs = kVerbs;
    lex.adverbs = kAdverbs;
    lex.adjectives = kAdjectives;
    lex.function_words = kFunctionWords;

    std::set<std::string> fixed;
    for (const auto* pool : {&lex.nouns, &lex.verbs, &lex.adverbs, &lex.adjectives,
                             &lex.function_words, &lex.stereo_female, &lex.stereo_male})
        fixed.insert(pool->begin(), pool->end());
    for (const auto& n : lex.names)
        if (fixed.count(n.name))
            throw std::runtime_error("build_lexicon: synthesized name collides with pool word");

    // Fixed pool of distinct neutral sentences; the neutral corpus samples
    // from this pool so it stays learnable at desk scale.
    Rng rng(derive_seed(seed, "neutral-pool"));
    std::set<std::vector<std::string>> pool;
    while (pool.size() < 64) {
        std::vector<std::string> s;
        switch (rng.next_index(3)) {
            case 0:
                s = {"the", pick(rng, lex.nouns), pick(rng, lex.adverbs), pick(rng, lex.verbs),
                     "the", pick(rng, lex.adjectives), pick(rng, lex.nouns), "."};
                break;
            case 1:
                s = {"the", pick(rng, lex.adjectives), pick(rng, lex.nouns), pick(rng, lex.verbs),
                     "the", pick(rng, lex.nouns), pick(rng, lex.adverbs), "."};
                break;
            default:
                s = {"a", pick(rng, lex.nouns), "near", "the", pick(rng, lex.nouns),
                     pick(rng, lex.verbs), pick(rng, lex.adverbs), "."};
                break;
        }
        pool.insert(std::move(s));
    }
    lex.neutral_pool.assign(pool.begin(), pool.end());
    return lex;
}

TokenizerVocab build_vocab(const Lexicon& lex, int vocab_size) {
    TokenizerVocab v;
    v.tokens = {"[PAD]", "[MASK]"};
    auto add = [&](const std::string& t) {
        if (v.ids.count(t)) return;
        v.ids[t] = static_cast<int>(v.tokens.size());
        v.tokens.push_back(t);
    };
    v.ids["[PAD]"] = 0;
    v.ids["[MASK]"] = 1;
    add(lex.female_pronoun);
    add(lex.male_pronoun);
    for (const auto& n : lex.names) add(n.name);
    for (const auto& c : lex.pair_classes)
        for (const auto& a : c.attributes) add(a);
    for (const auto& s : lex.stereo_female) add(s);
    for (const auto& s : lex.stereo_male) add(s);
    for (const auto* pool : {&lex.nouns, &lex.verbs, &lex.adverbs, &lex.adjectives,
                             &lex.function_words})
        for (const auto& t : *pool) add(t);
    if (static_cast<int>(v.tokens.size()) > vocab_size)
        throw std::invalid_argument("build_vocab: lexicon needs " +
                                    std::to_string(v.tokens.size()) + " tokens, budget is " +
                                    std::to_string(vocab_size));
    int filler = 0;
    while (static_cast<int>(v.tokens.size()) < vocab_size) add("unused" + std::to_string(filler++));
    return v;
}

std::vector<Template> gen_templates(const Lexicon& lex, int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_templates: count must be >= 1");
    Rng rng(seed);
    std::vector<const NameRecord*> exact;
    for (const auto& n : lex.names)
        if (n.p_female == 0.0 || n.p_female == 1.0) exact.push_back(&n);
    if (exact.empty()) throw std::invalid_argument("gen_templates: no exact names in lexicon");

    std::vector<Template> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const NameRecord& name = *exact[rng.next_index(exact.size())];
        bool female = name.p_female == 1.0;
        std::string target = female ? lex.female_pronoun : lex.male_pronoun;
        std::string other = female ? lex.male_pronoun : lex.female_pronoun;

        Template t;
        std::string v1 = pick(rng, lex.verbs), v2 = pick(rng, lex.verbs);
        std::string n1 = pick(rng, lex.nouns), n2 = pick(rng, lex.nouns);
        std::string adv = pick(rng, lex.adverbs), adj = pick(rng, lex.adjectives);
        switch (rng.next_index(5)) {
            case 0:
                t.tokens = {name.name, v1, "the", n1, "and", "then", target, v2, adv, "."};
                t.name_slot = 0;
                t.target_slot = 6;
                break;
            case 1:
                t.tokens = {name.name, v1, "a", n1, "while", target, v2, "the", n2, "."};
                t.name_slot = 0;
                t.target_slot = 5;
                break;
            case 2:
                t.tokens = {"when", name.name, v1, "the", n1, target, v2, adv, "."};
                t.name_slot = 1;
                t.target_slot = 5;
                break;
            case 3:
                t.tokens = {name.name, adv, v1, "the", adj, n1, "and", target, v2, "."};
                t.name_slot = 0;
                t.target_slot = 7;
                break;
            default:
                t.tokens = {name.name, v1, "the", n1, "near", "the", n2, "while", target, v2, "."};
                t.name_slot = 0;
                t.target_slot = 8;
                break;
        }
        t.factual_class = female ? lex.female_class : lex.male_class;
        t.factual_target = target;
        t.orthogonal_targets[female ? lex.male_class : lex.female_class] = other;
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<std::vector<std::string>> gen_class_texts(const Lexicon& lex, const ClassSpec& cls,
                                                      int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_class_texts: count must be >= 1");
    Rng rng(seed);
    std::vector<std::vector<std::string>> out;
    for (int i = 0; i < count; ++i) {
        std::string attr = pick(rng, cls.attributes);
        std::string n1 = pick(rng, lex.nouns), n2 = pick(rng, lex.nouns);
        std::string v1 = pick(rng, lex.verbs), adv = pick(rng, lex.adverbs);
        switch (rng.next_index(3)) {
            case 0: out.push_back({"the", attr, n1, v1, adv, "."}); break;
            case 1: out.push_back({"my", "friend", v1, "the", attr, n1, "."}); break;
            default: out.push_back({"the", n1, "near", "the", attr, n2, v1, "."}); break;
        }
    }
    return out;
}

std::vector<Template> gen_pair_dataset(const ClassSpec& a, const ClassSpec& b,
                                       const std::vector<std::vector<std::string>>& texts,
                                       uint64_t seed) {
    if (a.id == b.id) throw std::invalid_argument("gen_pair_dataset: classes must differ");
    if (a.attributes.size() != b.attributes.size())
        throw std::invalid_argument("gen_pair_dataset: unaligned attribute lists for " + a.id +
                                    "/" + b.id);
    auto index_of = [](const std::vector<std::string>& attrs, const std::string& tok) {
        for (size_t i = 0; i < attrs.size(); ++i)
            if (attrs[i] == tok) return static_cast<int>(i);
        return -1;
    };
    std::vector<Template> out;
    for (const auto& text : texts) {
        for (size_t pos = 0; pos < text.size(); ++pos) {
            int ia = index_of(a.attributes, text[pos]);
            int ib = ia < 0 ? index_of(b.attributes, text[pos]) : -1;
            if (ia < 0 && ib < 0) continue;
            const ClassSpec& fact = ia >= 0 ? a : b;
            const ClassSpec& orth = ia >= 0 ? b : a;
            int idx = ia >= 0 ? ia : ib;
            Template t;
            t.tokens = text;
            t.target_slot = static_cast<int>(pos);
            t.factual_class = fact.id;
            t.factual_target = fact.attributes[static_cast<size_t>(idx)];
            t.orthogonal_targets[orth.id] = orth.attributes[static_cast<size_t>(idx)];
            out.push_back(std::move(t));
            break; // one instance per text, at the first attribute occurrence
        }
    }
    Rng rng(seed);
    rng.shuffle(out);
    return out;
}

std::vector<std::vector<std::string>> gen_neutral_corpus(const Lexicon& lex, int count,
                                                         uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_neutral_corpus: count must be >= 1");
    Rng rng(seed);
    std::vector<size_t> order(lex.neutral_pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<std::string>> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
        out.push_back(lex.neutral_pool[order[static_cast<size_t>(i) % order.size()]]);
    return out;
}

std::vector<Probe> gen_probe_set(const Lexicon& lex, int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_probe_set: count must be >= 1");
    Rng rng(seed);
    std::vector<Probe> out;
    for (int i = 0; i < count; ++i) {
        bool female_leaning = (i % 2 == 0); // balanced 50/50 by construction
        const auto& stereo = female_leaning ? lex.stereo_female : lex.stereo_male;
        std::string s = pick(rng, stereo);
        std::string v1 = pick(rng, lex.verbs), adv = pick(rng, lex.adverbs);
        Probe p;
        switch (rng.next_index(3)) {
            case 0:
                p.tokens = {"my", "friend", "[NAME]", v1, "the", s, "."};
                p.name_slot = 2;
                break;
            case 1:
                p.tokens = {"[NAME]", v1, "the", s, adv, "."};
                p.name_slot = 0;
                break;
            default:
                p.tokens = {"my", "friend", "[NAME]", adv, v1, "the", s, "."};
                p.name_slot = 2;
                break;
        }
        p.leaning = female_leaning ? lex.female_class : lex.male_class;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<SsProbe> gen_stereoset_probes(const Lexicon& lex, int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_stereoset_probes: count must be >= 1");
    Rng rng(seed);
    std::vector<const NameRecord*> exact;
    for (const auto& n : lex.names)
        if (n.p_female == 0.0 || n.p_female == 1.0) exact.push_back(&n);
    std::vector<SsProbe> out;
    for (int i = 0; i < count; ++i) {
        const NameRecord& name = *exact[rng.next_index(exact.size())];
        bool female = name.p_female == 1.0;
        const auto& congruent = female ? lex.stereo_female : lex.stereo_male;
        const auto& opposite = female ? lex.stereo_male : lex.stereo_female;
        SsProbe p;
        p.stereotypical = pick(rng, congruent);
        p.anti_stereotypical = pick(rng, opposite);
        p.meaningless = pick(rng, lex.verbs);
        std::string v1 = pick(rng, lex.verbs);
        p.tokens = {"my", "friend", name.name, v1, "the", p.stereotypical, "."};
        p.slot = 5;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Template> judge_filter(const ArgmaxPredictor& judge,
                                   const std::vector<Template>& templates,
                                   const std::vector<NameRecord>& probe_names) {
    if (probe_names.empty()) throw std::invalid_argument("judge_filter: empty probe set");
    std::vector<Template> kept;
    for (const auto& t : templates) {
        bool ok = true;
        for (const auto& name : probe_names) {
            if (name.p_female != 0.0 && name.p_female != 1.0)
                throw std::invalid_argument("judge_filter: probe names must be exact names");
            std::vector<std::string> toks = t.tokens;
            toks[static_cast<size_t>(t.name_slot)] = name.name;
            std::string name_class = name.p_female == 1.0 ? "female" : "male";
            std::string expected = name_class == t.factual_class
                                       ? t.factual_target
                                       : t.orthogonal_targets.at(name_class);
            if (judge(toks, t.target_slot) != expected) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(t);
    }
    return kept;
}

DatasetSplit split(const std::vector<Template>& dataset, const std::vector<double>& fractions,
                   uint64_t seed) {
    if (fractions.size() != 3) throw std::invalid_argument("split: expected 3 fractions");
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
    for (double f : fractions)
        if (f < 0.0) throw std::invalid_argument("split: fractions must be non-negative");

    size_t n = dataset.size();
    auto n_val = static_cast<size_t>(std::llround(static_cast<double>(n) * fractions[1]));
    auto n_test = static_cast<size_t>(std::llround(static_cast<double>(n) * fractions[2]));
    if (n_val + n_test > n) n_test = n - n_val;

    // Round-robin across classes so val/test come out class-balanced.
    std::map<std::string, std::vector<size_t>> by_class;
    for (size_t i = 0; i < n; ++i) by_class[dataset[i].factual_class].push_back(i);
    Rng rng(seed);
    for (auto& [cls, idxs] : by_class) rng.shuffle(idxs);
    std::vector<size_t> order;
    order.reserve(n);
    bool more = true;
    for (size_t round = 0; more; ++round) {
        more = false;
        for (auto& [cls, idxs] : by_class) {
            if (round < idxs.size()) {
                order.push_back(idxs[round]);
                more = true;
            }
        }
    }

    DatasetSplit out;
    for (size_t i = 0; i < order.size(); ++i) {
        const Template& t = dataset[order[i]];
        if (i < n_val)
            out.val.push_back(t);
        else if (i < n_val + n_test)
            out.test.push_back(t);
        else
            out.train.push_back(t);
    }
    return out;
}

std::string templates_to_jsonl(const std::vector<Template>& templates) {
    std::ostringstream out;
    for (const auto& t : templates) {
        nlohmann::json j{{"tokens", t.tokens},
                         {"name_slot", t.name_slot},
                         {"target_slot", t.target_slot},
                         {"factual_class", t.factual_class},
                         {"factual_target", t.factual_target},
                         {"orthogonal_targets", t.orthogonal_targets}};
        out << j.dump() << "\n";
    }
    return out.str();
}

std::vector<Template> templates_from_jsonl(const std::string& text) {
    std::vector<Template> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Template t;
        t.tokens = j.at("tokens").get<std::vector<std::string>>();
        t.name_slot = j.at("name_slot").get<int>();
        t.target_slot = j.at("target_slot").get<int>();
        t.factual_class = j.at("factual_class").get<std::string>();
        t.factual_target = j.at("factual_target").get<std::string>();
        t.orthogonal_targets = j.at("orthogonal_targets").get<std::map<std::string, std::string>>();
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace gradiend
