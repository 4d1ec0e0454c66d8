#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace gradiend {

// A name token with conditional gender probabilities.
struct NameRecord {
    std::string name;
    double p_female = 0.0;
    double p_male = 0.0;
};

// One instantiated token-prediction instance. tokens[name_slot] holds a
// concrete name (gender datasets), tokens[target_slot] the factual target.
struct Template {
    std::vector<std::string> tokens;
    int name_slot = -1;
    int target_slot = -1;
    std::string factual_class;
    std::string factual_target;
    std::map<std::string, std::string> orthogonal_targets; // class id -> token
};

struct ClassSpec {
    std::string id;
    std::vector<std::string> attributes; // aligned across classes by index
};

struct DatasetSplit {
    std::vector<Template> train, val, test;
};

// Stereotype probe: predict a name at name_slot; leaning set by construction.
struct Probe {
    std::vector<std::string> tokens;
    int name_slot = -1;
    std::string leaning; // class id
};

// Intrasentence stereotype probe with three single-token options.
struct SsProbe {
    std::vector<std::string> tokens;
    int slot = -1;
    std::string stereotypical;
    std::string anti_stereotypical;
    std::string meaningless;
};

// Word pools everything is generated from. Class-bearing tokens (names,
// pronouns, attributes, stereo words) are disjoint from the neutral pools.
struct Lexicon {
    std::vector<NameRecord> names; // exact first, then ambiguous
    std::string female_class = "female";
    std::string male_class = "male";
    std::string female_pronoun = "she";
    std::string male_pronoun = "he";
    std::vector<ClassSpec> pair_classes; // three classes, aligned attributes
    std::vector<std::string> stereo_female, stereo_male;
    std::vector<std::string> nouns, verbs, adverbs, adjectives, function_words;
    std::vector<std::vector<std::string>> neutral_pool; // fixed distinct sentences

    std::vector<std::string> class_tokens() const; // all class-bearing tokens
    const NameRecord& record(const std::string& name) const;
};

struct TokenizerVocab {
    std::vector<std::string> tokens; // index == id
    std::unordered_map<std::string, int> ids;

    static constexpr int kPad = 0;
    static constexpr int kMask = 1;

    int id(const std::string& token) const;
    bool contains(const std::string& token) const { return ids.count(token) > 0; }
    int size() const { return static_cast<int>(tokens.size()); }
    std::vector<int> encode(const std::vector<std::string>& toks) const;
};

std::vector<NameRecord> gen_name_table(int count_exact, int count_ambiguous, uint64_t seed);

Lexicon build_lexicon(int count_exact, int count_ambiguous, uint64_t seed);

// Vocabulary over the full lexicon, padded with filler tokens to vocab_size.
TokenizerVocab build_vocab(const Lexicon& lex, int vocab_size);

// Instantiated gender templates: one NAME slot, one TARGET pronoun slot after
// it, no other class-bearing token.
std::vector<Template> gen_templates(const Lexicon& lex, int count, uint64_t seed);

// Texts embedding attribute tokens of one class (input for gen_pair_dataset).
std::vector<std::vector<std::string>> gen_class_texts(const Lexicon& lex, const ClassSpec& cls,
                                                      int count, uint64_t seed);

// Both directions of a class pair: a-factual with b-orthogonal and mirrored.
std::vector<Template> gen_pair_dataset(const ClassSpec& a, const ClassSpec& b,
                                       const std::vector<std::vector<std::string>>& texts,
                                       uint64_t seed);

std::vector<std::vector<std::string>> gen_neutral_corpus(const Lexicon& lex, int count,
                                                         uint64_t seed);

std::vector<Probe> gen_probe_set(const Lexicon& lex, int count, uint64_t seed);

std::vector<SsProbe> gen_stereoset_probes(const Lexicon& lex, int count, uint64_t seed);

// Argmax prediction callback: (tokens, masked slot) -> predicted token.
using ArgmaxPredictor =
    std::function<std::string(const std::vector<std::string>&, int)>;

// Keeps templates the judge resolves correctly for every probe name.
std::vector<Template> judge_filter(const ArgmaxPredictor& judge,
                                   const std::vector<Template>& templates,
                                   const std::vector<NameRecord>& probe_names);

DatasetSplit split(const std::vector<Template>& dataset, const std::vector<double>& fractions,
                   uint64_t seed);

// JSON-lines persistence: one object per template.
std::string templates_to_jsonl(const std::vector<Template>& templates);
std::vector<Template> templates_from_jsonl(const std::string& text);

} // namespace gradiend
