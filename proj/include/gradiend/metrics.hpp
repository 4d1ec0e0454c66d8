#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradiend/corpus.hpp"
#include "gradiend/model.hpp"

namespace gradiend {

// Sample Pearson correlation. Throws std::domain_error on zero variance.
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// One encoded evaluation text: the feature value h and its expected label
// (+1 class A, -1 class B, 0 neutral), plus where the text came from.
struct EncodedValue {
    std::string text_id;
    std::string provenance; // class-a-test | class-b-test | neutral-masked | independent-neutral
    int expected_label = 0;
    double h = 0.0;
};

// Pearson over the union of the label groups after downsampling every group
// to the smallest group's size (seeded, deterministic). Requires at least one
// +-1 group and the 0 group.
double cor_enc(const std::vector<EncodedValue>& values, uint64_t seed);

// Mean |h| over the 0-labeled samples.
double neutral_abs_mean(const std::vector<EncodedValue>& values);

struct ProbeResult {
    double p_a = 0.0;
    double p_b = 0.0;
    double p_union = 0.0; // p_a + p_b
};

// P_t(G) = sum_N P_t(N) * P(G|N) over the name tokens, predicted at the
// probe's name slot (masked in full-context mode).
ProbeResult gender_probability(const ParamStore& model, const TokenizerVocab& vocab,
                               const Probe& probe, const std::vector<NameRecord>& names);

// P_t(F) = sum of predicted probability over F's attribute tokens (class-pair
// features, where class membership is an indicator rather than a name prior).
ProbeResult class_probability(const ParamStore& model, const TokenizerVocab& vocab,
                              const std::vector<std::string>& tokens, int slot,
                              const ClassSpec& class_a, const ClassSpec& class_b);

struct SelectionScores {
    double bpi = 0.0;
    double fpi = 0.0; // leans toward class A
    double mpi = 0.0; // leans toward class B
};

// BPI = (lms/|T|) * sum (1 - |p_a - p_b|) * p_union
// FPI = (lms/|T|) * sum (1 - p_b) * p_a, MPI symmetric.
SelectionScores selection_scores(const std::vector<ProbeResult>& per_text, double lms);

// Language-modeling score on neutral text: masked accuracy at rate 0.15
// (full-context) or 1/(1+perplexity) (prefix-only).
double lms_dec(const ParamStore& model, const std::vector<std::vector<int>>& neutral_corpus,
               uint64_t seed);

struct SsResult {
    double ss = 0.0;     // stereotypical beats anti-stereotypical, over meaningful wins
    double lms_ss = 0.0; // a meaningful option beats the meaningless one
    int meaningful_wins = 0;
    int ties = 0; // stereo/anti ties, broken toward anti-stereotypical
};

SsResult ss_score(const ParamStore& model, const TokenizerVocab& vocab,
                  const std::vector<SsProbe>& probes);

// Mean final-block hidden state over the sequence.
std::vector<double> sentence_embedding(const ParamStore& model, const std::vector<int>& ids);

// WEAT effect size d = (mean_X s - mean_Y s) / std_{X u Y} s with
// s(w) = mean cos(w, A) - mean cos(w, B). Throws std::domain_error on a
// zero-norm embedding or zero std.
double seat_effect_size(const std::vector<std::vector<double>>& targets_x,
                        const std::vector<std::vector<double>>& targets_y,
                        const std::vector<std::vector<double>>& attrs_a,
                        const std::vector<std::vector<double>>& attrs_b);

struct MetricReport {
    std::string name;
    double value = 0.0;
    double boot_mean = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    size_t n = 0;
};

// Percentile bootstrap: resample with replacement at full size, statistic per
// resample, percentile interval. Deterministic under seed.
MetricReport bootstrap(const std::string& name, const std::vector<double>& values,
                       const std::function<double(const std::vector<double>&)>& statistic,
                       int resamples, double ci_level, uint64_t seed);

inline MetricReport bootstrap_mean(const std::string& name, const std::vector<double>& values,
                                   uint64_t seed) {
    return bootstrap(
        name, values,
        [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            return s / static_cast<double>(v.size());
        },
        1000, 0.95, seed);
}

} // namespace gradiend
