#include "gradiend/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gradiend/rng.hpp"

namespace gradiend {

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size())
        throw std::invalid_argument("pearson: length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    size_t n = xs.size();
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = xs[i] - mx;
        double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw std::domain_error("pearson: undefined correlation (zero variance)");
    return sxy / std::sqrt(sxx * syy);
}

double cor_enc(const std::vector<EncodedValue>& values, uint64_t seed) {
    std::map<std::string, std::vector<size_t>> by_set;
    bool have_signed = false, have_neutral = false;
    for (size_t i = 0; i < values.size(); ++i) {
        by_set[values[i].provenance].push_back(i);
        if (values[i].expected_label == 0) have_neutral = true;
        else have_signed = true;
    }
    if (!have_signed || !have_neutral)
        throw std::invalid_argument("cor_enc: need both labeled and neutral evaluation sets");

    size_t smallest = values.size();
    for (const auto& [tag, idx] : by_set) smallest = std::min(smallest, idx.size());

    std::vector<double> h, y;
    for (auto& [tag, idx] : by_set) {
        Rng rng(derive_seed(seed, "cor-enc-downsample:" + tag));
        rng.shuffle(idx);
        idx.resize(smallest);
        std::sort(idx.begin(), idx.end());
        for (size_t i : idx) {
            h.push_back(values[i].h);
            y.push_back(static_cast<double>(values[i].expected_label));
        }
    }
    return pearson(h, y);
}

double neutral_abs_mean(const std::vector<EncodedValue>& values) {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& v : values) {
        if (v.expected_label != 0) continue;
        sum += std::abs(v.h);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("neutral_abs_mean: no neutral samples");
    return sum / static_cast<double>(count);
}

namespace {

// Ids with the prediction slot masked; slot tokens themselves are never
// looked up (they may be placeholders like "[NAME]").
std::vector<int> masked_ids(const TokenizerVocab& vocab, const std::vector<std::string>& tokens,
                            int slot) {
    if (slot < 0 || slot >= static_cast<int>(tokens.size()))
        throw std::out_of_range("probe slot out of range");
    std::vector<int> ids(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i)
        ids[i] = static_cast<int>(i) == slot ? TokenizerVocab::kMask : vocab.id(tokens[i]);
    return ids;
}

void check_probe_result(ProbeResult& r) {
    if (r.p_a < -1e-9 || r.p_b < -1e-9 || r.p_union > 1.0 + 1e-6)
        throw std::runtime_error("probe probabilities out of range");
    r.p_a = std::clamp(r.p_a, 0.0, 1.0);
    r.p_b = std::clamp(r.p_b, 0.0, 1.0);
    r.p_union = std::clamp(r.p_union, 0.0, 1.0);
}

} // namespace

ProbeResult gender_probability(const ParamStore& model, const TokenizerVocab& vocab,
                               const Probe& probe, const std::vector<NameRecord>& names) {
    if (names.empty()) throw std::invalid_argument("gender_probability: empty name table");
    auto ids = masked_ids(vocab, probe.tokens, probe.name_slot);
    Tensor dist = predict_distribution(model, ids, probe.name_slot);
    ProbeResult r;
    for (const auto& rec : names) {
        double p = dist.data[static_cast<size_t>(vocab.id(rec.name))];
        r.p_a += p * rec.p_female;
        r.p_b += p * rec.p_male;
    }
    r.p_union = r.p_a + r.p_b;
    check_probe_result(r);
    return r;
}

ProbeResult class_probability(const ParamStore& model, const TokenizerVocab& vocab,
                              const std::vector<std::string>& tokens, int slot,
                              const ClassSpec& class_a, const ClassSpec& class_b) {
    if (class_a.attributes.empty() || class_b.attributes.empty())
        throw std::invalid_argument("class_probability: empty attribute set");
    auto ids = masked_ids(vocab, tokens, slot);
    Tensor dist = predict_distribution(model, ids, slot);
    ProbeResult r;
    for (const auto& tok : class_a.attributes) r.p_a += dist.data[static_cast<size_t>(vocab.id(tok))];
    for (const auto& tok : class_b.attributes) r.p_b += dist.data[static_cast<size_t>(vocab.id(tok))];
    r.p_union = r.p_a + r.p_b;
    check_probe_result(r);
    return r;
}

SelectionScores selection_scores(const std::vector<ProbeResult>& per_text, double lms) {
    if (per_text.empty()) throw std::invalid_argument("selection_scores: empty probe list");
    if (lms < 0.0 || lms > 1.0) throw std::invalid_argument("selection_scores: lms outside [0,1]");
    double bpi = 0.0, fpi = 0.0, mpi = 0.0;
    for (const auto& t : per_text) {
        if (t.p_a < 0.0 || t.p_a > 1.0 || t.p_b < 0.0 || t.p_b > 1.0)
            throw std::invalid_argument("selection_scores: probability outside [0,1]");
        bpi += (1.0 - std::abs(t.p_a - t.p_b)) * t.p_union;
        fpi += (1.0 - t.p_b) * t.p_a;
        mpi += (1.0 - t.p_a) * t.p_b;
    }
    double scale = lms / static_cast<double>(per_text.size());
    return {bpi * scale, fpi * scale, mpi * scale};
}

double lms_dec(const ParamStore& model, const std::vector<std::vector<int>>& neutral_corpus,
               uint64_t seed) {
    if (neutral_corpus.empty()) throw std::invalid_argument("lms_dec: empty corpus");
    if (model.config.mode == ModelMode::FullContext)
        return masked_accuracy(model, neutral_corpus, 0.15, seed);
    return 1.0 / (1.0 + perplexity(model, neutral_corpus));
}

SsResult ss_score(const ParamStore& model, const TokenizerVocab& vocab,
                  const std::vector<SsProbe>& probes) {
    if (probes.empty()) throw std::invalid_argument("ss_score: empty probe list");
    SsResult out;
    int stereo_wins = 0;
    for (const auto& p : probes) {
        if (p.stereotypical.empty() || p.anti_stereotypical.empty() || p.meaningless.empty())
            throw std::invalid_argument("ss_score: probe missing an option class");
        auto ids = masked_ids(vocab, p.tokens, p.slot);
        Tensor dist = predict_distribution(model, ids, p.slot);
        double ps = dist.data[static_cast<size_t>(vocab.id(p.stereotypical))];
        double pa = dist.data[static_cast<size_t>(vocab.id(p.anti_stereotypical))];
        double pm = dist.data[static_cast<size_t>(vocab.id(p.meaningless))];
        if (std::max(ps, pa) <= pm) continue;
        ++out.meaningful_wins;
        if (ps > pa) ++stereo_wins;
        else if (ps == pa) ++out.ties; // credited to anti-stereotypical
    }
    out.lms_ss = static_cast<double>(out.meaningful_wins) / static_cast<double>(probes.size());
    out.ss = out.meaningful_wins == 0
                 ? 0.0
                 : static_cast<double>(stereo_wins) / static_cast<double>(out.meaningful_wins);
    return out;
}

std::vector<double> sentence_embedding(const ParamStore& model, const std::vector<int>& ids) {
    Tensor h = hidden_states(model, ids);
    int rows = h.shape[0], cols = h.shape[1];
    std::vector<double> out(static_cast<size_t>(cols), 0.0);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[static_cast<size_t>(c)] += h.at(r, c);
    for (auto& v : out) v /= static_cast<double>(rows);
    return out;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("seat_effect_size: embedding dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw std::domain_error("seat_effect_size: zero-norm embedding");
    return dot / std::sqrt(na * nb);
}

double association(const std::vector<double>& w, const std::vector<std::vector<double>>& attrs_a,
                   const std::vector<std::vector<double>>& attrs_b) {
    double sa = 0.0, sb = 0.0;
    for (const auto& a : attrs_a) sa += cosine(w, a);
    for (const auto& b : attrs_b) sb += cosine(w, b);
    return sa / static_cast<double>(attrs_a.size()) - sb / static_cast<double>(attrs_b.size());
}

} // namespace

double seat_effect_size(const std::vector<std::vector<double>>& targets_x,
                        const std::vector<std::vector<double>>& targets_y,
                        const std::vector<std::vector<double>>& attrs_a,
                        const std::vector<std::vector<double>>& attrs_b) {
    if (targets_x.empty() || targets_y.empty() || attrs_a.empty() || attrs_b.empty())
        throw std::invalid_argument("seat_effect_size: empty set");
    std::vector<double> s_all;
    double sum_x = 0.0, sum_y = 0.0;
    for (const auto& x : targets_x) {
        double s = association(x, attrs_a, attrs_b);
        sum_x += s;
        s_all.push_back(s);
    }
    for (const auto& y : targets_y) {
        double s = association(y, attrs_a, attrs_b);
        sum_y += s;
        s_all.push_back(s);
    }
    double num = sum_x / static_cast<double>(targets_x.size()) -
                 sum_y / static_cast<double>(targets_y.size());
    if (s_all.size() < 2) throw std::domain_error("seat_effect_size: undefined std with one sample");
    double mean = 0.0;
    for (double s : s_all) mean += s;
    mean /= static_cast<double>(s_all.size());
    double var = 0.0;
    for (double s : s_all) var += (s - mean) * (s - mean);
    var /= static_cast<double>(s_all.size() - 1);
    double sd = std::sqrt(var);
    if (sd == 0.0) {
        if (num == 0.0) return 0.0; // identical target sets
        throw std::domain_error("seat_effect_size: undefined effect size (zero std)");
    }
    return num / sd;
}

namespace {

double percentile(const std::vector<double>& sorted, double q) {
    double pos = q * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<size_t>(std::floor(pos));
    auto hi = static_cast<size_t>(std::ceil(pos));
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

} // namespace

MetricReport bootstrap(const std::string& name, const std::vector<double>& values,
                       const std::function<double(const std::vector<double>&)>& statistic,
                       int resamples, double ci_level, uint64_t seed) {
    if (values.empty()) throw std::invalid_argument("bootstrap: empty values");
    if (resamples < 1) throw std::invalid_argument("bootstrap: resamples must be >= 1");
    if (ci_level <= 0.0 || ci_level >= 1.0)
        throw std::invalid_argument("bootstrap: ci_level must lie in (0,1)");

    MetricReport report;
    report.name = name;
    report.n = values.size();
    report.value = statistic(values);

    size_t n = values.size();
    std::vector<double> stats(static_cast<size_t>(resamples));
    std::vector<double> resample(n);
    for (int r = 0; r < resamples; ++r) {
        // Per-resample seed: result independent of execution order.
        Rng rng(derive_seed(seed, "bootstrap", static_cast<uint64_t>(r)));
        for (size_t i = 0; i < n; ++i) resample[i] = values[rng.next_index(n)];
        stats[static_cast<size_t>(r)] = statistic(resample);
    }
    double mean = 0.0;
    for (double s : stats) mean += s;
    report.boot_mean = mean / static_cast<double>(resamples);

    std::sort(stats.begin(), stats.end());
    double tail = (1.0 - ci_level) / 2.0;
    report.ci_low = percentile(stats, tail);
    report.ci_high = percentile(stats, 1.0 - tail);
    return report;
}

} // namespace gradiend
