// End-to-end acceptance suite. Each criterion prints exactly one PASS/FAIL
// line; the process exits nonzero if any criterion fails. Criteria that need
// a trained pipeline share one full run; determinism gets a second run.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gradiend/gradiend_core.hpp"
#include "gradiend/grad_extract.hpp"
#include "gradiend/metrics.hpp"
#include "gradiend/model.hpp"
#include "gradiend/pipeline.hpp"
#include "gradiend/rewrite.hpp"
#include "gradiend/rng.hpp"
#include "reference_model.hpp"

using namespace gradiend;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int idx, const char* what, bool ok, const std::string& detail) {
    std::printf("%s criterion %d (%s): %s\n", ok ? "PASS" : "FAIL", idx, what, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// --- criterion 1: backward pass vs central finite differences ---------------

void criterion_gradients() {
    ModelConfig cfg; // default micro architecture
    cfg.seed = 1234;
    ParamStore model = build_model(cfg);

    Rng rng(987);
    std::vector<int> tokens(12);
    for (auto& t : tokens) t = 2 + static_cast<int>(rng.next_index(cfg.vocab_size - 2));
    int position = 5;
    int target = tokens[static_cast<size_t>(position)];
    std::vector<int> masked = tokens;
    masked[static_cast<size_t>(position)] = 1; // [MASK]

    auto start = std::chrono::steady_clock::now();
    GradMap grads = target_loss_grads(model, masked, position, target, nullptr);

    std::vector<std::string> names;
    for (const auto& [name, t] : model.params) names.push_back(name);

    int checked = 0, bad = 0;
    double worst = 0.0;
    while (checked < 100) {
        const std::string& name = names[rng.next_index(names.size())];
        const Tensor& p = model.at(name);
        size_t idx = rng.next_index(p.data.size());
        double analytic = grads.at(name).data[idx];
        double numeric = refmodel::finite_diff(model, name, idx, masked, position, target, 1e-4);
        double err = std::abs(analytic - numeric);
        double rel = err / std::max(std::abs(numeric), 1e-12);
        if (rel > 1e-3 && err > 1e-5) ++bad;
        worst = std::max(worst, std::min(rel, err));
        ++checked;
    }
    double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report(1, "gradient correctness", bad == 0 && secs < 60.0,
           "100 coordinates, " + std::to_string(bad) + " outside tolerance, worst " + fmt(worst) +
               ", " + fmt(secs) + " s");
}

// --- criterion 4: decoder point symmetry ------------------------------------

void criterion_point_symmetry(const ParamStore& base, const Gradiend& g) {
    SweepGrid grid = SweepGrid::defaults();
    double worst = 0.0;
    for (double h : grid.feature_factors)
        for (double alpha : grid.learning_rates)
            worst = std::max(worst, point_symmetry_residual(base, g, h, alpha));
    report(4, "point symmetry", worst <= 1e-5,
           "max residual " + fmt(worst) + " over " +
               std::to_string(grid.feature_factors.size() * grid.learning_rates.size()) +
               " grid cells");
}

// --- criterion 7: metric oracles --------------------------------------------

void criterion_metric_oracles() {
    Rng rng(555);
    bool ok = true;
    std::string detail;

    // selection indices vs an independent recomputation
    double worst_idx = 0.0;
    for (int set = 0; set < 20 && ok; ++set) {
        size_t count = 3 + rng.next_index(20);
        std::vector<ProbeResult> probes(count);
        for (auto& p : probes) {
            p.p_a = rng.uniform(0.0, 0.6);
            p.p_b = rng.uniform(0.0, 1.0 - p.p_a);
            p.p_union = p.p_a + p.p_b;
        }
        double lms = rng.uniform(0.0, 1.0);
        SelectionScores got = selection_scores(probes, lms);
        double bpi = 0.0, fpi = 0.0, mpi = 0.0;
        for (const auto& p : probes) {
            bpi += (1.0 - std::abs(p.p_a - p.p_b)) * p.p_union;
            fpi += (1.0 - p.p_b) * p.p_a;
            mpi += (1.0 - p.p_a) * p.p_b;
        }
        double scale = lms / static_cast<double>(count);
        for (double d : {std::abs(got.bpi - scale * bpi), std::abs(got.fpi - scale * fpi),
                         std::abs(got.mpi - scale * mpi)})
            worst_idx = std::max(worst_idx, d);
        if (worst_idx > 1e-9) {
            ok = false;
            detail = "selection index mismatch " + fmt(worst_idx);
        }
    }

    // pearson vs the direct formula
    if (ok) {
        for (int set = 0; set < 20 && ok; ++set) {
            std::vector<double> xs(40), ys(40);
            for (size_t i = 0; i < xs.size(); ++i) {
                xs[i] = rng.normal();
                ys[i] = 0.3 * xs[i] + rng.normal();
            }
            double mx = 0.0, my = 0.0;
            for (size_t i = 0; i < xs.size(); ++i) {
                mx += xs[i] / 40.0;
                my += ys[i] / 40.0;
            }
            double sxy = 0.0, sxx = 0.0, syy = 0.0;
            for (size_t i = 0; i < xs.size(); ++i) {
                sxy += (xs[i] - mx) * (ys[i] - my);
                sxx += (xs[i] - mx) * (xs[i] - mx);
                syy += (ys[i] - my) * (ys[i] - my);
            }
            double direct = sxy / std::sqrt(sxx * syy);
            if (std::abs(pearson(xs, ys) - direct) > 1e-9) {
                ok = false;
                detail = "pearson mismatch";
            }
        }
    }

    // SEAT of identical target sets is exactly zero
    if (ok) {
        std::vector<std::vector<double>> x = {{1.0, 0.2}, {0.4, 0.9}};
        std::vector<std::vector<double>> a = {{1.0, 0.0}}, b = {{0.0, 1.0}};
        if (seat_effect_size(x, x, a, b) != 0.0) {
            ok = false;
            detail = "SEAT of identical sets nonzero";
        }
    }

    // SS of a constructed 60/40 preference model
    if (ok) {
        Lexicon lex = build_lexicon(20, 10, 77);
        TokenizerVocab vocab = build_vocab(lex, 200);
        ModelConfig mcfg;
        ParamStore model = build_model(mcfg);
        for (auto& [name, t] : model.params)
            for (auto& v : t.data) v = 0.0f;
        // context-free preferences via the output-head bias
        const std::string hi = lex.nouns.at(0), lo = lex.nouns.at(1), ml = lex.nouns.at(2);
        Tensor& hb = model.params.at("head.out.b");
        hb.data[static_cast<size_t>(vocab.id(hi))] = 3.0f;
        hb.data[static_cast<size_t>(vocab.id(lo))] = 1.0f;
        hb.data[static_cast<size_t>(vocab.id(ml))] = -5.0f;

        std::vector<SsProbe> probes;
        int wanted_wins = 0;
        for (int i = 0; i < 500; ++i) {
            SsProbe p;
            p.tokens = {"the", lex.nouns.at(3), lex.verbs.at(0), "the", "[MASK]", "."};
            p.slot = 4;
            bool stereo_wins = rng.bernoulli(0.6);
            p.stereotypical = stereo_wins ? hi : lo;
            p.anti_stereotypical = stereo_wins ? lo : hi;
            p.meaningless = ml;
            wanted_wins += stereo_wins ? 1 : 0;
            probes.push_back(std::move(p));
        }
        SsResult r = ss_score(model, vocab, probes);
        double expect = static_cast<double>(wanted_wins) / 500.0;
        double sigma3 = 3.0 * std::sqrt(0.6 * 0.4 / 500.0);
        if (r.meaningful_wins != 500 || std::abs(r.ss - expect) > 1e-12 ||
            std::abs(r.ss - 0.6) > sigma3) {
            ok = false;
            detail = "SS " + fmt(r.ss) + " vs planned " + fmt(expect);
        } else {
            detail = "20 index sets + 20 pearson sets to 1e-9; SEAT identity 0; SS " + fmt(r.ss) +
                     " within 3 sigma of 0.6";
        }
    }
    report(7, "metric oracles", ok, detail);
}

// --- criterion 8: bootstrap protocol ----------------------------------------

void criterion_bootstrap() {
    Rng rng(666);
    bool contained = true;
    for (int i = 0; i < 50; ++i) {
        size_t n = 20 + rng.next_index(180);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal() * rng.uniform(0.5, 3.0);
        MetricReport r = bootstrap_mean("m", v, 1000 + static_cast<uint64_t>(i));
        if (!(r.ci_low <= r.value && r.value <= r.ci_high)) contained = false;
    }

    std::vector<double> big(10000), small(100);
    for (auto& x : big) x = rng.normal();
    for (auto& x : small) x = rng.normal();
    MetricReport rb = bootstrap_mean("big", big, 7);
    MetricReport rs = bootstrap_mean("small", small, 7);
    double wb = rb.ci_high - rb.ci_low, ws = rs.ci_high - rs.ci_low;
    report(8, "bootstrap protocol", contained && wb < ws,
           std::string(contained ? "CI contains estimate on 50/50 vectors" : "containment failed") +
               "; width n=10000 " + fmt(wb) + " vs n=100 " + fmt(ws));
}

// --- criterion 9: determinism across full runs ------------------------------

void criterion_determinism(const fs::path& dir_a, const RunConfig& base_cfg) {
    fs::path dir_b = dir_a.parent_path() / (dir_a.filename().string() + "-b");
    fs::remove_all(dir_b);
    RunConfig cfg = base_cfg;
    cfg.out_dir = dir_b.string();
    Pipeline(cfg).run();

    std::vector<std::string> files = {"sweep.csv",       "metrics.csv",     "model_base.grad1",
                                      "gradiend.grad1",  "model_bpi.grad1", "model_fpi.grad1",
                                      "model_mpi.grad1"};
    std::vector<std::string> diff;
    for (const auto& f : files)
        if (read_bytes(dir_a / f) != read_bytes(dir_b / f)) diff.push_back(f);
    std::string detail = diff.empty() ? "all CSVs and checkpoints byte-identical across two runs"
                                      : "differs: ";
    for (const auto& f : diff) detail += f + " ";
    report(9, "determinism", diff.empty(), detail);
}

} // namespace

int main() {
    criterion_gradients();

    // One shared full pipeline run feeds criteria 2-6.
    fs::path out = fs::temp_directory_path() / "gradiend-acceptance";
    fs::remove_all(out);
    RunConfig cfg;
    cfg.out_dir = out.string();

    auto start = std::chrono::steady_clock::now();
    Pipeline pipe(cfg);
    pipe.run();
    double run_secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    report(2, "encoder separation", pipe.cor_t_test >= 0.90 && run_secs <= 600.0,
           "test-split cor_t " + fmt(pipe.cor_t_test) + ", full run " + fmt(run_secs) + " s");

    report(3, "neutral generalization",
           pipe.cor_enc_value >= 0.70 && pipe.neutral_mean_abs <= 0.5,
           "cor_enc " + fmt(pipe.cor_enc_value) + ", neutral mean |h| " +
               fmt(pipe.neutral_mean_abs));

    criterion_point_symmetry(pipe.model, pipe.grad);

    {
        const SweepCell& base = pipe.cells.at(0);
        const SweepCell& bpi = pipe.selected.at("bpi");
        double base_gap = std::abs(base.p_a - base.p_b);
        double sel_gap = std::abs(bpi.p_a - bpi.p_b);
        bool lms_ok = std::abs(bpi.lms - base.lms) <= 0.10 * base.lms;
        report(5, "debiasing effect",
               base.h == 0.0 && base.alpha == 0.0 && sel_gap < base_gap && bpi.bpi > base.bpi &&
                   lms_ok,
               "gap " + fmt(base_gap) + " -> " + fmt(sel_gap) + ", BPI " + fmt(base.bpi) + " -> " +
                   fmt(bpi.bpi) + ", lms " + fmt(base.lms) + " -> " + fmt(bpi.lms));

        const SweepCell& fpi = pipe.selected.at("fpi");
        const SweepCell& mpi = pipe.selected.at("mpi");
        bool fpi_ok = fpi.p_a > fpi.p_b && fpi.p_b < 0.5 * base.p_b;
        bool mpi_ok = mpi.p_b > mpi.p_a && mpi.p_a < 0.5 * base.p_a;
        report(6, "biasing effect", fpi_ok && mpi_ok,
               "FPI cell P(A) " + fmt(fpi.p_a) + " / P(B) " + fmt(fpi.p_b) + " (base P(B) " +
                   fmt(base.p_b) + "); MPI cell P(A) " + fmt(mpi.p_a) + " / P(B) " + fmt(mpi.p_b) +
                   " (base P(A) " + fmt(base.p_a) + ")");
    }

    criterion_metric_oracles();
    criterion_bootstrap();
    criterion_determinism(out, cfg);

    if (failures == 0) std::printf("acceptance: all 9 criteria passed\n");
    else std::printf("acceptance: %d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
