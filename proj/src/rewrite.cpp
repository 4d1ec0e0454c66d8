#include "gradiend/rewrite.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gradiend {

SweepGrid SweepGrid::defaults() {
    SweepGrid g;
    for (double v : {0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 10.0}) {
        g.feature_factors.push_back(-v);
        g.feature_factors.push_back(v);
    }
    g.feature_factors.push_back(0.0);
    std::sort(g.feature_factors.begin(), g.feature_factors.end());
    for (double v : {5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1, 1.0}) {
        g.learning_rates.push_back(-v);
        g.learning_rates.push_back(v);
    }
    std::sort(g.learning_rates.begin(), g.learning_rates.end());
    return g;
}

void SweepGrid::validate() const {
    if (feature_factors.empty() || learning_rates.empty())
        throw std::invalid_argument("SweepGrid: empty axis");
    for (double a : learning_rates)
        if (a == 0.0)
            throw std::invalid_argument("SweepGrid: alpha 0 belongs to the base cell only");
}

ParamStore rewrite(const ParamStore& model, const Gradiend& g, double h, double alpha) {
    if (g.index.total != g.n())
        throw std::invalid_argument("rewrite: gradiend index does not match its parameter length");
    ParamStore out = model;
    if (alpha == 0.0) return out; // bit-identical copy
    g.index.apply_update(out, decode(g, h), alpha);
    return out;
}

double point_symmetry_residual(const ParamStore& model, const Gradiend& g, double h, double alpha) {
    ParamStore pos = rewrite(model, g, h, alpha);
    ParamStore neg = rewrite(model, g, -h, -alpha);
    double residual = 0.0;
    for (const auto& e : g.index.entries) {
        const Tensor& p = pos.at(e.name);
        const Tensor& q = neg.at(e.name);
        for (size_t i = 0; i < e.length; ++i) {
            double expect = 2.0 * alpha * static_cast<double>(g.b_dec[e.offset + i]);
            double got = static_cast<double>(p.data[i]) - static_cast<double>(q.data[i]);
            residual = std::max(residual, std::abs(got - expect));
        }
    }
    return residual;
}

SweepCell evaluate_cell(const ParamStore& model, const TokenizerVocab& vocab,
                        const SweepInputs& inputs, double h, double alpha) {
    if (inputs.probes.empty() || inputs.neutral_corpus.empty())
        throw std::invalid_argument("evaluate_cell: probe and neutral sets must be non-empty");
    SweepCell cell;
    cell.h = h;
    cell.alpha = alpha;
    double pa = 0.0, pb = 0.0, pu = 0.0;
    for (const auto& probe : inputs.probes) {
        ProbeResult r = gender_probability(model, vocab, probe, inputs.names);
        pa += r.p_a;
        pb += r.p_b;
        pu += r.p_union;
    }
    auto count = static_cast<double>(inputs.probes.size());
    cell.p_a = pa / count;
    cell.p_b = pb / count;
    cell.p_union = pu / count;
    cell.lms = lms_dec(model, inputs.neutral_corpus, inputs.seed);
    // Selection indices over the probe-mean probabilities, so every CSV row
    // can be re-derived from its own P columns and lms.
    SelectionScores s =
        selection_scores({ProbeResult{cell.p_a, cell.p_b, cell.p_union}}, cell.lms);
    cell.bpi = s.bpi;
    cell.fpi = s.fpi;
    cell.mpi = s.mpi;
    return cell;
}

std::vector<SweepCell> sweep(const ParamStore& model, const Gradiend& g, const SweepGrid& grid,
                             const TokenizerVocab& vocab, const SweepInputs& inputs) {
    grid.validate();
    std::vector<std::pair<double, double>> cells;
    if (grid.include_base_cell) cells.emplace_back(0.0, 0.0);
    for (double h : grid.feature_factors)
        for (double alpha : grid.learning_rates) cells.emplace_back(h, alpha);

    std::vector<SweepCell> out;
    out.reserve(cells.size());
    for (const auto& [h, alpha] : cells) {
        try {
            ParamStore edited = rewrite(model, g, h, alpha);
            out.push_back(evaluate_cell(edited, vocab, inputs, h, alpha));
        } catch (const std::exception& e) {
            SweepCell failed;
            failed.h = h;
            failed.alpha = alpha;
            failed.ok = false;
            failed.status = e.what();
            out.push_back(std::move(failed));
        }
    }
    return out;
}

SelectCriterion select_criterion_from_string(const std::string& name) {
    if (name == "bpi") return SelectCriterion::BPI;
    if (name == "fpi") return SelectCriterion::FPI;
    if (name == "mpi") return SelectCriterion::MPI;
    throw std::invalid_argument("unknown selection criterion: " + name);
}

std::string to_string(SelectCriterion c) {
    switch (c) {
    case SelectCriterion::BPI: return "bpi";
    case SelectCriterion::FPI: return "fpi";
    case SelectCriterion::MPI: return "mpi";
    }
    throw std::logic_error("unreachable");
}

SweepCell select(const std::vector<SweepCell>& cells, SelectCriterion criterion) {
    auto score = [criterion](const SweepCell& c) {
        switch (criterion) {
        case SelectCriterion::BPI: return c.bpi;
        case SelectCriterion::FPI: return c.fpi;
        case SelectCriterion::MPI: return c.mpi;
        }
        return 0.0;
    };
    const SweepCell* best = nullptr;
    for (const auto& c : cells) {
        if (!c.ok) continue;
        if (!best) {
            best = &c;
            continue;
        }
        double s = score(c), bs = score(*best);
        bool better = s > bs;
        if (s == bs) {
            // Prefer the cell closest to the unmodified model.
            if (std::abs(c.alpha) < std::abs(best->alpha)) better = true;
            else if (std::abs(c.alpha) == std::abs(best->alpha) &&
                     std::abs(c.h) < std::abs(best->h))
                better = true;
        }
        if (better) best = &c;
    }
    if (!best) throw std::invalid_argument("select: no successful cells");
    return *best;
}

} // namespace gradiend
