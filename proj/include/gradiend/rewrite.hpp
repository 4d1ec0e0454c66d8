#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradiend/gradiend_core.hpp"
#include "gradiend/metrics.hpp"

namespace gradiend {

struct SweepGrid {
    std::vector<double> feature_factors; // h, 15 values by default
    std::vector<double> learning_rates;  // alpha, 16 values by default
    bool include_base_cell = true;       // (0, 0)

    static SweepGrid defaults();
    void validate() const;
};

struct SweepCell {
    double h = 0.0;
    double alpha = 0.0;
    double p_a = 0.0;
    double p_b = 0.0;
    double p_union = 0.0;
    double lms = 0.0;
    double bpi = 0.0;
    double fpi = 0.0;
    double mpi = 0.0;
    bool ok = true;
    std::string status = "ok"; // failure cause otherwise
};

// W~ = W + alpha * dec(h) on the body parameters of a fresh copy; head
// parameters untouched.
ParamStore rewrite(const ParamStore& model, const Gradiend& g, double h, double alpha);

// max_i |[rewrite(h,a) - rewrite(-h,-a)] - 2a*b_dec|_i over body parameters
double point_symmetry_residual(const ParamStore& model, const Gradiend& g, double h, double alpha);

// Per-cell probe inputs: gender probes (name prediction) plus neutral text.
struct SweepInputs {
    std::vector<Probe> probes;
    std::vector<NameRecord> names;
    std::vector<std::vector<int>> neutral_corpus;
    uint64_t seed = 0;
};

// Evaluates one rewritten model (also used for the base cell).
SweepCell evaluate_cell(const ParamStore& model, const TokenizerVocab& vocab,
                        const SweepInputs& inputs, double h, double alpha);

// Base cell first (if enabled), then row-major over (h, alpha). Each cell
// rewrites from the pristine base model; failures are recorded in-cell and
// the sweep continues.
std::vector<SweepCell> sweep(const ParamStore& model, const Gradiend& g, const SweepGrid& grid,
                             const TokenizerVocab& vocab, const SweepInputs& inputs);

enum class SelectCriterion { BPI, FPI, MPI };

SelectCriterion select_criterion_from_string(const std::string& name);
std::string to_string(SelectCriterion c);

// Argmax over ok cells; ties broken by smaller |alpha|, then smaller |h|.
SweepCell select(const std::vector<SweepCell>& cells, SelectCriterion criterion);

} // namespace gradiend
