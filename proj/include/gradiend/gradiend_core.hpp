#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradiend/container.hpp"
#include "gradiend/grad_extract.hpp"

namespace gradiend {

// The gradient encoder-decoder: h = tanh(w_enc . g + b_enc),
// dec(h) = h * w_dec + b_dec. 3n+1 learnable scalars.
struct Gradiend {
    std::vector<float> w_enc;
    float b_enc = 0.0f;
    std::vector<float> w_dec;
    std::vector<float> b_dec;
    FlatIndexMap index;
    bool sign_standardized = false;
    std::string class_a, class_b; // class_a < class_b lexicographically

    size_t n() const { return w_enc.size(); }
    size_t param_count() const { return 3 * n() + 1; }
    void set_class_pair(std::string a, std::string b);
};

// w_enc, w_dec, b_dec uniform in (-1/sqrt(n), 1/sqrt(n)); b_enc = 0. The
// decoder deliberately reuses the encoder's n for its initialization scale.
Gradiend init_gradiend(size_t n, uint64_t seed);

double encode(const Gradiend& g, const std::vector<float>& grad);
std::vector<float> decode(const Gradiend& g, double h);

struct GradiendTrainConfig {
    // Desk-scale default; the full-scale reference setting is 1e-5 with
    // ~1e8-length inputs, far too slow for n on the order of 2e4.
    double lr = 1e-3;
    double weight_decay = 1e-2; // decoupled, weights only (not biases)
    int steps = 2000;
    int eval_every = 250;
    int grad_batch = 32;    // batch size for gradient computation (sampler side)
    int gradiend_batch = 1; // samples per optimizer step

    void validate() const;
};

// Labeled encoder input for validation: +1 for class A, -1 for class B.
struct LabeledGradient {
    std::vector<float> grad_factual;
    int label = 0;
};

// Yields one batch-averaged GradientSample of the requested factual class.
using BatchSampler = std::function<GradientSample(const std::string& factual_class)>;

struct GradiendTrainState {
    std::vector<double> loss_history;
    std::vector<std::pair<int, double>> cor_history; // (step, cor_t on val)
    double best_cor = 0.0;
    int best_step = -1;
    bool aborted_non_finite = false;
};

// Per step: draw a class uniformly at random, fetch one batch-averaged
// sample, minimize MSE between dec(enc(grad_factual)) and grad_diff with
// Adam. Checkpoints on validation cor_t every eval_every steps; returns the
// best checkpoint.
std::pair<Gradiend, GradiendTrainState> train_gradiend(Gradiend model, const BatchSampler& stream,
                                                       const std::vector<LabeledGradient>& val_set,
                                                       const GradiendTrainConfig& config,
                                                       uint64_t seed);

// Pearson correlation of encoded values against the +-1 labels.
double cor_labeled(const Gradiend& g, const std::vector<LabeledGradient>& samples);

// Flips (w_enc, b_enc, w_dec) together when the class-A calibration mean
// encoding is negative; dec(enc(g)) is unchanged, b_dec untouched.
Gradiend standardize_sign(Gradiend g, const std::vector<LabeledGradient>& calibration);

// Rescales (w_enc, b_enc) so the mean |pre-activation| over the calibration
// samples hits target_pre — the class signal sits in tanh's responsive range
// instead of deep saturation, so weaker inputs encode near 0. w_dec picks up
// a compensating factor to preserve the dec(enc(.)) output scale. The default
// target keeps the stronger class near saturation while leaving headroom
// below it for off-class inputs.
Gradiend calibrate_gain(Gradiend g, const std::vector<LabeledGradient>& calibration,
                        double target_pre = 2.0);

struct MultiSeedResult {
    Gradiend best;
    GradiendTrainState best_state;
    std::vector<std::pair<uint64_t, double>> seed_scores; // (seed, val cor_t)
};

MultiSeedResult multi_seed_train(size_t n, const std::string& class_a, const std::string& class_b,
                                 const std::vector<uint64_t>& seeds, const BatchSampler& stream,
                                 const std::vector<LabeledGradient>& val_set,
                                 const GradiendTrainConfig& config);

// GRAD1 persistence (index map travels in the JSON sidecar, see pipeline).
NamedTensors gradiend_to_tensors(const Gradiend& g);
void gradiend_from_tensors(Gradiend& g, const NamedTensors& tensors);

} // namespace gradiend
