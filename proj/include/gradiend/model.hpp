#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gradiend/tensor.hpp"

namespace gradiend {

enum class ModelMode { FullContext, PrefixOnly };

struct ModelConfig {
    int vocab_size = 200;
    int max_seq_len = 16;
    int embed_dim = 32;
    int num_blocks = 1;
    int num_heads = 2;
    ModelMode mode = ModelMode::FullContext;
    uint64_t seed = 0;

    void validate() const;
    // Closed-form parameter counts for this architecture.
    size_t body_param_count() const;
    size_t head_param_count() const;
};

// Ordered parameter map. Names are stable and lexicographic; prediction-head
// parameters carry the "head." prefix, everything else is "body.".
struct ParamStore {
    ModelConfig config;
    std::map<std::string, Tensor> params;

    static bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }
    size_t total_param_count() const;
    const Tensor& at(const std::string& name) const;
};

ParamStore build_model(const ModelConfig& config);

// Unnormalized scores over the vocabulary at the masked position
// (full-context mode: tokens[position] must be [MASK]) or for the next token
// after the prefix tokens[0..position-1] (prefix mode).
Tensor forward_logits(const ParamStore& model, const std::vector<int>& tokens, int position);

// Cross-entropy of the target token at position; gradients for every
// parameter (zero tensors for untouched ones).
double target_loss(const ParamStore& model, const std::vector<int>& tokens, int position,
                   int target);
GradMap target_loss_grads(const ParamStore& model, const std::vector<int>& tokens, int position,
                          int target, double* loss_out = nullptr);

// softmax(forward_logits), sums to 1 within 1e-6
Tensor predict_distribution(const ParamStore& model, const std::vector<int>& tokens, int position);

// Final-block hidden states for the full sequence (causal in prefix mode).
Tensor hidden_states(const ParamStore& model, const std::vector<int>& tokens);

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled; applied only where step() is told to
};

class Adam {
  public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // Applies one update to every parameter present in grads.
    // decay_param selects which parameters receive weight decay.
    void step(std::map<std::string, Tensor>& params, const GradMap& grads,
              const std::function<bool(const std::string&)>& decay_param = {});

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

  private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// Masked-token pretraining with Adam. Returns the per-step loss history.
std::vector<double> train_lm(ParamStore& model, const std::vector<std::vector<int>>& corpus,
                             int steps, double lr, uint64_t seed, int batch_size = 16);

// Fraction of masked positions where the argmax prediction is the true token.
double masked_accuracy(const ParamStore& model, const std::vector<std::vector<int>>& corpus,
                       double mask_rate, uint64_t seed);

// exp(mean token negative log-likelihood); prefix-only models.
double perplexity(const ParamStore& model, const std::vector<std::vector<int>>& corpus);

} // namespace gradiend
