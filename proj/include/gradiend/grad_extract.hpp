#pragma once

#include <string>
#include <vector>

#include "gradiend/corpus.hpp"
#include "gradiend/model.hpp"

namespace gradiend {

// Flat view over the model's body parameters (prediction head excluded).
// Entries are lexicographic by parameter name with contiguous offsets.
struct FlatIndexEntry {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;
    size_t length = 0;
};

struct FlatIndexMap {
    std::vector<FlatIndexEntry> entries;
    size_t total = 0; // n

    std::vector<float> flatten(const GradMap& grads) const;
    std::map<std::string, Tensor> unflatten(const std::vector<float>& flat) const;
    // model.param += scale * delta for every body parameter
    void apply_update(ParamStore& model, const std::vector<float>& delta, double scale) const;
};

FlatIndexMap build_flat_index(const ParamStore& model);

// The GRADIEND training unit: factual gradient, orthogonal gradient, and
// their difference, all flattened over the body parameters.
struct GradientSample {
    std::string factual_class;
    std::vector<float> grad_factual;
    std::vector<float> grad_orthogonal;
    std::vector<float> grad_diff;
};

// Two forward/backward passes on identical inputs: the factual target and the
// orthogonal-class target at the instance's target slot.
GradientSample extract_gradients(const ParamStore& model, const FlatIndexMap& index,
                                 const TokenizerVocab& vocab, const Template& instance,
                                 const std::string& orthogonal_class);

// Gradient of the plain masked-token task for the instance's own token at
// `slot`; used for neutral evaluation inputs (no orthogonal pass).
std::vector<float> extract_plain_gradient(const ParamStore& model, const FlatIndexMap& index,
                                          const TokenizerVocab& vocab,
                                          const std::vector<std::string>& tokens, int slot);

// Arithmetic mean over samples of one factual class.
GradientSample batch_accumulate(const std::vector<GradientSample>& samples);

} // namespace gradiend
