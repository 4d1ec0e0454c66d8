#include "gradiend/grad_extract.hpp"

#include <cmath>
#include <stdexcept>

namespace gradiend {

namespace {

constexpr int kMaskId = 1;

// Masked input ids and the prediction position for a template instance.
std::pair<std::vector<int>, int> masked_input(const ParamStore& model, const TokenizerVocab& vocab,
                                              const Template& instance) {
    std::vector<int> ids = vocab.encode(instance.tokens);
    int slot = instance.target_slot;
    if (slot < 0 || slot >= static_cast<int>(ids.size()))
        throw std::out_of_range("extract_gradients: target slot out of range");
    if (model.config.mode == ModelMode::FullContext) ids[static_cast<size_t>(slot)] = kMaskId;
    return {std::move(ids), slot};
}

int single_token_id(const TokenizerVocab& vocab, const std::string& token) {
    if (token.find(' ') != std::string::npos)
        throw std::invalid_argument("extract_gradients: multi-token target rejected: " + token);
    return vocab.id(token);
}

} // namespace

std::vector<float> FlatIndexMap::flatten(const GradMap& grads) const {
    std::vector<float> out(total, 0.0f);
    for (const auto& e : entries) {
        auto it = grads.find(e.name);
        if (it == grads.end())
            throw std::out_of_range("FlatIndexMap::flatten: missing gradient for " + e.name);
        if (it->second.size() != e.length)
            throw std::invalid_argument("FlatIndexMap::flatten: size mismatch for " + e.name);
        std::copy(it->second.data.begin(), it->second.data.end(), out.begin() + static_cast<long>(e.offset));
    }
    return out;
}

std::map<std::string, Tensor> FlatIndexMap::unflatten(const std::vector<float>& flat) const {
    if (flat.size() != total)
        throw std::invalid_argument("FlatIndexMap::unflatten: expected length " +
                                    std::to_string(total));
    std::map<std::string, Tensor> out;
    for (const auto& e : entries) {
        std::vector<float> data(flat.begin() + static_cast<long>(e.offset),
                                flat.begin() + static_cast<long>(e.offset + e.length));
        out[e.name] = Tensor(e.shape, std::move(data));
    }
    return out;
}

void FlatIndexMap::apply_update(ParamStore& model, const std::vector<float>& delta,
                                double scale) const {
    if (delta.size() != total)
        throw std::invalid_argument("FlatIndexMap::apply_update: expected length " +
                                    std::to_string(total));
    for (const auto& e : entries) {
        auto it = model.params.find(e.name);
        if (it == model.params.end() || it->second.size() != e.length)
            throw std::invalid_argument("FlatIndexMap::apply_update: index does not match model (" +
                                        e.name + ")");
        for (size_t i = 0; i < e.length; ++i)
            it->second.data[i] =
                static_cast<float>(it->second.data[i] + scale * delta[e.offset + i]);
    }
}

FlatIndexMap build_flat_index(const ParamStore& model) {
    FlatIndexMap map;
    size_t offset = 0;
    for (const auto& [name, t] : model.params) { // std::map: lexicographic
        if (ParamStore::is_head(name)) continue;
        map.entries.push_back({name, t.shape, offset, t.size()});
        offset += t.size();
    }
    map.total = offset;
    return map;
}

GradientSample extract_gradients(const ParamStore& model, const FlatIndexMap& index,
                                 const TokenizerVocab& vocab, const Template& instance,
                                 const std::string& orthogonal_class) {
    if (orthogonal_class == instance.factual_class)
        throw std::invalid_argument("extract_gradients: orthogonal class equals factual class");
    auto orth_it = instance.orthogonal_targets.find(orthogonal_class);
    if (orth_it == instance.orthogonal_targets.end())
        throw std::invalid_argument("extract_gradients: instance has no orthogonal target for " +
                                    orthogonal_class);

    auto [ids, slot] = masked_input(model, vocab, instance);
    int factual = single_token_id(vocab, instance.factual_target);
    int orthogonal = single_token_id(vocab, orth_it->second);

    GradientSample s;
    s.factual_class = instance.factual_class;
    s.grad_factual = index.flatten(target_loss_grads(model, ids, slot, factual));
    s.grad_orthogonal = index.flatten(target_loss_grads(model, ids, slot, orthogonal));
    s.grad_diff.resize(index.total);
    for (size_t i = 0; i < index.total; ++i) {
        s.grad_diff[i] = s.grad_factual[i] - s.grad_orthogonal[i];
        if (!std::isfinite(s.grad_diff[i]))
            throw std::runtime_error("extract_gradients: non-finite gradient");
    }
    return s;
}

std::vector<float> extract_plain_gradient(const ParamStore& model, const FlatIndexMap& index,
                                          const TokenizerVocab& vocab,
                                          const std::vector<std::string>& tokens, int slot) {
    std::vector<int> ids = vocab.encode(tokens);
    if (slot < 0 || slot >= static_cast<int>(ids.size()))
        throw std::out_of_range("extract_plain_gradient: slot out of range");
    int target = ids[static_cast<size_t>(slot)];
    if (model.config.mode == ModelMode::FullContext) ids[static_cast<size_t>(slot)] = kMaskId;
    auto g = index.flatten(target_loss_grads(model, ids, slot, target));
    for (float v : g)
        if (!std::isfinite(v)) throw std::runtime_error("extract_plain_gradient: non-finite gradient");
    return g;
}

GradientSample batch_accumulate(const std::vector<GradientSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("batch_accumulate: empty batch");
    size_t n = samples.front().grad_factual.size();
    GradientSample out;
    out.factual_class = samples.front().factual_class;
    std::vector<double> f(n, 0.0), o(n, 0.0), d(n, 0.0);
    for (const auto& s : samples) {
        if (s.factual_class != out.factual_class)
            throw std::invalid_argument("batch_accumulate: mixed factual classes in batch");
        if (s.grad_factual.size() != n)
            throw std::invalid_argument("batch_accumulate: inconsistent sample lengths");
        for (size_t i = 0; i < n; ++i) {
            f[i] += s.grad_factual[i];
            o[i] += s.grad_orthogonal[i];
            d[i] += s.grad_diff[i];
        }
    }
    auto count = static_cast<double>(samples.size());
    out.grad_factual.resize(n);
    out.grad_orthogonal.resize(n);
    out.grad_diff.resize(n);
    for (size_t i = 0; i < n; ++i) {
        out.grad_factual[i] = static_cast<float>(f[i] / count);
        out.grad_orthogonal[i] = static_cast<float>(o[i] / count);
        out.grad_diff[i] = static_cast<float>(d[i] / count);
    }
    return out;
}

} // namespace gradiend
