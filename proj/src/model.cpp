#include "gradiend/model.hpp"

#include <cmath>
#include <stdexcept>

#include "gradiend/rng.hpp"

namespace gradiend {

namespace {

constexpr int kMaskId = 1;

int ffn_hidden(int embed_dim) { return 4 * embed_dim; }

std::string block_prefix(int b) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "body.block%02d.", b);
    return buf;
}

Tensor random_tensor(Rng& rng, std::vector<int> shape, double std_dev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.normal() * std_dev);
    return t;
}

struct Fwd {
    Tape tape;
    std::map<std::string, int> pnodes;
    int hidden = -1;
    int seq_len = 0;
};

void check_tokens(const ModelConfig& cfg, const std::vector<int>& tokens) {
    if (tokens.empty()) throw std::invalid_argument("model forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw std::invalid_argument("model forward: sequence length " +
                                    std::to_string(tokens.size()) + " exceeds max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab_size)
            throw std::out_of_range("model forward: token id " + std::to_string(id) +
                                    " outside vocabulary");
}

Fwd run_forward(const ParamStore& model, const std::vector<int>& tokens, bool causal) {
    const ModelConfig& cfg = model.config;
    check_tokens(cfg, tokens);
    int len = static_cast<int>(tokens.size());
    int d = cfg.embed_dim;
    int heads = cfg.num_heads;
    int dh = d / heads;

    Fwd f;
    f.seq_len = len;
    for (const auto& [name, t] : model.params) f.pnodes[name] = f.tape.leaf(t, name);

    std::vector<int> positions(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) positions[static_cast<size_t>(i)] = i;
    int x = f.tape.add(f.tape.gather_rows(f.pnodes.at("body.tok_emb"), tokens),
                       f.tape.gather_rows(f.pnodes.at("body.pos_emb"), positions));

    Tensor causal_mask;
    if (causal) {
        causal_mask = Tensor::zeros({len, len});
        for (int i = 0; i < len; ++i)
            for (int j = i + 1; j < len; ++j) causal_mask.at(i, j) = -1e9f;
    }

    for (int b = 0; b < cfg.num_blocks; ++b) {
        std::string p = block_prefix(b);
        auto node = [&](const std::string& s) { return f.pnodes.at(p + s); };

        int q = f.tape.add_row(f.tape.matmul(x, node("attn.wq")), node("attn.bq"));
        int k = f.tape.add_row(f.tape.matmul(x, node("attn.wk")), node("attn.bk"));
        int v = f.tape.add_row(f.tape.matmul(x, node("attn.wv")), node("attn.bv"));
        std::vector<int> head_outs;
        for (int h = 0; h < heads; ++h) {
            int qh = f.tape.slice_cols(q, h * dh, dh);
            int kh = f.tape.slice_cols(k, h * dh, dh);
            int vh = f.tape.slice_cols(v, h * dh, dh);
            int scores = f.tape.scale(f.tape.matmul_nt(qh, kh),
                                      static_cast<float>(1.0 / std::sqrt(dh)));
            int probs = f.tape.row_softmax(scores, causal ? &causal_mask : nullptr);
            head_outs.push_back(f.tape.matmul(probs, vh));
        }
        int attn = f.tape.add_row(f.tape.matmul(f.tape.concat_cols(head_outs), node("attn.wo")),
                                  node("attn.bo"));
        x = f.tape.layer_norm(f.tape.add(x, attn), node("ln1.gain"), node("ln1.bias"));

        int h1 = f.tape.tanh_(f.tape.add_row(f.tape.matmul(x, node("ffn.w1")), node("ffn.b1")));
        int ff = f.tape.add_row(f.tape.matmul(h1, node("ffn.w2")), node("ffn.b2"));
        x = f.tape.layer_norm(f.tape.add(x, ff), node("ln2.gain"), node("ln2.bias"));
    }
    f.hidden = x;
    return f;
}

// rank-1 logits node over the vocabulary from one hidden row
int logits_node(Fwd& f, int hidden_row) {
    int row = f.tape.gather_rows(f.hidden, {hidden_row});
    int lg = f.tape.add_row(f.tape.matmul(row, f.pnodes.at("head.out.w")),
                            f.pnodes.at("head.out.b"));
    return f.tape.slice_row(lg, 0);
}

// (prediction row within the forwarded sequence, sequence actually consumed)
std::pair<int, std::vector<int>> prepare_prediction(const ParamStore& model,
                                                    const std::vector<int>& tokens, int position) {
    const ModelConfig& cfg = model.config;
    if (cfg.mode == ModelMode::FullContext) {
        if (position < 0 || position >= static_cast<int>(tokens.size()))
            throw std::out_of_range("forward_logits: position " + std::to_string(position) +
                                    " out of range");
        if (tokens[static_cast<size_t>(position)] != kMaskId)
            throw std::invalid_argument("forward_logits: position must hold [MASK] in "
                                        "full-context mode");
        return {position, tokens};
    }
    if (position < 1 || position > static_cast<int>(tokens.size()))
        throw std::out_of_range("forward_logits: prefix position " + std::to_string(position) +
                                " out of range");
    std::vector<int> prefix(tokens.begin(), tokens.begin() + position);
    return {position - 1, std::move(prefix)};
}

double row_nll(const Tensor& hidden, int row, const Tensor& w, const Tensor& b, int target) {
    int vocab = w.cols();
    double mx = -1e30;
    std::vector<double> logits(static_cast<size_t>(vocab));
    for (int j = 0; j < vocab; ++j) {
        double acc = b.data[static_cast<size_t>(j)];
        for (int p = 0; p < w.rows(); ++p)
            acc += static_cast<double>(hidden.at(row, p)) * w.at(p, j);
        logits[static_cast<size_t>(j)] = acc;
        mx = std::max(mx, acc);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    return -(logits[static_cast<size_t>(target)] - mx - std::log(z));
}

int row_argmax(const Tensor& hidden, int row, const Tensor& w, const Tensor& b) {
    int vocab = w.cols();
    int best = 0;
    double best_v = -1e300;
    for (int j = 0; j < vocab; ++j) {
        double acc = b.data[static_cast<size_t>(j)];
        for (int p = 0; p < w.rows(); ++p)
            acc += static_cast<double>(hidden.at(row, p)) * w.at(p, j);
        if (acc > best_v) {
            best_v = acc;
            best = j;
        }
    }
    return best;
}

} // namespace

void ModelConfig::validate() const {
    if (vocab_size <= 0 || max_seq_len <= 0 || embed_dim <= 0 || num_blocks <= 0 || num_heads <= 0)
        throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    if (embed_dim % num_heads != 0)
        throw std::invalid_argument("ModelConfig: embed_dim must be divisible by num_heads");
}

size_t ModelConfig::body_param_count() const {
    auto d = static_cast<size_t>(embed_dim);
    size_t h = static_cast<size_t>(ffn_hidden(embed_dim));
    size_t per_block = 4 * (d * d + d) // attention projections
                       + 4 * d         // two layer norms
                       + d * h + h + h * d + d;
    return static_cast<size_t>(vocab_size) * d + static_cast<size_t>(max_seq_len) * d +
           static_cast<size_t>(num_blocks) * per_block;
}

size_t ModelConfig::head_param_count() const {
    return static_cast<size_t>(embed_dim) * vocab_size + static_cast<size_t>(vocab_size);
}

size_t ParamStore::total_param_count() const {
    size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
}

ParamStore build_model(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    ParamStore m;
    m.config = config;
    int d = config.embed_dim;
    int h = ffn_hidden(d);

    m.params["body.tok_emb"] = random_tensor(rng, {config.vocab_size, d}, 0.02);
    m.params["body.pos_emb"] = random_tensor(rng, {config.max_seq_len, d}, 0.02);
    for (int b = 0; b < config.num_blocks; ++b) {
        std::string p = block_prefix(b);
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            m.params[p + w] = random_tensor(rng, {d, d}, 0.05);
        for (const char* bias : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            m.params[p + bias] = Tensor::zeros({d});
        m.params[p + "ln1.gain"] = Tensor::full({d}, 1.0f);
        m.params[p + "ln1.bias"] = Tensor::zeros({d});
        m.params[p + "ln2.gain"] = Tensor::full({d}, 1.0f);
        m.params[p + "ln2.bias"] = Tensor::zeros({d});
        m.params[p + "ffn.w1"] = random_tensor(rng, {d, h}, 0.05);
        m.params[p + "ffn.b1"] = Tensor::zeros({h});
        m.params[p + "ffn.w2"] = random_tensor(rng, {h, d}, 0.05);
        m.params[p + "ffn.b2"] = Tensor::zeros({d});
    }
    m.params["head.out.w"] = random_tensor(rng, {d, config.vocab_size}, 0.02);
    m.params["head.out.b"] = Tensor::zeros({config.vocab_size});
    return m;
}

Tensor forward_logits(const ParamStore& model, const std::vector<int>& tokens, int position) {
    auto [row, seq] = prepare_prediction(model, tokens, position);
    Fwd f = run_forward(model, seq, model.config.mode == ModelMode::PrefixOnly);
    return f.tape.val(logits_node(f, row));
}

double target_loss(const ParamStore& model, const std::vector<int>& tokens, int position,
                   int target) {
    auto [row, seq] = prepare_prediction(model, tokens, position);
    if (target < 0 || target >= model.config.vocab_size)
        throw std::out_of_range("target_loss: target token out of vocabulary");
    Fwd f = run_forward(model, seq, model.config.mode == ModelMode::PrefixOnly);
    int loss = f.tape.softmax_cross_entropy(logits_node(f, row), target);
    return f.tape.val(loss).data[0];
}

GradMap target_loss_grads(const ParamStore& model, const std::vector<int>& tokens, int position,
                          int target, double* loss_out) {
    auto [row, seq] = prepare_prediction(model, tokens, position);
    if (target < 0 || target >= model.config.vocab_size)
        throw std::out_of_range("target_loss: target token out of vocabulary");
    Fwd f = run_forward(model, seq, model.config.mode == ModelMode::PrefixOnly);
    int loss = f.tape.softmax_cross_entropy(logits_node(f, row), target);
    if (loss_out) *loss_out = f.tape.val(loss).data[0];
    return f.tape.backward(loss);
}

Tensor predict_distribution(const ParamStore& model, const std::vector<int>& tokens,
                            int position) {
    Tensor logits = forward_logits(model, tokens, position);
    double mx = -1e30;
    for (float v : logits.data) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (float v : logits.data) z += std::exp(v - mx);
    Tensor out = logits;
    for (auto& v : out.data) v = static_cast<float>(std::exp(v - mx) / z);
    return out;
}

Tensor hidden_states(const ParamStore& model, const std::vector<int>& tokens) {
    Fwd f = run_forward(model, tokens, model.config.mode == ModelMode::PrefixOnly);
    return f.tape.val(f.hidden);
}

void Adam::step(std::map<std::string, Tensor>& params, const GradMap& grads,
                const std::function<bool(const std::string&)>& decay_param) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("Adam::step: no parameter " + name);
        Tensor& p = it->second;
        if (!p.same_shape(g))
            throw std::invalid_argument("Adam::step: gradient shape mismatch for " + name);
        Tensor& m = m_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        bool decay = cfg_.weight_decay != 0.0 && decay_param && decay_param(name);
        for (size_t i = 0; i < p.size(); ++i) {
            double gi = g.data[i];
            double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
            double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double update = cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
            if (decay) update += cfg_.lr * cfg_.weight_decay * p.data[i];
            p.data[i] = static_cast<float>(p.data[i] - update);
        }
    }
}

std::vector<double> train_lm(ParamStore& model, const std::vector<std::vector<int>>& corpus,
                             int steps, double lr, uint64_t seed, int batch_size) {
    if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
    if (lr <= 0.0) throw std::invalid_argument("train_lm: learning rate must be positive");
    if (steps < 0 || batch_size < 1) throw std::invalid_argument("train_lm: bad step/batch config");
    bool prefix = model.config.mode == ModelMode::PrefixOnly;

    Adam opt(AdamConfig{.lr = lr});
    Rng rng(seed);
    std::vector<double> history;
    history.reserve(static_cast<size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        // Cosine decay to zero: late steps settle the model close to its
        // optimum, which keeps held-out gradient magnitudes small.
        opt.set_lr(lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                              static_cast<double>(steps))));
        GradMap acc;
        double loss_sum = 0.0;
        int samples = 0;
        auto accumulate = [&](GradMap&& g) {
            if (acc.empty()) {
                acc = std::move(g);
                return;
            }
            for (auto& [name, t] : acc) {
                const Tensor& gt = g.at(name);
                for (size_t i = 0; i < t.size(); ++i) t.data[i] += gt.data[i];
            }
        };
        for (int b = 0; b < batch_size; ++b) {
            const auto& sent = corpus[rng.next_index(corpus.size())];
            if (sent.size() < 2) continue;
            double loss = 0.0;
            if (prefix) {
                int pos = 1 + static_cast<int>(rng.next_index(sent.size() - 1));
                accumulate(
                    target_loss_grads(model, sent, pos, sent[static_cast<size_t>(pos)], &loss));
                loss_sum += loss;
                ++samples;
            } else {
                // Bernoulli-mask at the evaluation rate so multi-mask
                // contexts (degraded neighbors) appear during training too.
                std::vector<int> positions;
                for (int p = 0; p < static_cast<int>(sent.size()); ++p)
                    if (rng.bernoulli(0.15)) positions.push_back(p);
                if (positions.empty())
                    positions.push_back(static_cast<int>(rng.next_index(sent.size())));
                std::vector<int> masked = sent;
                for (int p : positions) masked[static_cast<size_t>(p)] = kMaskId;
                for (int p : positions) {
                    accumulate(target_loss_grads(model, masked, p, sent[static_cast<size_t>(p)],
                                                 &loss));
                    loss_sum += loss;
                    ++samples;
                }
            }
        }
        if (samples == 0) throw std::runtime_error("train_lm: batch drew no usable sentences");
        double mean_loss = loss_sum / samples;
        if (!std::isfinite(mean_loss))
            throw std::runtime_error("train_lm: non-finite loss at step " + std::to_string(step));
        for (auto& [name, t] : acc)
            for (auto& v : t.data) v /= static_cast<float>(samples);
        opt.step(model.params, acc);
        history.push_back(mean_loss);
    }
    return history;
}

double masked_accuracy(const ParamStore& model, const std::vector<std::vector<int>>& corpus,
                       double mask_rate, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("masked_accuracy: empty corpus");
    if (mask_rate <= 0.0 || mask_rate >= 1.0)
        throw std::invalid_argument("masked_accuracy: mask_rate must lie in (0,1)");
    bool prefix = model.config.mode == ModelMode::PrefixOnly;
    const Tensor& hw = model.at("head.out.w");
    const Tensor& hb = model.at("head.out.b");

    Rng rng(seed);
    size_t correct = 0, total = 0;
    for (const auto& sent : corpus) {
        if (sent.size() < 2) continue;
        std::vector<int> positions;
        int first_ok = prefix ? 1 : 0;
        for (int p = first_ok; p < static_cast<int>(sent.size()); ++p)
            if (rng.bernoulli(mask_rate)) positions.push_back(p);
        if (positions.empty())
            positions.push_back(first_ok +
                                static_cast<int>(rng.next_index(sent.size() - first_ok)));

        std::vector<int> input = sent;
        if (!prefix)
            for (int p : positions) input[static_cast<size_t>(p)] = kMaskId;
        Tensor hidden = hidden_states(model, input);
        for (int p : positions) {
            int row = prefix ? p - 1 : p;
            if (row_argmax(hidden, row, hw, hb) == sent[static_cast<size_t>(p)]) ++correct;
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("masked_accuracy: no usable sentences");
    return static_cast<double>(correct) / static_cast<double>(total);
}

double perplexity(const ParamStore& model, const std::vector<std::vector<int>>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
    if (model.config.mode != ModelMode::PrefixOnly)
        throw std::invalid_argument("perplexity: model must be in prefix-only mode");
    const Tensor& hw = model.at("head.out.w");
    const Tensor& hb = model.at("head.out.b");
    double nll = 0.0;
    size_t total = 0;
    for (const auto& sent : corpus) {
        if (sent.size() < 2) continue;
        Tensor hidden = hidden_states(model, sent);
        for (size_t p = 1; p < sent.size(); ++p) {
            nll += row_nll(hidden, static_cast<int>(p) - 1, hw, hb, sent[p]);
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("perplexity: no usable sentences");
    return std::exp(nll / static_cast<double>(total));
}

} // namespace gradiend
