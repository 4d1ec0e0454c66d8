#include "gradiend/gradiend_core.hpp"

#include <cmath>
#include <stdexcept>

#include "gradiend/metrics.hpp"
#include "gradiend/rng.hpp"

namespace gradiend {

void Gradiend::set_class_pair(std::string a, std::string b) {
    if (a == b) throw std::invalid_argument("Gradiend: class pair must be two distinct classes");
    if (b < a) std::swap(a, b);
    class_a = std::move(a);
    class_b = std::move(b);
}

void GradiendTrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr))
        throw std::invalid_argument("GradiendTrainConfig: lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("GradiendTrainConfig: negative weight decay");
    if (steps < 1) throw std::invalid_argument("GradiendTrainConfig: steps must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("GradiendTrainConfig: eval_every must be >= 1");
    if (grad_batch < 1) throw std::invalid_argument("GradiendTrainConfig: grad_batch must be >= 1");
    if (gradiend_batch < 1)
        throw std::invalid_argument("GradiendTrainConfig: gradiend_batch must be >= 1");
}

Gradiend init_gradiend(size_t n, uint64_t seed) {
    if (n == 0) throw std::invalid_argument("init_gradiend: n must be positive");
    Gradiend g;
    double bound = 1.0 / std::sqrt(static_cast<double>(n));
    Rng rng(derive_seed(seed, "gradiend-init"));
    g.w_enc.resize(n);
    g.w_dec.resize(n);
    g.b_dec.resize(n);
    for (auto& v : g.w_enc) v = static_cast<float>(rng.uniform(-bound, bound));
    g.b_enc = 0.0f;
    for (auto& v : g.w_dec) v = static_cast<float>(rng.uniform(-bound, bound));
    for (auto& v : g.b_dec) v = static_cast<float>(rng.uniform(-bound, bound));
    return g;
}

double encode(const Gradiend& g, const std::vector<float>& grad) {
    if (grad.size() != g.n())
        throw std::invalid_argument("encode: input length " + std::to_string(grad.size()) +
                                    " != n " + std::to_string(g.n()));
    double acc = static_cast<double>(g.b_enc);
    for (size_t i = 0; i < grad.size(); ++i)
        acc += static_cast<double>(g.w_enc[i]) * static_cast<double>(grad[i]);
    return std::tanh(acc);
}

std::vector<float> decode(const Gradiend& g, double h) {
    std::vector<float> out(g.n());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(h * static_cast<double>(g.w_dec[i]) +
                                    static_cast<double>(g.b_dec[i]));
    return out;
}

double cor_labeled(const Gradiend& g, const std::vector<LabeledGradient>& samples) {
    std::vector<double> h(samples.size()), y(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        h[i] = encode(g, samples[i].grad_factual);
        y[i] = static_cast<double>(samples[i].label);
    }
    return pearson(h, y);
}

namespace {

// Adam state for the 3n+1 scalars, flattened as [w_enc | w_dec | b_dec | b_enc].
struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;

    explicit AdamState(size_t len) : m(len, 0.0), v(len, 0.0) {}

    void update(double lr, double wd, std::vector<double>& theta, const std::vector<double>& grad,
                size_t decay_end) {
        ++t;
        double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t));
        for (size_t i = 0; i < theta.size(); ++i) {
            m[i] = 0.9 * m[i] + 0.1 * grad[i];
            v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + 1e-8);
            if (i < decay_end) theta[i] -= lr * wd * theta[i]; // decoupled, weights only
        }
    }
};

struct FlatParams {
    std::vector<double> theta; // [w_enc | w_dec | b_dec | b_enc]
    size_t n;

    explicit FlatParams(const Gradiend& g) : n(g.n()) {
        theta.resize(3 * n + 1);
        for (size_t i = 0; i < n; ++i) theta[i] = g.w_enc[i];
        for (size_t i = 0; i < n; ++i) theta[n + i] = g.w_dec[i];
        for (size_t i = 0; i < n; ++i) theta[2 * n + i] = g.b_dec[i];
        theta[3 * n] = g.b_enc;
    }

    void store(Gradiend& g) const {
        for (size_t i = 0; i < n; ++i) g.w_enc[i] = static_cast<float>(theta[i]);
        for (size_t i = 0; i < n; ++i) g.w_dec[i] = static_cast<float>(theta[n + i]);
        for (size_t i = 0; i < n; ++i) g.b_dec[i] = static_cast<float>(theta[2 * n + i]);
        g.b_enc = static_cast<float>(theta[3 * n]);
    }
};

// MSE between dec(enc(x)) and y, with analytic gradients accumulated into
// grad (same flat layout as FlatParams::theta).
double mse_step(const FlatParams& p, const std::vector<float>& x, const std::vector<float>& y,
                std::vector<double>& grad) {
    size_t n = p.n;
    const double* w_enc = p.theta.data();
    const double* w_dec = p.theta.data() + n;
    const double* b_dec = p.theta.data() + 2 * n;

    double pre = p.theta[3 * n];
    for (size_t i = 0; i < n; ++i) pre += w_enc[i] * static_cast<double>(x[i]);
    double h = std::tanh(pre);

    double loss = 0.0;
    double dh = 0.0;
    double inv_n = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        double pred = h * w_dec[i] + b_dec[i];
        double r = pred - static_cast<double>(y[i]);
        loss += r * r;
        double dpred = 2.0 * r * inv_n;
        grad[n + i] += dpred * h;     // w_dec
        grad[2 * n + i] += dpred;     // b_dec
        dh += dpred * w_dec[i];
    }
    double dpre = dh * (1.0 - h * h);
    for (size_t i = 0; i < n; ++i) grad[i] += dpre * static_cast<double>(x[i]); // w_enc
    grad[3 * n] += dpre;                                                        // b_enc
    return loss * inv_n;
}

} // namespace

std::pair<Gradiend, GradiendTrainState> train_gradiend(Gradiend model, const BatchSampler& stream,
                                                       const std::vector<LabeledGradient>& val_set,
                                                       const GradiendTrainConfig& config,
                                                       uint64_t seed) {
    config.validate();
    if (model.class_a.empty() || model.class_b.empty())
        throw std::invalid_argument("train_gradiend: class pair not set");
    if (!stream) throw std::invalid_argument("train_gradiend: null sampler");

    FlatParams params(model);
    AdamState adam(params.theta.size());
    Rng rng(derive_seed(seed, "gradiend-train"));

    GradiendTrainState state;
    Gradiend best = model;
    bool have_best = false;

    std::vector<double> grad(params.theta.size());
    for (int step = 1; step <= config.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (int b = 0; b < config.gradiend_batch; ++b) {
            const std::string& cls = rng.bernoulli(0.5) ? model.class_a : model.class_b;
            GradientSample sample = stream(cls);
            if (sample.grad_factual.size() != params.n || sample.grad_diff.size() != params.n)
                throw std::invalid_argument("train_gradiend: sample length mismatch");
            loss += mse_step(params, sample.grad_factual, sample.grad_diff, grad);
        }
        loss /= config.gradiend_batch;
        if (config.gradiend_batch > 1)
            for (auto& v : grad) v /= config.gradiend_batch;

        if (!std::isfinite(loss)) {
            state.aborted_non_finite = true;
            break;
        }
        state.loss_history.push_back(loss);
        adam.update(config.lr, config.weight_decay, params.theta, grad, 2 * params.n);

        bool last_step = step == config.steps;
        if (step % config.eval_every == 0 || last_step) {
            params.store(model);
            double cor = val_set.empty() ? 0.0 : cor_labeled(model, val_set);
            state.cor_history.emplace_back(step, cor);
            // Orientation is arbitrary until sign standardization, so rank
            // checkpoints by correlation magnitude.
            if (!have_best || std::abs(cor) > std::abs(state.best_cor)) {
                best = model;
                state.best_cor = cor;
                state.best_step = step;
                have_best = true;
            }
        }
    }

    if (!have_best) { // aborted before the first checkpoint
        params.store(model);
        best = model;
        state.best_cor = val_set.empty() ? 0.0 : cor_labeled(model, val_set);
        state.best_step = static_cast<int>(state.loss_history.size());
    }
    return {std::move(best), std::move(state)};
}

Gradiend standardize_sign(Gradiend g, const std::vector<LabeledGradient>& calibration) {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& s : calibration) {
        if (s.label != 1) continue;
        sum += encode(g, s.grad_factual);
        ++count;
    }
    if (count == 0)
        throw std::invalid_argument("standardize_sign: no class-A samples in calibration set");
    if (sum / static_cast<double>(count) < 0.0) {
        for (auto& v : g.w_enc) v = -v;
        g.b_enc = -g.b_enc;
        for (auto& v : g.w_dec) v = -v; // dec(enc(.)) composite unchanged
    }
    g.sign_standardized = true;
    return g;
}

Gradiend calibrate_gain(Gradiend g, const std::vector<LabeledGradient>& calibration,
                        double target_pre) {
    if (calibration.empty())
        throw std::invalid_argument("calibrate_gain: empty calibration set");
    if (!(target_pre > 0.0))
        throw std::invalid_argument("calibrate_gain: target must be positive");
    // MSE training has no pressure limiting the encoder's scale: once tanh
    // saturates on the class stream, any larger w_enc fits equally well, and
    // a saturated encoder maps weak off-class inputs to +-1 as readily as the
    // class signal itself. Normalize so the mean class |pre-activation| is 1,
    // which keeps the class signal at the knee of tanh and lets weaker inputs
    // land near the origin.
    double mean_pre = 0.0, mean_h_before = 0.0;
    for (const auto& s : calibration) {
        double acc = g.b_enc;
        for (size_t i = 0; i < g.n(); ++i)
            acc += static_cast<double>(g.w_enc[i]) * static_cast<double>(s.grad_factual[i]);
        mean_pre += std::abs(acc);
        mean_h_before += std::abs(std::tanh(acc));
    }
    mean_pre /= static_cast<double>(calibration.size());
    mean_h_before /= static_cast<double>(calibration.size());
    if (!(mean_pre > 0.0))
        throw std::invalid_argument("calibrate_gain: calibration pre-activations are all zero");
    double scale = target_pre / mean_pre;
    for (auto& v : g.w_enc) v = static_cast<float>(v * scale);
    g.b_enc = static_cast<float>(g.b_enc * scale);

    double mean_h_after = 0.0;
    for (const auto& s : calibration) mean_h_after += std::abs(encode(g, s.grad_factual));
    mean_h_after /= static_cast<double>(calibration.size());
    if (mean_h_after > 0.0) {
        // Compensate the decoder so dec(enc(.)) keeps its output scale on the
        // class stream; b_dec stays untouched.
        double comp = mean_h_before / mean_h_after;
        for (auto& v : g.w_dec) v = static_cast<float>(v * comp);
    }
    return g;
}

MultiSeedResult multi_seed_train(size_t n, const std::string& class_a, const std::string& class_b,
                                 const std::vector<uint64_t>& seeds, const BatchSampler& stream,
                                 const std::vector<LabeledGradient>& val_set,
                                 const GradiendTrainConfig& config) {
    if (seeds.empty()) throw std::invalid_argument("multi_seed_train: need at least one seed");
    MultiSeedResult result;
    bool have = false;
    for (uint64_t seed : seeds) {
        Gradiend g = init_gradiend(n, seed);
        g.set_class_pair(class_a, class_b);
        auto [trained, state] = train_gradiend(std::move(g), stream, val_set, config, seed);
        result.seed_scores.emplace_back(seed, state.best_cor);
        if (!have || std::abs(state.best_cor) > std::abs(result.best_state.best_cor)) {
            result.best = std::move(trained);
            result.best_state = std::move(state);
            have = true;
        }
    }
    return result;
}

NamedTensors gradiend_to_tensors(const Gradiend& g) {
    int n = static_cast<int>(g.n());
    NamedTensors out;
    out.emplace_back("b_dec", Tensor({n}, g.b_dec));
    out.emplace_back("b_enc", Tensor::scalar(g.b_enc));
    out.emplace_back("w_dec", Tensor({n}, g.w_dec));
    out.emplace_back("w_enc", Tensor({n}, g.w_enc));
    return out;
}

void gradiend_from_tensors(Gradiend& g, const NamedTensors& tensors) {
    const Tensor* w_enc = nullptr;
    const Tensor* b_enc = nullptr;
    const Tensor* w_dec = nullptr;
    const Tensor* b_dec = nullptr;
    for (const auto& [name, t] : tensors) {
        if (name == "w_enc") w_enc = &t;
        else if (name == "b_enc") b_enc = &t;
        else if (name == "w_dec") w_dec = &t;
        else if (name == "b_dec") b_dec = &t;
    }
    if (!w_enc || !b_enc || !w_dec || !b_dec)
        throw std::invalid_argument("gradiend_from_tensors: missing tensor entries");
    if (w_dec->size() != w_enc->size() || b_dec->size() != w_enc->size() || b_enc->size() != 1)
        throw std::invalid_argument("gradiend_from_tensors: inconsistent tensor shapes");
    g.w_enc = w_enc->data;
    g.b_enc = b_enc->data[0];
    g.w_dec = w_dec->data;
    g.b_dec = b_dec->data;
}

} // namespace gradiend
