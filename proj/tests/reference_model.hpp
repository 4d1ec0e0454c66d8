// Independent double-precision reimplementation of the micro transformer
// forward pass, used as a numeric oracle. Deliberately written with plain
// nested vectors and no shared code with the library implementation.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradiend/model.hpp"

namespace refmodel {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const gradiend::Tensor& t) {
    if (t.shape.size() == 1) {
        Mat m(1, std::vector<double>(t.data.begin(), t.data.end()));
        return m;
    }
    Mat m(static_cast<size_t>(t.rows()), std::vector<double>(static_cast<size_t>(t.cols())));
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) m[size_t(i)][size_t(j)] = t.at(i, j);
    return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    size_t m = a.size(), k = a[0].size(), n = b[0].size();
    Mat r(m, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < m; ++i)
        for (size_t l = 0; l < k; ++l)
            for (size_t j = 0; j < n; ++j) r[i][j] += a[i][l] * b[l][j];
    return r;
}

inline void add_row_inplace(Mat& a, const std::vector<double>& bias) {
    for (auto& row : a)
        for (size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& gain,
                      const std::vector<double>& bias) {
    Mat y = x;
    size_t n = x[0].size();
    for (auto& row : y) {
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= double(n);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= double(n);
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (size_t j = 0; j < n; ++j) row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
    }
    return y;
}

inline void softmax_row(std::vector<double>& row) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double& v : row) {
        v = std::exp(v - mx);
        z += v;
    }
    for (double& v : row) v /= z;
}

// Hidden states after the final block, one row per consumed token.
inline Mat hidden_states(const gradiend::ParamStore& model, const std::vector<int>& seq,
                         bool causal) {
    const auto& cfg = model.config;
    int d = cfg.embed_dim;
    int heads = cfg.num_heads;
    int dh = d / heads;
    size_t len = seq.size();

    Mat tok = to_mat(model.at("body.tok_emb"));
    Mat pos = to_mat(model.at("body.pos_emb"));
    Mat x(len, std::vector<double>(size_t(d)));
    for (size_t i = 0; i < len; ++i)
        for (int j = 0; j < d; ++j)
            x[i][size_t(j)] = tok[size_t(seq[i])][size_t(j)] + pos[i][size_t(j)];

    for (int b = 0; b < cfg.num_blocks; ++b) {
        char prefix[32];
        std::snprintf(prefix, sizeof(prefix), "body.block%02d.", b);
        auto P = [&](const std::string& s) { return to_mat(model.at(prefix + s)); };
        auto V = [&](const std::string& s) { return to_mat(model.at(prefix + s))[0]; };

        Mat q = matmul(x, P("attn.wq"));
        add_row_inplace(q, V("attn.bq"));
        Mat k = matmul(x, P("attn.wk"));
        add_row_inplace(k, V("attn.bk"));
        Mat v = matmul(x, P("attn.wv"));
        add_row_inplace(v, V("attn.bv"));

        Mat concat(len, std::vector<double>(size_t(d)));
        for (int h = 0; h < heads; ++h) {
            size_t off = size_t(h) * size_t(dh);
            for (size_t i = 0; i < len; ++i) {
                std::vector<double> scores(len);
                for (size_t t = 0; t < len; ++t) {
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c) acc += q[i][off + size_t(c)] * k[t][off + size_t(c)];
                    scores[t] = acc / std::sqrt(double(dh));
                    if (causal && t > i) scores[t] += -1e9;
                }
                softmax_row(scores);
                for (int c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (size_t t = 0; t < len; ++t) acc += scores[t] * v[t][off + size_t(c)];
                    concat[i][off + size_t(c)] = acc;
                }
            }
        }
        Mat attn = matmul(concat, P("attn.wo"));
        add_row_inplace(attn, V("attn.bo"));
        for (size_t i = 0; i < len; ++i)
            for (int j = 0; j < d; ++j) attn[i][size_t(j)] += x[i][size_t(j)];
        x = layer_norm(attn, V("ln1.gain"), V("ln1.bias"));

        Mat h1 = matmul(x, P("ffn.w1"));
        add_row_inplace(h1, V("ffn.b1"));
        for (auto& row : h1)
            for (double& val : row) val = std::tanh(val);
        Mat ff = matmul(h1, P("ffn.w2"));
        add_row_inplace(ff, V("ffn.b2"));
        for (size_t i = 0; i < len; ++i)
            for (int j = 0; j < d; ++j) ff[i][size_t(j)] += x[i][size_t(j)];
        x = layer_norm(ff, V("ln2.gain"), V("ln2.bias"));
    }
    return x;
}

inline std::vector<double> logits_at(const gradiend::ParamStore& model,
                                     const std::vector<int>& tokens, int position) {
    bool prefix_mode = model.config.mode == gradiend::ModelMode::PrefixOnly;
    std::vector<int> seq = tokens;
    int row = position;
    if (prefix_mode) {
        seq.assign(tokens.begin(), tokens.begin() + position);
        row = position - 1;
    }
    Mat hidden = hidden_states(model, seq, prefix_mode);
    Mat hw = to_mat(model.at("head.out.w"));
    std::vector<double> hb = to_mat(model.at("head.out.b"))[0];
    size_t vocab = hb.size();
    std::vector<double> logits(vocab);
    for (size_t j = 0; j < vocab; ++j) {
        double acc = hb[j];
        for (size_t p = 0; p < hw.size(); ++p) acc += hidden[size_t(row)][p] * hw[p][j];
        logits[j] = acc;
    }
    return logits;
}

inline double forward_loss(const gradiend::ParamStore& model, const std::vector<int>& tokens,
                           int position, int target) {
    std::vector<double> logits = logits_at(model, tokens, position);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return -(logits[size_t(target)] - mx - std::log(z));
}

// Central finite difference of forward_loss with respect to one parameter
// coordinate, evaluated entirely in double precision.
inline double finite_diff(const gradiend::ParamStore& model, const std::string& name, size_t index,
                          const std::vector<int>& tokens, int position, int target, double eps) {
    gradiend::ParamStore up = model, dn = model;
    float& u = up.params.at(name).data[index];
    float& d = dn.params.at(name).data[index];
    double orig = u;
    u = static_cast<float>(orig + eps);
    d = static_cast<float>(orig - eps);
    // parameters are float, so divide by the spread actually realized
    double width = double(u) - double(d);
    return (forward_loss(up, tokens, position, target) - forward_loss(dn, tokens, position, target)) /
           width;
}

} // namespace refmodel
