#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace gradiend {

// Dense row-major float tensor. Values are stored in 32-bit; reductions
// accumulate in 64-bit.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d);

    static Tensor zeros(std::vector<int> s);
    static Tensor full(std::vector<int> s, float v);
    static Tensor scalar(float v) { return Tensor({1}, {v}); }
    static Tensor vec(std::vector<float> d);

    size_t size() const { return data.size(); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

std::string shape_str(const std::vector<int>& s);

// parameter name -> d(loss)/d(parameter)
using GradMap = std::map<std::string, Tensor>;

enum class UnaryOp { Tanh, Exp, Log, Negate };

// Reverse-mode tape. Single-use: one backward() per tape. Confined to one
// thread for its lifetime; distinct tapes may run in parallel.
class Tape {
  public:
    // Named leaves are trainable parameters and appear in the GradMap.
    int leaf(Tensor value, std::string name = {});
    int constant(Tensor value) { return leaf(std::move(value)); }

    int matmul(int a, int b);    // [m,k] x [k,n]
    int matmul_nt(int a, int b); // [m,k] x [n,k]^T
    int add(int a, int b);       // same shape
    int add_row(int a, int bias); // [m,n] + broadcast [n]
    int apply_unary(UnaryOp op, int x);
    int tanh_(int x) { return apply_unary(UnaryOp::Tanh, x); }
    int scale(int x, float c);
    int layer_norm(int x, int gain, int bias); // per row of [m,n]
    // softmax over each row; optional additive mask (same shape constant)
    int row_softmax(int a, const Tensor* additive_mask = nullptr);
    int gather_rows(int table, std::vector<int> ids);
    int slice_row(int a, int row);              // [m,n] -> [n]
    int slice_cols(int a, int start, int count); // [m,n] -> [m,count]
    int concat_cols(const std::vector<int>& parts);
    // -log softmax(logits)[target], max-stabilized; logits rank-1
    int softmax_cross_entropy(int logits, int target);

    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    // Gradients for every named leaf; zero tensors for untouched leaves.
    // Throws std::logic_error when called on a consumed tape.
    GradMap backward(int loss);

  private:
    struct Node {
        Tensor value;
        std::string param_name;
        std::function<void()> backfn; // accumulates into parent grads
    };

    Tensor& grad(int id);
    int push(Tensor value, std::function<void()> backfn = {});

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> has_grad_;
    bool consumed_ = false;
};

// Central finite differences over every scalar parameter.
using LossFn = std::function<double(const std::map<std::string, Tensor>&)>;
GradMap finite_diff_gradient(const LossFn& loss_fn, const std::map<std::string, Tensor>& params,
                             double eps);
// Single-coordinate variant for sampled checks on larger models.
double finite_diff_coordinate(const LossFn& loss_fn, std::map<std::string, Tensor> params,
                              const std::string& name, size_t flat_index, double eps);

} // namespace gradiend
