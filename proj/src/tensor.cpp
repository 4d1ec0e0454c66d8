#include "gradiend/tensor.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gradiend {

namespace {

size_t shape_product(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
        n *= static_cast<size_t>(d);
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_product(shape) != data.size())
        throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(std::vector<int> s) {
    size_t n = shape_product(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
}

Tensor Tensor::full(std::vector<int> s, float v) {
    size_t n = shape_product(s);
    return Tensor(std::move(s), std::vector<float>(n, v));
}

Tensor Tensor::vec(std::vector<float> d) {
    int n = static_cast<int>(d.size());
    return Tensor({n}, std::move(d));
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

int Tape::push(Tensor value, std::function<void()> backfn) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backfn)});
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor value, std::string name) {
    int id = push(std::move(value));
    nodes_[static_cast<size_t>(id)].param_name = std::move(name);
    return id;
}

Tensor& Tape::grad(int id) {
    auto i = static_cast<size_t>(id);
    if (grads_.size() < nodes_.size()) {
        grads_.resize(nodes_.size());
        has_grad_.resize(nodes_.size(), 0);
    }
    if (!has_grad_[i]) {
        grads_[i] = Tensor::zeros(nodes_[i].value.shape);
        has_grad_[i] = 1;
    }
    return grads_[i];
}

int Tape::matmul(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.cols() != B.rows())
        throw std::invalid_argument("matmul shape mismatch: " + shape_str(A.shape) + " x " +
                                    shape_str(B.shape));
    int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor C = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += static_cast<double>(A.at(i, p)) * B.at(p, j);
            C.at(i, j) = static_cast<float>(acc);
        }
    int out = push(std::move(C));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, b, out, m, k, n] {
        const Tensor& dC = grad(out);
        const Tensor& A2 = val(a);
        const Tensor& B2 = val(b);
        Tensor& dA = grad(a);
        Tensor& dB = grad(b);
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += static_cast<double>(dC.at(i, j)) * B2.at(p, j);
                dA.at(i, p) += static_cast<float>(acc);
            }
        for (int p = 0; p < k; ++p)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int i = 0; i < m; ++i) acc += static_cast<double>(A2.at(i, p)) * dC.at(i, j);
                dB.at(p, j) += static_cast<float>(acc);
            }
    };
    return out;
}

int Tape::matmul_nt(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.cols() != B.cols())
        throw std::invalid_argument("matmul_nt shape mismatch: " + shape_str(A.shape) + " x " +
                                    shape_str(B.shape) + "^T");
    int m = A.rows(), k = A.cols(), n = B.rows();
    Tensor C = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += static_cast<double>(A.at(i, p)) * B.at(j, p);
            C.at(i, j) = static_cast<float>(acc);
        }
    int out = push(std::move(C));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, b, out, m, k, n] {
        const Tensor& dC = grad(out);
        const Tensor& A2 = val(a);
        const Tensor& B2 = val(b);
        Tensor& dA = grad(a);
        Tensor& dB = grad(b);
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += static_cast<double>(dC.at(i, j)) * B2.at(j, p);
                dA.at(i, p) += static_cast<float>(acc);
            }
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p) {
                double acc = 0.0;
                for (int i = 0; i < m; ++i) acc += static_cast<double>(dC.at(i, j)) * A2.at(i, p);
                dB.at(j, p) += static_cast<float>(acc);
            }
    };
    return out;
}

int Tape::add(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B))
        throw std::invalid_argument("add shape mismatch: " + shape_str(A.shape) + " vs " +
                                    shape_str(B.shape));
    Tensor C = A;
    for (size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
    int out = push(std::move(C));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, b, out] {
        const Tensor& dC = grad(out);
        Tensor& dA = grad(a);
        Tensor& dB = grad(b);
        for (size_t i = 0; i < dC.size(); ++i) {
            dA.data[i] += dC.data[i];
            dB.data[i] += dC.data[i];
        }
    };
    return out;
}

int Tape::add_row(int a, int bias) {
    const Tensor& A = val(a);
    const Tensor& B = val(bias);
    if (A.shape.size() != 2 || B.shape.size() != 1 || B.shape[0] != A.cols())
        throw std::invalid_argument("add_row shape mismatch: " + shape_str(A.shape) + " + " +
                                    shape_str(B.shape));
    int m = A.rows(), n = A.cols();
    Tensor C = A;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) C.at(i, j) += B.data[static_cast<size_t>(j)];
    int out = push(std::move(C));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, bias, out, m, n] {
        const Tensor& dC = grad(out);
        Tensor& dA = grad(a);
        Tensor& dB = grad(bias);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                dA.at(i, j) += dC.at(i, j);
                dB.data[static_cast<size_t>(j)] += dC.at(i, j);
            }
    };
    return out;
}

int Tape::apply_unary(UnaryOp op, int x) {
    const Tensor& X = val(x);
    Tensor Y = X;
    switch (op) {
        case UnaryOp::Tanh:
            for (auto& v : Y.data) v = std::tanh(v);
            break;
        case UnaryOp::Exp:
            for (auto& v : Y.data) v = std::exp(v);
            break;
        case UnaryOp::Log:
            for (auto& v : Y.data) {
                if (v <= 0.0f) throw std::domain_error("log of non-positive value");
                v = std::log(v);
            }
            break;
        case UnaryOp::Negate:
            for (auto& v : Y.data) v = -v;
            break;
    }
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, op, x, out] {
        const Tensor& dY = grad(out);
        const Tensor& Y2 = val(out);
        const Tensor& X2 = val(x);
        Tensor& dX = grad(x);
        for (size_t i = 0; i < dY.size(); ++i) {
            float d = 0.0f;
            switch (op) {
                case UnaryOp::Tanh: d = 1.0f - Y2.data[i] * Y2.data[i]; break;
                case UnaryOp::Exp: d = Y2.data[i]; break;
                case UnaryOp::Log: d = 1.0f / X2.data[i]; break;
                case UnaryOp::Negate: d = -1.0f; break;
            }
            dX.data[i] += dY.data[i] * d;
        }
    };
    return out;
}

int Tape::scale(int x, float c) {
    Tensor Y = val(x);
    for (auto& v : Y.data) v *= c;
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, x, out, c] {
        const Tensor& dY = grad(out);
        Tensor& dX = grad(x);
        for (size_t i = 0; i < dY.size(); ++i) dX.data[i] += dY.data[i] * c;
    };
    return out;
}

int Tape::layer_norm(int x, int gain, int bias) {
    const Tensor& X = val(x);
    const Tensor& G = val(gain);
    const Tensor& B = val(bias);
    if (X.shape.size() != 2 || G.shape != std::vector<int>{X.cols()} || !G.same_shape(B))
        throw std::invalid_argument("layer_norm shape mismatch: " + shape_str(X.shape));
    constexpr double kEps = 1e-5;
    int m = X.rows(), n = X.cols();
    Tensor Y = Tensor::zeros({m, n});
    Tensor xhat = Tensor::zeros({m, n});
    std::vector<float> inv_std(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += X.at(i, j);
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double d = X.at(i, j) - mean;
            var += d * d;
        }
        var /= n;
        double is = 1.0 / std::sqrt(var + kEps);
        inv_std[static_cast<size_t>(i)] = static_cast<float>(is);
        for (int j = 0; j < n; ++j) {
            float xh = static_cast<float>((X.at(i, j) - mean) * is);
            xhat.at(i, j) = xh;
            Y.at(i, j) = xh * G.data[static_cast<size_t>(j)] + B.data[static_cast<size_t>(j)];
        }
    }
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, x, gain, bias, out, m, n,
                                               xhat = std::move(xhat),
                                               inv_std = std::move(inv_std)] {
        const Tensor& dY = grad(out);
        const Tensor& G2 = val(gain);
        Tensor& dX = grad(x);
        Tensor& dG = grad(gain);
        Tensor& dB = grad(bias);
        for (int i = 0; i < m; ++i) {
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int j = 0; j < n; ++j) {
                float dxh = dY.at(i, j) * G2.data[static_cast<size_t>(j)];
                sum_dxh += dxh;
                sum_dxh_xh += static_cast<double>(dxh) * xhat.at(i, j);
                dG.data[static_cast<size_t>(j)] += dY.at(i, j) * xhat.at(i, j);
                dB.data[static_cast<size_t>(j)] += dY.at(i, j);
            }
            for (int j = 0; j < n; ++j) {
                double dxh = static_cast<double>(dY.at(i, j)) * G2.data[static_cast<size_t>(j)];
                double v = (dxh - sum_dxh / n - static_cast<double>(xhat.at(i, j)) * sum_dxh_xh / n) *
                           inv_std[static_cast<size_t>(i)];
                dX.at(i, j) += static_cast<float>(v);
            }
        }
    };
    return out;
}

int Tape::row_softmax(int a, const Tensor* additive_mask) {
    const Tensor& A = val(a);
    if (A.shape.size() != 2) throw std::invalid_argument("row_softmax expects rank-2 input");
    if (additive_mask && !additive_mask->same_shape(A))
        throw std::invalid_argument("row_softmax mask shape mismatch");
    int m = A.rows(), n = A.cols();
    Tensor Y = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        double mx = -1e30;
        for (int j = 0; j < n; ++j) {
            double v = A.at(i, j) + (additive_mask ? additive_mask->at(i, j) : 0.0f);
            mx = std::max(mx, v);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            double v = A.at(i, j) + (additive_mask ? additive_mask->at(i, j) : 0.0f);
            double e = std::exp(v - mx);
            Y.at(i, j) = static_cast<float>(e);
            z += e;
        }
        for (int j = 0; j < n; ++j) Y.at(i, j) = static_cast<float>(Y.at(i, j) / z);
    }
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, out, m, n] {
        const Tensor& dY = grad(out);
        const Tensor& Y2 = val(out);
        Tensor& dA = grad(a);
        for (int i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += static_cast<double>(dY.at(i, j)) * Y2.at(i, j);
            for (int j = 0; j < n; ++j)
                dA.at(i, j) += static_cast<float>((dY.at(i, j) - dot) * Y2.at(i, j));
        }
    };
    return out;
}

int Tape::gather_rows(int table, std::vector<int> ids) {
    const Tensor& T = val(table);
    if (T.shape.size() != 2) throw std::invalid_argument("gather_rows expects rank-2 table");
    int n = T.cols();
    int m = static_cast<int>(ids.size());
    Tensor Y = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        int r = ids[static_cast<size_t>(i)];
        if (r < 0 || r >= T.rows()) throw std::out_of_range("gather_rows id out of range");
        for (int j = 0; j < n; ++j) Y.at(i, j) = T.at(r, j);
    }
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, table, out, ids = std::move(ids), n] {
        const Tensor& dY = grad(out);
        Tensor& dT = grad(table);
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < n; ++j) dT.at(ids[i], j) += dY.at(static_cast<int>(i), j);
    };
    return out;
}

int Tape::slice_row(int a, int row) {
    const Tensor& A = val(a);
    if (A.shape.size() != 2 || row < 0 || row >= A.rows())
        throw std::out_of_range("slice_row index out of range for " + shape_str(A.shape));
    int n = A.cols();
    Tensor Y = Tensor::zeros({n});
    for (int j = 0; j < n; ++j) Y.data[static_cast<size_t>(j)] = A.at(row, j);
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, out, row, n] {
        const Tensor& dY = grad(out);
        Tensor& dA = grad(a);
        for (int j = 0; j < n; ++j) dA.at(row, j) += dY.data[static_cast<size_t>(j)];
    };
    return out;
}

int Tape::slice_cols(int a, int start, int count) {
    const Tensor& A = val(a);
    if (A.shape.size() != 2 || start < 0 || count <= 0 || start + count > A.cols())
        throw std::out_of_range("slice_cols range out of bounds for " + shape_str(A.shape));
    int m = A.rows();
    Tensor Y = Tensor::zeros({m, count});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j) Y.at(i, j) = A.at(i, start + j);
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, a, out, start, count, m] {
        const Tensor& dY = grad(out);
        Tensor& dA = grad(a);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < count; ++j) dA.at(i, start + j) += dY.at(i, j);
    };
    return out;
}

int Tape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    int m = val(parts[0]).rows();
    int total = 0;
    for (int p : parts) {
        const Tensor& P = val(p);
        if (P.shape.size() != 2 || P.rows() != m)
            throw std::invalid_argument("concat_cols row mismatch");
        total += P.cols();
    }
    Tensor Y = Tensor::zeros({m, total});
    int off = 0;
    for (int p : parts) {
        const Tensor& P = val(p);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < P.cols(); ++j) Y.at(i, off + j) = P.at(i, j);
        off += P.cols();
    }
    int out = push(std::move(Y));
    nodes_[static_cast<size_t>(out)].backfn = [this, out, parts, m] {
        const Tensor& dY = grad(out);
        int off2 = 0;
        for (int p : parts) {
            Tensor& dP = grad(p);
            int c = dP.cols();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) dP.at(i, j) += dY.at(i, off2 + j);
            off2 += c;
        }
    };
    return out;
}

int Tape::softmax_cross_entropy(int logits, int target) {
    const Tensor& L = val(logits);
    if (L.shape.size() != 1) throw std::invalid_argument("softmax_cross_entropy expects rank-1 logits");
    int n = L.shape[0];
    if (target < 0 || target >= n)
        throw std::out_of_range("softmax_cross_entropy target " + std::to_string(target) +
                                " out of range for " + std::to_string(n) + " logits");
    double mx = L.data[0];
    for (float v : L.data) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (float v : L.data) z += std::exp(v - mx);
    double loss = -(L.data[static_cast<size_t>(target)] - mx - std::log(z));
    int out = push(Tensor::scalar(static_cast<float>(loss)));
    nodes_[static_cast<size_t>(out)].backfn = [this, logits, out, target, n, mx, z] {
        float dl = grad(out).data[0];
        const Tensor& L2 = val(logits);
        Tensor& dL = grad(logits);
        for (int j = 0; j < n; ++j) {
            double p = std::exp(L2.data[static_cast<size_t>(j)] - mx) / z;
            dL.data[static_cast<size_t>(j)] +=
                dl * static_cast<float>(p - (j == target ? 1.0 : 0.0));
        }
    };
    return out;
}

GradMap Tape::backward(int loss) {
    if (consumed_) throw std::logic_error("backward called on a consumed tape");
    consumed_ = true;
    const Tensor& L = val(loss);
    if (L.size() != 1) throw std::invalid_argument("backward expects a scalar loss node");
    grad(loss).data[0] = 1.0f;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        auto i = static_cast<size_t>(id);
        if (i < has_grad_.size() && has_grad_[i] && nodes_[i].backfn) nodes_[i].backfn();
    }
    GradMap out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].param_name.empty()) continue;
        if (i < has_grad_.size() && has_grad_[i])
            out[nodes_[i].param_name] = grads_[i];
        else
            out[nodes_[i].param_name] = Tensor::zeros(nodes_[i].value.shape);
    }
    return out;
}

GradMap finite_diff_gradient(const LossFn& loss_fn, const std::map<std::string, Tensor>& params,
                             double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_gradient: eps must be positive");
    std::map<std::string, Tensor> work = params;
    GradMap out;
    for (auto& [name, t] : work) {
        Tensor g = Tensor::zeros(t.shape);
        for (size_t i = 0; i < t.size(); ++i) {
            float orig = t.data[i];
            t.data[i] = static_cast<float>(orig + eps);
            double up = loss_fn(work);
            t.data[i] = static_cast<float>(orig - eps);
            double dn = loss_fn(work);
            t.data[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(dn))
                throw std::runtime_error("finite_diff_gradient: non-finite loss at perturbed point");
            g.data[i] = static_cast<float>((up - dn) / (2.0 * eps));
        }
        out[name] = std::move(g);
    }
    return out;
}

double finite_diff_coordinate(const LossFn& loss_fn, std::map<std::string, Tensor> params,
                              const std::string& name, size_t flat_index, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_coordinate: eps must be positive");
    auto it = params.find(name);
    if (it == params.end() || flat_index >= it->second.size())
        throw std::out_of_range("finite_diff_coordinate: no parameter " + name);
    float orig = it->second.data[flat_index];
    it->second.data[flat_index] = static_cast<float>(orig + eps);
    double up = loss_fn(params);
    it->second.data[flat_index] = static_cast<float>(orig - eps);
    double dn = loss_fn(params);
    if (!std::isfinite(up) || !std::isfinite(dn))
        throw std::runtime_error("finite_diff_coordinate: non-finite loss at perturbed point");
    return (up - dn) / (2.0 * eps);
}

} // namespace gradiend
