// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// The op vocabulary is deliberately small: matmul, elementwise arithmetic,
// smooth nonlinearities, (masked) softmax, layer normalization, gather,
// concat/slice and reductions. Every op accumulates in ascending index
// order; the plain (tape-free) kernels in model.hpp mirror that order so
// both paths produce bit-identical values.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sage/errors.hpp"

namespace sage {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

struct TensorNode {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backfn;
    std::uint64_t visit_stamp = 0;
};

// Lightweight handle to a tape node. Copying shares the node.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw UsageError("tensor: shape does not match value count");
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->val = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(numel(shape), 0.0);
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double x) { return from_values({1}, {x}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->val.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<double>& values() const { return node_->val; }
    std::vector<double>& values_mut() { return node_->val; }
    double at(std::size_t i) const { return node_->val[i]; }
    double at2(std::size_t r, std::size_t c) const { return node_->val[r * node_->shape[1] + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& grad() const {
        if (node_->grad.size() != node_->val.size())
            throw StateError("tensor: gradient not available (no backward pass)");
        return node_->grad;
    }
    // Gradient if the last backward reached this tensor, zeros otherwise.
    std::vector<double> grad_or_zeros() const {
        if (node_->grad.size() == node_->val.size()) return node_->grad;
        return std::vector<double>(node_->val.size(), 0.0);
    }

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline std::uint64_t next_visit_stamp() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

inline Tensor make_op(Shape shape, std::vector<double> val,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backfn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
        n->backfn = std::move(backfn);
    }
    return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw UsageError(std::string(op) + ": shape mismatch");
}

inline void ensure_grad_buffer(TensorNode* n) {
    if (n->grad.size() != n->val.size()) n->grad.assign(n->val.size(), 0.0);
}

} // namespace detail

// ---- elementwise arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            detail::ensure_grad_buffer(pa);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad_buffer(pb);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            detail::ensure_grad_buffer(pa);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad_buffer(pb);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            detail::ensure_grad_buffer(pa);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->val[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad_buffer(pb);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->val[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    TensorNode* pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, c](TensorNode& self) {
        detail::ensure_grad_buffer(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    TensorNode* pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](TensorNode& self) {
        detail::ensure_grad_buffer(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

// Adds a length-C bias vector to every row of an R x C matrix.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw UsageError("add_rowvec: expects matrix and matching bias vector");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.at2(r, c) + b.at(c);
    TensorNode* px = x.node();
    TensorNode* pb = b.node();
    return detail::make_op(x.shape(), std::move(out), {x, b}, [px, pb, rows, cols](TensorNode& self) {
        if (px->requires_grad) {
            detail::ensure_grad_buffer(px);
            for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad_buffer(pb);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) pb->grad[c] += self.grad[r * cols + c];
        }
    });
}

// ---- smooth nonlinearities ----

namespace detail {

inline double gelu_fwd(double x) {
    const double k = 0.7978845608028654; // sqrt(2/pi)
    const double u = k * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_bwd(double x) {
    const double k = 0.7978845608028654;
    const double u = k * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.at(i));
    TensorNode* pa = a.node();
    return make_op(a.shape(), std::move(out), {a}, [pa, df](TensorNode& self) {
        ensure_grad_buffer(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * df(pa->val[i], self.val[i]);
    });
}

} // namespace detail

inline Tensor tanh_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::tanh(x); },
                            [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Tensor gelu_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return detail::gelu_fwd(x); },
                            [](double x, double) { return detail::gelu_bwd(x); });
}

inline Tensor exp_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::exp(x); },
                            [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::log(x); },
                            [](double x, double) { return 1.0 / x; });
}

// ---- matrix products ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw UsageError("matmul: incompatible shapes");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a.at2(i, kk) * b.at2(kk, j);
            out[i * m + j] = acc;
        }
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    return detail::make_op({n, m}, std::move(out), {a, b}, [pa, pb, n, k, m](TensorNode& self) {
        if (pa->requires_grad) {
            detail::ensure_grad_buffer(pa);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += self.grad[i * m + j] * pb->val[kk * m + j];
                    pa->grad[i * k + kk] += acc;
                }
        }
        if (pb->requires_grad) {
            detail::ensure_grad_buffer(pb);
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) acc += pa->val[i * k + kk] * self.grad[i * m + j];
                    pb->grad[kk * m + j] += acc;
                }
        }
    });
}

// C = A * B^T  (scores from row-major Q and K without materializing a transpose).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw UsageError("matmul_nt: incompatible shapes");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
    std::vector<double> out(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a.at2(i, kk) * b.at2(j, kk);
            out[i * m + j] = acc;
        }
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    return detail::make_op({n, m}, std::move(out), {a, b}, [pa, pb, n, k, m](TensorNode& self) {
        if (pa->requires_grad) {
            detail::ensure_grad_buffer(pa);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += self.grad[i * m + j] * pb->val[j * k + kk];
                    pa->grad[i * k + kk] += acc;
                }
        }
        if (pb->requires_grad) {
            detail::ensure_grad_buffer(pb);
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) acc += self.grad[i * m + j] * pa->val[i * k + kk];
                    pb->grad[j * k + kk] += acc;
                }
        }
    });
}

// ---- softmax family ----

// Softmax along an arbitrary axis. Rows (fibers) are shifted by their max
// before exponentiation; output fibers sum to 1.
inline Tensor softmax(const Tensor& logits, std::size_t axis) {
    if (axis >= logits.rank()) throw UsageError("softmax: axis out of range");
    const Shape& s = logits.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    std::vector<double> out(logits.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < n; ++k) m = std::max(m, logits.at((o * n + k) * inner + in));
            double z = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const double e = std::exp(logits.at((o * n + k) * inner + in) - m);
                out[(o * n + k) * inner + in] = e;
                z += e;
            }
            for (std::size_t k = 0; k < n; ++k) out[(o * n + k) * inner + in] /= z;
        }
    TensorNode* pa = logits.node();
    return detail::make_op(s, std::move(out), {logits}, [pa, outer, inner, n](TensorNode& self) {
        detail::ensure_grad_buffer(pa);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double dot = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = (o * n + k) * inner + in;
                    dot += self.val[idx] * self.grad[idx];
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = (o * n + k) * inner + in;
                    pa->grad[idx] += self.val[idx] * (self.grad[idx] - dot);
                }
            }
    });
}

// Row-wise softmax over a score matrix restricted to allowed entries.
// Disallowed entries are exactly 0 in the output and receive no gradient.
inline Tensor masked_softmax_rows(const Tensor& scores,
                                  std::shared_ptr<const std::vector<std::uint8_t>> mask) {
    if (scores.rank() != 2) throw UsageError("masked_softmax_rows: expects a matrix");
    const std::size_t rows = scores.dim(0), cols = scores.dim(1);
    if (!mask || mask->size() != rows * cols)
        throw UsageError("masked_softmax_rows: mask size mismatch");
    std::vector<double> out(scores.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c)
            if ((*mask)[r * cols + c]) {
                m = std::max(m, scores.at2(r, c));
                any = true;
            }
        if (!any) continue; // fully masked row stays all-zero
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
            if ((*mask)[r * cols + c]) {
                const double e = std::exp(scores.at2(r, c) - m);
                out[r * cols + c] = e;
                z += e;
            }
        for (std::size_t c = 0; c < cols; ++c)
            if ((*mask)[r * cols + c]) out[r * cols + c] /= z;
    }
    TensorNode* pa = scores.node();
    return detail::make_op(scores.shape(), std::move(out), {scores},
                           [pa, mask, rows, cols](TensorNode& self) {
        detail::ensure_grad_buffer(pa);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                if ((*mask)[r * cols + c]) dot += self.val[r * cols + c] * self.grad[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                if ((*mask)[r * cols + c])
                    pa->grad[r * cols + c] += self.val[r * cols + c] * (self.grad[r * cols + c] - dot);
        }
    });
}

inline Tensor log_softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw UsageError("log_softmax_rows: expects a matrix");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    std::vector<double> out(logits.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) m = std::max(m, logits.at2(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(logits.at2(r, c) - m);
        const double lse = m + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = logits.at2(r, c) - lse;
    }
    TensorNode* pa = logits.node();
    return detail::make_op(logits.shape(), std::move(out), {logits},
                           [pa, rows, cols](TensorNode& self) {
        detail::ensure_grad_buffer(pa);
        for (std::size_t r = 0; r < rows; ++r) {
            double gsum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) gsum += self.grad[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                pa->grad[r * cols + c] += self.grad[r * cols + c] - std::exp(self.val[r * cols + c]) * gsum;
        }
    });
}

// ---- normalization ----

// Row-wise layer normalization with learnable per-feature gain and bias.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
    if (x.rank() != 2) throw UsageError("layer_norm_rows: expects a matrix");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != cols || bias.rank() != 1 || bias.dim(0) != cols)
        throw UsageError("layer_norm_rows: gain/bias must be feature vectors");
    std::vector<double> out(x.size());
    auto stats = std::make_shared<std::vector<double>>(rows * 2); // mean, inv_std per row
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += x.at2(r, c);
        mean /= double(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = x.at2(r, c) - mean;
            var += d * d;
        }
        var /= double(cols);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        (*stats)[r * 2] = mean;
        (*stats)[r * 2 + 1] = inv_std;
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = (x.at2(r, c) - mean) * inv_std * gain.at(c) + bias.at(c);
    }
    TensorNode* px = x.node();
    TensorNode* pg = gain.node();
    TensorNode* pb = bias.node();
    return detail::make_op(x.shape(), std::move(out), {x, gain, bias},
                           [px, pg, pb, stats, rows, cols](TensorNode& self) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double mean = (*stats)[r * 2];
            const double inv_std = (*stats)[r * 2 + 1];
            if (pg->requires_grad) {
                detail::ensure_grad_buffer(pg);
                for (std::size_t c = 0; c < cols; ++c)
                    pg->grad[c] += self.grad[r * cols + c] * (px->val[r * cols + c] - mean) * inv_std;
            }
            if (pb->requires_grad) {
                detail::ensure_grad_buffer(pb);
                for (std::size_t c = 0; c < cols; ++c) pb->grad[c] += self.grad[r * cols + c];
            }
            if (px->requires_grad) {
                detail::ensure_grad_buffer(px);
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double xhat = (px->val[r * cols + c] - mean) * inv_std;
                    const double dxhat = self.grad[r * cols + c] * pg->val[c];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= double(cols);
                mean_dxhat_xhat /= double(cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    const double xhat = (px->val[r * cols + c] - mean) * inv_std;
                    const double dxhat = self.grad[r * cols + c] * pg->val[c];
                    px->grad[r * cols + c] += inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    });
}

// ---- gather / reshape family ----

// Selects rows of a table by index (embedding lookup). Gradients scatter-add
// back into the table rows.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw UsageError("gather_rows: expects a matrix table");
    const std::size_t cols = table.dim(1);
    std::vector<double> out(ids.size() * cols);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || std::size_t(ids[r]) >= table.dim(0))
            throw UsageError("gather_rows: index out of range");
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = table.at2(std::size_t(ids[r]), c);
    }
    TensorNode* pt = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return detail::make_op({ids.size(), cols}, std::move(out), {table},
                           [pt, ids_copy, cols](TensorNode& self) {
        detail::ensure_grad_buffer(pt);
        for (std::size_t r = 0; r < ids_copy->size(); ++r)
            for (std::size_t c = 0; c < cols; ++c)
                pt->grad[std::size_t((*ids_copy)[r]) * cols + c] += self.grad[r * cols + c];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) throw UsageError("concat_cols: row mismatch");
        cols += p.dim(1);
    }
    std::vector<double> out(rows * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) out[r * cols + off + c] = p.at2(r, c);
        off += pc;
    }
    std::vector<TensorNode*> ptrs;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        ptrs.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    return detail::make_op({rows, cols}, std::move(out), parts,
                           [ptrs, widths, rows, cols](TensorNode& self) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < ptrs.size(); ++pi) {
            TensorNode* p = ptrs[pi];
            const std::size_t pc = widths[pi];
            if (p->requires_grad) {
                detail::ensure_grad_buffer(p);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < pc; ++c)
                        p->grad[r * pc + c] += self.grad[r * cols + off + c];
            }
            off += pc;
        }
    });
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() != 2 || start + len > x.dim(1)) throw UsageError("slice_cols: out of range");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) out[r * len + c] = x.at2(r, start + c);
    TensorNode* px = x.node();
    return detail::make_op({rows, len}, std::move(out), {x},
                           [px, start, len, rows, cols](TensorNode& self) {
        detail::ensure_grad_buffer(px);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c)
                px->grad[r * cols + start + c] += self.grad[r * len + c];
    });
}

inline Tensor row(const Tensor& x, std::size_t r) {
    if (x.rank() != 2 || r >= x.dim(0)) throw UsageError("row: out of range");
    const std::size_t cols = x.dim(1);
    std::vector<double> out(cols);
    for (std::size_t c = 0; c < cols; ++c) out[c] = x.at2(r, c);
    TensorNode* px = x.node();
    return detail::make_op({1, cols}, std::move(out), {x}, [px, r, cols](TensorNode& self) {
        detail::ensure_grad_buffer(px);
        for (std::size_t c = 0; c < cols; ++c) px->grad[r * cols + c] += self.grad[c];
    });
}

inline Tensor pick(const Tensor& x, std::size_t r, std::size_t c) {
    if (x.rank() != 2 || r >= x.dim(0) || c >= x.dim(1)) throw UsageError("pick: out of range");
    const std::size_t cols = x.dim(1);
    TensorNode* px = x.node();
    return detail::make_op({1}, {x.at2(r, c)}, {x}, [px, r, c, cols](TensorNode& self) {
        detail::ensure_grad_buffer(px);
        px->grad[r * cols + c] += self.grad[0];
    });
}

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    TensorNode* px = x.node();
    return detail::make_op({1}, {acc}, {x}, [px](TensorNode& self) {
        detail::ensure_grad_buffer(px);
        for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0];
    });
}

// ---- backward pass ----

// Reverse-mode sweep from a scalar loss. Grads of every node reachable
// through requires_grad parents are zeroed first, so repeated backward
// calls on one tape are independent.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw UsageError("backward: loss must be scalar");
    if (!loss.requires_grad())
        throw UsageError("backward: loss does not depend on any differentiable input");

    const std::uint64_t stamp = detail::next_visit_stamp();
    std::vector<TensorNode*> topo;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    loss.node()->visit_stamp = stamp;
    while (!stack.empty()) {
        auto [n, next_child] = stack.back();
        if (next_child < n->parents.size()) {
            stack.back().second++;
            TensorNode* p = n->parents[next_child].get();
            if (p->requires_grad && p->visit_stamp != stamp) {
                p->visit_stamp = stamp;
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }

    for (TensorNode* n : topo) n->grad.assign(n->val.size(), 0.0);
    loss.node()->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backfn) n->backfn(*n);
    }
}

// ---- named parameters ----

// A learnable tensor with a stable name and a gradient accumulator used
// for micro-batch accumulation. The accumulator is cleared whenever an
// optimizer step consumes it.
struct Parameter {
    std::string name;
    Tensor tensor;
    std::vector<double> grad_accum;

    Parameter() = default;
    Parameter(std::string n, Tensor t)
        : name(std::move(n)), tensor(std::move(t)), grad_accum(tensor.size(), 0.0) {}

    void accumulate_grad() {
        TensorNode* n = tensor.node();
        if (n->grad.size() != n->val.size()) return; // not reached by this backward
        for (std::size_t i = 0; i < n->grad.size(); ++i) grad_accum[i] += n->grad[i];
    }

    void zero_accum() { std::fill(grad_accum.begin(), grad_accum.end(), 0.0); }
};

} // namespace sage
