#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mgt/errors.hpp"

namespace mgt {

class GradTape;

// Dense f64 tensor, row-major, immutable after construction. A tensor may
// carry a tape handle (node_id >= 0) in which case ops consuming it record
// themselves on that tape.
class Tensor {
  public:
    Tensor() : shape_{0}, data_(std::make_shared<const std::vector<double>>()) {}

    Tensor(std::vector<size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(data))) {
        if (numel_of(shape_) != data_->size()) {
            throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<size_t> shape) {
        size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(std::vector<size_t> shape, double v) {
        size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor ones(std::vector<size_t> shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_->size(); }
    bool is_scalar() const { return size() == 1; }

    // Row/column accessors for the common 2-d case; a 1-d tensor of length n
    // is treated as a single row [1 x n].
    size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
    size_t cols() const { return rank() >= 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

    const double* ptr() const { return data_->data(); }
    const std::vector<double>& vec() const { return *data_; }
    double at(size_t i) const { return (*data_)[i]; }
    double at(size_t r, size_t c) const { return (*data_)[r * cols() + c]; }
    double item() const {
        if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_string(shape_));
        return (*data_)[0];
    }

    bool on_tape() const { return node_id_ >= 0; }
    int node_id() const { return node_id_; }
    GradTape* tape() const { return tape_; }
    bool requires_grad() const { return requires_grad_; }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::string shape_string(const std::vector<size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }
    std::string shape_string() const { return shape_string(shape_); }

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) {
            if (d == 0) throw DimensionError("zero dimension in shape " + shape_string(s));
            n *= d;
        }
        return s.empty() ? 0 : n;
    }

  private:
    friend class GradTape;
    std::vector<size_t> shape_;
    std::shared_ptr<const std::vector<double>> data_;
    GradTape* tape_ = nullptr;
    int node_id_ = -1;
    bool requires_grad_ = false;
};

// Append-only record of the forward computation. Backward visits nodes in
// strict reverse append order and accumulates gradients additively, so a
// tensor consumed by k ops receives the sum of k contributions. One tape per
// forward pass; tapes are single-threaded.
class GradTape {
  public:
    using BackwardFn = std::function<void(GradTape&, const std::vector<double>&)>;

    // Registers a leaf (parameter/input) tensor. Returns a handle to the same
    // storage that participates in gradient tracking on this tape.
    Tensor leaf(const Tensor& t) {
        Tensor out = t;
        out.tape_ = this;
        out.node_id_ = add_node(t.size(), nullptr);
        out.requires_grad_ = true;
        return out;
    }

    // Records an op output. backward(tape, out_grad) must add into parent
    // gradient buffers via grad_buffer().
    Tensor record(Tensor out, BackwardFn backward) {
        out.tape_ = this;
        out.node_id_ = add_node(out.size(), std::move(backward));
        out.requires_grad_ = false;
        return out;
    }

    std::vector<double>& grad_buffer(int node) {
        Node& n = nodes_[size_t(node)];
        if (n.grad.empty()) n.grad.assign(n.size, 0.0);
        return n.grad;
    }

    // Reverse-mode sweep from a scalar loss. Gradients of every reachable
    // tensor are then available through grad().
    void backward(const Tensor& loss) {
        if (!loss.is_scalar()) throw ContractError("backward() requires a scalar loss, got " + loss.shape_string());
        if (loss.tape() != this || !loss.on_tape()) throw ContractError("backward() loss is not recorded on this tape");
        for (Node& n : nodes_) n.grad.clear();
        grad_buffer(loss.node_id())[0] = 1.0;
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty() || !n.backward) continue;
            n.backward(*this, n.grad);
        }
        ran_backward_ = true;
    }

    // Gradient of a tape tensor, shaped like the tensor. Zero if the tensor
    // did not contribute to the loss.
    Tensor grad(const Tensor& t) const {
        if (t.tape() != this || !t.on_tape()) throw ContractError("grad() of a tensor not on this tape");
        if (!ran_backward_) throw ContractError("grad() before backward()");
        const Node& n = nodes_[size_t(t.node_id())];
        std::vector<double> g = n.grad.empty() ? std::vector<double>(n.size, 0.0) : n.grad;
        return Tensor(t.shape(), std::move(g));
    }

    size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        size_t size;
        BackwardFn backward;
        std::vector<double> grad;
    };

    int add_node(size_t size, BackwardFn fn) {
        nodes_.push_back(Node{size, std::move(fn), {}});
        return int(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
}

inline GradTape* common_tape(const Tensor& a, const Tensor& b) {
    if (a.on_tape() && b.on_tape() && a.tape() != b.tape())
        throw ContractError("operands recorded on different tapes");
    return a.on_tape() ? a.tape() : (b.on_tape() ? b.tape() : nullptr);
}

// Broadcast classification for binary elementwise ops. Allowed pairs:
// identical shapes, scalar against anything, or row vector [n] against
// [m x n] (trailing-dimension rule). Anything else is rejected.
enum class Bcast { none, a_scalar, b_scalar, a_row, b_row };

inline Bcast classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::none;
    if (a.is_scalar()) return Bcast::a_scalar;
    if (b.is_scalar()) return Bcast::b_scalar;
    if (a.rank() == 1 && b.rank() == 2 && a.shape()[0] == b.shape()[1]) return Bcast::a_row;
    if (b.rank() == 1 && a.rank() == 2 && b.shape()[0] == a.shape()[1]) return Bcast::b_row;
    throw DimensionError(std::string(op) + ": shapes " + a.shape_string() + " and " +
                         b.shape_string() + " are not broadcast-compatible");
}

// Reduce a full-size gradient onto a broadcast operand's shape.
inline std::vector<double> reduce_to(const std::vector<double>& g, size_t rows, size_t cols,
                                     bool to_scalar) {
    if (to_scalar) {
        double s = 0.0;
        for (double v : g) s += v;
        return {s};
    }
    std::vector<double> out(cols, 0.0);
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) out[c] += g[r * cols + c];
    return out;
}

template <class F, class DF>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, F f, DF df) {
    Bcast bc = classify_broadcast(a, b, op);
    const Tensor& big = (bc == Bcast::a_scalar || bc == Bcast::a_row) ? b : a;
    size_t n = big.size();
    size_t cols = big.cols();
    std::vector<double> out(n);

    auto lhs = [&](size_t i) {
        if (bc == Bcast::a_scalar) return a.at(0);
        if (bc == Bcast::a_row) return a.at(i % cols);
        return a.at(i);
    };
    auto rhs = [&](size_t i) {
        if (bc == Bcast::b_scalar) return b.at(0);
        if (bc == Bcast::b_row) return b.at(i % cols);
        return b.at(i);
    };
    for (size_t i = 0; i < n; ++i) out[i] = f(lhs(i), rhs(i));
    Tensor result(big.shape(), std::move(out));
    check_finite(result, op);

    GradTape* tape = common_tape(a, b);
    if (!tape) return result;

    int an = a.node_id(), bn = b.node_id();
    size_t rows = big.rows();
    return tape->record(result, [an, bn, a, b, bc, rows, cols, df](GradTape& tp, const std::vector<double>& g) {
        size_t n = g.size();
        if (an >= 0) {
            std::vector<double> ga(n);
            for (size_t i = 0; i < n; ++i) {
                double bv = (bc == Bcast::b_scalar) ? b.at(0) : (bc == Bcast::b_row ? b.at(i % cols) : b.at(i));
                double av = (bc == Bcast::a_scalar) ? a.at(0) : (bc == Bcast::a_row ? a.at(i % cols) : a.at(i));
                ga[i] = g[i] * df(av, bv, true);
            }
            std::vector<double>& buf = tp.grad_buffer(an);
            if (bc == Bcast::a_scalar || bc == Bcast::a_row) {
                std::vector<double> red = reduce_to(ga, rows, cols, bc == Bcast::a_scalar);
                for (size_t i = 0; i < red.size(); ++i) buf[i] += red[i];
            } else {
                for (size_t i = 0; i < n; ++i) buf[i] += ga[i];
            }
        }
        if (bn >= 0) {
            std::vector<double> gb(n);
            for (size_t i = 0; i < n; ++i) {
                double bv = (bc == Bcast::b_scalar) ? b.at(0) : (bc == Bcast::b_row ? b.at(i % cols) : b.at(i));
                double av = (bc == Bcast::a_scalar) ? a.at(0) : (bc == Bcast::a_row ? a.at(i % cols) : a.at(i));
                gb[i] = g[i] * df(av, bv, false);
            }
            std::vector<double>& buf = tp.grad_buffer(bn);
            if (bc == Bcast::b_scalar || bc == Bcast::b_row) {
                std::vector<double> red = reduce_to(gb, rows, cols, bc == Bcast::b_scalar);
                for (size_t i = 0; i < red.size(); ++i) buf[i] += red[i];
            } else {
                for (size_t i = 0; i < n; ++i) buf[i] += gb[i];
            }
        }
    });
}

template <class F, class DF>
Tensor unary_elementwise(const Tensor& x, const char* op, F f, DF df) {
    size_t n = x.size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = f(x.at(i));
    Tensor result(x.shape(), std::move(out));
    check_finite(result, op);
    if (!x.on_tape()) return result;
    int xn = x.node_id();
    return x.tape()->record(result, [xn, x, df](GradTape& tp, const std::vector<double>& g) {
        std::vector<double>& buf = tp.grad_buffer(xn);
        for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * df(x.at(i));
    });
}

// C[m x n] += A[m x k] * B[k x n]; ikj order keeps the inner loop contiguous.
inline void matmul_accum(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T; rows of both operands are contiguous.
inline void matmul_nt_accum(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n].
inline void matmul_tn_accum(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected 2-d tensor, got " + t.shape_string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(a, b, "add",
        [](double x, double y) { return x + y; },
        [](double, double, bool) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(a, b, "sub",
        [](double x, double y) { return x - y; },
        [](double, double, bool wrt_a) { return wrt_a ? 1.0 : -1.0; });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(a, b, "hadamard",
        [](double x, double y) { return x * y; },
        [](double x, double y, bool wrt_a) { return wrt_a ? y : x; });
}

// mul * x + add with constant coefficients.
inline Tensor affine(const Tensor& x, double mul, double addend) {
    return detail::unary_elementwise(x, "affine",
        [mul, addend](double v) { return mul * v + addend; },
        [mul](double) { return mul; });
}

inline Tensor scale(const Tensor& x, double c) { return affine(x, c, 0.0); }

inline Tensor tanh(const Tensor& x) {
    return detail::unary_elementwise(x, "tanh",
        [](double v) { return std::tanh(v); },
        [](double v) { double t = std::tanh(v); return 1.0 - t * t; });
}

inline Tensor sigmoid(const Tensor& x) {
    auto sig = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return detail::unary_elementwise(x, "sigmoid", sig,
        [sig](double v) { double s = sig(v); return s * (1.0 - s); });
}

// tanh-approximation GELU; smooth, so finite-difference checks stay tight.
inline Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    auto f = [](double v) {
        double u = c * (v + 0.044715 * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
    };
    auto df = [](double v) {
        double u = c * (v + 0.044715 * v * v * v);
        double t = std::tanh(u);
        double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    };
    return detail::unary_elementwise(x, "gelu", f, df);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// a[m x k] * b[k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul: inner dimensions disagree, " + a.shape_string() + " vs " + b.shape_string());
    std::vector<double> out(m * n, 0.0);
    detail::matmul_accum(a.ptr(), b.ptr(), out.data(), m, k, n);
    Tensor result({m, n}, std::move(out));
    detail::check_finite(result, "matmul");

    GradTape* tape = detail::common_tape(a, b);
    if (!tape) return result;
    int an = a.node_id(), bn = b.node_id();
    return tape->record(result, [an, bn, a, b, m, k, n](GradTape& tp, const std::vector<double>& g) {
        if (an >= 0)  // dA = G * B^T
            detail::matmul_nt_accum(g.data(), b.ptr(), tp.grad_buffer(an).data(), m, n, k);
        if (bn >= 0)  // dB = A^T * G
            detail::matmul_tn_accum(a.ptr(), g.data(), tp.grad_buffer(bn).data(), m, k, n);
    });
}

// a[m x k] * b[n x k]^T -> [m x n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k)
        throw DimensionError("matmul_nt: inner dimensions disagree, " + a.shape_string() + " vs " + b.shape_string());
    std::vector<double> out(m * n, 0.0);
    detail::matmul_nt_accum(a.ptr(), b.ptr(), out.data(), m, k, n);
    Tensor result({m, n}, std::move(out));
    detail::check_finite(result, "matmul_nt");

    GradTape* tape = detail::common_tape(a, b);
    if (!tape) return result;
    int an = a.node_id(), bn = b.node_id();
    return tape->record(result, [an, bn, a, b, m, k, n](GradTape& tp, const std::vector<double>& g) {
        if (an >= 0)  // dA = G * B
            detail::matmul_accum(g.data(), b.ptr(), tp.grad_buffer(an).data(), m, n, k);
        if (bn >= 0)  // dB = G^T * A
            detail::matmul_tn_accum(g.data(), a.ptr(), tp.grad_buffer(bn).data(), m, n, k);
    });
}

// ---------------------------------------------------------------------------
// Reductions and structural ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x.at(i);
    Tensor result = Tensor::scalar(s);
    detail::check_finite(result, "sum");
    if (!x.on_tape()) return result;
    int xn = x.node_id();
    size_t n = x.size();
    return x.tape()->record(result, [xn, n](GradTape& tp, const std::vector<double>& g) {
        std::vector<double>& buf = tp.grad_buffer(xn);
        for (size_t i = 0; i < n; ++i) buf[i] += g[0];
    });
}

inline Tensor slice_cols(const Tensor& x, size_t col0, size_t width) {
    detail::require_2d(x, "slice_cols");
    size_t m = x.shape()[0], n = x.shape()[1];
    if (col0 + width > n)
        throw DimensionError("slice_cols: [" + std::to_string(col0) + ", " + std::to_string(col0 + width) +
                             ") out of range for " + x.shape_string());
    std::vector<double> out(m * width);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < width; ++j) out[i * width + j] = x.at(i, col0 + j);
    Tensor result({m, width}, std::move(out));
    if (!x.on_tape()) return result;
    int xn = x.node_id();
    return x.tape()->record(result, [xn, m, n, col0, width](GradTape& tp, const std::vector<double>& g) {
        std::vector<double>& buf = tp.grad_buffer(xn);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < width; ++j) buf[i * n + col0 + j] += g[i * width + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    size_t m = parts[0].shape()[0];
    size_t total = 0;
    GradTape* tape = nullptr;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.shape()[0] != m) throw DimensionError("concat_cols: row count mismatch");
        total += p.shape()[1];
        if (p.on_tape()) {
            if (tape && tape != p.tape()) throw ContractError("concat_cols: mixed tapes");
            tape = p.tape();
        }
    }
    std::vector<double> out(m * total);
    size_t off = 0;
    for (const Tensor& p : parts) {
        size_t w = p.shape()[1];
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < w; ++j) out[i * total + off + j] = p.at(i, j);
        off += w;
    }
    Tensor result({m, total}, std::move(out));
    if (!tape) return result;
    return tape->record(result, [parts, m, total](GradTape& tp, const std::vector<double>& g) {
        size_t off = 0;
        for (const Tensor& p : parts) {
            size_t w = p.shape()[1];
            if (p.node_id() >= 0) {
                std::vector<double>& buf = tp.grad_buffer(p.node_id());
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < w; ++j) buf[i * w + j] += g[i * total + off + j];
            }
            off += w;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization, attention softmax, loss, embedding
// ---------------------------------------------------------------------------

// Per-row layer norm with population variance (denominator D) and eps inside
// the square root, followed by the gain/bias affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    detail::require_2d(x, "layer_norm");
    size_t S = x.shape()[0], D = x.shape()[1];
    if (D < 2) throw DimensionError("layer_norm: feature dimension must be >= 2, got " + x.shape_string());
    if (gain.size() != D || bias.size() != D)
        throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(D));

    std::vector<double> out(S * D);
    auto xhat = std::make_shared<std::vector<double>>(S * D);
    auto inv_std = std::make_shared<std::vector<double>>(S);
    for (size_t i = 0; i < S; ++i) {
        const double* row = x.ptr() + i * D;
        double mu = 0.0;
        for (size_t j = 0; j < D; ++j) mu += row[j];
        mu /= double(D);
        double var = 0.0;
        for (size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= double(D);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        for (size_t j = 0; j < D; ++j) {
            double h = (row[j] - mu) * inv;
            (*xhat)[i * D + j] = h;
            out[i * D + j] = h * gain.at(j) + bias.at(j);
        }
    }
    Tensor result({S, D}, std::move(out));
    detail::check_finite(result, "layer_norm");

    GradTape* tape = detail::common_tape(x, gain);
    if (bias.on_tape()) {
        if (tape && tape != bias.tape()) throw ContractError("layer_norm: mixed tapes");
        tape = bias.tape();
    }
    if (!tape) return result;
    int xn = x.node_id(), gn = gain.node_id(), bn = bias.node_id();
    return tape->record(result, [xn, gn, bn, gain, xhat, inv_std, S, D](GradTape& tp, const std::vector<double>& g) {
        if (gn >= 0) {
            std::vector<double>& buf = tp.grad_buffer(gn);
            for (size_t i = 0; i < S; ++i)
                for (size_t j = 0; j < D; ++j) buf[j] += g[i * D + j] * (*xhat)[i * D + j];
        }
        if (bn >= 0) {
            std::vector<double>& buf = tp.grad_buffer(bn);
            for (size_t i = 0; i < S; ++i)
                for (size_t j = 0; j < D; ++j) buf[j] += g[i * D + j];
        }
        if (xn >= 0) {
            std::vector<double>& buf = tp.grad_buffer(xn);
            for (size_t i = 0; i < S; ++i) {
                double inv = (*inv_std)[i];
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (size_t j = 0; j < D; ++j) {
                    double dh = g[i * D + j] * gain.at(j);
                    sum_dh += dh;
                    sum_dh_h += dh * (*xhat)[i * D + j];
                }
                for (size_t j = 0; j < D; ++j) {
                    double dh = g[i * D + j] * gain.at(j);
                    double h = (*xhat)[i * D + j];
                    buf[i * D + j] += inv * (dh - sum_dh / double(D) - h * sum_dh_h / double(D));
                }
            }
        }
    });
}

// Row-wise softmax over positions j <= i (strict causal mask); masked entries
// are exactly zero.
inline Tensor causal_softmax(const Tensor& scores) {
    detail::require_2d(scores, "causal_softmax");
    size_t S = scores.shape()[0];
    if (scores.shape()[1] != S) throw DimensionError("causal_softmax: expected square scores, got " + scores.shape_string());
    auto probs = std::make_shared<std::vector<double>>(S * S, 0.0);
    for (size_t i = 0; i < S; ++i) {
        double mx = scores.at(i, 0);
        for (size_t j = 1; j <= i; ++j) mx = std::max(mx, scores.at(i, j));
        double z = 0.0;
        for (size_t j = 0; j <= i; ++j) z += std::exp(scores.at(i, j) - mx);
        for (size_t j = 0; j <= i; ++j) (*probs)[i * S + j] = std::exp(scores.at(i, j) - mx) / z;
    }
    Tensor result({S, S}, std::vector<double>(*probs));
    detail::check_finite(result, "causal_softmax");
    if (!scores.on_tape()) return result;
    int sn = scores.node_id();
    return scores.tape()->record(result, [sn, probs, S](GradTape& tp, const std::vector<double>& g) {
        std::vector<double>& buf = tp.grad_buffer(sn);
        for (size_t i = 0; i < S; ++i) {
            double dot = 0.0;
            for (size_t j = 0; j <= i; ++j) dot += g[i * S + j] * (*probs)[i * S + j];
            for (size_t j = 0; j <= i; ++j)
                buf[i * S + j] += (*probs)[i * S + j] * (g[i * S + j] - dot);
        }
    });
}

// Mean negative log-likelihood over masked positions, max-stabilized.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                    const std::vector<bool>& mask) {
    detail::require_2d(logits, "softmax_cross_entropy");
    size_t N = logits.shape()[0], V = logits.shape()[1];
    if (targets.size() != N || mask.size() != N)
        throw DimensionError("softmax_cross_entropy: targets/mask length must equal row count " + std::to_string(N));
    size_t active = 0;
    for (bool m : mask) active += m ? 1 : 0;
    if (active == 0) throw InvalidConfigError("softmax_cross_entropy: mask selects no positions");
    for (size_t i = 0; i < N; ++i)
        if (mask[i] && (targets[i] < 0 || size_t(targets[i]) >= V))
            throw ContractError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                                " out of range [0, " + std::to_string(V) + ")");

    auto probs = std::make_shared<std::vector<double>>(N * V, 0.0);
    double loss = 0.0;
    for (size_t i = 0; i < N; ++i) {
        if (!mask[i]) continue;
        const double* row = logits.ptr() + i * V;
        double mx = row[0];
        for (size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        for (size_t j = 0; j < V; ++j) (*probs)[i * V + j] = std::exp(row[j] - logz);
        loss -= row[size_t(targets[i])] - logz;
    }
    loss /= double(active);
    Tensor result = Tensor::scalar(loss);
    detail::check_finite(result, "softmax_cross_entropy");
    if (!logits.on_tape()) return result;
    int ln = logits.node_id();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto msk = std::make_shared<std::vector<bool>>(mask);
    return logits.tape()->record(result, [ln, probs, tgt, msk, N, V, active](GradTape& tp, const std::vector<double>& g) {
        std::vector<double>& buf = tp.grad_buffer(ln);
        double scale = g[0] / double(active);
        for (size_t i = 0; i < N; ++i) {
            if (!(*msk)[i]) continue;
            for (size_t j = 0; j < V; ++j) {
                double ind = (size_t((*tgt)[i]) == j) ? 1.0 : 0.0;
                buf[i * V + j] += scale * ((*probs)[i * V + j] - ind);
            }
        }
    });
}

// Token + learned positional embedding: out[i, :] = tok_embed[ids[i], :] + pos_embed[i, :].
inline Tensor embedding(const std::vector<int>& ids, const Tensor& tok_embed, const Tensor& pos_embed) {
    detail::require_2d(tok_embed, "embedding");
    detail::require_2d(pos_embed, "embedding");
    size_t V = tok_embed.shape()[0], D = tok_embed.shape()[1];
    size_t S = ids.size();
    if (pos_embed.shape()[1] != D) throw DimensionError("embedding: positional width mismatch");
    if (S > pos_embed.shape()[0])
        throw DimensionError("embedding: sequence length " + std::to_string(S) + " exceeds positional table " +
                             pos_embed.shape_string());
    for (int id : ids)
        if (id < 0 || size_t(id) >= V)
            throw ContractError("embedding: token id " + std::to_string(id) + " out of range [0, " + std::to_string(V) + ")");

    std::vector<double> out(S * D);
    for (size_t i = 0; i < S; ++i)
        for (size_t j = 0; j < D; ++j) out[i * D + j] = tok_embed.at(size_t(ids[i]), j) + pos_embed.at(i, j);
    Tensor result({S, D}, std::move(out));
    detail::check_finite(result, "embedding");

    GradTape* tape = detail::common_tape(tok_embed, pos_embed);
    if (!tape) return result;
    int tn = tok_embed.node_id(), pn = pos_embed.node_id();
    auto idv = std::make_shared<std::vector<int>>(ids);
    return tape->record(result, [tn, pn, idv, S, D](GradTape& tp, const std::vector<double>& g) {
        if (tn >= 0) {
            std::vector<double>& buf = tp.grad_buffer(tn);
            for (size_t i = 0; i < S; ++i)
                for (size_t j = 0; j < D; ++j) buf[size_t((*idv)[i]) * D + j] += g[i * D + j];
        }
        if (pn >= 0) {
            std::vector<double>& buf = tp.grad_buffer(pn);
            for (size_t i = 0; i < S; ++i)
                for (size_t j = 0; j < D; ++j) buf[i * D + j] += g[i * D + j];
        }
    });
}

// Convenience wrapper matching the usual call-site shape: run the reverse
// sweep from a scalar loss on whatever tape recorded it.
inline void backward(const Tensor& loss) {
    if (!loss.on_tape()) throw ContractError("backward(): loss is not connected to a tape");
    loss.tape()->backward(loss);
}

}  // namespace mgt
