#pragma once

// Dense 2-D arrays of doubles and a tape-based reverse-mode autodiff.
//
// Every op checks its output for NaN/Inf and throws NumericError naming the op.
// A Tape records ops in forward order; backward() walks them in exact reverse
// and may run once per forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "opgrpo/error.hpp"

namespace opgrpo {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::optional<std::vector<double>> grad;
    bool requires_grad = false;

    Tensor() = default;

    Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in, bool requires_grad_in = false)
        : shape(std::move(shape_in)), data(std::move(data_in)), requires_grad(requires_grad_in) {
        if (element_count(shape) != data.size()) {
            throw ShapeError("Tensor: shape product " + std::to_string(element_count(shape)) +
                             " != data length " + std::to_string(data.size()));
        }
    }

    static Tensor zeros(std::size_t rows, std::size_t cols) {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
    }
    static Tensor filled(std::size_t rows, std::size_t cols, double value) {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, value));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }
    static Tensor scalar(double value) { return Tensor({1, 1}, {value}); }
    static Tensor row(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }
    static Tensor column(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n, 1}, std::move(values));
    }

    static std::size_t element_count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    void zero_grad() { grad = std::vector<double>(data.size(), 0.0); }

    bool is_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    double item() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool needs_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Binds an external parameter. When param.requires_grad and the tape records,
    // backward() accumulates d(loss)/d(param) into param.grad.
    Var leaf(Tensor& param) {
        ensure_open("leaf");
        Node n;
        n.op = "leaf";
        n.external = &param;
        n.param = &param;
        n.needs_grad = record_ && param.requires_grad;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var constant(Tensor value) {
        ensure_open("constant");
        Node n;
        n.op = "constant";
        n.value = std::move(value);
        n.value.requires_grad = false;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    // Non-owning constant; `value` must outlive the tape.
    Var constant_ref(const Tensor& value) {
        ensure_open("constant");
        Node n;
        n.op = "constant";
        n.external = &value;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

    // Gradient buffer of a node, allocated on first touch.
    std::vector<double>& grad_mut(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
        return n.grad;
    }
    const std::vector<double>& grad(std::size_t id) const { return nodes_[id].grad; }

    Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        ensure_open(op);
        if (!value.is_finite()) {
            throw NumericError(std::string(op) + ": non-finite value in forward pass");
        }
        Node n;
        n.op = op;
        n.value = std::move(value);
        for (const Var& in : inputs) {
            if (&in.tape() != this) throw StateError(std::string(op) + ": operands live on different tapes");
            n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
        }
        n.needs_grad = n.needs_grad && record_;
        if (n.needs_grad) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    void backward(Var loss) {
        if (!record_) throw StateError("backward: tape was created without recording");
        if (consumed_) throw StateError("backward: called twice without a fresh forward pass");
        if (&loss.tape() != this) throw StateError("backward: loss lives on a different tape");
        if (loss.value().size() != 1) {
            throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.value().shape));
        }
        consumed_ = true;
        backward_order_.clear();
        if (!nodes_[loss.id()].needs_grad) return;
        grad_mut(loss.id())[0] = 1.0;
        for (std::size_t k = loss.id() + 1; k-- > 0;) {
            Node& n = nodes_[k];
            if (!n.needs_grad || n.grad.empty()) continue;
            backward_order_.push_back(k);
            for (double g : n.grad) {
                if (!std::isfinite(g)) throw NumericError(std::string(n.op) + ": non-finite gradient in backward pass");
            }
            if (n.backward) n.backward(*this, k);
            if (n.param != nullptr) {
                Tensor& p = *n.param;
                if (!p.grad) p.zero_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) (*p.grad)[i] += n.grad[i];
            }
        }
    }

    // Node ids touched by the last backward(), in visiting order.
    const std::vector<std::size_t>& backward_order() const noexcept { return backward_order_; }
    bool consumed() const noexcept { return consumed_; }

    void reset() {
        nodes_.clear();
        backward_order_.clear();
        consumed_ = false;
    }

private:
    struct Node {
        std::string_view op;
        Tensor value;
        const Tensor* external = nullptr;
        Tensor* param = nullptr;
        std::vector<double> grad;
        BackwardFn backward;
        bool needs_grad = false;
    };

    void ensure_open(std::string_view op) const {
        if (consumed_) {
            throw StateError(std::string(op) + ": tape already consumed by backward; start a new forward pass");
        }
    }

    bool record_;
    bool consumed_ = false;
    std::vector<Node> nodes_;
    std::vector<std::size_t> backward_order_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline double Var::item() const {
    const Tensor& v = value();
    if (v.size() != 1) throw ShapeError("item: tensor is not scalar " + shape_string(v.shape));
    return v.data[0];
}
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

namespace detail {

enum class Broadcast { same, scalar, row };

inline Broadcast broadcast_kind(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) return Broadcast::same;
    if (b.size() == 1) return Broadcast::scalar;
    if (a.rank() == 2 && b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(b.shape) + " onto " +
                     shape_string(a.shape));
}

inline std::size_t bindex(Broadcast kind, std::size_t i, std::size_t cols) {
    switch (kind) {
        case Broadcast::same: return i;
        case Broadcast::scalar: return 0;
        case Broadcast::row: return i % cols;
    }
    return i;
}

// Accumulates an elementwise gradient into a possibly-broadcast operand.
inline void accumulate_broadcast(Tape& tape, Var target, Broadcast kind, std::size_t cols,
                                 const std::vector<double>& g) {
    if (!target.needs_grad()) return;
    auto& tg = tape.grad_mut(target.id());
    for (std::size_t i = 0; i < g.size(); ++i) tg[bindex(kind, i, cols)] += g[i];
}

template <class Fwd, class Dfa, class Dfb>
Var binary(std::string_view op, Var a, Var b, Fwd fwd, Dfa dfa, Dfb dfb) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Broadcast kind = broadcast_kind(op, av, bv);
    const std::size_t cols = av.cols();
    Tensor out(av.shape, std::vector<double>(av.size()));
    for (std::size_t i = 0; i < av.size(); ++i) {
        out.data[i] = fwd(av.data[i], bv.data[bindex(kind, i, cols)]);
    }
    return a.tape().record(op, std::move(out), {a, b}, [a, b, kind, cols, dfa, dfb](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        if (a.needs_grad()) {
            auto& ga = t.grad_mut(a.id());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfa(x.data[i], y.data[bindex(kind, i, cols)]);
        }
        if (b.needs_grad()) {
            std::vector<double> gb(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * dfb(x.data[i], y.data[bindex(kind, i, cols)]);
            accumulate_broadcast(t, b, kind, cols, gb);
        }
    });
}

// `dfdx(x, y)` receives the input x and the forward output y.
template <class Fwd, class Dfdx>
Var unary(std::string_view op, Var a, Fwd fwd, Dfdx dfdx) {
    const Tensor& av = a.value();
    Tensor out(av.shape, std::vector<double>(av.size()));
    for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = fwd(av.data[i]);
    return a.tape().record(op, std::move(out), {a}, [a, dfdx](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& x = a.value();
        const Tensor& y = t.value(self);
        auto& ga = t.grad_mut(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x.data[i], y.data[i]);
    });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_string(av.shape) + " x " +
                         shape_string(bv.shape));
    }
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    Tensor out = Tensor::zeros(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = &out.data[i * m];
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av.data[i * k + p];
            const double* brow = &bv.data[p * m];
            for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
        }
    }
    return a.tape().record("matmul", std::move(out), {a, b}, [a, b, n, k, m](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        if (a.needs_grad()) {
            auto& ga = t.grad_mut(a.id());
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y.data[p * m + j];
                    ga[i * k + p] += s;
                }
            }
        }
        if (b.needs_grad()) {
            auto& gb = t.grad_mut(b.id());
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double xip = x.data[i * k + p];
                    for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += xip * g[i * m + j];
                }
            }
        }
    });
}

inline Var add(Var a, Var b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
    for (double v : b.value().data) {
        if (v == 0.0) throw DomainError("div: division by zero");
    }
    return detail::binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

// Elementwise minimum; on ties the gradient goes to `a`.
inline Var minimum(Var a, Var b) {
    return detail::binary(
        "minimum", a, b, [](double x, double y) { return std::min(x, y); },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Var add_scalar(Var a, double s) {
    return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var mul_scalar(Var a, double s) {
    return detail::unary("mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Var neg(Var a) { return mul_scalar(a, -1.0); }

inline Var exp(Var a) {
    return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    for (double v : a.value().data) {
        if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
    }
    return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a) {
    return detail::unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var square(Var a) {
    return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Gradient is 1 on [lo, hi] and 0 outside.
inline Var clamp(Var a, double lo, double hi) {
    if (lo > hi) throw DomainError("clamp: lower bound exceeds upper bound");
    return detail::unary(
        "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return a.tape().record("sum", Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        auto& ga = t.grad_mut(a.id());
        for (double& v : ga) v += g;
    });
}

inline Var mean(Var a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// [n x m] -> [n x 1], summing each row left to right.
inline Var row_sum(Var a) {
    const Tensor& av = a.value();
    const std::size_t n = av.rows(), m = av.cols();
    Tensor out = Tensor::zeros(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += av.data[i * m + j];
        out.data[i] = s;
    }
    return a.tape().record("row_sum", std::move(out), {a}, [a, n, m](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_mut(a.id());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i];
        }
    });
}

// Selects rows of `table` by index; backward scatter-adds into the table.
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
    const Tensor& tv = table.value();
    const std::size_t m = tv.cols();
    Tensor out = Tensor::zeros(indices.size(), m);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= tv.rows()) {
            throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " out of " +
                             std::to_string(tv.rows()) + " rows");
        }
        std::copy_n(&tv.data[indices[r] * m], m, &out.data[r * m]);
    }
    return table.tape().record("gather_rows", std::move(out), {table},
                               [table, idx = std::move(indices), m](Tape& t, std::size_t self) {
                                   const auto& g = t.grad(self);
                                   auto& gt = t.grad_mut(table.id());
                                   for (std::size_t r = 0; r < idx.size(); ++r) {
                                       for (std::size_t j = 0; j < m; ++j) gt[idx[r] * m + j] += g[r * m + j];
                                   }
                               });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
    if (parts.size() == 0) throw ShapeError("concat_cols: no operands");
    const std::size_t n = parts.begin()->rows();
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.rows() != n) throw ShapeError("concat_cols: row counts disagree");
        total += p.cols();
    }
    Tensor out = Tensor::zeros(n, total);
    std::size_t offset = 0;
    std::vector<std::pair<Var, std::size_t>> layout;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        const std::size_t c = pv.cols();
        for (std::size_t i = 0; i < n; ++i) std::copy_n(&pv.data[i * c], c, &out.data[i * total + offset]);
        layout.emplace_back(p, offset);
        offset += c;
    }
    Tape& tape = parts.begin()->tape();
    Var result = tape.record("concat_cols", std::move(out), parts, [layout, n, total](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (const auto& [p, off] : layout) {
            if (!p.needs_grad()) continue;
            const std::size_t c = p.cols();
            auto& gp = t.grad_mut(p.id());
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
            }
        }
    });
    return result;
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace opgrpo
