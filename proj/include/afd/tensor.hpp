#pragma once

// Dense double-precision tensors with a dynamically recorded computation
// graph and reverse-mode gradients.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace afd {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> adjoint;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

struct GraphState {
    std::uint64_t seq = 0;
    bool grad_enabled = true;
    bool track_kinks = false;
    std::uint64_t kink_hash = 1469598103934665603ULL;
};

inline GraphState& graph_state() {
    thread_local GraphState state;
    return state;
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::graph_state().grad_enabled) { detail::graph_state().grad_enabled = false; }
    ~NoGradGuard() { detail::graph_state().grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape.empty()) shape = {1};
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
        if (afd::numel(shape) != data.size())
            throw ShapeError("shape " + to_string(shape) + " does not hold " + std::to_string(data.size()) + " values");
        node_ = std::make_shared<detail::Node>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
        node_->seq = ++detail::graph_state().seq;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = afd::numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto n = afd::numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    double at(std::size_t i) const { return node_->value.at(i); }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    /// Writable view of a leaf's values; recorded intermediates are immutable.
    std::span<double> mutable_data() {
        if (!node_->inputs.empty()) throw std::logic_error("cannot mutate a recorded intermediate tensor");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    std::span<const double> grad() const { return node_->grad; }

    /// Gradient as a tensor of the same shape (zeros when none accumulated).
    Tensor grad_tensor() const {
        if (node_->grad.empty()) return zeros(shape());
        return Tensor(shape(), node_->grad);
    }

    void zero_grad() { node_->grad.clear(); }

    Tensor detach() const { return Tensor(shape(), node_->value); }

    std::uint64_t seq() const { return node_->seq; }
    const char* op() const { return node_->op; }

    // Internal access for op implementations.
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline bool recording(std::span<const Tensor* const> inputs) {
    if (!graph_state().grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

/// Wraps a forward result; records `adjoint` when any input requires grad.
template <class Adjoint>
Tensor record(const char* op, Shape shape, std::vector<double> value, std::span<const Tensor* const> inputs,
              Adjoint&& adjoint) {
    for (double v : value)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    Tensor out(std::move(shape), std::move(value));
    if (recording(inputs)) {
        auto& node = *out.node();
        node.requires_grad = true;
        node.op = op;
        for (const Tensor* t : inputs) node.inputs.push_back(t->defined() ? t->node() : nullptr);
        node.adjoint = std::forward<Adjoint>(adjoint);
    } else {
        out.node()->op = op;
    }
    return out;
}

template <class Adjoint>
Tensor record(const char* op, Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
              Adjoint&& adjoint) {
    return record(op, std::move(shape), std::move(value), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                  std::forward<Adjoint>(adjoint));
}

inline double* grad_of(Node& self, std::size_t input) {
    auto& in = self.inputs[input];
    if (!in || !in->requires_grad) return nullptr;
    in->ensure_grad();
    return in->grad.data();
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
    if (tail.size() > full.size()) return false;
    return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

inline void mix_kink(bool active) {
    auto& s = graph_state();
    s.kink_hash = (s.kink_hash ^ (active ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL)) * 1099511628211ULL;
}

// Splits a shape around `axis` into (outer, extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& shape, std::size_t axis) {
    require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for " + to_string(shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, shape[axis], inner};
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively into
/// every reachable tensor that requires grad. Returns the sequence numbers of
/// the operations whose adjoints ran, in the order they ran.
inline std::vector<std::uint64_t> backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got " + (loss.defined() ? to_string(loss.shape()) : "undefined"));
    if (!loss.requires_grad()) throw std::invalid_argument("loss was not produced from recorded operations");
    if (!std::isfinite(loss.item())) throw NumericError("backward() on non-finite loss");

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{loss.node().get()};
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& in : n->inputs)
            if (in && in->requires_grad) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    std::vector<std::uint64_t> visited;
    for (auto* n : order) {
        if (!n->adjoint || n->grad.empty()) continue;
        n->adjoint(*n);
        visited.push_back(n->seq);
    }
    return visited;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Binary { add, sub, mul };

inline Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
    require(is_suffix(a.shape(), b.shape()),
            std::string(name) + ": shape " + to_string(b.shape()) + " does not broadcast onto " + to_string(a.shape()));
    const std::size_t inner = b.numel(), outer = a.numel() / inner;
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t k = o * inner + i;
            switch (kind) {
                case Binary::add: out[k] = x[k] + y[i]; break;
                case Binary::sub: out[k] = x[k] - y[i]; break;
                case Binary::mul: out[k] = x[k] * y[i]; break;
            }
        }
    return record(name, a.shape(), std::move(out), {&a, &b}, [kind, inner, outer](Node& self) {
        const auto& g = self.grad;
        double* ga = grad_of(self, 0);
        double* gb = grad_of(self, 1);
        const auto& x = self.inputs[0]->value;
        const auto& y = self.inputs[1]->value;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = o * inner + i;
                switch (kind) {
                    case Binary::add:
                        if (ga) ga[k] += g[k];
                        if (gb) gb[i] += g[k];
                        break;
                    case Binary::sub:
                        if (ga) ga[k] += g[k];
                        if (gb) gb[i] -= g[k];
                        break;
                    case Binary::mul:
                        if (ga) ga[k] += g[k] * y[i];
                        if (gb) gb[i] += g[k] * x[k];
                        break;
                }
            }
    });
}

}  // namespace detail

/// a + b, where b's shape equals a trailing suffix of a's shape.
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::mul, "mul"); }

inline Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.values());
    for (auto& v : out) v += c;
    return detail::record("add_scalar", x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        for (std::size_t k = 0; k < self.grad.size(); ++k) gx[k] += self.grad[k];
    });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.values());
    for (auto& v : out) v *= c;
    return detail::record("mul_scalar", x.shape(), std::move(out), {&x}, [c](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        for (std::size_t k = 0; k < self.grad.size(); ++k) gx[k] += c * self.grad[k];
    });
}

/// x * s[index]: scales a whole tensor by one entry of another.
inline Tensor scale_by(const Tensor& x, const Tensor& s, std::size_t index) {
    detail::require(index < s.numel(), "scale_by: index " + std::to_string(index) + " outside " + to_string(s.shape()));
    const double c = s.at(index);
    std::vector<double> out(x.values());
    for (auto& v : out) v *= c;
    return detail::record("scale_by", x.shape(), std::move(out), {&x, &s}, [index](detail::Node& self) {
        const double c = self.inputs[1]->value[index];
        const auto& xv = self.inputs[0]->value;
        if (double* gx = detail::grad_of(self, 0))
            for (std::size_t k = 0; k < self.grad.size(); ++k) gx[k] += c * self.grad[k];
        if (double* gs = detail::grad_of(self, 1)) {
            double acc = 0.0;
            for (std::size_t k = 0; k < self.grad.size(); ++k) acc += self.grad[k] * xv[k];
            gs[index] += acc;
        }
    });
}

/// max(x, 0); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.values());
    const bool track = detail::graph_state().track_kinks;
    for (auto& v : out) {
        if (track) detail::mix_kink(v > 0.0);
        v = v > 0.0 ? v : 0.0;
    }
    return detail::record("relu", x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        const auto& xv = self.inputs[0]->value;
        for (std::size_t k = 0; k < self.grad.size(); ++k)
            if (xv[k] > 0.0) gx[k] += self.grad[k];
    });
}

inline double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.values());
    for (auto& v : out) v = stable_sigmoid(v);
    return detail::record("sigmoid", x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        for (std::size_t k = 0; k < self.grad.size(); ++k) {
            const double s = self.value[k];
            gx[k] += self.grad[k] * s * (1.0 - s);
        }
    });
}

inline Tensor log(const Tensor& x) {
    std::vector<double> out(x.values());
    for (auto& v : out) {
        if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
        v = std::log(v);
    }
    return detail::record("log", x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        const auto& xv = self.inputs[0]->value;
        for (std::size_t k = 0; k < self.grad.size(); ++k) gx[k] += self.grad[k] / xv[k];
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    detail::require(numel(shape) == x.numel(), "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
    return detail::record("reshape", std::move(shape), x.values(), {&x}, [](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        for (std::size_t k = 0; k < self.grad.size(); ++k) gx[k] += self.grad[k];
    });
}

/// x[index] along the leading axis.
inline Tensor slice(const Tensor& x, std::size_t index) {
    detail::require(x.rank() >= 2 && index < x.dim(0),
                    "slice: index " + std::to_string(index) + " outside " + to_string(x.shape()));
    Shape shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t n = numel(shape), offset = index * n;
    std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(offset),
                            x.values().begin() + static_cast<std::ptrdiff_t>(offset + n));
    return detail::record("slice", std::move(shape), std::move(out), {&x}, [offset](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        for (std::size_t k = 0; k < self.grad.size(); ++k) gx[offset + k] += self.grad[k];
    });
}

/// Single entry as a scalar tensor.
inline Tensor select(const Tensor& x, std::size_t index) {
    detail::require(index < x.numel(), "select: index " + std::to_string(index) + " outside " + to_string(x.shape()));
    return detail::record("select", {1}, {x.at(index)}, {&x}, [index](detail::Node& self) {
        detail::grad_of(self, 0)[index] += self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return detail::record("sum", {1}, {acc}, {&x}, [](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        const double g = self.grad[0];
        for (std::size_t k = 0; k < self.inputs[0]->value.size(); ++k) gx[k] += g;
    });
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double n = static_cast<double>(x.numel());
    return detail::record("mean", {1}, {acc / n}, {&x}, [n](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        const double g = self.grad[0] / n;
        for (std::size_t k = 0; k < self.inputs[0]->value.size(); ++k) gx[k] += g;
    });
}

/// Divides each slice along axis 0 by its root mean square:
///   y = x / sqrt(mean(x^2) + eps^2).
inline Tensor rms_normalize(const Tensor& x, double eps) {
    detail::require(x.rank() >= 1 && x.numel() > 0, "rms_normalize: empty input");
    const std::size_t groups = x.dim(0), n = x.numel() / groups;
    const auto& xv = x.values();
    std::vector<double> scale(groups), out(xv.size());
    for (std::size_t g = 0; g < groups; ++g) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) acc += xv[g * n + k] * xv[g * n + k];
        scale[g] = 1.0 / std::sqrt(acc / static_cast<double>(n) + eps * eps);
        for (std::size_t k = 0; k < n; ++k) out[g * n + k] = xv[g * n + k] * scale[g];
    }
    return detail::record("rms_normalize", x.shape(), std::move(out), {&x}, [scale, groups, n](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        const auto& xv = self.inputs[0]->value;
        const auto& g = self.grad;
        for (std::size_t b = 0; b < groups; ++b) {
            double dot = 0.0;
            for (std::size_t k = 0; k < n; ++k) dot += g[b * n + k] * xv[b * n + k];
            const double s = scale[b], c = dot * s * s * s / static_cast<double>(n);
            for (std::size_t k = 0; k < n; ++k) gx[b * n + k] += g[b * n + k] * s - xv[b * n + k] * c;
        }
    });
}

/// Mean of every element of every part. The sum is accumulated in long double
/// so that, for example, the mean of equal values returns that value.
inline Tensor mean_all(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "mean_all: no inputs");
    long double acc = 0.0L;
    std::size_t n = 0;
    std::vector<const Tensor*> inputs;
    for (const auto& p : parts) {
        for (double v : p.values()) acc += v;
        n += p.numel();
        inputs.push_back(&p);
    }
    detail::require(n > 0, "mean_all: inputs are empty");
    const double value = static_cast<double>(acc / static_cast<long double>(n));
    return detail::record("mean_all", {1}, {value}, inputs, [n](detail::Node& self) {
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < self.inputs.size(); ++i)
            if (double* gx = detail::grad_of(self, i))
                for (std::size_t k = 0; k < self.inputs[i]->value.size(); ++k) gx[k] += g;
    });
}

/// Sum over one axis; the axis is removed from the result shape.
inline Tensor sum(const Tensor& x, std::size_t axis) {
    auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(outer * inner, 0.0);
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t a = 0; a < extent; ++a)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * extent + a) * inner + i];
    return detail::record("sum_axis", std::move(shape), std::move(out), {&x},
                          [outer = outer, extent = extent, inner = inner](detail::Node& self) {
                              double* gx = detail::grad_of(self, 0);
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t a = 0; a < extent; ++a)
                                      for (std::size_t i = 0; i < inner; ++i)
                                          gx[(o * extent + a) * inner + i] += self.grad[o * inner + i];
                          });
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            auto idx = [&](std::size_t a) { return (o * extent + a) * inner + i; };
            double peak = xv[idx(0)];
            for (std::size_t a = 1; a < extent; ++a) peak = std::max(peak, xv[idx(a)]);
            double total = 0.0;
            for (std::size_t a = 0; a < extent; ++a) total += out[idx(a)] = std::exp(xv[idx(a)] - peak);
            for (std::size_t a = 0; a < extent; ++a) out[idx(a)] /= total;
        }
    return detail::record("softmax", x.shape(), std::move(out), {&x},
                          [outer = outer, extent = extent, inner = inner](detail::Node& self) {
                              double* gx = detail::grad_of(self, 0);
                              const auto& y = self.value;
                              const auto& g = self.grad;
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t i = 0; i < inner; ++i) {
                                      auto idx = [&](std::size_t a) { return (o * extent + a) * inner + i; };
                                      double dot = 0.0;
                                      for (std::size_t a = 0; a < extent; ++a) dot += g[idx(a)] * y[idx(a)];
                                      for (std::size_t a = 0; a < extent; ++a)
                                          gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                                  }
                          });
}

/// [B, C, H, W] -> [B, C]
inline Tensor global_avg_pool(const Tensor& x) {
    detail::require(x.rank() == 4, "global_avg_pool expects [B,C,H,W], got " + to_string(x.shape()));
    const std::size_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> out(bc, 0.0);
    const auto& xv = x.values();
    for (std::size_t k = 0; k < bc; ++k) {
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) acc += xv[k * hw + p];
        out[k] = acc / static_cast<double>(hw);
    }
    return detail::record("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {&x}, [bc, hw](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        for (std::size_t k = 0; k < bc; ++k) {
            const double g = self.grad[k] / static_cast<double>(hw);
            for (std::size_t p = 0; p < hw; ++p) gx[k * hw + p] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m, k] x [k, n] -> [m, n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                    "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::MatMap(out.data(), m, n).noalias() =
        detail::ConstMatMap(a.values().data(), m, k) * detail::ConstMatMap(b.values().data(), k, n);
    return detail::record("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
        detail::ConstMatMap g(self.grad.data(), m, n);
        if (double* ga = detail::grad_of(self, 0))
            detail::MatMap(ga, m, k).noalias() += g * detail::ConstMatMap(self.inputs[1]->value.data(), k, n).transpose();
        if (double* gb = detail::grad_of(self, 1))
            detail::MatMap(gb, k, n).noalias() += detail::ConstMatMap(self.inputs[0]->value.data(), m, k).transpose() * g;
    });
}

/// Separable 2D transform applied to every trailing [H, W] slice of x:
/// Y = row * X * col^T with row [H, H] and col [W, W].
inline Tensor transform2d(const Tensor& x, const Tensor& row, const Tensor& col) {
    detail::require(x.rank() >= 2, "transform2d: input rank must be >= 2, got " + to_string(x.shape()));
    const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    detail::require(row.rank() == 2 && row.dim(0) == h && row.dim(1) == h,
                    "transform2d: row matrix " + to_string(row.shape()) + " incompatible with " + to_string(x.shape()));
    detail::require(col.rank() == 2 && col.dim(0) == w && col.dim(1) == w,
                    "transform2d: column matrix " + to_string(col.shape()) + " incompatible with " + to_string(x.shape()));
    const std::size_t slices = x.numel() / (h * w);
    std::vector<double> out(x.numel());
    detail::ConstMatMap r(row.values().data(), h, h);
    detail::ConstMatMap c(col.values().data(), w, w);
    detail::RowMatrix tmp(h, w);
    for (std::size_t s = 0; s < slices; ++s) {
        tmp.noalias() = r * detail::ConstMatMap(x.values().data() + s * h * w, h, w);
        detail::MatMap(out.data() + s * h * w, h, w).noalias() = tmp * c.transpose();
    }
    return detail::record("transform2d", x.shape(), std::move(out), {&x, &row, &col}, [slices, h, w](detail::Node& self) {
        const auto& xv = self.inputs[0]->value;
        detail::ConstMatMap r(self.inputs[1]->value.data(), h, h);
        detail::ConstMatMap c(self.inputs[2]->value.data(), w, w);
        double* gx = detail::grad_of(self, 0);
        double* gr = detail::grad_of(self, 1);
        double* gc = detail::grad_of(self, 2);
        detail::RowMatrix tmp(h, w);
        for (std::size_t s = 0; s < slices; ++s) {
            detail::ConstMatMap g(self.grad.data() + s * h * w, h, w);
            detail::ConstMatMap xs(xv.data() + s * h * w, h, w);
            if (gx) {
                tmp.noalias() = r.transpose() * g;
                detail::MatMap(gx + s * h * w, h, w).noalias() += tmp * c;
            }
            if (gr) {
                tmp.noalias() = xs * c.transpose();
                detail::MatMap(gr, h, h).noalias() += g * tmp.transpose();
            }
            if (gc) {
                tmp.noalias() = r * xs;
                detail::MatMap(gc, w, w).noalias() += g.transpose() * tmp;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
    std::size_t batch, in_channels, height, width;
    std::size_t out_channels, kernel, stride, padding;
    std::size_t out_height, out_width;

    std::size_t patch() const { return in_channels * kernel * kernel; }
    std::size_t out_pixels() const { return out_height * out_width; }
};

namespace detail {

inline void im2col(const double* img, const Conv2dGeometry& g, double* cols) {
    const std::size_t pixels = g.out_pixels();
    for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                double* dst = cols + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
                for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
                    for (std::size_t ox = 0; ox < g.out_width; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        dst[oy * g.out_width + ox] =
                            inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)]
                                   : 0.0;
                    }
                }
            }
}

inline void col2im(const double* cols, const Conv2dGeometry& g, double* img) {
    const std::size_t pixels = g.out_pixels();
    for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const double* src = cols + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
                for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t ox = 0; ox < g.out_width; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        img[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                            src[oy * g.out_width + ox];
                    }
                }
            }
}

}  // namespace detail

/// Cross-correlation of x [B, Ci, H, W] with weight [Co, Ci, K, K] plus an
/// optional bias [Co].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    detail::require(x.rank() == 4, "conv2d: input must be [B,C,H,W], got " + to_string(x.shape()));
    detail::require(weight.rank() == 4 && weight.dim(2) == weight.dim(3) && weight.dim(1) == x.dim(1),
                    "conv2d: weight " + to_string(weight.shape()) + " incompatible with input " + to_string(x.shape()));
    detail::require(stride >= 1, "conv2d: stride must be >= 1");
    detail::require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == weight.dim(0)),
                    "conv2d: bias " + (bias.defined() ? to_string(bias.shape()) : std::string()) + " must be [Co]");
    Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
    detail::require(g.height + 2 * padding >= g.kernel && g.width + 2 * padding >= g.kernel,
                    "conv2d: kernel larger than padded input " + to_string(x.shape()));
    g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
    g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;

    const std::size_t in_size = g.in_channels * g.height * g.width, out_size = g.out_channels * g.out_pixels();
    std::vector<double> out(g.batch * out_size);
    std::vector<double> cols(g.patch() * g.out_pixels());
    detail::ConstMatMap w(weight.values().data(), g.out_channels, g.patch());
    for (std::size_t b = 0; b < g.batch; ++b) {
        detail::im2col(x.values().data() + b * in_size, g, cols.data());
        detail::MatMap y(out.data() + b * out_size, g.out_channels, g.out_pixels());
        y.noalias() = w * detail::ConstMatMap(cols.data(), g.patch(), g.out_pixels());
        if (bias.defined())
            for (std::size_t o = 0; o < g.out_channels; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias.at(o);
    }
    return detail::record("conv2d", {g.batch, g.out_channels, g.out_height, g.out_width}, std::move(out),
                          {&x, &weight, &bias}, [g, in_size, out_size](detail::Node& self) {
                              const auto& xv = self.inputs[0]->value;
                              detail::ConstMatMap w(self.inputs[1]->value.data(), g.out_channels, g.patch());
                              double* gx = detail::grad_of(self, 0);
                              double* gw = detail::grad_of(self, 1);
                              double* gb = self.inputs[2] ? detail::grad_of(self, 2) : nullptr;
                              std::vector<double> cols(g.patch() * g.out_pixels());
                              for (std::size_t b = 0; b < g.batch; ++b) {
                                  detail::ConstMatMap dy(self.grad.data() + b * out_size, g.out_channels, g.out_pixels());
                                  if (gw) {
                                      detail::im2col(xv.data() + b * in_size, g, cols.data());
                                      detail::MatMap(gw, g.out_channels, g.patch()).noalias() +=
                                          dy * detail::ConstMatMap(cols.data(), g.patch(), g.out_pixels()).transpose();
                                  }
                                  if (gb)
                                      for (std::size_t o = 0; o < g.out_channels; ++o)
                                          gb[o] += dy.row(static_cast<Eigen::Index>(o)).sum();
                                  if (gx) {
                                      detail::MatMap(cols.data(), g.patch(), g.out_pixels()).noalias() = w.transpose() * dy;
                                      detail::col2im(cols.data(), g, gx + b * in_size);
                                  }
                              }
                          });
}

inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
    return conv2d(x, weight, Tensor{}, stride, padding);
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
inline Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
    detail::require(logits.numel() == labels.size(), "bce_with_logits: " + std::to_string(logits.numel()) +
                                                         " logits vs " + std::to_string(labels.size()) + " labels");
    const double n = static_cast<double>(labels.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        const double z = logits.at(k), y = labels[k];
        if (!std::isfinite(z) || !std::isfinite(y)) throw NumericError("bce_with_logits: non-finite input");
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    std::vector<double> targets(labels.begin(), labels.end());
    return detail::record("bce_with_logits", {1}, {acc / n}, {&logits},
                          [targets = std::move(targets), n](detail::Node& self) {
                              double* gz = detail::grad_of(self, 0);
                              const auto& z = self.inputs[0]->value;
                              for (std::size_t k = 0; k < targets.size(); ++k)
                                  gz[k] += self.grad[0] * (stable_sigmoid(z[k]) - targets[k]) / n;
                          });
}

}  // namespace afd
