#include "diffice/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace diffice::ad {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local TapeStats g_stats;
thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b, const char* what = "shape mismatch") {
    throw ShapeError(std::string(op) + ": " + what + " " + to_string(a) + " vs " + to_string(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& what) {
    throw ShapeError(std::string(op) + ": " + what + " " + to_string(a));
}

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NonFiniteError(std::string(op) + ": non-finite output at index " + std::to_string(i));
        }
    }
}

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
Tensor<T> record(const char* op, Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                 std::function<void(Node<T>&)> bw) {
    check_finite(op, value);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = g_grad_enabled &&
                 std::any_of(inputs.begin(), inputs.end(), [](const NodePtr<T>& n) { return n->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(bw);
        ++g_stats.nodes_recorded;
    }
    return Tensor<T>(std::move(node));
}

// Maps each output element to the flat index of a broadcast input.
std::vector<std::int64_t> broadcast_map(const Shape& in, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::int64_t> strides(rank, 0);
    std::int64_t s = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        std::size_t in_axis = in.size() - 1 - k;
        std::size_t out_axis = rank - 1 - k;
        strides[out_axis] = in[in_axis] == 1 ? 0 : s;
        s *= in[in_axis];
    }
    const std::int64_t n = numel(out);
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t flat = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        map[static_cast<std::size_t>(i)] = flat;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            flat += strides[ax];
            if (idx[ax] < out[ax]) break;
            flat -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    return map;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        std::int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        std::int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1) shape_error(op, a, b);
        out[rank - 1 - k] = std::max(da, db);
    }
    return out;
}

// How a broadcast operand is addressed from an output index.
struct OperandIndex {
    enum class Mode { Identity, Scalar, Repeat, Tile, Map } mode = Mode::Identity;
    std::int64_t block = 1;  // Repeat: i / block; Tile: i % block
    std::vector<std::int64_t> map;

    std::int64_t operator()(std::int64_t i) const {
        switch (mode) {
            case Mode::Identity: return i;
            case Mode::Scalar: return 0;
            case Mode::Repeat: return i / block;
            case Mode::Tile: return i % block;
            case Mode::Map: break;
        }
        return map[static_cast<std::size_t>(i)];
    }
};

OperandIndex plan_operand(const Shape& in, const Shape& out) {
    OperandIndex ix;
    const std::int64_t n = numel(out);
    if (in == out) return ix;
    if (numel(in) == 1) {
        ix.mode = OperandIndex::Mode::Scalar;
        return ix;
    }
    // Right-align `in` against `out`.
    Shape padded(out.size() - in.size(), 1);
    padded.insert(padded.end(), in.begin(), in.end());
    // Repeat: matching prefix, all-ones suffix (e.g. [N,C,1,1] against [N,C,H,W]).
    std::size_t k = 0;
    while (k < out.size() && padded[k] == out[k]) ++k;
    bool ones_after = true;
    for (std::size_t j = k; j < out.size(); ++j) ones_after = ones_after && padded[j] == 1;
    if (ones_after) {
        ix.mode = OperandIndex::Mode::Repeat;
        ix.block = n / numel(in);
        return ix;
    }
    // Tile: all-ones prefix, matching suffix (e.g. [C] against [N,C]).
    std::size_t j = out.size();
    while (j > 0 && padded[j - 1] == out[j - 1]) --j;
    bool ones_before = true;
    for (std::size_t q = 0; q < j; ++q) ones_before = ones_before && padded[q] == 1;
    if (ones_before) {
        ix.mode = OperandIndex::Mode::Tile;
        ix.block = numel(in);
        return ix;
    }
    ix.mode = OperandIndex::Mode::Map;
    ix.map = broadcast_map(in, out);
    return ix;
}

struct BinaryPlan {
    Shape out;
    OperandIndex ia, ib;
};

BinaryPlan plan_binary(const char* op, const Shape& a, const Shape& b) {
    BinaryPlan p;
    p.out = broadcast_shape(op, a, b);
    p.ia = plan_operand(a, p.out);
    p.ib = plan_operand(b, p.out);
    return p;
}

enum class BinOp { Add, Sub, Mul, Div };

template <class T>
Tensor<T> binary(const char* name, BinOp kind, const Tensor<T>& a, const Tensor<T>& b) {
    auto plan = std::make_shared<BinaryPlan>(plan_binary(name, a.shape(), b.shape()));
    const std::int64_t n = numel(plan->out);
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        T x = av[plan->ia(i)], y = bv[plan->ib(i)];
        T r{};
        switch (kind) {
            case BinOp::Add: r = x + y; break;
            case BinOp::Sub: r = x - y; break;
            case BinOp::Mul: r = x * y; break;
            case BinOp::Div: r = x / y; break;
        }
        out[static_cast<std::size_t>(i)] = r;
    }
    auto bw = [plan, kind, n](Node<T>& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        const T* g = self.grad.data();
        const T* av = A.value.data();
        const T* bv = B.value.data();
        if (A.requires_grad) {
            T* ga = A.grad_buffer().data();
            for (std::int64_t i = 0; i < n; ++i) {
                auto ja = plan->ia(i);
                switch (kind) {
                    case BinOp::Add:
                    case BinOp::Sub: ga[ja] += g[i]; break;
                    case BinOp::Mul: ga[ja] += g[i] * bv[plan->ib(i)]; break;
                    case BinOp::Div: ga[ja] += g[i] / bv[plan->ib(i)]; break;
                }
            }
        }
        if (B.requires_grad) {
            T* gb = B.grad_buffer().data();
            for (std::int64_t i = 0; i < n; ++i) {
                auto jb = plan->ib(i);
                switch (kind) {
                    case BinOp::Add: gb[jb] += g[i]; break;
                    case BinOp::Sub: gb[jb] -= g[i]; break;
                    case BinOp::Mul: gb[jb] += g[i] * av[plan->ia(i)]; break;
                    case BinOp::Div: {
                        T y = bv[jb];
                        gb[jb] -= g[i] * av[plan->ia(i)] / (y * y);
                        break;
                    }
                }
            }
        }
    };
    return record<T>(name, plan->out, std::move(out), {a.node(), b.node()}, bw);
}

enum class UnOp { Relu, Sigmoid, Log, Exp, Square };

template <class T>
Tensor<T> unary(const char* name, UnOp kind, const Tensor<T>& x) {
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        T v = xv[i];
        switch (kind) {
            case UnOp::Relu: out[i] = v > T(0) ? v : T(0); break;
            case UnOp::Sigmoid: out[i] = T(1) / (T(1) + std::exp(-v)); break;
            case UnOp::Log: out[i] = std::log(v); break;
            case UnOp::Exp: out[i] = std::exp(v); break;
            case UnOp::Square: out[i] = v * v; break;
        }
    }
    auto bw = [kind](Node<T>& self) {
        auto& X = *self.inputs[0];
        T* gx = X.grad_buffer().data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        const T* xv = X.value.data();
        const std::size_t n = self.value.size();
        for (std::size_t i = 0; i < n; ++i) {
            switch (kind) {
                case UnOp::Relu: gx[i] += xv[i] > T(0) ? g[i] : T(0); break;
                case UnOp::Sigmoid: gx[i] += g[i] * y[i] * (T(1) - y[i]); break;
                case UnOp::Log: gx[i] += g[i] / xv[i]; break;
                case UnOp::Exp: gx[i] += g[i] * y[i]; break;
                case UnOp::Square: gx[i] += T(2) * xv[i] * g[i]; break;
            }
        }
    };
    return record<T>(name, x.shape(), std::move(out), {x.node()}, bw);
}

int normalize_axis(const char* op, int axis, const Shape& shape) {
    const int rank = static_cast<int>(shape.size());
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) shape_error(op, shape, "axis " + std::to_string(axis) + " out of range for");
    return a;
}

struct AxisSplit {
    std::int64_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    s.dim = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
    std::int64_t n, cin, h, w, cout, kh, kw, ho, wo;
    int stride, pad;
    std::int64_t k() const { return cin * kh * kw; }
    std::int64_t p() const { return ho * wo; }
};

// Valid output columns [lo, hi) whose input column ox*stride - pad + kj lies in [0, w).
inline void valid_cols(const ConvGeom& g, std::int64_t kj, std::int64_t& lo, std::int64_t& hi) {
    const std::int64_t off = kj - g.pad;
    lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    hi = g.w - off <= 0 ? 0 : (g.w - off + g.stride - 1) / g.stride;
    hi = std::min(hi, g.wo);
    lo = std::min(lo, hi);
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const std::int64_t P = g.p();
    for (std::int64_t c = 0; c < g.cin; ++c) {
        const T* plane = x + c * g.h * g.w;
        for (std::int64_t ki = 0; ki < g.kh; ++ki) {
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
                std::int64_t lo, hi;
                valid_cols(g, kj, lo, hi);
                const std::int64_t off = kj - g.pad;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    T* dst = row + oy * g.wo;
                    const std::int64_t iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = plane + iy * g.w;
                    std::fill(dst, dst + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo + off, src + hi + off, dst + lo);
                    } else {
                        for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + off];
                    }
                    std::fill(dst + hi, dst + g.wo, T(0));
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
    const std::int64_t P = g.p();
    for (std::int64_t c = 0; c < g.cin; ++c) {
        T* plane = x + c * g.h * g.w;
        for (std::int64_t ki = 0; ki < g.kh; ++ki) {
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
                std::int64_t lo, hi;
                valid_cols(g, kj, lo, hi);
                const std::int64_t off = kj - g.pad;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    const T* src = row + oy * g.wo;
                    T* dst = plane + iy * g.w;
                    for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + off] += src[ox];
                }
            }
        }
    }
}

}  // namespace

TapeStats& tape_stats() { return g_stats; }
bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor ----

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return from_data(shape, std::vector<T>(static_cast<std::size_t>(ad::numel(shape)), T(0)), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    return from_data(shape, std::vector<T>(static_cast<std::size_t>(ad::numel(shape)), value));
}

template <class T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    for (auto d : shape) {
        if (d < 0) shape_error("from_data", shape, "negative extent in");
    }
    if (ad::numel(shape) != static_cast<std::int64_t>(data.size())) {
        shape_error("from_data", shape, "data length " + std::to_string(data.size()) + " does not match");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
    return from_data({}, {value});
}

template <class T>
std::int64_t Tensor<T>::dim(int axis) const {
    return shape()[static_cast<std::size_t>(normalize_axis("dim", axis, shape()))];
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1) shape_error("item", shape(), "expected a single element, got");
    return node_->value[0];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw std::logic_error("set_requires_grad: only leaf tensors can be toggled");
    node_->requires_grad = on;
    return *this;
}

template <class T>
std::vector<T> Tensor<T>::grad() const {
    if (node_->grad.empty()) return std::vector<T>(node_->value.size(), T(0));
    return node_->grad;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
    return from_data(shape(), node_->value);
}

template <class T>
void Tensor<T>::backward() const {
    if (numel() != 1) shape_error("backward", shape(), "output must be scalar, got shape");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS: `order` ends up topologically sorted (inputs first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<T>* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto* n : order) {
        if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    }
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->is_leaf()) continue;
        n->backward_fn(*n);
        ++g_stats.backward_steps;
        if (n != node_.get()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// ---- ops ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary("add", BinOp::Add, a, b); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary("sub", BinOp::Sub, a, b); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary("mul", BinOp::Mul, a, b); }
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary("div", BinOp::Div, a, b); }

template <class T>
Tensor<T> relu(const Tensor<T>& x) { return unary("relu", UnOp::Relu, x); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return unary("sigmoid", UnOp::Sigmoid, x); }
template <class T>
Tensor<T> log(const Tensor<T>& x) { return unary("log", UnOp::Log, x); }
template <class T>
Tensor<T> exp(const Tensor<T>& x) { return unary("exp", UnOp::Exp, x); }
template <class T>
Tensor<T> square(const Tensor<T>& x) { return unary("square", UnOp::Square, x); }

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = std::accumulate(x.data().begin(), x.data().end(), T(0));
    auto bw = [](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& gx = X.grad_buffer();
        const T g = self.grad[0];
        for (auto& v : gx) v += g;
    };
    return record<T>("sum", {}, {s}, {x.node()}, bw);
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) shape_error("mean", x.shape(), "empty tensor");
    const T n = static_cast<T>(x.numel());
    T s = std::accumulate(x.data().begin(), x.data().end(), T(0)) / n;
    auto bw = [n](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const T g = self.grad[0] / n;
        for (auto& v : gx) v += g;
    };
    return record<T>("mean", {}, {s}, {x.node()}, bw);
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const auto s = split_axis(x.shape(), normalize_axis("softmax", axis, x.shape()));
    const T* xv = x.data().data();
    std::vector<T> out(x.data().size());
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
            const std::int64_t base = o * s.dim * s.inner + in;
            T m = xv[base];
            for (std::int64_t d = 1; d < s.dim; ++d) m = std::max(m, xv[base + d * s.inner]);
            T z = 0;
            for (std::int64_t d = 0; d < s.dim; ++d) {
                T e = std::exp(xv[base + d * s.inner] - m);
                out[static_cast<std::size_t>(base + d * s.inner)] = e;
                z += e;
            }
            for (std::int64_t d = 0; d < s.dim; ++d) out[static_cast<std::size_t>(base + d * s.inner)] /= z;
        }
    }
    auto bw = [s](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t in = 0; in < s.inner; ++in) {
                const std::int64_t base = o * s.dim * s.inner + in;
                T dot = 0;
                for (std::int64_t d = 0; d < s.dim; ++d) dot += g[base + d * s.inner] * y[base + d * s.inner];
                for (std::int64_t d = 0; d < s.dim; ++d) {
                    const auto i = base + d * s.inner;
                    gx[i] += y[i] * (g[i] - dot);
                }
            }
        }
    };
    return record<T>("softmax", x.shape(), std::move(out), {x.node()}, bw);
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
    const auto s = split_axis(x.shape(), normalize_axis("log_softmax", axis, x.shape()));
    const T* xv = x.data().data();
    std::vector<T> out(x.data().size());
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
            const std::int64_t base = o * s.dim * s.inner + in;
            T m = xv[base];
            for (std::int64_t d = 1; d < s.dim; ++d) m = std::max(m, xv[base + d * s.inner]);
            T z = 0;
            for (std::int64_t d = 0; d < s.dim; ++d) z += std::exp(xv[base + d * s.inner] - m);
            const T lse = m + std::log(z);
            for (std::int64_t d = 0; d < s.dim; ++d) {
                out[static_cast<std::size_t>(base + d * s.inner)] = xv[base + d * s.inner] - lse;
            }
        }
    }
    auto bw = [s](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t in = 0; in < s.inner; ++in) {
                const std::int64_t base = o * s.dim * s.inner + in;
                T gsum = 0;
                for (std::int64_t d = 0; d < s.dim; ++d) gsum += g[base + d * s.inner];
                for (std::int64_t d = 0; d < s.dim; ++d) {
                    const auto i = base + d * s.inner;
                    gx[i] += g[i] - std::exp(y[i]) * gsum;
                }
            }
        }
    };
    return record<T>("log_softmax", x.shape(), std::move(out), {x.node()}, bw);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = xs[0].shape();
    const int ax = normalize_axis("concat", axis, first);
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(ax)] = 0;
    for (const auto& t : xs) {
        const Shape& sh = t.shape();
        if (sh.size() != first.size()) shape_error("concat", first, sh, "rank mismatch");
        for (std::size_t d = 0; d < sh.size(); ++d) {
            if (static_cast<int>(d) != ax && sh[d] != first[d]) shape_error("concat", first, sh);
        }
        out_shape[static_cast<std::size_t>(ax)] += sh[static_cast<std::size_t>(ax)];
    }
    const auto s = split_axis(out_shape, ax);
    std::vector<std::int64_t> chunk;  // per-input contiguous block per outer index
    for (const auto& t : xs) chunk.push_back(t.dim(ax) * s.inner);
    std::vector<T> out(static_cast<std::size_t>(ad::numel(out_shape)));
    std::int64_t row = s.dim * s.inner;
    for (std::int64_t o = 0; o < s.outer; ++o) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const T* src = xs[k].data().data() + o * chunk[k];
            std::copy(src, src + chunk[k], out.begin() + o * row + off);
            off += chunk[k];
        }
    }
    std::vector<NodePtr<T>> inputs;
    for (const auto& t : xs) inputs.push_back(t.node());
    auto bw = [s, chunk, row](Node<T>& self) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            auto& X = *self.inputs[k];
            if (X.requires_grad) {
                T* gx = X.grad_buffer().data();
                for (std::int64_t o = 0; o < s.outer; ++o) {
                    const T* g = self.grad.data() + o * row + off;
                    for (std::int64_t i = 0; i < chunk[k]; ++i) gx[o * chunk[k] + i] += g[i];
                }
            }
            off += chunk[k];
        }
    };
    return record<T>("concat", out_shape, std::move(out), std::move(inputs), bw);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (ad::numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
    std::vector<T> out(x.data().begin(), x.data().end());
    auto bw = [](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
    return record<T>("reshape", std::move(shape), std::move(out), {x.node()}, bw);
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(M * N), T(0));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    // Row-at-a-time accumulation: each output row depends only on its own input
    // row, so results do not change with the batch size.
    for (std::int64_t i = 0; i < M; ++i) {
        T* o = out.data() + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const T aik = av[i * K + k];
            const T* brow = bv + k * N;
            for (std::int64_t j = 0; j < N; ++j) o[j] += aik * brow[j];
        }
    }
    auto bw = [M, K, N](Node<T>& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        const T* g = self.grad.data();
        if (A.requires_grad) {
            T* ga = A.grad_buffer().data();
            const T* bv = B.value.data();
            for (std::int64_t i = 0; i < M; ++i) {
                for (std::int64_t k = 0; k < K; ++k) {
                    T acc = 0;
                    for (std::int64_t j = 0; j < N; ++j) acc += g[i * N + j] * bv[k * N + j];
                    ga[i * K + k] += acc;
                }
            }
        }
        if (B.requires_grad) {
            T* gb = B.grad_buffer().data();
            const T* av = A.value.data();
            for (std::int64_t i = 0; i < M; ++i) {
                for (std::int64_t k = 0; k < K; ++k) {
                    const T aik = av[i * K + k];
                    for (std::int64_t j = 0; j < N; ++j) gb[k * N + j] += aik * g[i * N + j];
                }
            }
        }
    };
    return record<T>("matmul", {M, N}, std::move(out), {a.node(), b.node()}, bw);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) shape_error("transpose", a.shape(), "expected rank 2, got");
    const std::int64_t R = a.dim(0), C = a.dim(1);
    std::vector<T> out(static_cast<std::size_t>(R * C));
    for (std::int64_t i = 0; i < R; ++i)
        for (std::int64_t j = 0; j < C; ++j) out[j * R + i] = a.data()[i * C + j];
    auto bw = [R, C](Node<T>& self) {
        T* ga = self.inputs[0]->grad_buffer().data();
        for (std::int64_t i = 0; i < R; ++i)
            for (std::int64_t j = 0; j < C; ++j) ga[i * C + j] += self.grad[j * R + i];
    };
    return record<T>("transpose", {C, R}, std::move(out), {a.node()}, bw);
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt) {
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
        shape_error("conv2d", x.shape(), weight.shape());
    }
    if (opt.stride < 1 || opt.padding < 0) shape_error("conv2d", x.shape(), "invalid stride/padding for");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
        shape_error("conv2d", weight.shape(), bias.shape(), "bias mismatch");
    }
    ConvGeom g{};
    g.n = x.dim(0);
    g.cin = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.stride = opt.stride;
    g.pad = opt.padding;
    g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
    if (g.ho <= 0 || g.wo <= 0) shape_error("conv2d", x.shape(), weight.shape(), "kernel larger than input");

    const std::int64_t K = g.k(), P = g.p();
    std::vector<T> out(static_cast<std::size_t>(g.n * g.cout * P));
    std::vector<T> col(static_cast<std::size_t>(K * P));
    Eigen::Map<const MatRM<T>> W(weight.data().data(), g.cout, K);
    Eigen::Map<MatRM<T>> C(col.data(), K, P);
    for (std::int64_t n = 0; n < g.n; ++n) {
        im2col(x.data().data() + n * g.cin * g.h * g.w, g, col.data());
        Eigen::Map<MatRM<T>> Y(out.data() + n * g.cout * P, g.cout, P);
        Y.noalias() = W * C;
        if (bias.defined()) {
            for (std::int64_t c = 0; c < g.cout; ++c) Y.row(c).array() += bias.data()[c];
        }
    }

    std::vector<NodePtr<T>> inputs{x.node(), weight.node()};
    if (bias.defined()) inputs.push_back(bias.node());
    auto bw = [g](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& Wn = *self.inputs[1];
        Node<T>* Bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        const std::int64_t K = g.k(), P = g.p();
        std::vector<T> col(static_cast<std::size_t>(K * P));
        Eigen::Map<MatRM<T>> C(col.data(), K, P);
        Eigen::Map<const MatRM<T>> W(Wn.value.data(), g.cout, K);
        for (std::int64_t n = 0; n < g.n; ++n) {
            Eigen::Map<const MatRM<T>> G(self.grad.data() + n * g.cout * P, g.cout, P);
            if (Wn.requires_grad) {
                im2col(X.value.data() + n * g.cin * g.h * g.w, g, col.data());
                Eigen::Map<MatRM<T>> GW(Wn.grad_buffer().data(), g.cout, K);
                GW.noalias() += G * C.transpose();
            }
            if (Bn && Bn->requires_grad) {
                T* gb = Bn->grad_buffer().data();
                // Plain loop: Eigen's vectorized sum peels by address, so its
                // order (and the rounding) would depend on the allocation.
                const T* gr = self.grad.data() + n * g.cout * P;
                for (std::int64_t c = 0; c < g.cout; ++c) {
                    T acc = T(0);
                    for (std::int64_t p = 0; p < P; ++p) acc += gr[c * P + p];
                    gb[c] += acc;
                }
            }
            if (X.requires_grad) {
                C.noalias() = W.transpose() * G;
                col2im_add(col.data(), g, X.grad_buffer().data() + n * g.cin * g.h * g.w);
            }
        }
    };
    return record<T>("conv2d", {g.n, g.cout, g.ho, g.wo}, std::move(out), std::move(inputs), bw);
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kh, int kw) {
    if (x.rank() < 2 || kh < 1 || kw < 1 || x.dim(-2) % kh != 0 || x.dim(-1) % kw != 0) {
        shape_error("avg_pool2d", x.shape(), "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                                 " does not tile");
    }
    const std::int64_t H = x.dim(-2), W = x.dim(-1), Ho = H / kh, Wo = W / kw;
    const std::int64_t planes = x.numel() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = Ho;
    out_shape[out_shape.size() - 1] = Wo;
    std::vector<T> out(static_cast<std::size_t>(planes * Ho * Wo), T(0));
    const T inv = T(1) / static_cast<T>(kh * kw);
    const T* xv = x.data().data();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t c = 0; c < W; ++c) out[(p * Ho + y / kh) * Wo + c / kw] += xv[(p * H + y) * W + c];
    for (auto& v : out) v *= inv;
    auto bw = [=](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().data();
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t c = 0; c < W; ++c)
                    gx[(p * H + y) * W + c] += self.grad[(p * Ho + y / kh) * Wo + c / kw] * inv;
    };
    return record<T>("avg_pool2d", out_shape, std::move(out), {x.node()}, bw);
}

template <class T>
Tensor<T> upsample_nearest2d(const Tensor<T>& x, int fh, int fw) {
    if (x.rank() < 2 || fh < 1 || fw < 1) shape_error("upsample_nearest2d", x.shape(), "invalid factor for");
    const std::int64_t H = x.dim(-2), W = x.dim(-1), Ho = H * fh, Wo = W * fw;
    const std::int64_t planes = x.numel() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = Ho;
    out_shape[out_shape.size() - 1] = Wo;
    std::vector<T> out(static_cast<std::size_t>(planes * Ho * Wo));
    const T* xv = x.data().data();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < Ho; ++y)
            for (std::int64_t c = 0; c < Wo; ++c) out[(p * Ho + y) * Wo + c] = xv[(p * H + y / fh) * W + c / fw];
    auto bw = [=](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().data();
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t y = 0; y < Ho; ++y)
                for (std::int64_t c = 0; c < Wo; ++c)
                    gx[(p * H + y / fh) * W + c / fw] += self.grad[(p * Ho + y) * Wo + c];
    };
    return record<T>("upsample_nearest2d", out_shape, std::move(out), {x.node()}, bw);
}

// ---- finite differences ----

FiniteDiffResult finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                   const Tensor<double>& point, const FiniteDiffOptions& opt) {
    if (!(opt.step > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
    auto x = point.detach();
    x.set_requires_grad(true);
    auto y = f(x);
    if (y.numel() != 1) shape_error("finite_diff_check", y.shape(), "function must be scalar-valued, got");
    if (!std::isfinite(y.item())) throw NonFiniteError("finite_diff_check: non-finite function value");
    y.backward();
    const auto analytic = x.grad();

    auto eval = [&](std::int64_t i, double delta) {
        NoGradGuard guard;
        auto probe = point.detach();
        probe.mutable_data()[static_cast<std::size_t>(i)] += delta;
        double v = f(probe).item();
        if (!std::isfinite(v)) throw NonFiniteError("finite_diff_check: non-finite function value");
        return v;
    };

    FiniteDiffResult res;
    const std::int64_t n = point.numel();
    const std::int64_t stride = opt.max_coordinates > 0 && n > opt.max_coordinates
                                    ? (n + opt.max_coordinates - 1) / opt.max_coordinates
                                    : 1;
    for (std::int64_t i = 0; i < n; i += stride) {
        if (std::find(opt.excluded.begin(), opt.excluded.end(), i) != opt.excluded.end()) continue;
        const double numeric = (eval(i, opt.step) - eval(i, -opt.step)) / (2.0 * opt.step);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double err = std::abs(a - numeric) / (std::abs(a) + 1e-8);
        ++res.checked;
        if (res.worst_index < 0 || err > res.max_relative_error) {
            res.max_relative_error = err;
            res.worst_index = i;
        }
    }
    return res;
}

#define DIFFICE_INSTANTIATE(T)                                                                          \
    template class Tensor<T>;                                                                           \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> relu(const Tensor<T>&);                                                          \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                       \
    template Tensor<T> log(const Tensor<T>&);                                                           \
    template Tensor<T> exp(const Tensor<T>&);                                                           \
    template Tensor<T> square(const Tensor<T>&);                                                        \
    template Tensor<T> sum(const Tensor<T>&);                                                           \
    template Tensor<T> mean(const Tensor<T>&);                                                          \
    template Tensor<T> softmax(const Tensor<T>&, int);                                                  \
    template Tensor<T> log_softmax(const Tensor<T>&, int);                                              \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                      \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> transpose(const Tensor<T>&);                                                     \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);     \
    template Tensor<T> avg_pool2d(const Tensor<T>&, int, int);                                          \
    template Tensor<T> upsample_nearest2d(const Tensor<T>&, int, int);

DIFFICE_INSTANTIATE(float)
DIFFICE_INSTANTIATE(double)

#undef DIFFICE_INSTANTIATE

}  // namespace diffice::ad
