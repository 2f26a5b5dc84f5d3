#pragma once

// Dense tensors with a dynamic reverse-mode tape.
//
// Every op returns a fresh tensor. When any input requires a gradient (and
// gradient recording is enabled on the current thread) the result keeps
// references to its inputs plus a closure that pushes its gradient back to
// them. Calling backward() on a scalar walks that graph once in reverse
// topological order. Tapes are per-thread; parameters that do not require a
// gradient can be shared read-only between threads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffice::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Thread-local counters, used by tests to verify that a code path does or
/// does not touch the tape.
struct TapeStats {
    std::size_t nodes_recorded = 0;
    std::size_t backward_steps = 0;
};
TapeStats& tape_stats();

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

template <class T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(int axis) const;
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    std::span<const T> data() const { return node_->value; }
    /// Direct write access. Only valid for tensors that are not inputs of a
    /// live tape (leaf parameters between optimizer steps, scratch buffers).
    std::span<T> mutable_data() { return node_->value; }
    T item() const;
    T operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient of the last backward pass(es); zeros if none accumulated.
    std::vector<T> grad() const;
    void zero_grad() { node_->grad.clear(); }

    /// Reverse pass from this scalar. Leaf gradients accumulate across calls.
    void backward() const;

    /// Same values, no tape history, requires_grad = false.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    const char* op_name() const { return node_->op; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

   private:
    std::shared_ptr<Node<T>> node_;
};

// ---- elementwise binary (numpy-style broadcasting over trailing dims) ----
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

// ---- unary ----
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> log(const Tensor<T>& x);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> square(const Tensor<T>& x);

// ---- reductions (to a rank-0 scalar) ----
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);

// ---- axis ops ----
template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis);
template <class T> Tensor<T> log_softmax(const Tensor<T>& x, int axis);
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// ---- linear algebra / spatial ----
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> transpose(const Tensor<T>& a);

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
};
/// x: [N, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt = {});
/// Non-overlapping average pooling over the two trailing dims.
template <class T> Tensor<T> avg_pool2d(const Tensor<T>& x, int kh, int kw);
template <class T> Tensor<T> upsample_nearest2d(const Tensor<T>& x, int fh, int fw);

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }

// ---- gradient verification ----

struct FiniteDiffResult {
    double max_relative_error = 0.0;
    std::int64_t worst_index = -1;
    std::int64_t checked = 0;
};

struct FiniteDiffOptions {
    double step = 1e-5;
    /// Coordinates to skip, e.g. points sitting exactly on a ReLU kink where
    /// the one-sided derivatives disagree and no finite difference can match.
    std::vector<std::int64_t> excluded;
    /// Check at most this many coordinates (evenly strided); 0 = all.
    std::int64_t max_coordinates = 0;
};

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
FiniteDiffResult finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                   const Tensor<double>& point, const FiniteDiffOptions& opt = {});

}  // namespace diffice::ad
