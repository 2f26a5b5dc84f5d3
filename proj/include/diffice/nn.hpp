#pragma once

// Minimal layer library on top of the autodiff tensors: parameter registry,
// convolution/linear layers and the Adam optimizer.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffice/checkpoint.hpp"
#include "diffice/random.hpp"
#include "diffice/tensor.hpp"

namespace diffice::nn {

template <class T>
using Tensor = ad::Tensor<T>;

/// Ordered, named parameters of a model. Order is registration order and is
/// what checkpoints and hashes follow.
template <class T>
class ParameterList {
   public:
    Tensor<T> add(std::string name, Tensor<T> t) {
        for (const auto& [n, _] : items_) {
            if (n == name) throw std::logic_error("duplicate parameter name: " + name);
        }
        t.set_requires_grad(true);
        items_.emplace_back(std::move(name), t);
        return t;
    }

    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    std::size_t size() const { return items_.size(); }
    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : items_) n += t.numel();
        return n;
    }

    void set_trainable(bool on) {
        for (auto& [_, t] : items_) t.set_requires_grad(on);
    }
    void zero_grad() {
        for (auto& [_, t] : items_) t.zero_grad();
    }

    std::vector<NamedTensor> export_float() const {
        std::vector<NamedTensor> out;
        for (const auto& [name, t] : items_) {
            std::vector<float> data(t.data().begin(), t.data().end());
            out.push_back({name, ad::Tensor<float>::from_data(t.shape(), std::move(data))});
        }
        return out;
    }

    void import_float(const std::vector<NamedTensor>& src) {
        if (src.size() != items_.size()) {
            throw std::runtime_error("checkpoint has " + std::to_string(src.size()) + " tensors, model expects " +
                                     std::to_string(items_.size()));
        }
        for (std::size_t i = 0; i < items_.size(); ++i) {
            auto& [name, t] = items_[i];
            if (src[i].name != name || src[i].tensor.shape() != t.shape()) {
                throw std::runtime_error("checkpoint tensor " + src[i].name + ad::to_string(src[i].tensor.shape()) +
                                         " does not match parameter " + name + ad::to_string(t.shape()));
            }
            auto dst = t.mutable_data();
            auto s = src[i].tensor.data();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(s[k]);
        }
    }

    /// Hash over all parameter contents, in registration order.
    std::string hash() const {
        std::string acc;
        for (const auto& nt : export_float()) acc += nt.name + ":" + tensor_hash(nt.tensor) + ";";
        return sha256_hex(acc);
    }

   private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
};

template <class T>
Tensor<T> he_normal(ad::Shape shape, std::int64_t fan_in, Rng& rng, double gain = 1.0) {
    std::vector<T> data(static_cast<std::size_t>(ad::numel(shape)));
    fill_normal<T>(data, rng, static_cast<T>(gain * std::sqrt(2.0 / static_cast<double>(fan_in))));
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <class T>
struct Conv2d {
    Tensor<T> weight, bias;
    int stride = 1;
    int padding = 1;

    /// `gain` 0 gives a zero-initialized layer.
    static Conv2d create(ParameterList<T>& params, const std::string& name, std::int64_t cin, std::int64_t cout,
                         int kernel, Rng& rng, int stride = 1, double gain = 1.0) {
        Conv2d c;
        c.stride = stride;
        c.padding = kernel / 2;
        c.weight = params.add(name + ".weight",
                              he_normal<T>({cout, cin, kernel, kernel}, cin * kernel * kernel, rng, gain));
        c.bias = params.add(name + ".bias", Tensor<T>::zeros({cout}));
        return c;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return ad::conv2d(x, weight, bias, {.stride = stride, .padding = padding});
    }
};

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    static Linear create(ParameterList<T>& params, const std::string& name, std::int64_t in, std::int64_t out,
                         Rng& rng, double gain = 1.0) {
        Linear l;
        l.weight = params.add(name + ".weight", he_normal<T>({in, out}, in, rng, gain));
        l.bias = params.add(name + ".bias", Tensor<T>::zeros({out}));
        return l;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ad::add(ad::matmul(x, weight), bias); }
};

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

template <class T>
class Adam {
   public:
    Adam(const ParameterList<T>& params, AdamOptions opt) : opt_(opt) {
        for (const auto& [_, t] : params) {
            params_.push_back(t);
            m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
            v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            auto& param = params_[p];
            if (!param.has_grad()) continue;
            const auto g = param.grad();
            auto w = param.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i];
                m_[p][i] = opt_.beta1 * m_[p][i] + (1.0 - opt_.beta1) * gi;
                v_[p][i] = opt_.beta2 * v_[p][i] + (1.0 - opt_.beta2) * gi * gi;
                const double upd = (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + opt_.eps);
                w[i] = static_cast<T>(w[i] - opt_.lr * (upd + opt_.weight_decay * w[i]));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(double lr) { opt_.lr = lr; }

   private:
    AdamOptions opt_;
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace diffice::nn
