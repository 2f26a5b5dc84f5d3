#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffice/nn.hpp"

namespace diffice::nn {

struct UNetConfig {
    int in_channels = 1;
    int out_channels = 1;
    std::vector<int> widths{16, 32, 48};  // one entry per resolution level
    int time_dim = 0;                      // 0: no timestep conditioning
    bool zero_head = false;                // start with a zero output layer
};

/// [N] integer timesteps -> [N, dim] sinusoidal features.
template <class T>
Tensor<T> sinusoidal_embedding(std::span<const int> steps, int dim) {
    const int half = dim / 2;
    std::vector<T> out(steps.size() * static_cast<std::size_t>(dim), T(0));
    for (std::size_t n = 0; n < steps.size(); ++n) {
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / std::max(1, half));
            const double arg = steps[n] * freq;
            out[n * dim + k] = static_cast<T>(std::sin(arg));
            out[n * dim + half + k] = static_cast<T>(std::cos(arg));
        }
    }
    return Tensor<T>::from_data({static_cast<std::int64_t>(steps.size()), dim}, std::move(out));
}

/// Small U-Net: per level two 3x3 convs with ReLU, 2x average pooling down,
/// nearest upsampling and skip concatenation up, 1x1 output head. With a
/// time dimension, a projected timestep embedding is added after the first
/// conv of every level.
template <class T>
class UNet {
   public:
    UNet() = default;
    UNet(const UNetConfig& cfg, ParameterList<T>& params, const std::string& prefix, Rng& rng) : cfg_(cfg) {
        if (cfg.widths.empty()) throw std::invalid_argument("UNet: need at least one level");
        const int L = static_cast<int>(cfg.widths.size());
        if (cfg.time_dim > 0) {
            time_in_ = Linear<T>::create(params, prefix + "time.in", cfg.time_dim, cfg.time_dim, rng);
        }
        int prev = cfg.in_channels;
        for (int i = 0; i < L; ++i) {
            const std::string p = prefix + "down" + std::to_string(i);
            Level lv;
            lv.a = Conv2d<T>::create(params, p + ".a", prev, cfg.widths[i], 3, rng);
            lv.b = Conv2d<T>::create(params, p + ".b", cfg.widths[i], cfg.widths[i], 3, rng);
            if (cfg.time_dim > 0) lv.temb = Linear<T>::create(params, p + ".temb", cfg.time_dim, cfg.widths[i], rng);
            down_.push_back(lv);
            prev = cfg.widths[i];
        }
        for (int i = L - 2; i >= 0; --i) {
            const std::string p = prefix + "up" + std::to_string(i);
            Level lv;
            lv.a = Conv2d<T>::create(params, p + ".a", cfg.widths[i + 1] + cfg.widths[i], cfg.widths[i], 3, rng);
            lv.b = Conv2d<T>::create(params, p + ".b", cfg.widths[i], cfg.widths[i], 3, rng);
            if (cfg.time_dim > 0) lv.temb = Linear<T>::create(params, p + ".temb", cfg.time_dim, cfg.widths[i], rng);
            up_.push_back(lv);
        }
        head_ = Conv2d<T>::create(params, prefix + "head", cfg.widths[0], cfg.out_channels, 1, rng, 1,
                                  cfg.zero_head ? 0.0 : 1.0);
    }

    const UNetConfig& config() const { return cfg_; }

    /// x: [N, in, H, W] with H, W divisible by 2^(levels-1).
    Tensor<T> forward(const Tensor<T>& x, std::span<const int> steps = {}) const {
        Tensor<T> emb;
        if (cfg_.time_dim > 0) {
            if (static_cast<std::int64_t>(steps.size()) != x.dim(0)) {
                throw std::invalid_argument("UNet: need one timestep per batch element");
            }
            emb = ad::relu(time_in_(sinusoidal_embedding<T>(steps, cfg_.time_dim)));
        }
        auto stage = [&](const Level& lv, Tensor<T> h) {
            h = lv.a(h);
            if (emb.defined()) {
                auto proj = lv.temb(emb);
                h = ad::add(h, ad::reshape(proj, {proj.dim(0), proj.dim(1), 1, 1}));
            }
            h = ad::relu(h);
            return ad::relu(lv.b(h));
        };
        std::vector<Tensor<T>> skips;
        Tensor<T> h = x;
        for (std::size_t i = 0; i < down_.size(); ++i) {
            if (i > 0) h = ad::avg_pool2d(h, 2, 2);
            h = stage(down_[i], h);
            skips.push_back(h);
        }
        for (std::size_t k = 0; k < up_.size(); ++k) {
            const std::size_t level = down_.size() - 2 - k;
            h = ad::upsample_nearest2d(h, 2, 2);
            h = stage(up_[k], ad::concat<T>({h, skips[level]}, 1));
        }
        return head_(h);
    }

   private:
    struct Level {
        Conv2d<T> a, b;
        Linear<T> temb;
    };
    UNetConfig cfg_;
    Linear<T> time_in_;
    std::vector<Level> down_, up_;
    Conv2d<T> head_;
};

}  // namespace diffice::nn
