#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "diffice/diffusion.hpp"
#include "diffice/image.hpp"
#include "diffice/unet.hpp"
#include "json.hpp"

namespace diffice::diffusion {

struct DenoiserConfig {
    std::vector<int> widths{16, 32, 48};
    int time_dim = 32;
};

/// Epsilon-predicting U-Net.
template <class T>
class Denoiser : public NoisePredictor<T> {
   public:
    Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
        nn::UNetConfig u;
        u.in_channels = 1;
        u.out_channels = 1;
        u.widths = cfg.widths;
        u.time_dim = cfg.time_dim;
        u.zero_head = true;
        unet_ = nn::UNet<T>(u, params_, "", rng);
    }

    Tensor<T> predict_noise(const Tensor<T>& x, std::span<const int> timesteps) const override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        return unet_.forward(x, timesteps);
    }

    nn::ParameterList<T>& parameters() { return params_; }
    const nn::ParameterList<T>& parameters() const { return params_; }
    const DenoiserConfig& config() const { return cfg_; }
    std::uint64_t calls() const { return calls_.load(); }

    nlohmann::json describe() const {
        return {{"architecture", "unet"}, {"widths", cfg_.widths}, {"time_dim", cfg_.time_dim},
                {"parameters", params_.count()}};
    }

   private:
    DenoiserConfig cfg_;
    nn::ParameterList<T> params_;
    nn::UNet<T> unet_;
    mutable std::atomic<std::uint64_t> calls_{0};
};

struct DenoiserTraining {
    int iterations = 3000;
    int batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 0.0;
};

struct TrainingTrace {
    std::vector<double> loss;  // one entry per iteration

    /// Mean of the first / last `window` entries.
    double head_mean(std::size_t window) const;
    double tail_mean(std::size_t window) const;
    std::string to_csv() const;
};

/// Optional per-iteration observer (iteration, loss).
using ProgressFn = std::function<void(int, double)>;

/// Standard epsilon-MSE training: uniform t over the training schedule,
/// fresh Gaussian noise per sample. Throws on an empty dataset or when the
/// loss stops being finite.
TrainingTrace train_denoiser(Denoiser<float>& model, std::span<const Image> images, const NoiseSchedule& schedule,
                             const DenoiserTraining& hyper, Rng& rng, const ProgressFn& progress = {});

}  // namespace diffice::diffusion
