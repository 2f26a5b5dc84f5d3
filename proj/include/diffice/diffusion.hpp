#pragma once

// DDPM machinery: noise schedules and their re-spacing, the closed-form
// forward corruption, the one-step denoised estimate and the reverse
// transition with fixed posterior variance.
//
// Timesteps are 1-based throughout: a schedule of size K covers t = 1..K.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diffice/random.hpp"
#include "diffice/tensor.hpp"

namespace diffice::diffusion {

template <class T>
using Tensor = ad::Tensor<T>;

enum class ScheduleKind { Linear };

struct NoiseSchedule {
    int train_steps = 0;            // T_train of the schedule this was derived from
    std::vector<double> beta;       // beta[t-1]
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product
    std::vector<int> timesteps;     // original training step behind each index

    int size() const { return static_cast<int>(beta.size()); }
    double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t - 1)); }
    /// alpha_bar_{t-1}, with alpha_bar_0 = 1.
    double alpha_bar_prev(int t) const { return t <= 1 ? 1.0 : alpha_bar_at(t - 1); }
    /// Fixed reverse variance: (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
    double posterior_variance(int t) const;
    int model_timestep(int t) const { return timesteps.at(static_cast<std::size_t>(t - 1)); }
    void check_step(int t, const char* op) const;
};

NoiseSchedule build_schedule(int train_steps, ScheduleKind kind = ScheduleKind::Linear, double beta_start = 1e-4,
                             double beta_end = 0.02);

/// Evenly spaced subsequence of `sample_steps` steps ending at the last
/// training step; betas recomputed so the running products match.
NoiseSchedule respace(const NoiseSchedule& schedule, int sample_steps);

/// Anything that predicts the added noise from (x_t, training timestep).
template <class T>
class NoisePredictor {
   public:
    virtual ~NoisePredictor() = default;
    /// x: [N, C, H, W]; timesteps: one training-schedule step per batch element.
    virtual Tensor<T> predict_noise(const Tensor<T>& x, std::span<const int> timesteps) const = 0;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule);

/// x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t); differentiable in both inputs.
template <class T>
Tensor<T> one_step_denoise(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& schedule);

/// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(1 - beta_t).
template <class T>
Tensor<T> predict_mu(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& schedule);

/// One rng per batch element; draws that element's standard normal noise.
template <class T>
Tensor<T> standard_normal(const ad::Shape& shape, std::span<Rng> per_sample);

/// x_{t-1} = mu - Sigma_t * g + sqrt(Sigma_t) z, with z drawn from the
/// per-sample rngs; z = 0 at t = 1. An undefined `g` means no guidance.
template <class T>
Tensor<T> guided_transition(const Tensor<T>& mu, int t, const Tensor<T>& g, const NoiseSchedule& schedule,
                            std::span<Rng> per_sample);

template <class T>
Tensor<T> reverse_step(const Tensor<T>& x_t, int t, const NoisePredictor<T>& model, const NoiseSchedule& schedule,
                       std::span<Rng> per_sample);

/// Full unguided ancestral sampling from pure noise, clamped to [-1, 1] at the end.
template <class T>
Tensor<T> sample(const NoisePredictor<T>& model, const NoiseSchedule& schedule, const ad::Shape& shape,
                 std::span<Rng> per_sample);

template <class T>
Tensor<T> clamp_unit(const Tensor<T>& x);

}  // namespace diffice::diffusion
