#include "diffice/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace diffice::diffusion {

double NoiseSchedule::posterior_variance(int t) const {
    check_step(t, "posterior_variance");
    const double ab = alpha_bar_at(t);
    if (1.0 - ab <= 0.0) return 0.0;
    return (1.0 - alpha_bar_prev(t)) / (1.0 - ab) * beta_at(t);
}

void NoiseSchedule::check_step(int t, const char* op) const {
    if (t < 1 || t > size()) {
        throw std::out_of_range(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " +
                                std::to_string(size()) + "]");
    }
}

NoiseSchedule build_schedule(int train_steps, ScheduleKind kind, double beta_start, double beta_end) {
    if (train_steps < 2) throw std::invalid_argument("build_schedule: need at least 2 training steps");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
        throw std::invalid_argument("build_schedule: betas must satisfy 0 < start <= end < 1");
    }
    NoiseSchedule s;
    s.train_steps = train_steps;
    double running = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        double b = 0.0;
        switch (kind) {
            case ScheduleKind::Linear:
                b = beta_start + (beta_end - beta_start) * static_cast<double>(i) / (train_steps - 1);
                break;
        }
        running *= 1.0 - b;
        s.beta.push_back(b);
        s.alpha.push_back(1.0 - b);
        s.alpha_bar.push_back(running);
        s.timesteps.push_back(i + 1);
    }
    return s;
}

NoiseSchedule respace(const NoiseSchedule& schedule, int sample_steps) {
    const int T = schedule.size();
    if (sample_steps < 1 || sample_steps > T) {
        throw std::invalid_argument("respace: sample steps " + std::to_string(sample_steps) + " outside [1, " +
                                    std::to_string(T) + "]");
    }
    NoiseSchedule s;
    s.train_steps = schedule.train_steps;
    double prev = 1.0;
    for (int i = 1; i <= sample_steps; ++i) {
        // round(i * T / K); strictly increasing because T >= K, and s_K = T.
        const int step = static_cast<int>((static_cast<long long>(i) * T + sample_steps / 2) / sample_steps);
        const double ab = schedule.alpha_bar_at(step);
        const double b = 1.0 - ab / prev;
        s.beta.push_back(b);
        s.alpha.push_back(1.0 - b);
        s.alpha_bar.push_back(ab);
        s.timesteps.push_back(schedule.model_timestep(step));
        prev = ab;
    }
    return s;
}

template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
    schedule.check_step(t, "forward_sample");
    if (x0.shape() != eps.shape()) {
        throw ad::ShapeError("forward_sample: noise shape " + ad::to_string(eps.shape()) + " vs image " +
                             ad::to_string(x0.shape()));
    }
    const double ab = schedule.alpha_bar_at(t);
    return ad::add(ad::mul(Tensor<T>::scalar(static_cast<T>(std::sqrt(ab))), x0),
                   ad::mul(Tensor<T>::scalar(static_cast<T>(std::sqrt(1.0 - ab))), eps));
}

template <class T>
Tensor<T> one_step_denoise(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& schedule) {
    schedule.check_step(t, "one_step_denoise");
    if (x_t.shape() != eps_hat.shape()) {
        throw ad::ShapeError("one_step_denoise: noise shape " + ad::to_string(eps_hat.shape()) + " vs image " +
                             ad::to_string(x_t.shape()));
    }
    const double ab = schedule.alpha_bar_at(t);
    auto num = ad::sub(x_t, ad::mul(Tensor<T>::scalar(static_cast<T>(std::sqrt(1.0 - ab))), eps_hat));
    return ad::div(num, Tensor<T>::scalar(static_cast<T>(std::sqrt(ab))));
}

template <class T>
Tensor<T> predict_mu(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& schedule) {
    schedule.check_step(t, "predict_mu");
    const double b = schedule.beta_at(t);
    const double ab = schedule.alpha_bar_at(t);
    const double coef = 1.0 - ab > 0.0 ? b / std::sqrt(1.0 - ab) : 0.0;
    auto inner = ad::sub(x_t, ad::mul(Tensor<T>::scalar(static_cast<T>(coef)), eps_hat));
    return ad::mul(Tensor<T>::scalar(static_cast<T>(1.0 / std::sqrt(1.0 - b))), inner);
}

template <class T>
Tensor<T> standard_normal(const ad::Shape& shape, std::span<Rng> per_sample) {
    if (shape.empty() || static_cast<std::size_t>(shape[0]) != per_sample.size()) {
        throw std::invalid_argument("standard_normal: need one rng per batch element, got " +
                                    std::to_string(per_sample.size()) + " for shape " + ad::to_string(shape));
    }
    std::vector<T> data(static_cast<std::size_t>(ad::numel(shape)));
    const std::size_t per = data.size() / per_sample.size();
    for (std::size_t n = 0; n < per_sample.size(); ++n) {
        fill_normal<T>(std::span<T>(data.data() + n * per, per), per_sample[n]);
    }
    return Tensor<T>::from_data(shape, std::move(data));
}

template <class T>
Tensor<T> guided_transition(const Tensor<T>& mu, int t, const Tensor<T>& g, const NoiseSchedule& schedule,
                            std::span<Rng> per_sample) {
    schedule.check_step(t, "guided_transition");
    if (g.defined() && g.shape() != mu.shape()) {
        throw ad::ShapeError("guided_transition: gradient shape " + ad::to_string(g.shape()) + " vs mean " +
                             ad::to_string(mu.shape()));
    }
    const T var = static_cast<T>(schedule.posterior_variance(t));
    std::vector<T> out(mu.data().begin(), mu.data().end());
    if (g.defined()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] - var * g[i];
    }
    if (t > 1) {
        auto z = standard_normal<T>(mu.shape(), per_sample);
        const T sd = std::sqrt(var);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] + sd * z[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!std::isfinite(out[i])) throw ad::NonFiniteError("guided_transition: non-finite sample at t=" + std::to_string(t));
    }
    return Tensor<T>::from_data(mu.shape(), std::move(out));
}

template <class T>
Tensor<T> reverse_step(const Tensor<T>& x_t, int t, const NoisePredictor<T>& model, const NoiseSchedule& schedule,
                       std::span<Rng> per_sample) {
    schedule.check_step(t, "reverse_step");
    ad::NoGradGuard guard;
    std::vector<int> steps(static_cast<std::size_t>(x_t.dim(0)), schedule.model_timestep(t));
    auto eps = model.predict_noise(x_t, steps);
    auto mu = predict_mu(x_t, t, eps, schedule);
    return guided_transition(mu, t, Tensor<T>{}, schedule, per_sample);
}

template <class T>
Tensor<T> clamp_unit(const Tensor<T>& x) {
    std::vector<T> v(x.data().begin(), x.data().end());
    for (auto& e : v) e = std::clamp(e, T(-1), T(1));
    return Tensor<T>::from_data(x.shape(), std::move(v));
}

template <class T>
Tensor<T> sample(const NoisePredictor<T>& model, const NoiseSchedule& schedule, const ad::Shape& shape,
                 std::span<Rng> per_sample) {
    auto x = standard_normal<T>(shape, per_sample);
    for (int t = schedule.size(); t >= 1; --t) x = reverse_step(x, t, model, schedule, per_sample);
    return clamp_unit(x);
}

#define DIFFICE_INSTANTIATE(T)                                                                                   \
    template Tensor<T> forward_sample(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);          \
    template Tensor<T> one_step_denoise(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);        \
    template Tensor<T> predict_mu(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);              \
    template Tensor<T> standard_normal(const ad::Shape&, std::span<Rng>);                                      \
    template Tensor<T> guided_transition(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&,        \
                                         std::span<Rng>);                                                      \
    template Tensor<T> reverse_step(const Tensor<T>&, int, const NoisePredictor<T>&, const NoiseSchedule&,     \
                                    std::span<Rng>);                                                           \
    template Tensor<T> clamp_unit(const Tensor<T>&);                                                           \
    template Tensor<T> sample(const NoisePredictor<T>&, const NoiseSchedule&, const ad::Shape&, std::span<Rng>);

DIFFICE_INSTANTIATE(float)
DIFFICE_INSTANTIATE(double)

#undef DIFFICE_INSTANTIATE

}  // namespace diffice::diffusion
