#include "diffice/denoiser.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace diffice::diffusion {

double TrainingTrace::head_mean(std::size_t window) const {
    const std::size_t n = std::min(window, loss.size());
    if (n == 0) return 0.0;
    return std::accumulate(loss.begin(), loss.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

double TrainingTrace::tail_mean(std::size_t window) const {
    const std::size_t n = std::min(window, loss.size());
    if (n == 0) return 0.0;
    return std::accumulate(loss.end() - static_cast<std::ptrdiff_t>(n), loss.end(), 0.0) / static_cast<double>(n);
}

std::string TrainingTrace::to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "iteration,loss\n";
    for (std::size_t i = 0; i < loss.size(); ++i) os << i << ',' << loss[i] << '\n';
    return os.str();
}

TrainingTrace train_denoiser(Denoiser<float>& model, std::span<const Image> images, const NoiseSchedule& schedule,
                             const DenoiserTraining& hyper, Rng& rng, const ProgressFn& progress) {
    if (images.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
    TrainingTrace trace;
    if (hyper.iterations <= 0) return trace;

    auto& params = model.parameters();
    params.set_trainable(true);
    nn::Adam<float> opt(params, {.lr = hyper.lr, .weight_decay = hyper.weight_decay});
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    std::uniform_int_distribution<int> pick_t(1, schedule.size());
    std::normal_distribution<float> normal(0.0f, 1.0f);
    const int B = hyper.batch_size;

    for (int it = 0; it < hyper.iterations; ++it) {
        std::vector<float> xt(static_cast<std::size_t>(B) * kPixels), eps(xt.size());
        std::vector<int> steps(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            const Image& x0 = images[pick(rng)];
            const int t = pick_t(rng);
            steps[b] = schedule.model_timestep(t);
            const float sa = static_cast<float>(std::sqrt(schedule.alpha_bar_at(t)));
            const float sn = static_cast<float>(std::sqrt(1.0 - schedule.alpha_bar_at(t)));
            for (int p = 0; p < kPixels; ++p) {
                const float e = normal(rng);
                eps[b * kPixels + p] = e;
                xt[b * kPixels + p] = sa * x0[p] + sn * e;
            }
        }
        const ad::Shape shape{B, 1, kHeight, kWidth};
        auto x = Tensor<float>::from_data(shape, std::move(xt));
        auto target = Tensor<float>::from_data(shape, std::move(eps));
        double value = 0.0;
        try {
            auto loss = ad::mean(ad::square(ad::sub(model.predict_noise(x, steps), target)));
            value = loss.item();
            opt.zero_grad();
            loss.backward();
        } catch (const ad::NonFiniteError& e) {
            throw ad::NonFiniteError("train_denoiser: diverged at iteration " + std::to_string(it) + " (" +
                                     e.what() + ")");
        }
        opt.step();
        trace.loss.push_back(value);
        if (progress) progress(it, value);
    }
    opt.zero_grad();
    params.set_trainable(false);
    return trace;
}

}  // namespace diffice::diffusion
