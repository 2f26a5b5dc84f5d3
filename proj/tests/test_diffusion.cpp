#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "diffice/denoiser.hpp"
#include "diffice/diffusion.hpp"
#include "diffice/synthdata.hpp"

using namespace diffice;
using namespace diffice::diffusion;

namespace {

template <class T>
class ZeroNoise : public NoisePredictor<T> {
   public:
    Tensor<T> predict_noise(const Tensor<T>& x, std::span<const int>) const override {
        return Tensor<T>::zeros(x.shape());
    }
};

// Predicts a fixed fraction of x_t, so mu depends on the model output.
template <class T>
class ScaledNoise : public NoisePredictor<T> {
   public:
    Tensor<T> predict_noise(const Tensor<T>& x, std::span<const int>) const override {
        return x * static_cast<T>(0.3);
    }
};

template <class T>
Tensor<T> randn(ad::Shape shape, Rng& rng) {
    std::vector<T> v(static_cast<std::size_t>(ad::numel(shape)));
    fill_normal<T>(v, rng);
    return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> rand_unit(ad::Shape shape, Rng& rng) {
    std::vector<T> v(static_cast<std::size_t>(ad::numel(shape)));
    fill_uniform<T>(v, rng, T(-1), T(1));
    return Tensor<T>::from_data(std::move(shape), std::move(v));
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST_CASE("linear schedule") {
    auto s = build_schedule(1000);
    REQUIRE(s.size() == 1000);
    CHECK(s.beta.front() == doctest::Approx(1e-4));
    CHECK(s.beta.back() == doctest::Approx(0.02));
    CHECK(s.alpha_bar_at(1000) < 0.001);

    double prod = 1.0;
    for (int t = 1; t <= s.size(); ++t) {
        CHECK(s.beta_at(t) > 0.0);
        CHECK(s.beta_at(t) < 1.0);
        prod *= 1.0 - s.beta_at(t);
        CHECK(std::abs(s.alpha_bar_at(t) - prod) / prod < 1e-6);
        if (t > 1) CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    }
    CHECK(s.timesteps.back() == 1000);

    auto two = build_schedule(2);
    CHECK(two.alpha_bar_at(2) == doctest::Approx((1 - two.beta_at(1)) * (1 - two.beta_at(2))).epsilon(1e-14));
    CHECK_THROWS_AS(build_schedule(1), std::invalid_argument);
    CHECK_THROWS_AS(s.check_step(0, "x"), std::out_of_range);
    CHECK_THROWS_AS(s.check_step(1001, "x"), std::out_of_range);
}

TEST_CASE("posterior variance") {
    auto s = build_schedule(1000);
    CHECK(s.posterior_variance(1) == 0.0);
    for (int t : {2, 50, 500, 1000}) {
        const double expect = (1 - s.alpha_bar_at(t - 1)) / (1 - s.alpha_bar_at(t)) * s.beta_at(t);
        CHECK(s.posterior_variance(t) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(s.posterior_variance(t) < s.beta_at(t));
    }
}

TEST_CASE("respacing") {
    auto s = build_schedule(1000);
    auto same = respace(s, 1000);
    for (int t = 1; t <= 1000; ++t) {
        CHECK(same.alpha_bar_at(t) == doctest::Approx(s.alpha_bar_at(t)).epsilon(1e-12));
        CHECK(same.model_timestep(t) == t);
    }

    auto r = respace(s, 400);
    REQUIRE(r.size() == 400);
    CHECK(r.timesteps.back() == 1000);
    CHECK(r.train_steps == 1000);
    double prod = 1.0;
    for (int i = 1; i <= 400; ++i) {
        if (i > 1) CHECK(r.model_timestep(i) > r.model_timestep(i - 1));
        // Exact subsequence of the original cumulative products.
        CHECK(r.alpha_bar_at(i) == s.alpha_bar_at(r.model_timestep(i)));
        prod *= 1.0 - r.beta_at(i);
        CHECK(std::abs(prod - r.alpha_bar_at(i)) / r.alpha_bar_at(i) < 1e-9);
    }

    auto one = respace(s, 1);
    REQUIRE(one.size() == 1);
    CHECK(one.beta_at(1) == doctest::Approx(1.0 - s.alpha_bar_at(1000)).epsilon(1e-12));
    CHECK_THROWS(respace(s, 0));
    CHECK_THROWS(respace(s, 1001));
}

TEST_CASE("forward sample") {
    auto s = build_schedule(1000);
    Rng rng(1);
    auto x0 = rand_unit<float>({2, 1, kHeight, kWidth}, rng);
    auto zero = Tensor<float>::zeros(x0.shape());
    auto xt = forward_sample(x0, 300, zero, s);
    const float scale = static_cast<float>(std::sqrt(s.alpha_bar_at(300)));
    for (std::int64_t i = 0; i < x0.numel(); ++i) CHECK(xt[i] == doctest::Approx(scale * x0[i]));

    auto eps = randn<float>(x0.shape(), rng);
    auto last = forward_sample(x0, 1000, eps, s);
    CHECK(max_abs_diff(last.data(), eps.data()) < 0.05);

    CHECK_THROWS_AS(forward_sample(x0, 0, eps, s), std::out_of_range);
    CHECK_THROWS_AS(forward_sample(x0, 10, Tensor<float>::zeros({1, 1, kHeight, kWidth}), s), ad::ShapeError);
}

TEST_CASE("forward sample variance matches 1 - alpha_bar") {
    auto s = build_schedule(1000);
    const int t = 250;
    const int draws = 100000;
    Rng rng(2);
    auto x0 = Tensor<double>::full({draws}, 0.4);
    auto eps = randn<double>({draws}, rng);
    auto xt = forward_sample(x0, t, eps, s);
    double mean = 0.0, sq = 0.0;
    for (double v : xt.data()) mean += v;
    mean /= draws;
    for (double v : xt.data()) sq += (v - mean) * (v - mean);
    const double var = sq / (draws - 1);
    CHECK(std::abs(var - (1 - s.alpha_bar_at(t))) / (1 - s.alpha_bar_at(t)) < 0.02);
}

TEST_CASE("one-step denoise inverts the forward process") {
    auto s = build_schedule(1000);
    Rng rng(3);
    for (int t : {1, 10, 120, 400, 999, 1000}) {
        auto x0 = rand_unit<float>({1, 1, kHeight, kWidth}, rng);
        auto eps = randn<float>(x0.shape(), rng);
        auto back = one_step_denoise(forward_sample(x0, t, eps, s), t, eps, s);
        // Error grows with 1/sqrt(alpha_bar) at the noisiest steps in 32-bit.
        const double tol = t < 900 ? 1e-5 : 1e-3;
        CHECK(max_abs_diff(back.data(), x0.data()) < tol);
    }
    auto xt = rand_unit<float>({1, 1, kHeight, kWidth}, rng);
    auto denoised = one_step_denoise(xt, 200, Tensor<float>::zeros(xt.shape()), s);
    const float inv = static_cast<float>(1.0 / std::sqrt(s.alpha_bar_at(200)));
    for (std::int64_t i = 0; i < xt.numel(); i += 37) CHECK(denoised[i] == doctest::Approx(xt[i] * inv));
}

TEST_CASE("predict_mu") {
    auto s = build_schedule(1000);
    Rng rng(4);
    auto xt = randn<double>({1, 1, 4, 4}, rng);
    auto eps = randn<double>(xt.shape(), rng);

    auto plain = predict_mu(xt, 100, Tensor<double>::zeros(xt.shape()), s);
    for (std::int64_t i = 0; i < xt.numel(); ++i)
        CHECK(plain[i] == doctest::Approx(xt[i] / std::sqrt(1 - s.beta_at(100))).epsilon(1e-12));

    // Posterior-mean form through the one-step estimate.
    for (int t : {2, 37, 120, 400, 1000}) {
        auto mu = predict_mu(xt, t, eps, s);
        auto x0 = one_step_denoise(xt, t, eps, s);
        const double ab = s.alpha_bar_at(t), abp = s.alpha_bar_prev(t), b = s.beta_at(t);
        for (std::int64_t i = 0; i < xt.numel(); ++i) {
            const double post = std::sqrt(abp) * b / (1 - ab) * x0[i] + std::sqrt(1 - b) * (1 - abp) / (1 - ab) * xt[i];
            CHECK(std::abs(mu[i] - post) < 1e-4);
        }
    }

    // beta -> 0 limit on a synthetic schedule.
    NoiseSchedule flat;
    flat.train_steps = 2;
    flat.beta = {0.0, 0.0};
    flat.alpha = {1.0, 1.0};
    flat.alpha_bar = {0.5, 0.5};
    flat.timesteps = {1, 2};
    auto mu0 = predict_mu(xt, 2, eps, flat);
    for (std::int64_t i = 0; i < xt.numel(); ++i) CHECK(mu0[i] == xt[i]);
}

TEST_CASE("reverse step determinism and final step") {
    auto s = respace(build_schedule(1000), 400);
    ScaledNoise<float> model;
    Rng rng(5);
    auto xt = randn<float>({2, 1, kHeight, kWidth}, rng);

    auto run = [&](int t) {
        std::vector<Rng> rngs{Rng(10), Rng(11)};
        return reverse_step(xt, t, model, s, rngs);
    };
    auto a = run(200), b = run(200);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

    auto mu = predict_mu(xt, 1, model.predict_noise(xt, {}), s);
    auto last = run(1);
    CHECK(std::equal(last.data().begin(), last.data().end(), mu.data().begin()));

    // Per-sample rngs: element 0 does not depend on element 1's stream.
    std::vector<Rng> r1{Rng(10), Rng(11)}, r2{Rng(10), Rng(99)};
    auto c = reverse_step(xt, 200, model, s, r1);
    auto d = reverse_step(xt, 200, model, s, r2);
    CHECK(unstack_image(c, 0) == unstack_image(d, 0));
    CHECK(unstack_image(c, 1) != unstack_image(d, 1));
}

TEST_CASE("reverse step variance matches the posterior variance") {
    auto s = respace(build_schedule(1000), 400);
    ZeroNoise<float> model;
    const int t = 150;
    Tensor<float> xt = Tensor<float>::full({1, 1, kHeight, kWidth}, 0.25f);
    auto mu = predict_mu(xt, t, Tensor<float>::zeros(xt.shape()), s);
    std::vector<Rng> rngs{Rng(6)};
    double sq = 0.0;
    std::int64_t n = 0;
    while (n < 100000) {
        auto x = reverse_step(xt, t, model, s, rngs);
        for (std::int64_t i = 0; i < x.numel(); ++i, ++n) {
            const double d = static_cast<double>(x[i]) - mu[i];
            sq += d * d;
        }
    }
    const double var = sq / static_cast<double>(n);
    CHECK(std::abs(var - s.posterior_variance(t)) / s.posterior_variance(t) < 0.02);
}

TEST_CASE("sampling ends in the unit range") {
    auto s = respace(build_schedule(1000), 20);
    ZeroNoise<float> model;
    std::vector<Rng> rngs{Rng(7)};
    auto x = sample<float>(model, s, {1, 1, kHeight, kWidth}, rngs);
    for (float v : x.data()) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("denoiser training") {
    auto s = build_schedule(1000);
    Rng data_rng(8);
    auto spec = synth::sample_spec(data_rng, synth::Label::SP);
    std::vector<Image> images{synth::render(spec).image};

    DenoiserConfig cfg{.widths = {8, 16}, .time_dim = 16};
    Rng init(9);
    Denoiser<float> model(cfg, init);
    const auto before = model.parameters().hash();

    Rng train_rng(10);
    auto none = train_denoiser(model, images, s, {.iterations = 0}, train_rng);
    CHECK(none.loss.empty());
    CHECK(model.parameters().hash() == before);

    CHECK_THROWS_AS(train_denoiser(model, std::span<const Image>{}, s, {}, train_rng), std::invalid_argument);

    auto trace = train_denoiser(model, images, s, {.iterations = 500, .batch_size = 8, .lr = 2e-3}, train_rng);
    REQUIRE(trace.loss.size() == 500);
    CHECK(trace.tail_mean(50) <= 0.5 * trace.head_mean(50));
    CHECK(model.parameters().hash() != before);
    CHECK(trace.to_csv().rfind("iteration,loss\n0,", 0) == 0);

    // The trained prediction beats the eps_hat = 0 reconstruction at a mid step.
    const int t = 300;
    Rng noise(11);
    auto x0 = image_tensor<float>(images[0]);
    auto xt = forward_sample(x0, t, randn<float>(x0.shape(), noise), s);
    std::vector<int> steps{t};
    Tensor<float> eps_hat;
    {
        ad::NoGradGuard ng;
        eps_hat = model.predict_noise(xt, steps);
    }
    auto err = [&](const Tensor<float>& est) {
        double e = 0.0;
        for (std::int64_t i = 0; i < est.numel(); ++i) e += std::pow(est[i] - x0[i], 2);
        return e / static_cast<double>(est.numel());
    };
    CHECK(err(one_step_denoise(xt, t, eps_hat, s)) < err(one_step_denoise(xt, t, Tensor<float>::zeros(xt.shape()), s)));
}
