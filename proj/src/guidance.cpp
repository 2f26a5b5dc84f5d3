#include "diffice/guidance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "diffice/checkpoint.hpp"
#include "diffice/synthdata.hpp"

namespace diffice::guidance {

using diffusion::NoiseSchedule;
using diffusion::NoisePredictor;

const char* to_string(GradMode m) { return m == GradMode::Denoised ? "denoised" : "noisy"; }

GradMode grad_mode_from_string(const std::string& s) {
    if (s == "denoised") return GradMode::Denoised;
    if (s == "noisy") return GradMode::Noisy;
    throw std::invalid_argument("unknown grad_mode '" + s + "' (expected denoised or noisy)");
}

void GuidanceConfig::validate(int sample_steps) const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("guidance config: " + m); };
    if (tau < 1 || tau > sample_steps) {
        fail("tau=" + std::to_string(tau) + " outside [1, " + std::to_string(sample_steps) + "]");
    }
    if (!(lambda_c >= 0.0)) fail("lambda_c must be >= 0");
    if (!(lambda_p >= 0.0)) fail("lambda_p must be >= 0");
    if (iterations < 1) fail("iterations (L) must be >= 1");
    if (target != models::kSP && target != models::kNSP) fail("target must be 0 (NSP) or 1 (SP)");
    for (double c : lambda_c_candidates)
        if (!(c >= 0.0)) fail("lambda_c candidates must be >= 0");
}

nlohmann::json GuidanceConfig::to_json() const {
    return {{"tau", tau},
            {"lambda_c", lambda_c},
            {"lambda_p", lambda_p},
            {"iterations", iterations},
            {"target", target == models::kSP ? "SP" : "NSP"},
            {"grad_mode", guidance::to_string(grad_mode)},
            {"lambda_c_candidates", lambda_c_candidates},
            {"redraw_noise", redraw_noise}};
}

GuidanceConfig GuidanceConfig::from_json(const nlohmann::json& j) {
    GuidanceConfig c;
    c.tau = j.value("tau", c.tau);
    c.lambda_c = j.value("lambda_c", c.lambda_c);
    c.lambda_p = j.value("lambda_p", c.lambda_p);
    c.iterations = j.value("iterations", c.iterations);
    if (j.contains("target")) {
        const std::string t = j.at("target");
        if (t != "SP" && t != "NSP") throw std::invalid_argument("guidance config: target must be SP or NSP");
        c.target = t == "SP" ? models::kSP : models::kNSP;
    }
    if (j.contains("grad_mode")) c.grad_mode = grad_mode_from_string(j.at("grad_mode"));
    if (j.contains("lambda_c_candidates")) c.lambda_c_candidates = j.at("lambda_c_candidates").get<std::vector<double>>();
    c.redraw_noise = j.value("redraw_noise", c.redraw_noise);
    return c;
}

void ModelSet::check() const {
    if (!denoiser) throw std::invalid_argument("model set: missing denoiser");
    if (!schedule) throw std::invalid_argument("model set: missing sampling schedule");
    if (!classifier) throw std::invalid_argument("model set: missing classifier");
    if (!guidance_features) throw std::invalid_argument("model set: missing guidance features");
}

// ---- loss ----

namespace {

// Sum over the batch of -log p(y | x).
template <class T>
Tensor<T> nll_term(const Tensor<T>& x_hat, int y, const models::QualityClassifier<T>& f) {
    auto logp = f.log_probs(x_hat);
    std::vector<T> pick(static_cast<std::size_t>(logp.numel()), T(0));
    for (std::int64_t n = 0; n < logp.dim(0); ++n) pick[static_cast<std::size_t>(n * 2 + y)] = T(-1);
    return ad::sum(ad::mul(logp, Tensor<T>::from_data(logp.shape(), std::move(pick))));
}

// Reference features pre-divided by their per-sample norm, plus the
// matching [N, D] scale, so the perceptual term is the relative distance
// ||F(x_hat) - F(x)||^2 / ||F(x)||^2 and does not depend on feature scale.
template <class T>
struct Reference {
    Tensor<T> scaled, inv_norm;
};

template <class T>
Reference<T> reference_features(const Tensor<T>& x_orig, const models::FeatureNet<T>& features) {
    ad::NoGradGuard ng;
    const auto ref = features.features(x_orig.detach());
    const auto n = ref.dim(0), d = ref.dim(1);
    std::vector<T> inv(static_cast<std::size_t>(n * d)), scaled(inv.size());
    const auto v = ref.data();
    for (std::int64_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::int64_t j = 0; j < d; ++j) sq += static_cast<double>(v[i * d + j]) * v[i * d + j];
        const T s = static_cast<T>(1.0 / std::max(std::sqrt(sq), 1e-12));
        for (std::int64_t j = 0; j < d; ++j) {
            inv[i * d + j] = s;
            scaled[i * d + j] = v[i * d + j] * s;
        }
    }
    return {Tensor<T>::from_data(ref.shape(), std::move(scaled)), Tensor<T>::from_data(ref.shape(), std::move(inv))};
}

template <class T>
Tensor<T> perceptual_term(const Tensor<T>& x_hat, const models::FeatureNet<T>& features, const Reference<T>& ref) {
    return ad::sum(ad::square(ad::sub(ad::mul(features.features(x_hat), ref.inv_norm), ref.scaled)));
}

template <class T>
void check_same_shape(const Tensor<T>& x_hat, const ad::Shape& shape) {
    if (x_hat.shape() != shape) {
        throw ad::ShapeError("guidance_loss: x_hat " + ad::to_string(x_hat.shape()) + " vs x_orig " +
                             ad::to_string(shape));
    }
}

template <class T>
void check_finite_loss(const Tensor<T>& total) {
    if (!std::isfinite(static_cast<double>(total.item()))) throw ad::NonFiniteError("guidance_loss: non-finite loss");
}

}  // namespace

template <class T>
LossTerms<T> guidance_loss(const Tensor<T>& x_hat, const Tensor<T>& x_orig, int y,
                           const models::QualityClassifier<T>& f, const models::FeatureNet<T>& features,
                           double lambda_c, double lambda_p) {
    check_same_shape(x_hat, x_orig.shape());
    LossTerms<T> out;
    out.total = Tensor<T>::scalar(T(0));
    if (lambda_c > 0.0) {
        out.classification = nll_term(x_hat, y, f);
        out.total = ad::add(out.total, out.classification * static_cast<T>(lambda_c));
    }
    if (lambda_p > 0.0) {
        out.perceptual = perceptual_term(x_hat, features, reference_features(x_orig, features));
        out.total = ad::add(out.total, out.perceptual * static_cast<T>(lambda_p));
    }
    check_finite_loss(out.total);
    return out;
}

template <class T>
LossFn<T> make_guidance_loss(const Tensor<T>& x_orig, int y, const models::QualityClassifier<T>& f,
                             const models::FeatureNet<T>& features, double lambda_c, double lambda_p) {
    Reference<T> ref;
    if (lambda_p > 0.0) ref = reference_features(x_orig, features);
    const auto shape = x_orig.shape();
    return [&f, &features, ref, shape, y, lambda_c, lambda_p](const Tensor<T>& x_hat) {
        check_same_shape(x_hat, shape);
        Tensor<T> total = Tensor<T>::scalar(T(0));
        if (lambda_c > 0.0) total = ad::add(total, nll_term(x_hat, y, f) * static_cast<T>(lambda_c));
        if (lambda_p > 0.0) {
            total = ad::add(total, perceptual_term(x_hat, features, ref) * static_cast<T>(lambda_p));
        }
        check_finite_loss(total);
        return total;
    };
}

// ---- gradients ----

namespace {

std::vector<int> model_steps(const NoiseSchedule& s, int t, std::int64_t n) {
    return std::vector<int>(static_cast<std::size_t>(n), s.model_timestep(t));
}

template <class T>
Tensor<T> checked_grad(const Tensor<T>& leaf, const char* op) {
    auto g = leaf.grad();
    for (T v : g) {
        if (!std::isfinite(static_cast<double>(v))) throw ad::NonFiniteError(std::string(op) + ": non-finite gradient");
    }
    return Tensor<T>::from_data(leaf.shape(), std::move(g));
}

}  // namespace

template <class T>
GradResult<T> grad_wrt_denoised(const Tensor<T>& x_t, int t, const NoisePredictor<T>& model,
                                const NoiseSchedule& schedule, const LossFn<T>& loss) {
    schedule.check_step(t, "grad_wrt_denoised");
    GradResult<T> r;
    {
        ad::NoGradGuard ng;
        const auto steps = model_steps(schedule, t, x_t.dim(0));
        r.eps_hat = model.predict_noise(x_t.detach(), steps);
        r.x0_hat = diffusion::one_step_denoise(x_t.detach(), t, r.eps_hat, schedule);
    }
    auto leaf = r.x0_hat.detach();
    leaf.set_requires_grad(true);
    auto l = loss(leaf);
    r.loss = static_cast<double>(l.item());
    if (l.requires_grad()) {
        l.backward();
        r.g = checked_grad(leaf, "grad_wrt_denoised");
    } else {
        r.g = Tensor<T>::zeros(x_t.shape());
    }
    return r;
}

template <class T>
GradResult<T> grad_wrt_noisy(const Tensor<T>& x_t, int t, const NoisePredictor<T>& model,
                             const NoiseSchedule& schedule, const LossFn<T>& loss) {
    schedule.check_step(t, "grad_wrt_noisy");
    GradResult<T> r;
    auto leaf = x_t.detach();
    leaf.set_requires_grad(true);
    const auto steps = model_steps(schedule, t, x_t.dim(0));
    auto eps = model.predict_noise(leaf, steps);
    auto x0 = diffusion::one_step_denoise(leaf, t, eps, schedule);
    auto l = loss(x0);
    r.loss = static_cast<double>(l.item());
    r.eps_hat = eps.detach();
    r.x0_hat = x0.detach();
    if (l.requires_grad()) {
        l.backward();
        r.g = checked_grad(leaf, "grad_wrt_noisy");
    } else {
        r.g = Tensor<T>::zeros(x_t.shape());
    }
    return r;
}

template <class T>
Tensor<T> guided_reverse_step(const Tensor<T>& x_t, int t, const Tensor<T>& g, const NoisePredictor<T>& model,
                              const NoiseSchedule& schedule, std::span<Rng> per_sample) {
    schedule.check_step(t, "guided_reverse_step");
    ad::NoGradGuard ng;
    const auto steps = model_steps(schedule, t, x_t.dim(0));
    auto mu = diffusion::predict_mu(x_t, t, model.predict_noise(x_t, steps), schedule);
    return diffusion::guided_transition(mu, t, g, schedule, per_sample);
}

// ---- counterfactual loop ----

namespace {
std::string image_hash(const Image& im);
}

Image counterfactual_once(const Image& x_in, const Image& x_orig, const GuidanceConfig& cfg, double lambda_c,
                          const ModelSet& m, const SeedPath& seeds, int iteration, std::vector<std::string>* anchor_log) {
    m.check();
    cfg.validate(m.schedule->size());
    const auto& schedule = *m.schedule;

    Rng corrupt = make_rng(seeds.master, {seeds.image_id, static_cast<std::uint64_t>(cfg.redraw_noise ? iteration : 1), 0});
    auto x0 = image_tensor<float>(x_in);
    Tensor<float> x;
    {
        ad::NoGradGuard ng;
        x = diffusion::forward_sample(x0, cfg.tau, diffusion::standard_normal<float>(x0.shape(), {&corrupt, 1}),
                                      schedule);
    }
    const auto anchor = image_tensor<float>(x_orig);
    if (anchor_log) anchor_log->push_back(image_hash(unstack_image(anchor, 0)));
    const auto loss = make_guidance_loss<float>(anchor, cfg.target, *m.classifier, *m.guidance_features, lambda_c,
                                                cfg.lambda_p);
    for (int t = cfg.tau; t >= 1; --t) {
        Rng step = make_rng(seeds.master, {seeds.image_id, static_cast<std::uint64_t>(iteration),
                                           static_cast<std::uint64_t>(t)});
        auto gr = cfg.grad_mode == GradMode::Denoised ? grad_wrt_denoised<float>(x, t, *m.denoiser, schedule, loss)
                                                      : grad_wrt_noisy<float>(x, t, *m.denoiser, schedule, loss);
        ad::NoGradGuard ng;
        auto mu = diffusion::predict_mu(x, t, gr.eps_hat, schedule);
        x = diffusion::guided_transition(mu, t, gr.g, schedule, {&step, 1});
    }
    return unstack_image(diffusion::clamp_unit(x), 0);
}

namespace {

double target_probability(double p_sp, int target) { return target == models::kSP ? p_sp : 1.0 - p_sp; }

std::string image_hash(const Image& im) {
    return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(im.data()),
                                                     im.size() * sizeof(float)));
}

nlohmann::json scores_json(const IterationScores& s) {
    return {{"p_sp", s.p_sp},
            {"feature_cosine", s.feature_cosine},
            {"oracle", {{"overall", s.oracle.overall}, {"th", s.oracle.th}, {"csp", s.oracle.csp}, {"fp", s.oracle.fp}}}};
}

IterationScores scores_from_json(const nlohmann::json& j) {
    IterationScores s;
    s.p_sp = j.at("p_sp");
    s.feature_cosine = j.at("feature_cosine");
    const auto& o = j.at("oracle");
    s.oracle = {o.at("overall"), o.at("th"), o.at("csp"), o.at("fp")};
    return s;
}

}  // namespace

IterationScores score_image(const Image& x, const Image& reference, const ModelSet& m) {
    IterationScores s;
    s.p_sp = models::predict_sp(*m.classifier, {&x, 1}).front();
    if (m.oracle) s.oracle = models::oracle_scores(*m.oracle, x);
    if (m.eval_features) {
        s.feature_cosine = models::cosine(models::extract_features(*m.eval_features, x),
                                          models::extract_features(*m.eval_features, reference));
    }
    return s;
}

namespace {

struct Run {
    std::vector<Image> outputs;
    std::vector<double> seconds;
    std::vector<std::string> anchors;
    double final_target = -1.0;
};

using PassFn = std::function<Image(const Image& x_in, double lambda_c, int iteration, std::vector<std::string>* anchors)>;

// Shared lambda_c search: ascending candidates, stop at the first whose final
// output is classified as the target, else keep the best final probability.
CounterfactualRecord search_lambda(const Image& x, const GuidanceConfig& cfg, const ModelSet& m, const SeedPath& seeds,
                                   std::optional<double> fixed_lambda_c, const std::string& method, const PassFn& pass) {
    std::vector<double> candidates;
    if (fixed_lambda_c) {
        candidates = {*fixed_lambda_c};
    } else {
        candidates = cfg.lambda_c_candidates;
        std::sort(candidates.begin(), candidates.end());
    }
    if (candidates.empty()) throw std::invalid_argument(method + ": no lambda_c candidates");

    CounterfactualRecord rec;
    rec.method = method;
    rec.image_id = seeds.image_id;
    rec.seed = seeds.master;
    rec.config = cfg;
    rec.original = x;
    rec.original_scores = score_image(x, x, m);

    Run best;
    double best_lambda = candidates.front();
    for (double lc : candidates) {
        Run run;
        Image current = x;
        for (int i = 1; i <= cfg.iterations; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            current = pass(current, lc, i, &run.anchors);
            run.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            run.outputs.push_back(current);
        }
        const double p = models::predict_sp(*m.classifier, {&current, 1}).front();
        run.final_target = target_probability(p, cfg.target);
        const bool flipped = run.final_target > 0.5;
        rec.candidates.push_back({lc, p, flipped});
        if (run.final_target > best.final_target) {
            best = std::move(run);
            best_lambda = lc;
        }
        if (flipped) break;
    }
    rec.lambda_c = best_lambda;
    rec.outputs = std::move(best.outputs);
    rec.seconds = std::move(best.seconds);
    rec.anchor_hashes = std::move(best.anchors);
    for (const auto& out : rec.outputs) rec.scores.push_back(score_image(out, x, m));
    return rec;
}

}  // namespace

CounterfactualRecord diff_ice(const Image& x, const GuidanceConfig& cfg, const ModelSet& m, const SeedPath& seeds,
                              std::optional<double> fixed_lambda_c) {
    m.check();
    cfg.validate(m.schedule->size());
    return search_lambda(x, cfg, m, seeds, fixed_lambda_c, "diff_ice", [&](const Image& in, double lc, int i, auto* log) {
        return counterfactual_once(in, x, cfg, lc, m, seeds, i, log);
    });
}

CounterfactualRecord single_pass(const Image& x, GuidanceConfig cfg, const ModelSet& m, const SeedPath& seeds,
                                 std::optional<double> fixed_lambda_c) {
    m.check();
    cfg.iterations = 1;
    cfg.validate(m.schedule->size());
    const std::string method = cfg.grad_mode == GradMode::Noisy ? "diff_ice_1_xt" : "diff_ice_1";
    return search_lambda(x, cfg, m, seeds, fixed_lambda_c, method,
                         [&](const Image&, double lc, int, auto* log) {
        return counterfactual_once(x, x, cfg, lc, m, seeds, 1, log);
    });
}

// ---- persistence ----

nlohmann::json CounterfactualRecord::to_json() const {
    nlohmann::json iters = nlohmann::json::array();
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        auto s = scores_json(scores.at(i));
        s["iteration"] = i + 1;
        s["image_sha256"] = image_hash(outputs[i]);
        s["anchor_sha256"] = anchor_hashes.at(i);
        iters.push_back(std::move(s));
    }
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : candidates) cands.push_back({{"lambda_c", c.lambda_c}, {"final_p_sp", c.final_p_sp}, {"flipped", c.flipped}});
    return {{"method", method},
            {"image_id", image_id},
            {"seed", seed},
            {"config", config.to_json()},
            {"lambda_c", lambda_c},
            {"candidates", cands},
            {"original", {{"image_sha256", image_hash(original)}, {"scores", scores_json(original_scores)}}},
            {"iterations", iters}};
}

CounterfactualRecord CounterfactualRecord::from_json(const nlohmann::json& j) {
    CounterfactualRecord r;
    r.method = j.at("method");
    r.image_id = j.at("image_id");
    r.seed = j.at("seed");
    r.config = GuidanceConfig::from_json(j.at("config"));
    r.lambda_c = j.at("lambda_c");
    for (const auto& c : j.at("candidates")) r.candidates.push_back({c.at("lambda_c"), c.at("final_p_sp"), c.at("flipped")});
    r.original_scores = scores_from_json(j.at("original").at("scores"));
    for (const auto& it : j.at("iterations")) {
        r.scores.push_back(scores_from_json(it));
        r.anchor_hashes.push_back(it.at("anchor_sha256"));
    }
    return r;
}

std::string record_hash(const CounterfactualRecord& r) {
    auto j = r.to_json();
    j.erase("method");
    return sha256_hex(canonical_dump(j));
}

namespace {

std::string float_bytes(const Image& im) {
    std::string s(im.size() * sizeof(float), '\0');
    std::memcpy(s.data(), im.data(), s.size());
    return s;
}

Image image_from_bytes(const std::string& s, const std::string& expected_hash, const std::string& what) {
    if (s.size() != kPixels * sizeof(float)) throw std::runtime_error("record image " + what + " has wrong size");
    Image im(kPixels);
    std::memcpy(im.data(), s.data(), s.size());
    if (image_hash(im) != expected_hash) throw std::runtime_error("record image " + what + " hash mismatch");
    return im;
}

}  // namespace

std::string save_record(const CounterfactualRecord& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "original.f32", float_bytes(r.original));
    write_text(dir / "original.pgm", synth::encode_pgm(r.original));
    std::vector<Image> strip{r.original};
    for (std::size_t i = 0; i < r.outputs.size(); ++i) {
        const std::string stem = "iter_" + std::to_string(i + 1);
        write_text(dir / (stem + ".f32"), float_bytes(r.outputs[i]));
        write_text(dir / (stem + ".pgm"), synth::encode_pgm(r.outputs[i]));
        strip.push_back(r.outputs[i]);
    }
    write_text(dir / "strip.pgm", synth::encode_strip_pgm(strip));
    write_text(dir / "timing.json", canonical_dump({{"seconds_per_iteration", r.seconds}}));
    const std::string text = canonical_dump(r.to_json());
    write_text(dir / "record.json", text);
    return record_hash(r);
}

CounterfactualRecord load_record(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_text(dir / "record.json"));
    auto r = CounterfactualRecord::from_json(j);
    r.original = image_from_bytes(read_text(dir / "original.f32"), j.at("original").at("image_sha256"), "original");
    const auto& iters = j.at("iterations");
    for (std::size_t i = 0; i < iters.size(); ++i) {
        const std::string stem = "iter_" + std::to_string(i + 1);
        r.outputs.push_back(image_from_bytes(read_text(dir / (stem + ".f32")), iters[i].at("image_sha256"), stem));
    }
    if (std::filesystem::exists(dir / "timing.json")) {
        r.seconds = nlohmann::json::parse(read_text(dir / "timing.json")).at("seconds_per_iteration").get<std::vector<double>>();
    }
    return r;
}

#define DIFFICE_INSTANTIATE(T)                                                                                        \
    template LossTerms<T> guidance_loss(const Tensor<T>&, const Tensor<T>&, int, const models::QualityClassifier<T>&, \
                                        const models::FeatureNet<T>&, double, double);                                \
    template LossFn<T> make_guidance_loss(const Tensor<T>&, int, const models::QualityClassifier<T>&,                 \
                                          const models::FeatureNet<T>&, double, double);                              \
    template GradResult<T> grad_wrt_denoised(const Tensor<T>&, int, const NoisePredictor<T>&, const NoiseSchedule&,   \
                                             const LossFn<T>&);                                                       \
    template GradResult<T> grad_wrt_noisy(const Tensor<T>&, int, const NoisePredictor<T>&, const NoiseSchedule&,      \
                                          const LossFn<T>&);                                                          \
    template Tensor<T> guided_reverse_step(const Tensor<T>&, int, const Tensor<T>&, const NoisePredictor<T>&,         \
                                           const NoiseSchedule&, std::span<Rng>);

DIFFICE_INSTANTIATE(float)
DIFFICE_INSTANTIATE(double)

#undef DIFFICE_INSTANTIATE

}  // namespace diffice::guidance
