#pragma once

// Classifier-guided reverse diffusion for counterfactuals: the guiding loss,
// the two gradient estimators (w.r.t. the one-step denoised estimate, or
// w.r.t. the noisy iterate through the denoiser), the shifted reverse step
// and the iterated corrupt-then-guide loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffice/diffusion.hpp"
#include "diffice/image.hpp"
#include "diffice/models.hpp"
#include "json.hpp"

namespace diffice::guidance {

template <class T>
using Tensor = ad::Tensor<T>;

enum class GradMode { Denoised, Noisy };
const char* to_string(GradMode m);
GradMode grad_mode_from_string(const std::string& s);

struct GuidanceConfig {
    int tau = 120;  // entry level, index into the re-spaced schedule
    double lambda_c = 60.0;
    double lambda_p = 30.0;
    int iterations = 5;  // L
    int target = models::kSP;
    GradMode grad_mode = GradMode::Denoised;
    /// Tried in ascending order; the first that flips the final output wins.
    std::vector<double> lambda_c_candidates{40.0, 60.0, 80.0};
    /// Fresh corruption noise every iteration (otherwise iteration 1's noise is reused).
    bool redraw_noise = true;

    /// Throws std::invalid_argument naming the offending field.
    void validate(int sample_steps) const;
    nlohmann::json to_json() const;
    static GuidanceConfig from_json(const nlohmann::json& j);
};

/// Read-only model bundle. The oracle and evaluation features are only used
/// to score iterations and may be null.
struct ModelSet {
    const diffusion::NoisePredictor<float>* denoiser = nullptr;
    const diffusion::NoiseSchedule* schedule = nullptr;  // re-spaced sampling schedule
    const models::QualityClassifier<float>* classifier = nullptr;
    const models::FeatureNet<float>* guidance_features = nullptr;
    const models::Oracle<float>* oracle = nullptr;
    const models::FeatureNet<float>* eval_features = nullptr;

    void check() const;
};

template <class T>
struct LossTerms {
    Tensor<T> total, classification, perceptual;  // classification / perceptual are unweighted
};

/// L = lambda_c * NLL(y | f(x_hat)) + lambda_p * ||F(x_hat) - F(x_orig)||^2 / ||F(x_orig)||^2,
/// summed over the batch. A term with zero weight is not evaluated.
template <class T>
LossTerms<T> guidance_loss(const Tensor<T>& x_hat, const Tensor<T>& x_orig, int y,
                           const models::QualityClassifier<T>& f, const models::FeatureNet<T>& features,
                           double lambda_c, double lambda_p);

template <class T>
using LossFn = std::function<Tensor<T>(const Tensor<T>& x_hat)>;

/// guidance_loss with the reference features of `x_orig` computed once.
template <class T>
LossFn<T> make_guidance_loss(const Tensor<T>& x_orig, int y, const models::QualityClassifier<T>& f,
                             const models::FeatureNet<T>& features, double lambda_c, double lambda_p);

template <class T>
struct GradResult {
    Tensor<T> g;        // image-shaped guidance gradient
    Tensor<T> eps_hat;  // denoiser output at x_t (constant)
    Tensor<T> x0_hat;   // one-step denoised estimate (constant)
    double loss = 0.0;
};

/// g = dL/d x0_hat with eps_hat held constant; the denoiser runs without a tape.
template <class T>
GradResult<T> grad_wrt_denoised(const Tensor<T>& x_t, int t, const diffusion::NoisePredictor<T>& model,
                                const diffusion::NoiseSchedule& schedule, const LossFn<T>& loss);

/// g = dL/dx_t through the denoiser and the one-step estimate.
template <class T>
GradResult<T> grad_wrt_noisy(const Tensor<T>& x_t, int t, const diffusion::NoisePredictor<T>& model,
                             const diffusion::NoiseSchedule& schedule, const LossFn<T>& loss);

/// x_{t-1} ~ N(mu - Sigma_t g, Sigma_t), same draws as the unguided step.
template <class T>
Tensor<T> guided_reverse_step(const Tensor<T>& x_t, int t, const Tensor<T>& g,
                              const diffusion::NoisePredictor<T>& model, const diffusion::NoiseSchedule& schedule,
                              std::span<Rng> per_sample);

/// Stream address of every random draw: (master, image, iteration, t), with
/// t = 0 for the tau-corruption noise.
struct SeedPath {
    std::uint64_t master = 0;
    std::uint64_t image_id = 0;
};

/// One corrupt-then-guide pass. The loss is anchored to `x_orig`; the hash
/// of the image the loss actually references is appended to `anchor_log`.
Image counterfactual_once(const Image& x_in, const Image& x_orig, const GuidanceConfig& cfg, double lambda_c,
                          const ModelSet& models, const SeedPath& seeds, int iteration,
                          std::vector<std::string>* anchor_log = nullptr);

struct IterationScores {
    double p_sp = 0.0;
    models::OracleScores oracle;
    double feature_cosine = 0.0;  // F_eval cosine to the original
};

struct CandidateSummary {
    double lambda_c = 0.0;
    double final_p_sp = 0.0;
    bool flipped = false;
};

struct CounterfactualRecord {
    std::string method;
    std::uint64_t image_id = 0;
    std::uint64_t seed = 0;
    GuidanceConfig config;
    Image original;
    IterationScores original_scores;
    std::vector<Image> outputs;  // exactly L
    std::vector<IterationScores> scores;
    std::vector<std::string> anchor_hashes;  // hash of the x_orig each iteration's loss referenced
    double lambda_c = 0.0;
    std::vector<CandidateSummary> candidates;
    std::vector<double> seconds;  // wall clock per iteration; not part of the canonical record

    const Image& final_output() const { return outputs.back(); }
    /// Canonical form: everything except timings.
    nlohmann::json to_json() const;
    static CounterfactualRecord from_json(const nlohmann::json& j);
};

IterationScores score_image(const Image& x, const Image& reference, const ModelSet& models);

/// Diff-ICE: L passes, each feeding the previous output back in, with the
/// proximity term anchored to `x`. lambda_c is searched per image over the
/// configured candidates unless `fixed_lambda_c` is given.
CounterfactualRecord diff_ice(const Image& x, const GuidanceConfig& cfg, const ModelSet& models, const SeedPath& seeds,
                              std::optional<double> fixed_lambda_c = std::nullopt);

/// Single-pass baseline: one corrupt-then-guide pass from x with the same
/// lambda_c search (cfg.iterations is forced to 1). Method "diff_ice_1", or
/// "diff_ice_1_xt" when the gradient is taken w.r.t. the noisy iterate.
CounterfactualRecord single_pass(const Image& x, GuidanceConfig cfg, const ModelSet& models, const SeedPath& seeds,
                                 std::optional<double> fixed_lambda_c = std::nullopt);

/// Persists `record.json` (canonical), `timing.json` and one PGM per
/// iteration plus a strip of all of them; returns the record hash.
std::string save_record(const CounterfactualRecord& r, const std::filesystem::path& dir);
CounterfactualRecord load_record(const std::filesystem::path& dir);
/// Hash of the canonical record without its method label, so definitionally
/// equal methods (diff_ice with L = 1 and diff_ice_1) compare equal.
std::string record_hash(const CounterfactualRecord& r);

}  // namespace diffice::guidance
