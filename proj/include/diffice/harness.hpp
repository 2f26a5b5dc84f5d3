#pragma once

// Pipeline stages behind the command line: data generation, the five model
// trainings, counterfactual generation (Diff-ICE, the single-pass baselines
// and the ablation grid), evaluation and the table/figure analogues.
//
// Layout under the output directory:
//   data/{train,test}/         phantom datasets
//   models/<name>/             checkpoints (denoiser, classifier, oracle,
//                              features_guidance, features_eval)
//   generate/<method>/<id>/    counterfactual records
//   generate/ablation/<cell>/<id>/
//   reports/...                metric reports and tables
//   manifests/<stage>.json     RunManifest per stage (timings kept apart)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffice/denoiser.hpp"
#include "diffice/diffusion.hpp"
#include "diffice/guidance.hpp"
#include "diffice/metrics.hpp"
#include "diffice/models.hpp"
#include "diffice/synthdata.hpp"
#include "json.hpp"

namespace diffice::harness {

namespace fs = std::filesystem;

/// Bad configuration or flags (exit code 1).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A stage ran before the stage it depends on (exit code 2).
struct MissingStage : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    int n_train = 1500;
    double train_sp_fraction = 0.5;
    int n_test = 700;
    double test_sp_fraction = synth::kPaperSpFraction;
    int max_test_images = 100;  // NSP test images that get counterfactuals
};

struct DiffusionSection {
    int train_steps = 1000;
    int sample_steps = 400;
    double beta_start = 1e-4, beta_end = 0.02;
    diffusion::DenoiserConfig model{{12, 24, 48}, 32};
    diffusion::DenoiserTraining training{2000, 16, 1e-3, 0.0};
};

struct ClassifierSection {
    models::ClassifierConfig model;
    models::ClassifierTraining training{{600, 16, 3e-3}, {600, 16, 2e-3}};
};

struct OracleSection {
    models::OracleConfig model;
    models::TrainOptions training{600, 16, 2e-3};
};

struct FeatureSection {
    models::FeatureConfig model;
    models::FeatureTraining guidance{{500, 16, 2e-3}, false};
    models::FeatureTraining eval{{500, 16, 2e-3}, true};
};

/// One cell of the single-pass ablation grid.
struct AblationCell {
    int tau = 120;
    bool perceptual = true;
    std::optional<double> lambda_c;  // fixed instead of searched

    std::string name() const;
};

struct AblationConfig {
    std::vector<int> taus{80, 120, 160, 200};
    double strong_lambda_c = 400.0;
    int strong_tau = 120;
    int max_images = 100;

    /// (tau, L_p on), (tau, L_p off) for every tau, plus the strong-lambda_c cell.
    std::vector<AblationCell> cells() const;
};

enum class LambdaSearch { PerImage, PerDataset };

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"diff_ice", "diff_ice_1", "diff_ice_1_xt"};
    return m;
}

struct ExperimentConfig {
    std::uint64_t seed = 2024;
    std::string out = "runs/default";
    DataConfig data;
    DiffusionSection diffusion;
    ClassifierSection classifier;
    OracleSection oracle;
    FeatureSection features;
    guidance::GuidanceConfig guidance;
    std::vector<std::string> methods = known_methods();
    LambdaSearch lambda_search = LambdaSearch::PerImage;
    AblationConfig ablation;
    int jobs = 1;

    nlohmann::json to_json() const;
    /// Overlays `j` on the defaults; unknown keys and bad values throw ConfigError.
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const fs::path& file);
    void validate() const;
    /// Hash of everything that can change outputs (not `out`, not `jobs`).
    std::string hash() const;
};

/// The part of the configuration a stage's outputs depend on. Upstream
/// manifests are rejected when their recorded hash of this differs.
nlohmann::json stage_config(const ExperimentConfig& c, const std::string& stage);

/// Stage record: config hash, the manifests it consumed, and a content hash
/// per output file. Wall-clock goes to manifests/<stage>.timing.json.
struct RunManifest {
    std::string stage;
    std::string config_hash;
    nlohmann::json inputs = nlohmann::json::object();   // name -> hash
    nlohmann::json outputs = nlohmann::json::object();  // relative path -> sha256

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

fs::path manifest_path(const fs::path& out, const std::string& stage);
RunManifest read_manifest(const fs::path& out, const std::string& stage);
/// Files whose current hash differs from the manifest (empty when intact).
std::vector<std::string> verify_manifest(const fs::path& out, const std::string& stage);

using Log = std::function<void(const std::string&)>;

struct Context {
    ExperimentConfig config;
    fs::path out;
    Log log = [](const std::string&) {};
};

// ---- stages ----
void cmd_synth(const Context& ctx);
void cmd_train_diffusion(const Context& ctx);
void cmd_train_classifier(const Context& ctx);
void cmd_train_oracle(const Context& ctx);
void cmd_train_features(const Context& ctx);
/// `methods` are names from known_methods() or "ablation".
void cmd_generate(const Context& ctx, const std::vector<std::string>& methods);
void cmd_evaluate(const Context& ctx, const std::vector<std::string>& methods);
/// Table and figure analogues from the evaluated reports.
void cmd_report(const Context& ctx);

/// All checkpoints, loaded read-only.
struct LoadedModels {
    diffusion::NoiseSchedule train_schedule, sample_schedule;
    std::unique_ptr<diffusion::Denoiser<float>> denoiser;
    std::unique_ptr<models::QualityClassifier<float>> classifier;
    std::unique_ptr<models::Oracle<float>> oracle;
    std::unique_ptr<models::FeatureNet<float>> features_guidance, features_eval;

    guidance::ModelSet set() const;
};

LoadedModels load_models(const Context& ctx);
/// The NSP test images that receive counterfactuals, with their dataset ids.
std::vector<std::pair<std::uint64_t, Image>> nsp_test_images(const Context& ctx, int max_images);

/// Generates records for `images` with one method; index order is kept
/// whatever the number of jobs.
std::vector<guidance::CounterfactualRecord> run_method(const std::string& method, const guidance::GuidanceConfig& cfg,
                                                       const guidance::ModelSet& models, std::uint64_t master_seed,
                                                       const std::vector<std::pair<std::uint64_t, Image>>& images,
                                                       int jobs, std::optional<double> fixed_lambda_c = std::nullopt,
                                                       std::vector<double>* wall_seconds = nullptr);

std::vector<guidance::CounterfactualRecord> load_records(const fs::path& dir);

/// Stream seeds of the pipeline, all derived from the experiment seed.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage);

}  // namespace diffice::harness
