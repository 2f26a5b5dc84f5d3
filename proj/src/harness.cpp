#include "diffice/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "diffice/checkpoint.hpp"

namespace diffice::harness {

using nlohmann::json;

namespace {

// Stream ids under the experiment seed.
enum : std::uint64_t {
    kSeedTrainData = 1,
    kSeedTestData,
    kSeedDenoiserInit,
    kSeedDenoiserTrain,
    kSeedClassifierInit,
    kSeedClassifierTrain,
    kSeedOracleInit,
    kSeedOracleTrain,
    kSeedGuidanceFeatInit,
    kSeedGuidanceFeatTrain,
    kSeedEvalFeatInit,
    kSeedEvalFeatTrain,
    kSeedGeneration = 20,
};

json opts_json(const models::TrainOptions& o) {
    return {{"iterations", o.iterations}, {"batch_size", o.batch_size}, {"lr", o.lr}};
}

models::TrainOptions opts_from(const json& j) {
    return {j.at("iterations").get<int>(), j.at("batch_size").get<int>(), j.at("lr").get<double>()};
}

json feat_json(const models::FeatureTraining& f) {
    auto j = opts_json(f.opt);
    j["augment"] = f.augment;
    return j;
}

models::FeatureTraining feat_from(const json& j) { return {opts_from(j), j.at("augment").get<bool>()}; }

// Every key of `patch` must exist in `base`; objects are checked recursively.
void check_keys(const json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) throw ConfigError("config: " + (where.empty() ? "document" : where) + " must be an object");
    for (const auto& [k, v] : patch.items()) {
        const std::string path = where.empty() ? k : where + "." + k;
        if (!base.contains(k)) throw ConfigError("config: unknown key '" + path + "'");
        if (v.is_null()) throw ConfigError("config: '" + path + "' is null");
        if (base.at(k).is_object()) check_keys(base.at(k), v, path);
    }
}

void check_opts(const models::TrainOptions& o, const std::string& what) {
    if (o.iterations < 1) throw ConfigError("config: " + what + ".iterations must be >= 1");
    if (o.batch_size < 1) throw ConfigError("config: " + what + ".batch_size must be >= 1");
    if (!(o.lr > 0.0)) throw ConfigError("config: " + what + ".lr must be > 0");
}

void check_widths(const std::vector<int>& w, const std::string& what) {
    if (w.empty()) throw ConfigError("config: " + what + " must not be empty");
    for (int v : w)
        if (v < 1) throw ConfigError("config: " + what + " entries must be >= 1");
}

bool excluded_from_hash(const fs::path& p) {
    const auto name = p.filename().string();
    return name.find("timing") != std::string::npos || name.find("efficiency") != std::string::npos;
}

// Relative path -> sha256 for every deterministic file under `roots`.
json hash_outputs(const fs::path& out, const std::vector<std::string>& roots) {
    std::vector<fs::path> files;
    for (const auto& r : roots) {
        const auto p = out / r;
        if (fs::is_regular_file(p)) {
            files.push_back(p);
        } else if (fs::is_directory(p)) {
            for (const auto& e : fs::recursive_directory_iterator(p))
                if (e.is_regular_file()) files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    json j = json::object();
    for (const auto& f : files) {
        if (excluded_from_hash(f)) continue;
        j[fs::relative(f, out).generic_string()] = sha256_file(f);
    }
    return j;
}

const char* command_of(const std::string& stage) {
    if (stage == "synth") return "cmd_synth (diffice synth)";
    if (stage == "train-diffusion") return "cmd_train_diffusion (diffice train-diffusion)";
    if (stage == "train-classifier") return "cmd_train_classifier (diffice train-classifier)";
    if (stage == "train-oracle") return "cmd_train_oracle (diffice train-oracle)";
    if (stage == "train-features") return "cmd_train_features (diffice train-features)";
    if (stage.rfind("generate", 0) == 0) return "cmd_generate (diffice generate)";
    if (stage.rfind("evaluate", 0) == 0) return "cmd_evaluate (diffice evaluate)";
    return "cmd_report (diffice report)";
}

std::string config_hash_for(const ExperimentConfig& c, const std::string& stage) {
    return sha256_hex(canonical_dump(stage_config(c, stage)));
}

// Upstream manifest hash, after checking the stage ran with the same configuration.
std::string require_stage(const Context& ctx, const std::string& stage, const std::string& needed_by) {
    const auto path = manifest_path(ctx.out, stage);
    if (!fs::exists(path)) {
        throw MissingStage(needed_by + ": missing output of stage '" + stage + "'; run " + command_of(stage) +
                           " first (expected " + path.string() + ")");
    }
    const auto m = read_manifest(ctx.out, stage);
    if (m.config_hash != config_hash_for(ctx.config, stage)) {
        throw MissingStage(needed_by + ": stage '" + stage + "' was run with a different configuration; rerun " +
                           command_of(stage));
    }
    return sha256_file(path);
}

class StageTimer {
   public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

   private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void write_manifest(const Context& ctx, const std::string& stage, const json& inputs,
                    const std::vector<std::string>& roots, const json& timing) {
    RunManifest m;
    m.stage = stage;
    m.config_hash = config_hash_for(ctx.config, stage);
    m.inputs = inputs;
    m.outputs = hash_outputs(ctx.out, roots);
    const auto path = manifest_path(ctx.out, stage);
    fs::create_directories(path.parent_path());
    write_text(path, canonical_dump(m.to_json()));
    auto t = path;
    t.replace_extension(".timing.json");
    write_text(t, canonical_dump(timing));
}

diffusion::ProgressFn progress_logger(const Context& ctx, const std::string& what, int total) {
    return [&ctx, what, total](int it, double loss) {
        if ((it + 1) % 200 == 0 || it + 1 == total) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%s %d/%d loss %.5f", what.c_str(), it + 1, total, loss);
            ctx.log(buf);
        }
    };
}

models::ProgressFn model_progress(const Context& ctx, const std::string& what) {
    return [&ctx, what](const std::string& stage, int it, double loss) {
        if ((it + 1) % 200 == 0) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%s/%s %d loss %.5f", what.c_str(), stage.c_str(), it + 1, loss);
            ctx.log(buf);
        }
    };
}

json model_meta(const Context& ctx, const std::string& stage, const std::string& data_hash) {
    return {{"config_hash", config_hash_for(ctx.config, stage)}, {"train_manifest", data_hash}};
}

synth::Dataset load_train(const Context& ctx) { return synth::load_dataset(ctx.out / "data" / "train"); }

std::string record_dir_name(std::uint64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05llu", static_cast<unsigned long long>(id));
    return buf;
}

bool is_known_method(const std::string& m) {
    const auto& k = known_methods();
    return std::find(k.begin(), k.end(), m) != k.end();
}

double record_flip_ratio(const std::vector<guidance::CounterfactualRecord>& recs) {
    std::vector<metrics::ScorePair> pairs;
    for (const auto& r : recs) pairs.push_back({r.original_scores.p_sp, r.scores.back().p_sp});
    try {
        return metrics::flip_ratio(pairs);
    } catch (const std::invalid_argument&) {
        return 0.0;
    }
}

guidance::GuidanceConfig cell_config(const guidance::GuidanceConfig& base, const AblationCell& cell) {
    auto cfg = base;
    cfg.tau = cell.tau;
    if (!cell.perceptual) cfg.lambda_p = 0.0;
    cfg.grad_mode = guidance::GradMode::Denoised;
    return cfg;
}

// Generates one method (or ablation cell) into `dir`, honoring the lambda_c search mode.
json generate_into(const Context& ctx, const std::string& method, const guidance::GuidanceConfig& cfg,
                   const guidance::ModelSet& ms, const std::vector<std::pair<std::uint64_t, Image>>& images,
                   std::optional<double> fixed, const fs::path& dir, std::vector<double>& wall) {
    const std::uint64_t master = stage_seed(ctx.config.seed, kSeedGeneration);
    std::vector<guidance::CounterfactualRecord> recs;
    json selection = {{"mode", fixed ? "fixed" : "per_image"}};
    if (!fixed && ctx.config.lambda_search == LambdaSearch::PerDataset) {
        auto cands = cfg.lambda_c_candidates;
        std::sort(cands.begin(), cands.end());
        double best_fr = -1.0;
        json tried = json::array();
        for (double c : cands) {
            std::vector<double> w;
            auto r = run_method(method, cfg, ms, master, images, ctx.config.jobs, c, &w);
            const double fr = record_flip_ratio(r);
            tried.push_back({{"lambda_c", c}, {"flip_ratio", fr}});
            ctx.log(method + ": lambda_c " + std::to_string(c) + " FR " + std::to_string(fr));
            if (fr > best_fr) {
                best_fr = fr;
                recs = std::move(r);
                wall = std::move(w);
                selection["lambda_c"] = c;
            }
        }
        selection = {{"mode", "per_dataset"}, {"lambda_c", selection["lambda_c"]}, {"candidates", tried}};
    } else {
        recs = run_method(method, cfg, ms, master, images, ctx.config.jobs, fixed, &wall);
        if (fixed) selection["lambda_c"] = *fixed;
    }
    fs::remove_all(dir);
    fs::create_directories(dir);
    json hashes = json::object();
    for (const auto& r : recs) hashes[record_dir_name(r.image_id)] = guidance::save_record(r, dir / record_dir_name(r.image_id));
    write_text(dir / "records.json", canonical_dump({{"method", method},
                                                     {"config", cfg.to_json()},
                                                     {"lambda_selection", selection},
                                                     {"record_hashes", hashes}}));
    return hashes;
}

std::string fmt6(const json& v) {
    if (v.is_null()) return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v.get<double>());
    return buf;
}

json read_json(const fs::path& p) { return json::parse(read_text(p)); }

}  // namespace

// ---- config ----

std::string AblationCell::name() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "tau%03d_lp%s", tau, perceptual ? "on" : "off");
    std::string s = buf;
    if (lambda_c) s += "_lc" + std::to_string(static_cast<long long>(*lambda_c));
    return s;
}

std::vector<AblationCell> AblationConfig::cells() const {
    std::vector<AblationCell> out;
    for (int t : taus) {
        out.push_back({t, true, std::nullopt});
        out.push_back({t, false, std::nullopt});
    }
    if (strong_lambda_c > 0.0) out.push_back({strong_tau, true, strong_lambda_c});
    return out;
}

json ExperimentConfig::to_json() const {
    return {
        {"seed", seed},
        {"out", out},
        {"jobs", jobs},
        {"data",
         {{"n_train", data.n_train},
          {"train_sp_fraction", data.train_sp_fraction},
          {"n_test", data.n_test},
          {"test_sp_fraction", data.test_sp_fraction},
          {"max_test_images", data.max_test_images}}},
        {"diffusion",
         {{"train_steps", diffusion.train_steps},
          {"sample_steps", diffusion.sample_steps},
          {"beta_start", diffusion.beta_start},
          {"beta_end", diffusion.beta_end},
          {"model", {{"widths", diffusion.model.widths}, {"time_dim", diffusion.model.time_dim}}},
          {"training",
           {{"iterations", diffusion.training.iterations},
            {"batch_size", diffusion.training.batch_size},
            {"lr", diffusion.training.lr},
            {"weight_decay", diffusion.training.weight_decay}}}}},
        {"classifier",
         {{"model", models::to_json(classifier.model)},
          {"segmenter", opts_json(classifier.training.segmenter)},
          {"predictor", opts_json(classifier.training.predictor)}}},
        {"oracle", {{"model", models::to_json(oracle.model)}, {"training", opts_json(oracle.training)}}},
        {"features",
         {{"model", models::to_json(features.model)},
          {"guidance", feat_json(features.guidance)},
          {"eval", feat_json(features.eval)}}},
        {"guidance", guidance.to_json()},
        {"methods", methods},
        {"lambda_search", lambda_search == LambdaSearch::PerImage ? "per_image" : "per_dataset"},
        {"ablation",
         {{"taus", ablation.taus},
          {"strong_lambda_c", ablation.strong_lambda_c},
          {"strong_tau", ablation.strong_tau},
          {"max_images", ablation.max_images}}},
    };
}

ExperimentConfig ExperimentConfig::from_json(const json& patch) {
    ExperimentConfig c;
    json j = c.to_json();
    check_keys(j, patch, "");
    j.merge_patch(patch);
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        c.out = j.at("out").get<std::string>();
        c.jobs = j.at("jobs").get<int>();
        const auto& d = j.at("data");
        c.data.n_train = d.at("n_train").get<int>();
        c.data.train_sp_fraction = d.at("train_sp_fraction").get<double>();
        c.data.n_test = d.at("n_test").get<int>();
        c.data.test_sp_fraction = d.at("test_sp_fraction").get<double>();
        c.data.max_test_images = d.at("max_test_images").get<int>();
        const auto& df = j.at("diffusion");
        c.diffusion.train_steps = df.at("train_steps").get<int>();
        c.diffusion.sample_steps = df.at("sample_steps").get<int>();
        c.diffusion.beta_start = df.at("beta_start").get<double>();
        c.diffusion.beta_end = df.at("beta_end").get<double>();
        c.diffusion.model.widths = df.at("model").at("widths").get<std::vector<int>>();
        c.diffusion.model.time_dim = df.at("model").at("time_dim").get<int>();
        const auto& dt = df.at("training");
        c.diffusion.training = {dt.at("iterations").get<int>(), dt.at("batch_size").get<int>(), dt.at("lr").get<double>(),
                                dt.at("weight_decay").get<double>()};
        const auto& cl = j.at("classifier");
        c.classifier.model.seg_widths = cl.at("model").at("seg_widths").get<std::vector<int>>();
        c.classifier.model.pred_widths = cl.at("model").at("pred_widths").get<std::vector<int>>();
        c.classifier.model.zero_head = cl.at("model").at("zero_head").get<bool>();
        c.classifier.training.segmenter = opts_from(cl.at("segmenter"));
        c.classifier.training.predictor = opts_from(cl.at("predictor"));
        c.oracle.model.widths = j.at("oracle").at("model").at("widths").get<std::vector<int>>();
        c.oracle.training = opts_from(j.at("oracle").at("training"));
        const auto& fe = j.at("features");
        c.features.model.widths = fe.at("model").at("widths").get<std::vector<int>>();
        c.features.guidance = feat_from(fe.at("guidance"));
        c.features.eval = feat_from(fe.at("eval"));
        c.guidance = guidance::GuidanceConfig::from_json(j.at("guidance"));
        c.methods = j.at("methods").get<std::vector<std::string>>();
        const auto ls = j.at("lambda_search").get<std::string>();
        if (ls == "per_image") {
            c.lambda_search = LambdaSearch::PerImage;
        } else if (ls == "per_dataset") {
            c.lambda_search = LambdaSearch::PerDataset;
        } else {
            throw ConfigError("config: lambda_search must be per_image or per_dataset, got '" + ls + "'");
        }
        const auto& ab = j.at("ablation");
        c.ablation.taus = ab.at("taus").get<std::vector<int>>();
        c.ablation.strong_lambda_c = ab.at("strong_lambda_c").get<double>();
        c.ablation.strong_tau = ab.at("strong_tau").get<int>();
        c.ablation.max_images = ab.at("max_images").get<int>();
    } catch (const ConfigError&) {
        throw;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
    if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
    json j;
    try {
        j = json::parse(read_text(file));
    } catch (const json::exception& e) {
        throw ConfigError("config file " + file.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::validate() const {
    if (out.empty()) throw ConfigError("config: out must not be empty");
    if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
    if (data.n_train < 2) throw ConfigError("config: data.n_train must be >= 2");
    if (data.n_test < 1) throw ConfigError("config: data.n_test must be >= 1");
    for (double f : {data.train_sp_fraction, data.test_sp_fraction})
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("config: SP fractions must lie in [0, 1]");
    if (data.max_test_images < 1) throw ConfigError("config: data.max_test_images must be >= 1");
    if (diffusion.train_steps < 2) throw ConfigError("config: diffusion.train_steps must be >= 2");
    if (diffusion.sample_steps < 1 || diffusion.sample_steps > diffusion.train_steps)
        throw ConfigError("config: diffusion.sample_steps must lie in [1, train_steps]");
    if (!(diffusion.beta_start > 0.0 && diffusion.beta_start < diffusion.beta_end && diffusion.beta_end < 1.0))
        throw ConfigError("config: need 0 < beta_start < beta_end < 1");
    check_widths(diffusion.model.widths, "diffusion.model.widths");
    if (diffusion.model.time_dim < 2 || diffusion.model.time_dim % 2)
        throw ConfigError("config: diffusion.model.time_dim must be even and >= 2");
    check_opts({diffusion.training.iterations, diffusion.training.batch_size, diffusion.training.lr},
               "diffusion.training");
    if (diffusion.training.weight_decay < 0.0) throw ConfigError("config: diffusion.training.weight_decay must be >= 0");
    check_widths(classifier.model.seg_widths, "classifier.model.seg_widths");
    check_widths(classifier.model.pred_widths, "classifier.model.pred_widths");
    check_opts(classifier.training.segmenter, "classifier.segmenter");
    check_opts(classifier.training.predictor, "classifier.predictor");
    check_widths(oracle.model.widths, "oracle.model.widths");
    check_opts(oracle.training, "oracle.training");
    check_widths(features.model.widths, "features.model.widths");
    check_opts(features.guidance.opt, "features.guidance");
    check_opts(features.eval.opt, "features.eval");
    try {
        guidance.validate(diffusion.sample_steps);
        if (guidance.lambda_c_candidates.empty()) throw std::invalid_argument("guidance config: no lambda_c candidates");
        for (const auto& cell : ablation.cells()) {
            auto g = cell_config(guidance, cell);
            g.iterations = 1;
            g.validate(diffusion.sample_steps);
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (methods.empty()) throw ConfigError("config: methods must not be empty");
    for (const auto& m : methods)
        if (!is_known_method(m)) throw ConfigError("config: unknown method '" + m + "'");
    if (ablation.max_images < 1) throw ConfigError("config: ablation.max_images must be >= 1");
    if (ablation.strong_lambda_c < 0.0) throw ConfigError("config: ablation.strong_lambda_c must be >= 0");
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical_dump(stage_config(*this, "report"))); }

json stage_config(const ExperimentConfig& c, const std::string& stage) {
    const json full = c.to_json();
    std::vector<std::string> keys{"seed", "data"};
    auto add = [&](std::initializer_list<const char*> ks) {
        for (auto k : ks) keys.emplace_back(k);
    };
    if (stage == "synth") {
    } else if (stage == "train-diffusion") {
        add({"diffusion"});
    } else if (stage == "train-classifier") {
        add({"classifier"});
    } else if (stage == "train-oracle") {
        add({"oracle"});
    } else if (stage == "train-features") {
        add({"features"});
    } else if (stage.rfind("generate", 0) == 0 || stage.rfind("evaluate", 0) == 0) {
        add({"diffusion", "classifier", "oracle", "features", "guidance", "lambda_search"});
        if (stage.find("ablation") != std::string::npos) add({"ablation"});
    } else {
        json j = full;
        j.erase("out");
        j.erase("jobs");
        return j;
    }
    json j = json::object();
    for (const auto& k : keys) j[k] = full.at(k);
    return j;
}

// ---- manifests ----

json RunManifest::to_json() const {
    return {{"stage", stage}, {"config_hash", config_hash}, {"inputs", inputs}, {"outputs", outputs}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.stage = j.at("stage").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.inputs = j.at("inputs");
    m.outputs = j.at("outputs");
    return m;
}

fs::path manifest_path(const fs::path& out, const std::string& stage) { return out / "manifests" / (stage + ".json"); }

RunManifest read_manifest(const fs::path& out, const std::string& stage) {
    return RunManifest::from_json(read_json(manifest_path(out, stage)));
}

std::vector<std::string> verify_manifest(const fs::path& out, const std::string& stage) {
    const auto m = read_manifest(out, stage);
    std::vector<std::string> bad;
    for (const auto& [rel, sha] : m.outputs.items()) {
        const auto p = out / rel;
        if (!fs::exists(p) || sha256_file(p) != sha.get<std::string>()) bad.push_back(rel);
    }
    return bad;
}

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) { return derive_seed(seed, {stage}); }

// ---- stages ----

void cmd_synth(const Context& ctx) {
    StageTimer timer;
    const auto& d = ctx.config.data;
    ctx.log("synth: " + std::to_string(d.n_train) + " train / " + std::to_string(d.n_test) + " test phantoms");
    const auto train = synth::generate_dataset(d.n_train, d.train_sp_fraction, stage_seed(ctx.config.seed, kSeedTrainData));
    const auto test = synth::generate_dataset(d.n_test, d.test_sp_fraction, stage_seed(ctx.config.seed, kSeedTestData));
    fs::remove_all(ctx.out / "data");
    synth::save_dataset(train, ctx.out / "data" / "train");
    synth::save_dataset(test, ctx.out / "data" / "test");
    write_manifest(ctx, "synth", json::object(), {"data"}, {{"seconds", timer.seconds()}});
}

void cmd_train_diffusion(const Context& ctx) {
    const std::string stage = "train-diffusion";
    const auto data_hash = require_stage(ctx, "synth", stage);
    StageTimer timer;
    const auto& dc = ctx.config.diffusion;
    const auto train = load_train(ctx);
    const auto images = train.images();
    const auto schedule = diffusion::build_schedule(dc.train_steps, diffusion::ScheduleKind::Linear, dc.beta_start, dc.beta_end);
    Rng init = make_rng(ctx.config.seed, {kSeedDenoiserInit});
    diffusion::Denoiser<float> model(dc.model, init);
    Rng rng = make_rng(ctx.config.seed, {kSeedDenoiserTrain});
    const auto trace = diffusion::train_denoiser(model, images, schedule, dc.training, rng,
                                                 progress_logger(ctx, "denoiser", dc.training.iterations));
    const auto dir = ctx.out / "models" / "denoiser";
    fs::remove_all(dir);
    auto meta = model_meta(ctx, stage, data_hash);
    meta["role"] = "denoiser";
    meta["config"] = {{"widths", dc.model.widths}, {"time_dim", dc.model.time_dim}};
    meta["describe"] = model.describe();
    save_checkpoint(dir, model.parameters().export_float(), meta);
    write_text(dir / "loss.csv", trace.to_csv());
    write_manifest(ctx, stage, {{"synth", data_hash}}, {"models/denoiser"}, {{"seconds", timer.seconds()}});
}

void cmd_train_classifier(const Context& ctx) {
    const std::string stage = "train-classifier";
    const auto data_hash = require_stage(ctx, "synth", stage);
    StageTimer timer;
    const auto train = load_train(ctx);
    models::QualityClassifier<float> f(ctx.config.classifier.model, stage_seed(ctx.config.seed, kSeedClassifierInit));
    Rng rng = make_rng(ctx.config.seed, {kSeedClassifierTrain});
    models::train_classifier(f, train, ctx.config.classifier.training, rng, model_progress(ctx, "classifier"));
    const auto dir = ctx.out / "models" / "classifier";
    fs::remove_all(dir);
    auto meta = model_meta(ctx, stage, data_hash);
    meta["train_balanced_accuracy"] = models::classifier_balanced_accuracy(f, train);
    models::save_classifier(f, dir, meta);
    write_manifest(ctx, stage, {{"synth", data_hash}}, {"models/classifier"}, {{"seconds", timer.seconds()}});
}

void cmd_train_oracle(const Context& ctx) {
    const std::string stage = "train-oracle";
    const auto data_hash = require_stage(ctx, "synth", stage);
    StageTimer timer;
    const auto train = load_train(ctx);
    models::Oracle<float> o(ctx.config.oracle.model, stage_seed(ctx.config.seed, kSeedOracleInit));
    Rng rng = make_rng(ctx.config.seed, {kSeedOracleTrain});
    models::train_oracle(o, train, ctx.config.oracle.training, rng, model_progress(ctx, "oracle"));
    const auto dir = ctx.out / "models" / "oracle";
    fs::remove_all(dir);
    auto meta = model_meta(ctx, stage, data_hash);
    meta["train_balanced_accuracy"] = models::oracle_balanced_accuracy(o, train);
    models::save_oracle(o, dir, meta);
    write_manifest(ctx, stage, {{"synth", data_hash}}, {"models/oracle"}, {{"seconds", timer.seconds()}});
}

void cmd_train_features(const Context& ctx) {
    const std::string stage = "train-features";
    const auto data_hash = require_stage(ctx, "synth", stage);
    StageTimer timer;
    const auto train = load_train(ctx);
    const auto& fc = ctx.config.features;
    struct Job {
        const char* role;
        std::uint64_t init, stream;
        const models::FeatureTraining* hyper;
    };
    for (const Job& job : {Job{"features_guidance", kSeedGuidanceFeatInit, kSeedGuidanceFeatTrain, &fc.guidance},
                           Job{"features_eval", kSeedEvalFeatInit, kSeedEvalFeatTrain, &fc.eval}}) {
        models::FeatureNet<float> net(fc.model, stage_seed(ctx.config.seed, job.init));
        Rng rng = make_rng(ctx.config.seed, {job.stream});
        models::train_features(net, train, *job.hyper, rng, model_progress(ctx, job.role));
        const auto dir = ctx.out / "models" / job.role;
        fs::remove_all(dir);
        auto meta = model_meta(ctx, stage, data_hash);
        meta["role"] = job.role;
        models::save_features(net, dir, meta);
    }
    write_manifest(ctx, stage, {{"synth", data_hash}}, {"models/features_guidance", "models/features_eval"},
                   {{"seconds", timer.seconds()}});
}

guidance::ModelSet LoadedModels::set() const {
    guidance::ModelSet m;
    m.denoiser = denoiser.get();
    m.schedule = &sample_schedule;
    m.classifier = classifier.get();
    m.guidance_features = features_guidance.get();
    m.oracle = oracle.get();
    m.eval_features = features_eval.get();
    return m;
}

LoadedModels load_models(const Context& ctx) {
    const auto& dc = ctx.config.diffusion;
    LoadedModels lm;
    lm.train_schedule = diffusion::build_schedule(dc.train_steps, diffusion::ScheduleKind::Linear, dc.beta_start, dc.beta_end);
    lm.sample_schedule = diffusion::respace(lm.train_schedule, dc.sample_steps);
    const auto ck = load_checkpoint(ctx.out / "models" / "denoiser");
    if (ck.metadata.value("role", "") != "denoiser") throw std::runtime_error("models/denoiser is not a denoiser checkpoint");
    diffusion::DenoiserConfig cfg;
    cfg.widths = ck.metadata.at("config").at("widths").get<std::vector<int>>();
    cfg.time_dim = ck.metadata.at("config").at("time_dim").get<int>();
    Rng unused(0);
    lm.denoiser = std::make_unique<diffusion::Denoiser<float>>(cfg, unused);
    lm.denoiser->parameters().import_float(ck.tensors);
    lm.denoiser->parameters().set_trainable(false);
    lm.classifier = models::load_classifier(ctx.out / "models" / "classifier");
    lm.oracle = models::load_oracle(ctx.out / "models" / "oracle");
    lm.features_guidance = models::load_features(ctx.out / "models" / "features_guidance");
    lm.features_eval = models::load_features(ctx.out / "models" / "features_eval");
    return lm;
}

std::vector<std::pair<std::uint64_t, Image>> nsp_test_images(const Context& ctx, int max_images) {
    const auto test = synth::load_dataset(ctx.out / "data" / "test");
    std::vector<std::pair<std::uint64_t, Image>> out;
    for (std::size_t i = 0; i < test.samples.size() && static_cast<int>(out.size()) < max_images; ++i)
        if (test.samples[i].label == synth::Label::NSP) out.emplace_back(i, test.samples[i].image);
    return out;
}

std::vector<guidance::CounterfactualRecord> run_method(const std::string& method, const guidance::GuidanceConfig& cfg,
                                                       const guidance::ModelSet& models, std::uint64_t master_seed,
                                                       const std::vector<std::pair<std::uint64_t, Image>>& images,
                                                       int jobs, std::optional<double> fixed_lambda_c,
                                                       std::vector<double>* wall_seconds) {
    if (!is_known_method(method)) throw std::invalid_argument("unknown method '" + method + "'");
    auto run_one = [&](const std::pair<std::uint64_t, Image>& item) {
        const guidance::SeedPath seeds{master_seed, item.first};
        if (method == "diff_ice") return guidance::diff_ice(item.second, cfg, models, seeds, fixed_lambda_c);
        auto c = cfg;
        c.grad_mode = method == "diff_ice_1_xt" ? guidance::GradMode::Noisy : guidance::GradMode::Denoised;
        return guidance::single_pass(item.second, c, models, seeds, fixed_lambda_c);
    };

    const std::size_t n = images.size();
    std::vector<guidance::CounterfactualRecord> out(n);
    std::vector<double> wall(n, 0.0);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                const auto t0 = std::chrono::steady_clock::now();
                out[i] = run_one(images[i]);
                wall[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!error) error = std::current_exception();
                failed.store(true);
            }
        }
    };
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < workers; ++k) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    if (wall_seconds) *wall_seconds = std::move(wall);
    return out;
}

std::vector<guidance::CounterfactualRecord> load_records(const fs::path& dir) {
    std::vector<fs::path> dirs;
    if (fs::is_directory(dir))
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory() && fs::exists(e.path() / "record.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<guidance::CounterfactualRecord> out;
    for (const auto& d : dirs) out.push_back(guidance::load_record(d));
    return out;
}

namespace {

json model_inputs(const Context& ctx, const std::string& stage) {
    json in = json::object();
    for (const char* s : {"synth", "train-diffusion", "train-classifier", "train-oracle", "train-features"})
        in[s] = require_stage(ctx, s, stage);
    return in;
}

std::vector<std::string> expand_methods(const Context& ctx, const std::vector<std::string>& requested) {
    std::vector<std::string> out;
    auto push = [&](const std::string& m) {
        if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    };
    if (requested.empty()) {
        for (const auto& m : ctx.config.methods) push(m);
        return out;
    }
    for (const auto& m : requested) {
        if (m == "all") {
            for (const auto& k : ctx.config.methods) push(k);
            push("ablation");
        } else if (m == "ablation" || is_known_method(m)) {
            push(m);
        } else {
            throw ConfigError("unknown method '" + m + "' (expected diff_ice, diff_ice_1, diff_ice_1_xt, ablation or all)");
        }
    }
    return out;
}

}  // namespace

void cmd_generate(const Context& ctx, const std::vector<std::string>& requested) {
    const auto methods = expand_methods(ctx, requested);
    for (const auto& method : methods) {
        const std::string stage = "generate-" + method;
        const auto inputs = model_inputs(ctx, stage);
        StageTimer timer;
        const auto lm = load_models(ctx);
        const auto ms = lm.set();
        json timing = json::object();
        if (method == "ablation") {
            const auto images = nsp_test_images(ctx, std::min(ctx.config.ablation.max_images, ctx.config.data.max_test_images));
            fs::remove_all(ctx.out / "generate" / "ablation");
            for (const auto& cell : ctx.config.ablation.cells()) {
                ctx.log("generate: ablation cell " + cell.name() + " on " + std::to_string(images.size()) + " images");
                std::vector<double> wall;
                generate_into(ctx, "diff_ice_1", cell_config(ctx.config.guidance, cell), ms, images, cell.lambda_c,
                              ctx.out / "generate" / "ablation" / cell.name(), wall);
                timing[cell.name()] = wall;
            }
        } else {
            const auto images = nsp_test_images(ctx, ctx.config.data.max_test_images);
            ctx.log("generate: " + method + " on " + std::to_string(images.size()) + " NSP test images, " +
                    std::to_string(ctx.config.jobs) + " job(s)");
            std::vector<double> wall;
            generate_into(ctx, method, ctx.config.guidance, ms, images, std::nullopt, ctx.out / "generate" / method, wall);
            timing["per_image_seconds"] = wall;
        }
        timing["seconds"] = timer.seconds();
        write_manifest(ctx, stage, inputs, {"generate/" + method}, timing);
    }
}

void cmd_evaluate(const Context& ctx, const std::vector<std::string>& requested) {
    const auto methods = expand_methods(ctx, requested);
    for (const auto& method : methods) {
        const std::string stage = "evaluate-" + method;
        json inputs = {{"generate-" + method, require_stage(ctx, "generate-" + method, stage)}};
        StageTimer timer;
        const auto lm = load_models(ctx);
        auto evaluate_dir = [&](const fs::path& gen, const fs::path& rep) {
            const auto recs = load_records(gen);
            if (recs.empty()) throw std::runtime_error("no counterfactual records under " + gen.string());
            const auto report = metrics::build_report(recs, *lm.classifier, *lm.oracle, *lm.features_eval);
            fs::remove_all(rep);
            metrics::save_report(report, rep);
            ctx.log("evaluate: " + rep.filename().string() + " FR " + std::to_string(report.final_row().fr));
        };
        if (method == "ablation") {
            for (const auto& cell : ctx.config.ablation.cells())
                evaluate_dir(ctx.out / "generate" / "ablation" / cell.name(), ctx.out / "reports" / "ablation" / cell.name());
        } else {
            evaluate_dir(ctx.out / "generate" / method, ctx.out / "reports" / method);
        }
        write_manifest(ctx, stage, inputs, {"reports/" + method}, {{"seconds", timer.seconds()}});
    }
}

namespace {

const char* kRowHeader = "method,iteration,N,eligible,valid,FR,MAD,BKL,MQD,QD_TH,QD_CSP,QD_FP,FD_eval,feature_cosine";

std::string row_line(const std::string& label, const json& row) {
    const auto& c = row.at("counts");
    const auto& v = row.at("validity");
    const auto& o = row.at("oracle");
    const auto& r = row.at("realism");
    std::ostringstream os;
    os << label << ',' << row.at("iteration").get<int>() << ',' << c.at("N").get<std::size_t>() << ','
       << c.at("eligible").get<std::size_t>() << ',' << c.at("valid").get<std::size_t>() << ',' << fmt6(v.at("FR"))
       << ',' << fmt6(v.at("MAD")) << ',' << fmt6(v.at("BKL")) << ',' << fmt6(o.at("MQD")) << ','
       << fmt6(o.at("QD_TH")) << ',' << fmt6(o.at("QD_CSP")) << ',' << fmt6(o.at("QD_FP")) << ','
       << fmt6(r.at("frechet_eval_distance")) << ',' << fmt6(r.at("mean_feature_cosine"));
    return os.str();
}

}  // namespace

void cmd_report(const Context& ctx) {
    const std::string stage = "report";
    json inputs = json::object();
    std::vector<std::string> methods;
    for (const auto& m : known_methods()) {
        if (fs::exists(manifest_path(ctx.out, "evaluate-" + m))) {
            inputs["evaluate-" + m] = require_stage(ctx, "evaluate-" + m, stage);
            methods.push_back(m);
        }
    }
    const bool ablation = fs::exists(manifest_path(ctx.out, "evaluate-ablation"));
    if (ablation) inputs["evaluate-ablation"] = require_stage(ctx, "evaluate-ablation", stage);
    if (methods.empty() && !ablation) require_stage(ctx, "evaluate-diff_ice", stage);

    StageTimer timer;
    const auto dir = ctx.out / "reports" / "tables";
    fs::remove_all(dir);
    fs::create_directories(dir);
    json index = json::object();

    std::ostringstream t1, t1e, t2;
    t1 << kRowHeader << '\n';
    t1e << "method,mean_batch_seconds,std_batch_seconds,total_hours,batches\n";
    t2 << kRowHeader << '\n';
    for (const auto& m : methods) {
        const auto rep = read_json(ctx.out / "reports" / m / "report.json");
        const auto& rows = rep.at("iterations");
        t1 << row_line(m, rows.back()) << '\n';
        if (m == "diff_ice")
            for (const auto& r : rows) t2 << row_line(m, r) << '\n';
        const auto eff = ctx.out / "reports" / m / "efficiency.json";
        if (fs::exists(eff)) {
            const auto e = read_json(eff);
            t1e << m << ',' << fmt6(e.at("mean_batch_seconds")) << ',' << fmt6(e.at("std_batch_seconds")) << ','
                << fmt6(e.at("total_hours")) << ',' << e.at("batches").get<std::size_t>() << '\n';
        }
    }
    if (!methods.empty()) {
        write_text(dir / "table1_methods.csv", t1.str());
        write_text(dir / "table1_efficiency.csv", t1e.str());
        index["table1"] = {"reports/tables/table1_methods.csv", "reports/tables/table1_efficiency.csv"};
    }
    if (std::find(methods.begin(), methods.end(), "diff_ice") != methods.end()) {
        write_text(dir / "table2_iterations.csv", t2.str());
        index["table2"] = "reports/tables/table2_iterations.csv";
        json fig4 = json::object();
        for (const char* s : {"th", "csp", "fp"}) {
            const std::string name = std::string("fig4_qd_") + s + ".csv";
            fs::copy_file(ctx.out / "reports" / "diff_ice" / (std::string("qd_") + s + ".csv"), dir / name);
            fig4[s] = "reports/tables/" + name;
        }
        index["fig4"] = fig4;
        // Originals and every iteration for the first few counterfactuals, one strip each.
        const auto recs = load_records(ctx.out / "generate" / "diff_ice");
        json fig3 = json::array();
        for (std::size_t i = 0; i < recs.size() && i < 8; ++i) {
            std::vector<Image> strip{recs[i].original};
            for (const auto& o : recs[i].outputs) strip.push_back(o);
            const std::string name = "fig3_" + record_dir_name(recs[i].image_id) + ".pgm";
            write_text(dir / name, synth::encode_strip_pgm(strip));
            fig3.push_back("reports/tables/" + name);
        }
        index["fig3"] = fig3;
    }
    if (ablation) {
        std::ostringstream s1, s1e;
        s1 << "cell,tau,L_p,lambda_c," << std::string(kRowHeader).substr(std::string("method,").size()) << '\n';
        s1e << "cell,mean_batch_seconds,std_batch_seconds,total_hours,batches\n";
        for (const auto& cell : ctx.config.ablation.cells()) {
            const auto rdir = ctx.out / "reports" / "ablation" / cell.name();
            const auto rep = read_json(rdir / "report.json");
            const std::string line = row_line("x", rep.at("iterations").back());
            s1 << cell.name() << ',' << cell.tau << ',' << (cell.perceptual ? "on" : "off") << ','
               << (cell.lambda_c ? fmt6(*cell.lambda_c) : std::string("search")) << line.substr(1) << '\n';
            if (fs::exists(rdir / "efficiency.json")) {
                const auto e = read_json(rdir / "efficiency.json");
                s1e << cell.name() << ',' << fmt6(e.at("mean_batch_seconds")) << ',' << fmt6(e.at("std_batch_seconds"))
                    << ',' << fmt6(e.at("total_hours")) << ',' << e.at("batches").get<std::size_t>() << '\n';
            }
        }
        write_text(dir / "tableS1_ablation.csv", s1.str());
        write_text(dir / "tableS1_efficiency.csv", s1e.str());
        index["tableS1"] = {"reports/tables/tableS1_ablation.csv", "reports/tables/tableS1_efficiency.csv"};
    }
    write_text(dir / "index.json", canonical_dump(index));
    write_manifest(ctx, stage, inputs, {"reports/tables"}, {{"seconds", timer.seconds()}});
}

}  // namespace diffice::harness
