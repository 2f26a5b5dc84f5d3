// Command-line front end for the pipeline stages.
//
//   diffice synth --config run.json --out runs/a
//   diffice generate --method diff_ice --jobs 4
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffice/harness.hpp"

using namespace diffice;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> methods;
    std::optional<int> jobs;
};

void add_common(CLI::App* sub, Flags& f, bool with_method) {
    sub->add_option("--config", f.config, "JSON configuration file (defaults built in)");
    sub->add_option("--seed", f.seed, "Experiment seed");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--jobs", f.jobs, "Worker threads for image-level parallelism")->check(CLI::PositiveNumber);
    if (with_method) {
        sub->add_option("--method", f.methods,
                        "diff_ice, diff_ice_1, diff_ice_1_xt, ablation or all (repeatable; default: config methods)");
    }
}

harness::Context make_context(const Flags& f) {
    harness::Context ctx;
    ctx.config = f.config.empty() ? harness::ExperimentConfig{} : harness::ExperimentConfig::load(f.config);
    if (f.seed) ctx.config.seed = *f.seed;
    if (!f.out.empty()) ctx.config.out = f.out;
    if (f.jobs) ctx.config.jobs = *f.jobs;
    ctx.config.validate();
    ctx.out = ctx.config.out;
    const auto t0 = std::chrono::steady_clock::now();
    ctx.log = [t0](const std::string& msg) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "[%8.1fs] %s\n", s, msg.c_str());
    };
    return ctx;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Iterative diffusion counterfactuals on synthetic head phantoms"};
    app.require_subcommand(1, 1);
    Flags flags;

    struct Command {
        const char* name;
        const char* help;
        bool with_method;
    };
    const Command commands[] = {
        {"synth", "Generate the phantom train/test datasets", false},
        {"train-diffusion", "Train the noise-predicting U-Net", false},
        {"train-classifier", "Train the segmenter, then the quality predictor", false},
        {"train-oracle", "Train the independent quality oracle", false},
        {"train-features", "Train the guidance and evaluation feature nets", false},
        {"generate", "Generate counterfactuals for the NSP test images", true},
        {"evaluate", "Score the generated counterfactuals", true},
        {"report", "Write the table and figure analogues", false},
    };
    std::vector<CLI::App*> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, flags, c.with_method);
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    std::string which;
    for (auto* s : subs)
        if (s->parsed()) which = s->get_name();

    try {
        const auto ctx = make_context(flags);
        std::fprintf(stderr, "%s: out=%s seed=%llu config=%s\n", which.c_str(), ctx.out.string().c_str(),
                     static_cast<unsigned long long>(ctx.config.seed), ctx.config.hash().substr(0, 12).c_str());
        if (which == "synth") {
            harness::cmd_synth(ctx);
        } else if (which == "train-diffusion") {
            harness::cmd_train_diffusion(ctx);
        } else if (which == "train-classifier") {
            harness::cmd_train_classifier(ctx);
        } else if (which == "train-oracle") {
            harness::cmd_train_oracle(ctx);
        } else if (which == "train-features") {
            harness::cmd_train_features(ctx);
        } else if (which == "generate") {
            harness::cmd_generate(ctx, flags.methods);
        } else if (which == "evaluate") {
            harness::cmd_evaluate(ctx, flags.methods);
        } else {
            harness::cmd_report(ctx);
        }
    } catch (const harness::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
