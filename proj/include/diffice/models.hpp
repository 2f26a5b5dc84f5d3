#pragma once

// The guiding classifier f(x) = l(s(x), x), the independent oracle and the
// frozen feature extractors. All models are templated on the scalar type so
// the same weights can be checked in double precision.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diffice/image.hpp"
#include "diffice/nn.hpp"
#include "diffice/synthdata.hpp"
#include "diffice/unet.hpp"
#include "json.hpp"

namespace diffice::models {

template <class T>
using Tensor = ad::Tensor<T>;

inline constexpr int kNSP = 0;
inline constexpr int kSP = 1;

/// Plain conv stack: 3x3 conv + ReLU per entry, then a global average pool.
template <class T>
class ConvTrunk {
   public:
    struct Layer {
        int channels;
        int stride;
    };

    ConvTrunk() = default;
    ConvTrunk(int in_channels, const std::vector<Layer>& layers, nn::ParameterList<T>& params,
              const std::string& prefix, Rng& rng) {
        int prev = in_channels;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            convs_.push_back(nn::Conv2d<T>::create(params, prefix + "conv" + std::to_string(i), prev,
                                                   layers[i].channels, 3, rng, layers[i].stride));
            prev = layers[i].channels;
        }
        out_channels_ = prev;
    }

    /// [N, C, H, W] -> [N, out_channels].
    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> h = x;
        for (const auto& c : convs_) h = ad::relu(c(h));
        const auto n = h.dim(0), c = h.dim(1);
        h = ad::avg_pool2d(h, static_cast<int>(h.dim(2)), static_cast<int>(h.dim(3)));
        return ad::reshape(h, {n, c});
    }

    int out_channels() const { return out_channels_; }

   private:
    std::vector<nn::Conv2d<T>> convs_;
    int out_channels_ = 0;
};

// ---- guiding classifier ----

struct ClassifierConfig {
    std::vector<int> seg_widths{8, 16, 32};
    std::vector<int> pred_widths{16, 32, 32, 32};
    /// Zero final layer: an untrained predictor outputs p_SP = 0.5 exactly.
    bool zero_head = true;
};

template <class T>
class QualityClassifier {
   public:
    QualityClassifier(const ClassifierConfig& cfg, std::uint64_t seed);

    /// Per-pixel logits over the five mask classes, [N, 5, H, W].
    Tensor<T> segment_logits(const Tensor<T>& x) const;
    /// Predictor on an explicit segmentation-probability input.
    Tensor<T> predict_logits(const Tensor<T>& seg_probs, const Tensor<T>& x) const;
    /// f(x) = l(softmax(s(x)), x), [N, 2] logits (NSP, SP).
    Tensor<T> logits(const Tensor<T>& x) const;
    Tensor<T> log_probs(const Tensor<T>& x) const { return ad::log_softmax(logits(x), 1); }

    nn::ParameterList<T>& segmenter() { return seg_params_; }
    const nn::ParameterList<T>& segmenter() const { return seg_params_; }
    nn::ParameterList<T>& predictor() { return pred_params_; }
    const nn::ParameterList<T>& predictor() const { return pred_params_; }
    const ClassifierConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    std::vector<NamedTensor> export_float() const;
    void import_float(const std::vector<NamedTensor>& tensors);
    std::string hash() const;
    void set_trainable(bool on) {
        seg_params_.set_trainable(on);
        pred_params_.set_trainable(on);
    }

   private:
    ClassifierConfig cfg_;
    std::uint64_t seed_;
    nn::ParameterList<T> seg_params_, pred_params_;
    nn::UNet<T> seg_;
    ConvTrunk<T> trunk_;
    nn::Linear<T> head_;
};

struct Classification {
    double p_sp = 0.0;
    std::vector<std::uint8_t> segmentation;  // argmax mask class per pixel
};

template <class T>
Classification classify(const QualityClassifier<T>& f, const Image& x);

/// p_SP for many images, evaluated in chunks without recording a tape.
std::vector<double> predict_sp(const QualityClassifier<float>& f, std::span<const Image> images);

// ---- oracle ----

struct OracleConfig {
    std::vector<int> widths{16, 32, 32, 48};
};

struct OracleScores {
    double overall = 0.0, th = 0.0, csp = 0.0, fp = 0.0;  // QS_O, QS_TH, QS_CSP, QS_FP
};

/// One trunk with four 2-way heads: overall SP, TH visible, CSP visible, FP absent.
template <class T>
class Oracle {
   public:
    static constexpr int kHeads = 4;
    Oracle(const OracleConfig& cfg, std::uint64_t seed);

    /// [N, 4, 2] logits.
    Tensor<T> logits(const Tensor<T>& x) const;

    nn::ParameterList<T>& parameters() { return params_; }
    const nn::ParameterList<T>& parameters() const { return params_; }
    const OracleConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

   private:
    OracleConfig cfg_;
    std::uint64_t seed_;
    nn::ParameterList<T> params_;
    ConvTrunk<T> trunk_;
    nn::Linear<T> head_;
};

template <class T>
OracleScores oracle_scores(const Oracle<T>& oracle, const Image& x);
std::vector<OracleScores> oracle_scores_batch(const Oracle<float>& oracle, std::span<const Image> images);

// ---- feature extractors ----

struct FeatureConfig {
    std::vector<int> widths{16, 32, 64, 64};  // last entry is the feature dimension
};

/// Concept targets used to train the features: TH, CSP, FP, skull complete, sharp.
inline constexpr int kFeatureTasks = 5;

template <class T>
class FeatureNet {
   public:
    FeatureNet(const FeatureConfig& cfg, std::uint64_t seed);

    /// [N, dim] features.
    Tensor<T> features(const Tensor<T>& x) const { return trunk_(x); }
    /// [N, kFeatureTasks, 2] logits of the auxiliary training head.
    Tensor<T> task_logits(const Tensor<T>& x) const;
    int dim() const { return trunk_.out_channels(); }

    nn::ParameterList<T>& parameters() { return params_; }
    const nn::ParameterList<T>& parameters() const { return params_; }
    const FeatureConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

   private:
    FeatureConfig cfg_;
    std::uint64_t seed_;
    nn::ParameterList<T> params_;
    ConvTrunk<T> trunk_;
    nn::Linear<T> head_;
};

template <class T>
std::vector<double> extract_features(const FeatureNet<T>& net, const Image& x);
std::vector<std::vector<double>> extract_features_batch(const FeatureNet<float>& net, std::span<const Image> images);

double cosine(std::span<const double> a, std::span<const double> b);

// ---- training ----

struct TrainOptions {
    int iterations = 1000;
    int batch_size = 16;
    double lr = 2e-3;
};

struct ClassifierTraining {
    TrainOptions segmenter{1200, 16, 3e-3};
    TrainOptions predictor{1200, 16, 2e-3};
};

struct FeatureTraining {
    TrainOptions opt{800, 16, 2e-3};
    /// Random horizontal flips and additive noise.
    bool augment = false;
};

using ProgressFn = std::function<void(const std::string& stage, int iteration, double loss)>;

struct TrainLog {
    std::vector<double> segmenter_loss, predictor_loss, loss;
};

/// Segmenter first (pixel cross-entropy), then the predictor with the
/// segmenter frozen. Throws on an empty dataset or missing masks.
TrainLog train_classifier(QualityClassifier<float>& f, const synth::Dataset& data, const ClassifierTraining& hyper,
                          Rng& rng, const ProgressFn& progress = {});
TrainLog train_oracle(Oracle<float>& oracle, const synth::Dataset& data, const TrainOptions& hyper, Rng& rng,
                      const ProgressFn& progress = {});
TrainLog train_features(FeatureNet<float>& net, const synth::Dataset& data, const FeatureTraining& hyper, Rng& rng,
                        const ProgressFn& progress = {});

// ---- evaluation ----

double balanced_accuracy(std::span<const int> truth, std::span<const int> predicted);
/// Mean over mask classes of intersection-over-union on `data`.
double segmentation_iou(const QualityClassifier<float>& f, const synth::Dataset& data);
double classifier_balanced_accuracy(const QualityClassifier<float>& f, const synth::Dataset& data);
double oracle_balanced_accuracy(const Oracle<float>& oracle, const synth::Dataset& data);

// ---- persistence ----

/// Checkpoint plus metadata {role, seed, config, ...}; returns the manifest hash.
std::string save_classifier(const QualityClassifier<float>& f, const std::filesystem::path& dir, nlohmann::json meta);
std::string save_oracle(const Oracle<float>& o, const std::filesystem::path& dir, nlohmann::json meta);
std::string save_features(const FeatureNet<float>& n, const std::filesystem::path& dir, nlohmann::json meta);

std::unique_ptr<QualityClassifier<float>> load_classifier(const std::filesystem::path& dir);
std::unique_ptr<Oracle<float>> load_oracle(const std::filesystem::path& dir);
std::unique_ptr<FeatureNet<float>> load_features(const std::filesystem::path& dir);

nlohmann::json to_json(const ClassifierConfig& c);
nlohmann::json to_json(const OracleConfig& c);
nlohmann::json to_json(const FeatureConfig& c);

}  // namespace diffice::models
