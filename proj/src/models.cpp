#include "diffice/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "diffice/checkpoint.hpp"

namespace diffice::models {

namespace {

constexpr int kChunk = 32;

// Two stride-2 stages take 28x36 down to 7x9.
template <class T>
std::vector<typename ConvTrunk<T>::Layer> layers_for(const std::vector<int>& widths) {
    std::vector<typename ConvTrunk<T>::Layer> out;
    for (std::size_t i = 0; i < widths.size(); ++i) out.push_back({widths[i], (i == 1 || i == 2) ? 2 : 1});
    return out;
}

template <class T>
void check_input(const Tensor<T>& x, const char* op) {
    check_image_shape(x.shape(), op);
}

void check_dataset(const synth::Dataset& data, const char* op, bool need_masks) {
    if (data.size() == 0) throw std::invalid_argument(std::string(op) + ": empty dataset");
    for (const auto& s : data.samples) {
        if (s.image.size() != static_cast<std::size_t>(kPixels)) {
            throw std::invalid_argument(std::string(op) + ": sample with wrong image size");
        }
        if (need_masks && s.mask.size() != static_cast<std::size_t>(kPixels)) {
            throw std::invalid_argument(std::string(op) + ": sample without segmentation mask");
        }
    }
}

std::vector<std::size_t> draw_batch(std::size_t n, int batch, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
    for (auto& i : idx) i = pick(rng);
    return idx;
}

// Images for `idx`, optionally flipped left-right and jittered with noise.
Tensor<float> batch_images(const synth::Dataset& data, std::span<const std::size_t> idx, Rng* augment) {
    std::vector<float> v;
    v.reserve(idx.size() * kPixels);
    std::normal_distribution<float> noise(0.0f, 0.05f);
    for (std::size_t i : idx) {
        const auto& im = data.samples[i].image;
        const bool flip = augment && std::uniform_int_distribution<int>(0, 1)(*augment) == 1;
        for (int y = 0; y < kHeight; ++y) {
            for (int x = 0; x < kWidth; ++x) {
                float p = im[y * kWidth + (flip ? kWidth - 1 - x : x)];
                if (augment) p += noise(*augment);
                v.push_back(p);
            }
        }
    }
    return Tensor<float>::from_data({static_cast<std::int64_t>(idx.size()), 1, kHeight, kWidth}, std::move(v));
}

// Negative log-likelihood of `logp` ([..., K] log-probabilities along `axis`)
// against a weighted one-hot target, averaged over `count` predictions.
Tensor<float> weighted_nll(const Tensor<float>& logp, std::vector<float> target, double count) {
    auto t = Tensor<float>::from_data(logp.shape(), std::move(target));
    return ad::sum(ad::mul(logp, t)) * static_cast<float>(-1.0 / count);
}

template <class T>
std::vector<Tensor<T>> chunks(std::span<const Image> images) {
    std::vector<Tensor<T>> out;
    for (std::size_t s = 0; s < images.size(); s += kChunk) {
        const std::size_t n = std::min<std::size_t>(kChunk, images.size() - s);
        out.push_back(stack_images<T>(images.subspan(s, n)));
    }
    return out;
}

double nll_class_weight(std::size_t count, std::size_t total) {
    return count == 0 ? 0.0 : static_cast<double>(total) / (2.0 * static_cast<double>(count));
}

}  // namespace

// ---- QualityClassifier ----

template <class T>
QualityClassifier<T>::QualityClassifier(const ClassifierConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    Rng seg_rng = make_rng(seed, {1}), pred_rng = make_rng(seed, {2});
    nn::UNetConfig u;
    u.in_channels = 1;
    u.out_channels = synth::kMaskClasses;
    u.widths = cfg.seg_widths;
    seg_ = nn::UNet<T>(u, seg_params_, "seg.", seg_rng);
    trunk_ = ConvTrunk<T>(synth::kMaskClasses + 1, layers_for<T>(cfg.pred_widths), pred_params_, "pred.", pred_rng);
    head_ = nn::Linear<T>::create(pred_params_, "pred.head", trunk_.out_channels(), 2, pred_rng,
                                  cfg.zero_head ? 0.0 : 1.0);
}

template <class T>
Tensor<T> QualityClassifier<T>::segment_logits(const Tensor<T>& x) const {
    check_input(x, "segment_logits");
    return seg_.forward(x);
}

template <class T>
Tensor<T> QualityClassifier<T>::predict_logits(const Tensor<T>& seg_probs, const Tensor<T>& x) const {
    return head_(trunk_(ad::concat<T>({seg_probs, x}, 1)));
}

template <class T>
Tensor<T> QualityClassifier<T>::logits(const Tensor<T>& x) const {
    check_input(x, "classify");
    return predict_logits(ad::softmax(seg_.forward(x), 1), x);
}

template <class T>
std::vector<NamedTensor> QualityClassifier<T>::export_float() const {
    auto out = seg_params_.export_float();
    for (auto& t : pred_params_.export_float()) out.push_back(std::move(t));
    return out;
}

template <class T>
void QualityClassifier<T>::import_float(const std::vector<NamedTensor>& tensors) {
    if (tensors.size() < seg_params_.size()) throw std::runtime_error("classifier checkpoint is truncated");
    const auto split = tensors.begin() + static_cast<std::ptrdiff_t>(seg_params_.size());
    seg_params_.import_float({tensors.begin(), split});
    pred_params_.import_float({split, tensors.end()});
}

template <class T>
std::string QualityClassifier<T>::hash() const {
    return sha256_hex(seg_params_.hash() + pred_params_.hash());
}

template <class T>
Classification classify(const QualityClassifier<T>& f, const Image& x) {
    ad::NoGradGuard ng;
    auto xt = image_tensor<T>(x);
    auto seg = f.segment_logits(xt);
    auto probs = ad::softmax(f.predict_logits(ad::softmax(seg, 1), xt), 1);
    Classification c;
    c.p_sp = static_cast<double>(probs[kSP]);
    c.segmentation.resize(kPixels);
    for (int p = 0; p < kPixels; ++p) {
        int best = 0;
        for (int k = 1; k < synth::kMaskClasses; ++k) {
            if (seg[k * kPixels + p] > seg[best * kPixels + p]) best = k;
        }
        c.segmentation[p] = static_cast<std::uint8_t>(best);
    }
    return c;
}

std::vector<double> predict_sp(const QualityClassifier<float>& f, std::span<const Image> images) {
    ad::NoGradGuard ng;
    std::vector<double> out;
    out.reserve(images.size());
    for (const auto& batch : chunks<float>(images)) {
        auto probs = ad::softmax(f.logits(batch), 1);
        for (std::int64_t n = 0; n < batch.dim(0); ++n) out.push_back(probs[n * 2 + kSP]);
    }
    return out;
}

// ---- Oracle ----

template <class T>
Oracle<T>::Oracle(const OracleConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    Rng rng = make_rng(seed, {3});
    trunk_ = ConvTrunk<T>(1, layers_for<T>(cfg.widths), params_, "oracle.", rng);
    head_ = nn::Linear<T>::create(params_, "oracle.head", trunk_.out_channels(), 2 * kHeads, rng);
}

template <class T>
Tensor<T> Oracle<T>::logits(const Tensor<T>& x) const {
    check_input(x, "oracle_scores");
    auto h = head_(trunk_(x));
    return ad::reshape(h, {h.dim(0), kHeads, 2});
}

namespace {
template <class T>
OracleScores scores_at(const Tensor<T>& probs, std::int64_t n) {
    const std::int64_t base = n * Oracle<T>::kHeads * 2;
    return {static_cast<double>(probs[base + 1]), static_cast<double>(probs[base + 3]),
            static_cast<double>(probs[base + 5]), static_cast<double>(probs[base + 7])};
}
}  // namespace

template <class T>
OracleScores oracle_scores(const Oracle<T>& oracle, const Image& x) {
    ad::NoGradGuard ng;
    return scores_at(ad::softmax(oracle.logits(image_tensor<T>(x)), 2), 0);
}

std::vector<OracleScores> oracle_scores_batch(const Oracle<float>& oracle, std::span<const Image> images) {
    ad::NoGradGuard ng;
    std::vector<OracleScores> out;
    for (const auto& batch : chunks<float>(images)) {
        auto probs = ad::softmax(oracle.logits(batch), 2);
        for (std::int64_t n = 0; n < batch.dim(0); ++n) out.push_back(scores_at(probs, n));
    }
    return out;
}

// ---- FeatureNet ----

template <class T>
FeatureNet<T>::FeatureNet(const FeatureConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    Rng rng = make_rng(seed, {4});
    trunk_ = ConvTrunk<T>(1, layers_for<T>(cfg.widths), params_, "feat.", rng);
    head_ = nn::Linear<T>::create(params_, "feat.head", trunk_.out_channels(), 2 * kFeatureTasks, rng);
}

template <class T>
Tensor<T> FeatureNet<T>::task_logits(const Tensor<T>& x) const {
    auto h = head_(features(x));
    return ad::reshape(h, {h.dim(0), kFeatureTasks, 2});
}

template <class T>
std::vector<double> extract_features(const FeatureNet<T>& net, const Image& x) {
    ad::NoGradGuard ng;
    auto f = net.features(image_tensor<T>(x));
    return std::vector<double>(f.data().begin(), f.data().end());
}

std::vector<std::vector<double>> extract_features_batch(const FeatureNet<float>& net, std::span<const Image> images) {
    ad::NoGradGuard ng;
    std::vector<std::vector<double>> out;
    const auto d = static_cast<std::size_t>(net.dim());
    for (const auto& batch : chunks<float>(images)) {
        auto f = net.features(batch);
        for (std::int64_t n = 0; n < batch.dim(0); ++n) {
            auto row = f.data().subspan(static_cast<std::size_t>(n) * d, d);
            out.emplace_back(row.begin(), row.end());
        }
    }
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / (std::max(std::sqrt(aa), 1e-12) * std::max(std::sqrt(bb), 1e-12));
}

// ---- training ----

TrainLog train_classifier(QualityClassifier<float>& f, const synth::Dataset& data, const ClassifierTraining& hyper,
                          Rng& rng, const ProgressFn& progress) {
    check_dataset(data, "train_classifier", true);
    TrainLog log;

    // Rare structures get more weight so the blobs are not drowned by background.
    std::array<double, synth::kMaskClasses> freq{};
    for (const auto& s : data.samples)
        for (auto m : s.mask) freq[m] += 1.0;
    const double total = std::accumulate(freq.begin(), freq.end(), 0.0);
    std::array<float, synth::kMaskClasses> cls_w{};
    for (int k = 0; k < synth::kMaskClasses; ++k) {
        cls_w[k] = freq[k] > 0 ? static_cast<float>(std::min(8.0, std::sqrt(total / (synth::kMaskClasses * freq[k]))))
                               : 0.0f;
    }

    f.set_trainable(false);
    f.segmenter().set_trainable(true);
    {
        nn::Adam<float> opt(f.segmenter(), {.lr = hyper.segmenter.lr});
        for (int it = 0; it < hyper.segmenter.iterations; ++it) {
            auto idx = draw_batch(data.size(), hyper.segmenter.batch_size, rng);
            auto x = batch_images(data, idx, nullptr);
            const std::size_t B = idx.size();
            std::vector<float> target(B * synth::kMaskClasses * kPixels, 0.0f);
            for (std::size_t b = 0; b < B; ++b) {
                const auto& mask = data.samples[idx[b]].mask;
                for (int p = 0; p < kPixels; ++p) {
                    target[(b * synth::kMaskClasses + mask[p]) * kPixels + p] = cls_w[mask[p]];
                }
            }
            auto logp = ad::log_softmax(f.segment_logits(x), 1);
            auto loss = weighted_nll(logp, std::move(target), static_cast<double>(B) * kPixels);
            opt.zero_grad();
            loss.backward();
            opt.step();
            log.segmenter_loss.push_back(loss.item());
            if (progress) progress("segmenter", it, loss.item());
        }
        opt.zero_grad();
    }
    f.segmenter().set_trainable(false);

    // Predictor on top of the frozen segmenter; balanced class weights.
    const std::size_t n_sp = data.count(synth::Label::SP), n_nsp = data.size() - n_sp;
    const std::array<float, 2> lab_w{static_cast<float>(nll_class_weight(n_nsp, data.size())),
                                     static_cast<float>(nll_class_weight(n_sp, data.size()))};
    f.predictor().set_trainable(true);
    {
        nn::Adam<float> opt(f.predictor(), {.lr = hyper.predictor.lr});
        for (int it = 0; it < hyper.predictor.iterations; ++it) {
            auto idx = draw_batch(data.size(), hyper.predictor.batch_size, rng);
            auto x = batch_images(data, idx, nullptr);
            Tensor<float> probs;
            {
                ad::NoGradGuard ng;
                probs = ad::softmax(f.segment_logits(x), 1);
            }
            std::vector<float> target(idx.size() * 2, 0.0f);
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const int y = static_cast<int>(data.samples[idx[b]].label);
                target[b * 2 + y] = lab_w[y];
            }
            auto logp = ad::log_softmax(f.predict_logits(probs, x), 1);
            auto loss = weighted_nll(logp, std::move(target), static_cast<double>(idx.size()));
            opt.zero_grad();
            loss.backward();
            opt.step();
            log.predictor_loss.push_back(loss.item());
            if (progress) progress("predictor", it, loss.item());
        }
        opt.zero_grad();
    }
    f.set_trainable(false);
    return log;
}

TrainLog train_oracle(Oracle<float>& oracle, const synth::Dataset& data, const TrainOptions& hyper, Rng& rng,
                      const ProgressFn& progress) {
    check_dataset(data, "train_oracle", false);
    TrainLog log;
    const std::size_t n_sp = data.count(synth::Label::SP), n_nsp = data.size() - n_sp;
    const std::array<float, 2> lab_w{static_cast<float>(nll_class_weight(n_nsp, data.size())),
                                     static_cast<float>(nll_class_weight(n_sp, data.size()))};
    oracle.parameters().set_trainable(true);
    nn::Adam<float> opt(oracle.parameters(), {.lr = hyper.lr});
    for (int it = 0; it < hyper.iterations; ++it) {
        auto idx = draw_batch(data.size(), hyper.batch_size, rng);
        auto x = batch_images(data, idx, nullptr);
        std::vector<float> target(idx.size() * Oracle<float>::kHeads * 2, 0.0f);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const auto& s = data.samples[idx[b]];
            const int y = static_cast<int>(s.label);
            const int heads[] = {y, s.concepts.th ? 1 : 0, s.concepts.csp ? 1 : 0, s.concepts.fp ? 0 : 1};
            float* row = target.data() + b * Oracle<float>::kHeads * 2;
            row[heads[0]] = lab_w[y];
            for (int h = 1; h < Oracle<float>::kHeads; ++h) row[h * 2 + heads[h]] = 1.0f;
        }
        auto logp = ad::log_softmax(oracle.logits(x), 2);
        auto loss = weighted_nll(logp, std::move(target), static_cast<double>(idx.size()) * Oracle<float>::kHeads);
        opt.zero_grad();
        loss.backward();
        opt.step();
        log.loss.push_back(loss.item());
        if (progress) progress("oracle", it, loss.item());
    }
    opt.zero_grad();
    oracle.parameters().set_trainable(false);
    return log;
}

TrainLog train_features(FeatureNet<float>& net, const synth::Dataset& data, const FeatureTraining& hyper, Rng& rng,
                        const ProgressFn& progress) {
    check_dataset(data, "train_features", false);
    TrainLog log;
    net.parameters().set_trainable(true);
    nn::Adam<float> opt(net.parameters(), {.lr = hyper.opt.lr});
    Rng aug = make_rng(rng(), {5});
    for (int it = 0; it < hyper.opt.iterations; ++it) {
        auto idx = draw_batch(data.size(), hyper.opt.batch_size, rng);
        auto x = batch_images(data, idx, hyper.augment ? &aug : nullptr);
        std::vector<float> target(idx.size() * kFeatureTasks * 2, 0.0f);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const auto& c = data.samples[idx[b]].concepts;
            const bool tasks[kFeatureTasks] = {c.th, c.csp, c.fp, c.skull_complete, c.sharp};
            for (int k = 0; k < kFeatureTasks; ++k) target[(b * kFeatureTasks + k) * 2 + (tasks[k] ? 1 : 0)] = 1.0f;
        }
        auto logp = ad::log_softmax(net.task_logits(x), 2);
        auto loss = weighted_nll(logp, std::move(target), static_cast<double>(idx.size()) * kFeatureTasks);
        opt.zero_grad();
        loss.backward();
        opt.step();
        log.loss.push_back(loss.item());
        if (progress) progress("features", it, loss.item());
    }
    opt.zero_grad();
    net.parameters().set_trainable(false);
    return log;
}

// ---- evaluation ----

double balanced_accuracy(std::span<const int> truth, std::span<const int> predicted) {
    if (truth.size() != predicted.size() || truth.empty()) throw std::invalid_argument("balanced_accuracy: bad input");
    double hit[2] = {0, 0}, tot[2] = {0, 0};
    for (std::size_t i = 0; i < truth.size(); ++i) {
        tot[truth[i]] += 1;
        hit[truth[i]] += truth[i] == predicted[i];
    }
    double acc = 0.0;
    int classes = 0;
    for (int k = 0; k < 2; ++k) {
        if (tot[k] > 0) {
            acc += hit[k] / tot[k];
            ++classes;
        }
    }
    return acc / classes;
}

double segmentation_iou(const QualityClassifier<float>& f, const synth::Dataset& data) {
    check_dataset(data, "segmentation_iou", true);
    std::array<double, synth::kMaskClasses> inter{}, uni{};
    ad::NoGradGuard ng;
    const auto images = data.images();
    std::size_t offset = 0;
    for (const auto& batch : chunks<float>(images)) {
        auto seg = f.segment_logits(batch);
        for (std::int64_t n = 0; n < batch.dim(0); ++n, ++offset) {
            const auto& mask = data.samples[offset].mask;
            const float* s = seg.data().data() + n * synth::kMaskClasses * kPixels;
            for (int p = 0; p < kPixels; ++p) {
                int best = 0;
                for (int k = 1; k < synth::kMaskClasses; ++k)
                    if (s[k * kPixels + p] > s[best * kPixels + p]) best = k;
                for (int k = 0; k < synth::kMaskClasses; ++k) {
                    const bool a = best == k, b = mask[p] == k;
                    inter[k] += a && b;
                    uni[k] += a || b;
                }
            }
        }
    }
    double sum = 0.0;
    int classes = 0;
    for (int k = 0; k < synth::kMaskClasses; ++k) {
        if (uni[k] > 0) {
            sum += inter[k] / uni[k];
            ++classes;
        }
    }
    return sum / classes;
}

double classifier_balanced_accuracy(const QualityClassifier<float>& f, const synth::Dataset& data) {
    const auto images = data.images();
    const auto p = predict_sp(f, images);
    std::vector<int> truth, pred;
    for (std::size_t i = 0; i < p.size(); ++i) {
        truth.push_back(static_cast<int>(data.samples[i].label));
        pred.push_back(p[i] > 0.5 ? kSP : kNSP);
    }
    return balanced_accuracy(truth, pred);
}

double oracle_balanced_accuracy(const Oracle<float>& oracle, const synth::Dataset& data) {
    const auto images = data.images();
    const auto s = oracle_scores_batch(oracle, images);
    std::vector<int> truth, pred;
    for (std::size_t i = 0; i < s.size(); ++i) {
        truth.push_back(static_cast<int>(data.samples[i].label));
        pred.push_back(s[i].overall > 0.5 ? kSP : kNSP);
    }
    return balanced_accuracy(truth, pred);
}

// ---- persistence ----

nlohmann::json to_json(const ClassifierConfig& c) {
    return {{"seg_widths", c.seg_widths}, {"pred_widths", c.pred_widths}, {"zero_head", c.zero_head}};
}
nlohmann::json to_json(const OracleConfig& c) { return {{"widths", c.widths}}; }
nlohmann::json to_json(const FeatureConfig& c) { return {{"widths", c.widths}}; }

namespace {

nlohmann::json with_model(nlohmann::json meta, const char* role, std::uint64_t seed, nlohmann::json config) {
    if (meta.is_null()) meta = nlohmann::json::object();
    meta["role"] = role;
    meta["seed"] = seed;
    meta["config"] = std::move(config);
    return meta;
}

LoadedCheckpoint load_role(const std::filesystem::path& dir, const std::string& role) {
    auto ck = load_checkpoint(dir);
    if (ck.metadata.value("role", "") != role) {
        throw std::runtime_error("checkpoint at " + dir.string() + " is not a " + role + " model");
    }
    return ck;
}

}  // namespace

std::string save_classifier(const QualityClassifier<float>& f, const std::filesystem::path& dir, nlohmann::json meta) {
    return save_checkpoint(dir, f.export_float(), with_model(std::move(meta), "classifier", f.seed(), to_json(f.config())));
}

std::string save_oracle(const Oracle<float>& o, const std::filesystem::path& dir, nlohmann::json meta) {
    return save_checkpoint(dir, o.parameters().export_float(),
                           with_model(std::move(meta), "oracle", o.seed(), to_json(o.config())));
}

std::string save_features(const FeatureNet<float>& n, const std::filesystem::path& dir, nlohmann::json meta) {
    const std::string role = meta.is_object() ? meta.value("role", "features") : "features";
    return save_checkpoint(dir, n.parameters().export_float(),
                           with_model(std::move(meta), role.c_str(), n.seed(), to_json(n.config())));
}

std::unique_ptr<QualityClassifier<float>> load_classifier(const std::filesystem::path& dir) {
    auto ck = load_role(dir, "classifier");
    const auto& c = ck.metadata.at("config");
    ClassifierConfig cfg;
    cfg.seg_widths = c.at("seg_widths").get<std::vector<int>>();
    cfg.pred_widths = c.at("pred_widths").get<std::vector<int>>();
    cfg.zero_head = c.at("zero_head").get<bool>();
    auto f = std::make_unique<QualityClassifier<float>>(cfg, ck.metadata.at("seed").get<std::uint64_t>());
    f->import_float(ck.tensors);
    f->set_trainable(false);
    return f;
}

std::unique_ptr<Oracle<float>> load_oracle(const std::filesystem::path& dir) {
    auto ck = load_role(dir, "oracle");
    OracleConfig cfg;
    cfg.widths = ck.metadata.at("config").at("widths").get<std::vector<int>>();
    auto o = std::make_unique<Oracle<float>>(cfg, ck.metadata.at("seed").get<std::uint64_t>());
    o->parameters().import_float(ck.tensors);
    o->parameters().set_trainable(false);
    return o;
}

std::unique_ptr<FeatureNet<float>> load_features(const std::filesystem::path& dir) {
    auto ck = load_checkpoint(dir);
    const std::string role = ck.metadata.value("role", "");
    if (role.rfind("features", 0) != 0) throw std::runtime_error("checkpoint at " + dir.string() + " is not a feature model");
    FeatureConfig cfg;
    cfg.widths = ck.metadata.at("config").at("widths").get<std::vector<int>>();
    auto n = std::make_unique<FeatureNet<float>>(cfg, ck.metadata.at("seed").get<std::uint64_t>());
    n->parameters().import_float(ck.tensors);
    n->parameters().set_trainable(false);
    return n;
}

#define DIFFICE_INSTANTIATE(T)                                                        \
    template class QualityClassifier<T>;                                              \
    template class Oracle<T>;                                                         \
    template class FeatureNet<T>;                                                     \
    template Classification classify(const QualityClassifier<T>&, const Image&);     \
    template OracleScores oracle_scores(const Oracle<T>&, const Image&);              \
    template std::vector<double> extract_features(const FeatureNet<T>&, const Image&);

DIFFICE_INSTANTIATE(float)
DIFFICE_INSTANTIATE(double)

#undef DIFFICE_INSTANTIATE

}  // namespace diffice::models
