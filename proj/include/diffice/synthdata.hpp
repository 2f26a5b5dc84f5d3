#pragma once

// Procedural fetal-head-like phantoms: an elliptical skull ring plus three
// Gaussian structures (TH, CSP, FP), blurred and speckled. The standard
// plane label is a pure function of the spec, never of the rendered noise.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffice/image.hpp"
#include "diffice/random.hpp"
#include "json.hpp"

namespace diffice::synth {

enum class Label : int { NSP = 0, SP = 1 };

enum MaskClass : std::uint8_t { kBackground = 0, kSkull = 1, kThalamus = 2, kCavum = 3, kFossa = 4 };
inline constexpr int kMaskClasses = 5;

const char* to_string(Label l);

struct Blob {
    bool present = false;
    double u = 0.0, v = 0.0;  // position in skull-normalized coordinates (major, minor axis)
    double intensity = 0.0;   // [0, 1]
    double radius = 2.0;      // Gaussian sigma in pixels
};

struct PhantomSpec {
    double cy = kHeight / 2.0, cx = kWidth / 2.0;  // skull center (pixels)
    double semi_major = 14.0, semi_minor = 10.5;   // along x / y before rotation
    double rotation = 0.0;                          // radians
    double ring_intensity = 0.9;                    // [0, 1]
    double ring_half_width = 0.8;                   // pixels
    double completeness = 1.0;                      // visible fraction of the ring, [0, 1]
    double gap_angle = 0.0;                         // center of the missing arc
    Blob th, csp, fp;
    double blur_sigma = 0.0;
    double speckle = 0.0;       // log-normal multiplicative noise level
    double background_gain = 1.0;
    std::uint64_t noise_seed = 0;
};

struct LabelRule {
    double completeness_min = 0.9;
    double blur_max = 0.8;
    int version = 1;
};

struct Concepts {
    bool th = false, csp = false, fp = false;
    bool skull_complete = false, sharp = false;
    double th_quality = 0.0, csp_quality = 0.0, fp_quality = 0.0;  // [0, 1], higher is better
};

struct PhantomSample {
    Image image;                     // [-1, 1]
    std::vector<std::uint8_t> mask;  // MaskClass per pixel
    Concepts concepts;
    Label label = Label::NSP;
};

/// Difficulty knobs. Defaults make roughly 15% of unconditioned specs SP.
struct GeneratorConfig {
    LabelRule rule;
    double p_th = 0.8, p_csp = 0.75, p_fp = 0.3;
    double p_complete = 0.6, p_sharp = 0.6;
    double incomplete_min = 0.45, incomplete_max = 0.8;
    double sharp_blur_max = 0.6, soft_blur_min = 1.1, soft_blur_max = 1.8;
    double speckle_min = 0.08, speckle_max = 0.2;
    int max_tries = 10000;
};

Label label_spec(const PhantomSpec& spec, const LabelRule& rule = {});
Concepts concepts_of(const PhantomSpec& spec, const LabelRule& rule = {});

/// Draws a valid spec; with a target label, rejection-samples until the rule
/// agrees (throws after `max_tries`).
PhantomSpec sample_spec(Rng& rng, std::optional<Label> target = std::nullopt, const GeneratorConfig& cfg = {});

PhantomSample render(const PhantomSpec& spec, const LabelRule& rule = {});

/// Quantizes to the 8-bit grid used on disk so in-memory and persisted
/// datasets are identical.
Image quantize(const Image& im);

struct Dataset {
    std::vector<PhantomSample> samples;
    nlohmann::json manifest;

    std::size_t size() const { return samples.size(); }
    std::vector<Image> images() const;
    std::size_t count(Label l) const;
};

/// `sp_fraction` of the n samples (rounded) are SP, the rest NSP; sample i
/// is drawn from its own stream derived from `seed`.
Dataset generate_dataset(int n, double sp_fraction, std::uint64_t seed, const GeneratorConfig& cfg = {});

/// SP share of the clinical head dataset: 240 of 1579.
inline constexpr double kPaperSpFraction = 240.0 / 1579.0;

/// Writes images/ and masks/ as PGM plus manifest.json; returns the manifest hash.
std::string save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// ---- PGM ----
std::string encode_pgm(const Image& im);
std::string encode_mask_pgm(const std::vector<std::uint8_t>& mask);
Image decode_pgm(const std::string& bytes);
std::vector<std::uint8_t> decode_mask_pgm(const std::string& bytes);
/// Side-by-side strip of several images, for visual inspection.
std::string encode_strip_pgm(const std::vector<Image>& images);

}  // namespace diffice::synth
