#include "diffice/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "diffice/checkpoint.hpp"

namespace diffice::synth {

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
bool bernoulli(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

Blob draw_blob(Rng& rng, bool present, double u_lo, double u_hi, double v_half, double r_lo, double r_hi) {
    Blob b;
    b.present = present;
    b.u = uniform(rng, u_lo, u_hi);
    b.v = uniform(rng, -v_half, v_half);
    b.intensity = uniform(rng, 0.35, 0.5);
    b.radius = uniform(rng, r_lo, r_hi);
    return b;
}

struct Frame {
    double cos_r, sin_r;
};

// Pixel offset of a point given in skull-normalized coordinates.
void blob_center(const PhantomSpec& s, const Blob& b, double& y, double& x) {
    const double lx = b.u * s.semi_major, ly = b.v * s.semi_minor;
    const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
    x = s.cx + lx * c - ly * sn;
    y = s.cy + lx * sn + ly * c;
}

bool inside_bounds(const PhantomSpec& s) {
    const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
    const double ext_x = std::hypot(s.semi_major * c, s.semi_minor * sn) + s.ring_half_width + 0.5;
    const double ext_y = std::hypot(s.semi_major * sn, s.semi_minor * c) + s.ring_half_width + 0.5;
    return s.cx - ext_x >= 0 && s.cx + ext_x <= kWidth - 1 && s.cy - ext_y >= 0 && s.cy + ext_y <= kHeight - 1;
}

void gaussian_blur(std::vector<double>& img, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double z = 0.0;
    for (int i = -radius; i <= radius; ++i) z += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= z;
    std::vector<double> tmp(img.size());
    for (int y = 0; y < kHeight; ++y)
        for (int x = 0; x < kWidth; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img[y * kWidth + std::clamp(x + i, 0, kWidth - 1)];
            tmp[y * kWidth + x] = acc;
        }
    for (int y = 0; y < kHeight; ++y)
        for (int x = 0; x < kWidth; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp(y + i, 0, kHeight - 1) * kWidth + x];
            img[y * kWidth + x] = acc;
        }
}

std::uint8_t to_byte(float v) {
    const double q = std::round((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
    return static_cast<std::uint8_t>(q);
}

float from_byte(std::uint8_t b) { return static_cast<float>(b / 127.5 - 1.0); }

std::string pgm_header(int w, int h, int maxval) {
    return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
}

std::vector<std::uint8_t> decode_pgm_bytes(const std::string& bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    if (token() != "P5") throw std::runtime_error("decode_pgm: not a binary PGM");
    const int w = std::stoi(token()), h = std::stoi(token()), maxval = std::stoi(token());
    if (w != kWidth || h != kHeight || maxval > 255) {
        throw std::runtime_error("decode_pgm: unexpected geometry " + std::to_string(w) + "x" + std::to_string(h));
    }
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos + static_cast<std::size_t>(kPixels)) throw std::runtime_error("decode_pgm: truncated");
    return std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + kPixels));
}

}  // namespace

const char* to_string(Label l) { return l == Label::SP ? "SP" : "NSP"; }

Label label_spec(const PhantomSpec& spec, const LabelRule& rule) {
    const bool sp = spec.th.present && spec.csp.present && !spec.fp.present &&
                    spec.completeness >= rule.completeness_min && spec.blur_sigma <= rule.blur_max;
    return sp ? Label::SP : Label::NSP;
}

Concepts concepts_of(const PhantomSpec& spec, const LabelRule& rule) {
    Concepts c;
    c.th = spec.th.present;
    c.csp = spec.csp.present;
    c.fp = spec.fp.present;
    c.skull_complete = spec.completeness >= rule.completeness_min;
    c.sharp = spec.blur_sigma <= rule.blur_max;
    const double sharpness = 1.0 / (1.0 + spec.blur_sigma);
    c.th_quality = spec.th.present ? sharpness * std::min(1.0, spec.th.intensity / 0.5) : 0.0;
    c.csp_quality = spec.csp.present ? sharpness * std::min(1.0, spec.csp.intensity / 0.5) : 0.0;
    c.fp_quality = spec.fp.present ? 1.0 - std::min(1.0, spec.fp.intensity / 0.5) : 1.0;
    return c;
}

PhantomSpec sample_spec(Rng& rng, std::optional<Label> target, const GeneratorConfig& cfg) {
    for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
        PhantomSpec s;
        s.cy = kHeight / 2.0 + uniform(rng, -1.0, 1.0);
        s.cx = kWidth / 2.0 + uniform(rng, -1.5, 1.5);
        s.semi_major = uniform(rng, 11.5, 14.0);
        s.semi_minor = uniform(rng, 8.5, 10.0);
        s.rotation = uniform(rng, -0.25, 0.25);
        s.ring_intensity = uniform(rng, 0.8, 1.0);
        s.ring_half_width = uniform(rng, 0.7, 1.0);
        s.completeness = bernoulli(rng, cfg.p_complete) ? uniform(rng, 0.92, 1.0)
                                                        : uniform(rng, cfg.incomplete_min, cfg.incomplete_max);
        s.gap_angle = uniform(rng, -std::numbers::pi, std::numbers::pi);
        s.th = draw_blob(rng, bernoulli(rng, cfg.p_th), -0.05, 0.1, 0.08, 1.8, 2.4);
        s.csp = draw_blob(rng, bernoulli(rng, cfg.p_csp), -0.5, -0.4, 0.05, 1.2, 1.6);
        s.fp = draw_blob(rng, bernoulli(rng, cfg.p_fp), 0.5, 0.62, 0.1, 1.8, 2.4);
        s.blur_sigma = bernoulli(rng, cfg.p_sharp) ? uniform(rng, 0.0, cfg.sharp_blur_max)
                                                   : uniform(rng, cfg.soft_blur_min, cfg.soft_blur_max);
        s.speckle = uniform(rng, cfg.speckle_min, cfg.speckle_max);
        s.background_gain = uniform(rng, 0.85, 1.15);
        s.noise_seed = rng();
        if (!inside_bounds(s)) continue;
        if (!target || label_spec(s, cfg.rule) == *target) return s;
    }
    throw std::runtime_error("sample_spec: rejection budget of " + std::to_string(cfg.max_tries) + " exceeded");
}

PhantomSample render(const PhantomSpec& s, const LabelRule& rule) {
    std::vector<double> img(kPixels, 0.0);
    PhantomSample out;
    out.mask.assign(kPixels, kBackground);
    const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
    const double gap_half = (1.0 - std::clamp(s.completeness, 0.0, 1.0)) * std::numbers::pi;

    struct Placed {
        const Blob* blob;
        double y, x;
        MaskClass cls;
    };
    std::vector<Placed> blobs;
    for (auto [b, cls] : {std::pair{&s.th, kThalamus}, std::pair{&s.csp, kCavum}, std::pair{&s.fp, kFossa}}) {
        if (!b->present) continue;
        Placed p{b, 0, 0, cls};
        blob_center(s, *b, p.y, p.x);
        blobs.push_back(p);
    }

    for (int y = 0; y < kHeight; ++y) {
        for (int x = 0; x < kWidth; ++x) {
            const double dx = x - s.cx, dy = y - s.cy;
            const double lx = dx * c + dy * sn, ly = -dx * sn + dy * c;
            const double rho = std::hypot(lx / s.semi_major, ly / s.semi_minor);
            const double r_px = std::hypot(lx, ly);
            const double radial = rho > 0 ? (rho - 1.0) * r_px / rho : -r_px;  // signed distance to ring, approx.

            const double inside = std::clamp(0.5 - radial, 0.0, 1.0);
            double v = s.background_gain * (0.08 + 0.12 * inside);
            const int idx = y * kWidth + x;
            for (const auto& p : blobs) {
                const double d2 = (y - p.y) * (y - p.y) + (x - p.x) * (x - p.x);
                v += p.blob->intensity * std::exp(-0.5 * d2 / (p.blob->radius * p.blob->radius));
                if (std::sqrt(d2) <= 1.2 * p.blob->radius) out.mask[idx] = p.cls;
            }

            double coverage = std::clamp(s.ring_half_width + 0.5 - std::abs(radial), 0.0, 1.0);
            if (coverage > 0.0 && gap_half > 0.0) {
                double delta = std::atan2(ly / s.semi_minor, lx / s.semi_major) - s.gap_angle;
                delta = std::remainder(delta, 2.0 * std::numbers::pi);
                const double arc_px = (std::abs(delta) - gap_half) * r_px;
                coverage *= std::clamp(arc_px + 0.5, 0.0, 1.0);
            }
            v = v * (1.0 - coverage) + s.ring_intensity * coverage;
            if (coverage >= 0.5) out.mask[idx] = kSkull;
            img[idx] = v;
        }
    }

    gaussian_blur(img, s.blur_sigma);
    if (s.speckle > 0.0) {
        Rng noise(s.noise_seed);
        std::normal_distribution<double> z(0.0, 1.0);
        for (auto& v : img) v *= std::exp(s.speckle * z(noise) - 0.5 * s.speckle * s.speckle);
    }
    out.image.resize(kPixels);
    for (int i = 0; i < kPixels; ++i) out.image[i] = static_cast<float>(std::clamp(2.0 * img[i] - 1.0, -1.0, 1.0));
    out.concepts = concepts_of(s, rule);
    out.label = label_spec(s, rule);
    return out;
}

Image quantize(const Image& im) {
    Image q(im.size());
    for (std::size_t i = 0; i < im.size(); ++i) q[i] = from_byte(to_byte(im[i]));
    return q;
}

std::vector<Image> Dataset::images() const {
    std::vector<Image> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image);
    return out;
}

std::size_t Dataset::count(Label l) const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [l](const PhantomSample& s) { return s.label == l; }));
}

namespace {

nlohmann::json concepts_json(const Concepts& c) {
    return {{"th", c.th},
            {"csp", c.csp},
            {"fp", c.fp},
            {"skull_complete", c.skull_complete},
            {"sharp", c.sharp},
            {"th_quality", c.th_quality},
            {"csp_quality", c.csp_quality},
            {"fp_quality", c.fp_quality}};
}

Concepts concepts_from_json(const nlohmann::json& j) {
    Concepts c;
    c.th = j.at("th");
    c.csp = j.at("csp");
    c.fp = j.at("fp");
    c.skull_complete = j.at("skull_complete");
    c.sharp = j.at("sharp");
    c.th_quality = j.at("th_quality");
    c.csp_quality = j.at("csp_quality");
    c.fp_quality = j.at("fp_quality");
    return c;
}

std::string sample_name(std::size_t i) {
    std::ostringstream os;
    os.width(6);
    os.fill('0');
    os << i;
    return os.str();
}

}  // namespace

Dataset generate_dataset(int n, double sp_fraction, std::uint64_t seed, const GeneratorConfig& cfg) {
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
    if (!(sp_fraction >= 0.0 && sp_fraction <= 1.0)) throw std::invalid_argument("generate_dataset: bad SP fraction");
    const int n_sp = static_cast<int>(std::lround(n * sp_fraction));
    std::vector<Label> labels(static_cast<std::size_t>(n), Label::NSP);
    std::fill(labels.begin(), labels.begin() + n_sp, Label::SP);
    Rng order = make_rng(seed, {0x6f72646572ULL});
    std::shuffle(labels.begin(), labels.end(), order);

    Dataset ds;
    nlohmann::json entries = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        Rng rng = make_rng(seed, {1, static_cast<std::uint64_t>(i)});
        auto spec = sample_spec(rng, labels[static_cast<std::size_t>(i)], cfg);
        auto sample = render(spec, cfg.rule);
        sample.image = quantize(sample.image);
        entries.push_back({{"id", sample_name(static_cast<std::size_t>(i))},
                           {"label", to_string(sample.label)},
                           {"image_sha256", sha256_hex(encode_pgm(sample.image))},
                           {"mask_sha256", sha256_hex(encode_mask_pgm(sample.mask))},
                           {"concepts", concepts_json(sample.concepts)}});
        ds.samples.push_back(std::move(sample));
    }
    ds.manifest = {{"format", "diffice-phantoms/1"},
                   {"rule_version", cfg.rule.version},
                   {"rule", {{"completeness_min", cfg.rule.completeness_min}, {"blur_max", cfg.rule.blur_max}}},
                   {"seed", seed},
                   {"n", n},
                   {"sp_fraction", sp_fraction},
                   {"counts", {{"SP", ds.count(Label::SP)}, {"NSP", ds.count(Label::NSP)}}},
                   {"geometry", {{"height", kHeight}, {"width", kWidth}}},
                   {"samples", entries}};
    return ds;
}

std::string save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    const auto& entries = ds.manifest.at("samples");
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const std::string id = entries[i].at("id");
        write_text(dir / "images" / (id + ".pgm"), encode_pgm(ds.samples[i].image));
        write_text(dir / "masks" / (id + ".pgm"), encode_mask_pgm(ds.samples[i].mask));
    }
    const std::string text = canonical_dump(ds.manifest);
    write_text(dir / "manifest.json", text);
    return sha256_hex(text);
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    if (!std::filesystem::exists(mpath)) throw std::runtime_error("missing dataset manifest: " + mpath.string());
    Dataset ds;
    ds.manifest = nlohmann::json::parse(read_text(mpath));
    for (const auto& e : ds.manifest.at("samples")) {
        const std::string id = e.at("id");
        PhantomSample s;
        const std::string img_bytes = read_text(dir / "images" / (id + ".pgm"));
        if (sha256_hex(img_bytes) != e.at("image_sha256")) throw std::runtime_error("image hash mismatch: " + id);
        s.image = decode_pgm(img_bytes);
        s.mask = decode_mask_pgm(read_text(dir / "masks" / (id + ".pgm")));
        s.label = e.at("label") == "SP" ? Label::SP : Label::NSP;
        s.concepts = concepts_from_json(e.at("concepts"));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

std::string encode_pgm(const Image& im) {
    if (im.size() != static_cast<std::size_t>(kPixels)) throw std::invalid_argument("encode_pgm: wrong image size");
    std::string out = pgm_header(kWidth, kHeight, 255);
    for (float v : im) out.push_back(static_cast<char>(to_byte(v)));
    return out;
}

std::string encode_mask_pgm(const std::vector<std::uint8_t>& mask) {
    if (mask.size() != static_cast<std::size_t>(kPixels)) throw std::invalid_argument("encode_mask_pgm: wrong size");
    std::string out = pgm_header(kWidth, kHeight, kMaskClasses - 1);
    out.append(mask.begin(), mask.end());
    return out;
}

Image decode_pgm(const std::string& bytes) {
    auto raw = decode_pgm_bytes(bytes);
    Image im(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) im[i] = from_byte(raw[i]);
    return im;
}

std::vector<std::uint8_t> decode_mask_pgm(const std::string& bytes) { return decode_pgm_bytes(bytes); }

std::string encode_strip_pgm(const std::vector<Image>& images) {
    const int n = static_cast<int>(images.size());
    const int w = n * (kWidth + 1) - 1;
    std::string out = pgm_header(w, kHeight, 255);
    for (int y = 0; y < kHeight; ++y) {
        for (int k = 0; k < n; ++k) {
            for (int x = 0; x < kWidth; ++x) out.push_back(static_cast<char>(to_byte(images[k][y * kWidth + x])));
            if (k + 1 < n) out.push_back(static_cast<char>(255));
        }
    }
    return out;
}

}  // namespace diffice::synth
