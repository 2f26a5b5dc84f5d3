#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>

#include "diffice/checkpoint.hpp"
#include "diffice/synthdata.hpp"

using namespace diffice;
using namespace diffice::synth;

namespace {

PhantomSpec ideal_spec() {
    PhantomSpec s;
    s.semi_major = 13.0;
    s.semi_minor = 9.5;
    s.completeness = 1.0;
    s.th = {true, 0.0, 0.0, 0.45, 2.0};
    s.csp = {true, -0.45, 0.0, 0.45, 1.4};
    s.fp = {false, 0.55, 0.0, 0.45, 2.0};
    s.blur_sigma = 0.3;
    s.speckle = 0.1;
    s.noise_seed = 99;
    return s;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("diffice_synth_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("labeling rule") {
    auto s = ideal_spec();
    CHECK(label_spec(s) == Label::SP);

    auto fp = s;
    fp.fp.present = true;
    CHECK(label_spec(fp) == Label::NSP);

    auto blurry = s;
    blurry.blur_sigma = LabelRule{}.blur_max + 0.01;
    CHECK(label_spec(blurry) == Label::NSP);

    auto broken = s;
    broken.completeness = 0.89;
    CHECK(label_spec(broken) == Label::NSP);

    auto no_th = s;
    no_th.th.present = false;
    CHECK(label_spec(no_th) == Label::NSP);

    auto no_csp = s;
    no_csp.csp.present = false;
    CHECK(label_spec(no_csp) == Label::NSP);

    // Rendering noise never enters the rule.
    auto noisy = s;
    noisy.speckle = 0.5;
    noisy.noise_seed = 12345;
    CHECK(label_spec(noisy) == Label::SP);
}

TEST_CASE("concepts follow the spec") {
    auto c = concepts_of(ideal_spec());
    CHECK(c.th);
    CHECK(c.csp);
    CHECK_FALSE(c.fp);
    CHECK(c.skull_complete);
    CHECK(c.sharp);
    CHECK(c.fp_quality == 1.0);
    for (double q : {c.th_quality, c.csp_quality, c.fp_quality}) {
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
    }
}

TEST_CASE("targeted sampling") {
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        auto s = sample_spec(rng, Label::SP);
        CHECK(s.th.present);
        CHECK(s.csp.present);
        CHECK_FALSE(s.fp.present);
        CHECK(s.completeness >= 0.9);
        CHECK(s.blur_sigma <= LabelRule{}.blur_max);
    }
    for (int i = 0; i < 50; ++i) {
        auto s = sample_spec(rng, Label::NSP);
        const bool violated = !s.th.present || !s.csp.present || s.fp.present || s.completeness < 0.9 ||
                              s.blur_sigma > LabelRule{}.blur_max;
        CHECK(violated);
    }
}

TEST_CASE("sampled specs are valid") {
    Rng rng(2);
    for (int i = 0; i < 500; ++i) {
        auto s = sample_spec(rng);
        CHECK(s.completeness >= 0.0);
        CHECK(s.completeness <= 1.0);
        CHECK(s.ring_intensity <= 1.0);
        for (const Blob* b : {&s.th, &s.csp, &s.fp}) {
            CHECK(b->intensity >= 0.0);
            CHECK(b->intensity <= 1.0);
        }
        // Axis-aligned extent of the rotated ellipse stays inside the frame.
        const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
        const double ex = std::hypot(s.semi_major * c, s.semi_minor * sn) + s.ring_half_width;
        const double ey = std::hypot(s.semi_major * sn, s.semi_minor * c) + s.ring_half_width;
        CHECK(s.cx - ex >= 0.0);
        CHECK(s.cx + ex <= kWidth - 1);
        CHECK(s.cy - ey >= 0.0);
        CHECK(s.cy + ey <= kHeight - 1);
    }
}

TEST_CASE("unconditioned specs are roughly 15 percent SP") {
    Rng rng(3);
    int sp = 0;
    const int n = 5000;
    for (int i = 0; i < n; ++i) sp += label_spec(sample_spec(rng)) == Label::SP;
    const double frac = static_cast<double>(sp) / n;
    CHECK(frac > 0.10);
    CHECK(frac < 0.20);
}

TEST_CASE("sampling is deterministic and bounded") {
    Rng a(11), b(11);
    auto sa = sample_spec(a, Label::SP), sb = sample_spec(b, Label::SP);
    CHECK(sa.cx == sb.cx);
    CHECK(sa.noise_seed == sb.noise_seed);

    GeneratorConfig impossible;
    impossible.p_th = 0.0;
    impossible.max_tries = 100;
    Rng c(5);
    CHECK_THROWS_WITH_AS(sample_spec(c, Label::SP, impossible), doctest::Contains("rejection budget"),
                         std::runtime_error);
}

TEST_CASE("render geometry") {
    auto s = ideal_spec();
    s.blur_sigma = 0.0;
    s.speckle = 0.0;
    auto r = render(s);
    REQUIRE(r.image.size() == static_cast<std::size_t>(kPixels));
    REQUIRE(r.mask.size() == static_cast<std::size_t>(kPixels));

    const auto brightest = std::max_element(r.image.begin(), r.image.end()) - r.image.begin();
    CHECK(r.mask[static_cast<std::size_t>(brightest)] == kSkull);

    CHECK(std::count(r.mask.begin(), r.mask.end(), kFossa) == 0);
    CHECK(std::count(r.mask.begin(), r.mask.end(), kThalamus) > 0);
    CHECK(std::count(r.mask.begin(), r.mask.end(), kCavum) > 0);
    for (float v : r.image) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }

    auto with_fp = s;
    with_fp.fp.present = true;
    auto r2 = render(with_fp);
    CHECK(std::count(r2.mask.begin(), r2.mask.end(), kFossa) > 0);
}

TEST_CASE("incomplete rings lose skull pixels") {
    auto s = ideal_spec();
    auto full = render(s);
    s.completeness = 0.5;
    auto half = render(s);
    const auto n_full = std::count(full.mask.begin(), full.mask.end(), kSkull);
    const auto n_half = std::count(half.mask.begin(), half.mask.end(), kSkull);
    CHECK(n_half < 0.65 * n_full);
    CHECK(n_half > 0.35 * n_full);
}

TEST_CASE("render is deterministic") {
    auto s = ideal_spec();
    CHECK(encode_pgm(render(s).image) == encode_pgm(render(s).image));
    auto other = s;
    other.noise_seed = 100;
    CHECK(encode_pgm(render(s).image) != encode_pgm(render(other).image));
}

TEST_CASE("pgm roundtrip") {
    auto r = render(ideal_spec());
    auto q = quantize(r.image);
    CHECK(decode_pgm(encode_pgm(r.image)) == q);
    CHECK(quantize(q) == q);
    CHECK(decode_mask_pgm(encode_mask_pgm(r.mask)) == r.mask);
    CHECK(encode_pgm(Image(kPixels, -1.0f))[15] == 0);
    CHECK_THROWS(decode_pgm("P2\n36 28\n255\n"));
    CHECK_THROWS(encode_pgm(Image(3)));
}

TEST_CASE("dataset class balance") {
    auto ds = generate_dataset(100, 0.15, 4);
    CHECK(ds.size() == 100);
    CHECK(ds.count(Label::SP) == 15);
    CHECK(ds.count(Label::NSP) == 85);
    for (const auto& s : ds.samples) {
        const bool rule = s.concepts.th && s.concepts.csp && !s.concepts.fp && s.concepts.skull_complete && s.concepts.sharp;
        CHECK(rule == (s.label == Label::SP));
    }

    auto paper = generate_dataset(1579, kPaperSpFraction, 4);
    CHECK(paper.count(Label::SP) == 240);
    CHECK(paper.count(Label::NSP) == 1339);
    CHECK_THROWS(generate_dataset(0, 0.5, 1));
}

TEST_CASE("dataset persistence and determinism") {
    auto a = generate_dataset(20, 0.5, 8);
    auto b = generate_dataset(20, 0.5, 8);
    const auto dir_a = temp_dir("a"), dir_b = temp_dir("b");
    const auto ha = save_dataset(a, dir_a);
    CHECK(ha == save_dataset(b, dir_b));
    CHECK(ha.size() == 64);

    auto other = generate_dataset(20, 0.5, 9);
    CHECK(save_dataset(other, temp_dir("c")) != ha);

    auto loaded = load_dataset(dir_a);
    REQUIRE(loaded.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(loaded.samples[i].image == a.samples[i].image);
        CHECK(loaded.samples[i].mask == a.samples[i].mask);
        CHECK(loaded.samples[i].label == a.samples[i].label);
    }
    CHECK(loaded.manifest["counts"]["SP"] == 10);
    CHECK(loaded.manifest["rule_version"] == 1);

    // Corrupted image bytes are detected.
    write_text(dir_a / "images" / "000000.pgm", encode_pgm(Image(kPixels, 0.0f)));
    CHECK_THROWS_WITH(load_dataset(dir_a), doctest::Contains("hash mismatch"));
    CHECK_THROWS(load_dataset(temp_dir("missing")));
}
