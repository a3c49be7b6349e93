#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "brims/tasks.hpp"
#include "doctest.h"

using namespace brims;

namespace {

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "brims_test_tasks";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
    return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
            static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_file(std::uint32_t magic, const std::vector<std::uint32_t>& dims,
                                   const std::vector<std::uint8_t>& payload) {
    auto out = be32(magic);
    for (auto d : dims) {
        const auto b = be32(d);
        out.insert(out.end(), b.begin(), b.end());
    }
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

ImageSample image(std::size_t h, std::size_t w, std::uint64_t seed, std::size_t channels = 1) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageSample img{h, w, channels, std::vector<double>(h * w * channels), 3};
    for (double& p : img.pixels) p = u(rng);
    return img;
}

}  // namespace

TEST_CASE("adding target is the marked sum in the hand example") {
    AddingSample s{{0.1, 0.2, 0.3, 0.4}, {0, 1, 0, 1}, 0.2 + 0.4};
    CHECK(s.target == doctest::Approx(0.6).epsilon(1e-15));
    const auto batch = encode_adding({s}, 2, 0);
    CHECK(batch.length == 4);
    CHECK(batch.features == 3);
    CHECK(batch.targets == std::vector<double>{s.target});
    const std::vector<double> expected{0.1, 0, 0, 0.2, 1, 0, 0.3, 0, 0, 0.4, 0, 1};
    CHECK(batch.inputs == expected);
}

TEST_CASE("gen_adding targets equal the marked sums exactly") {
    for (std::size_t k : {1, 2, 3, 5}) {
        const auto samples = adding_samples(30, k, 50, 7 + k);
        const auto batch = gen_adding(30, k, 50, 7 + k);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            CHECK(std::accumulate(s.markers.begin(), s.markers.end(), 0u) == k);
            double total = 0.0;
            std::size_t marked = 0;
            for (std::size_t t = 0; t < 30; ++t) {
                CHECK(s.values[t] >= 0.0);
                CHECK(s.values[t] < 1.0);
                CHECK(batch.value(t, i, 0) == s.values[t]);
                if (s.markers[t]) total += s.values[t];
                const double m1 = batch.value(t, i, 1), m2 = batch.value(t, i, 2);
                if (k == 2) {
                    CHECK(m1 + m2 == s.markers[t]);
                    if (s.markers[t]) CHECK((marked++ == 0 ? m1 : m2) == 1.0);
                } else {
                    CHECK(m1 == s.markers[t]);
                    CHECK(m2 == s.markers[t]);
                }
            }
            CHECK(s.target == total);
            CHECK(batch.targets[i] == total);
        }
    }
}

TEST_CASE("k = T marks everything and generation is pure in the seed") {
    for (const auto& s : adding_samples(6, 6, 5, 3)) {
        CHECK(std::all_of(s.markers.begin(), s.markers.end(), [](auto m) { return m == 1; }));
        CHECK(s.target == std::accumulate(s.values.begin(), s.values.end(), 0.0));
    }
    const auto a = gen_adding(40, 2, 20, 11), b = gen_adding(40, 2, 20, 11), c = gen_adding(40, 2, 20, 12);
    CHECK(a.inputs == b.inputs);
    CHECK(a.targets == b.targets);
    CHECK(a.inputs != c.inputs);
    CHECK_THROWS_AS(gen_adding(3, 4, 1, 0), ValidationError);
    CHECK_THROWS_AS(gen_adding(3, 0, 1, 0), ValidationError);
}

TEST_CASE("marker positions are uniform over pairs") {
    // Chi-square over the 10 unordered pairs of T = 5 positions.
    const auto samples = adding_samples(5, 2, 20000, 5);
    std::vector<double> counts(25, 0.0);
    for (const auto& s : samples) {
        std::vector<std::size_t> at;
        for (std::size_t t = 0; t < 5; ++t)
            if (s.markers[t]) at.push_back(t);
        counts[at[0] * 5 + at[1]] += 1;
    }
    double chi2 = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i + 1; j < 5; ++j) chi2 += std::pow(counts[i * 5 + j] - 2000.0, 2) / 2000.0;
    CHECK(chi2 < 27.9);  // 99.9th percentile at 9 degrees of freedom
}

TEST_CASE("predict-mean baseline is k/12 and matches simulation") {
    CHECK(predict_mean_baseline_mse(2) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
    CHECK(predict_mean_baseline_mse(1) == doctest::Approx(1.0 / 12.0).epsilon(1e-15));
    const auto samples = adding_samples(10, 3, 200000, 9);
    double se = 0.0;
    for (const auto& s : samples) se += (s.target - 1.5) * (s.target - 1.5);
    CHECK(se / samples.size() == doctest::Approx(0.25).epsilon(0.01));
    CHECK(reported_random_prediction(2) == 0.5);
    CHECK(reported_random_prediction(10) == 9.161);
    CHECK_FALSE(reported_random_prediction(7).has_value());
}

TEST_CASE("adding samples round-trip through the NDJSON cache") {
    const auto samples = adding_samples(12, 2, 9, 4);
    const auto path = scratch("adding.ndjson");
    write_adding_ndjson(path, samples);
    const auto back = read_adding_ndjson(path);
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(back[i].values == samples[i].values);
        CHECK(back[i].markers == samples[i].markers);
        CHECK(back[i].target == samples[i].target);
    }
    CHECK_THROWS_AS(read_adding_ndjson(scratch("missing.ndjson")), FormatError);
}

TEST_CASE("IDX parses the standard image and label headers") {
    const auto images = parse_idx(idx_file(0x00000803, {60000, 28, 28}, std::vector<std::uint8_t>(60000 * 28 * 28)));
    CHECK(images.magic == 0x00000803);
    CHECK(images.dims == std::vector<std::size_t>{60000, 28, 28});
    CHECK(images.bytes.size() == 60000u * 28 * 28);

    const auto labels = parse_idx(idx_file(0x00000801, {3}, {1, 7, 2}));
    CHECK(labels.magic == 0x00000801);
    CHECK(labels.bytes == std::vector<std::uint8_t>{1, 7, 2});
}

TEST_CASE("IDX rejects truncated, malformed and oversized files") {
    CHECK_THROWS_AS(parse_idx(idx_file(0x00000801, {3}, {1, 7})), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_file(0x00000803, {2, 2, 2}, {1, 2, 3})), FormatError);
    CHECK_THROWS_AS(parse_idx({0, 0, 8}), FormatError);
    CHECK_THROWS_AS(parse_idx(be32(0x00000803)), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_file(0x01000801, {1}, {0})), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_file(0x00000d01, {1}, {0})), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_file(0x00000800, {}, {})), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_file(0x00000801, {2}, {1, 2, 3})), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_file(0x00000804, {0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {})),
                    FormatError);
    try {
        parse_idx(idx_file(0x00000801, {5}, {1, 2}), "labels.idx");
        FAIL("expected a FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("labels.idx") != std::string::npos);
        CHECK(std::string(e.what()).find("payload") != std::string::npos);
    }
}

TEST_CASE("IDX files round-trip and pair images with labels") {
    std::vector<ImageSample> samples;
    for (std::size_t i = 0; i < 4; ++i) {
        ImageSample img{3, 2, 1, {}, i * 2};
        for (std::size_t p = 0; p < 6; ++p) img.pixels.push_back(static_cast<double>((i * 40 + p * 17) % 256) / 255.0);
        samples.push_back(img);
    }
    const auto ip = scratch("img.idx"), lp = scratch("lbl.idx");
    save_idx_images(ip, lp, samples);
    CHECK(load_idx(ip).magic == 0x00000803);
    CHECK(load_idx_labels(lp) == std::vector<std::size_t>{0, 2, 4, 6});
    const auto back = load_idx_images(ip, lp);
    REQUIRE(back.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(back[i].height == 3);
        CHECK(back[i].width == 2);
        CHECK(back[i].label == samples[i].label);
        for (std::size_t p = 0; p < 6; ++p) CHECK(std::abs(back[i].pixels[p] - samples[i].pixels[p]) <= 1e-15);
    }
    CHECK_THROWS_AS(load_idx_images(lp, ip), FormatError);
    const IdxArray raw{0x00000801, {2}, {9, 8}};
    CHECK(parse_idx(serialize_idx(raw)).bytes == raw.bytes);
    CHECK_THROWS_AS(load_idx(scratch("absent.idx")), FormatError);
}

TEST_CASE("nearest resampling follows the floor index map") {
    const auto img = image(5, 7, 1);
    const auto same = resample_nearest(img, 5, 7);
    CHECK(same.pixels == img.pixels);

    const ImageSample two{2, 2, 1, {0.1, 0.2, 0.3, 0.4}, 0};
    CHECK(resample_nearest(two, 1, 1).pixels == std::vector<double>{0.1});

    ImageSample board{4, 4, 1, {}, 0};
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) board.pixels.push_back(static_cast<double>(r * 4 + c));
    CHECK(resample_nearest(board, 2, 2).pixels == std::vector<double>{0, 2, 8, 10});

    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{14, 14}, {16, 16}, {19, 19}, {24, 24}, {3, 11}}) {
        const auto out = resample_nearest(image(14, 14, 2), h, w);
        const auto src = image(14, 14, 2);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) CHECK(out.at(r, c) == src.at(r * 14 / h, c * 14 / w));
    }
    CHECK_THROWS_AS(resample_nearest(img, 0, 3), ValidationError);
}

TEST_CASE("scan-line order is row-major and invertible") {
    const ImageSample g{2, 2, 1, {0.1, 0.2, 0.3, 0.4}, 0};
    const auto seq = scanline_sequence(g);
    CHECK(seq.length == 4);
    CHECK(seq.values == g.pixels);
    const auto rgb = image(3, 5, 4, 3);
    const auto s3 = scanline_sequence(rgb);
    CHECK(s3.length == 15);
    CHECK(s3.features == 3);
    CHECK(unscan(s3, 3, 5, 3).pixels == rgb.pixels);
    CHECK_THROWS_AS(unscan(s3, 4, 4), DimensionError);
}

TEST_CASE("corrupt_pixels replaces exactly floor(rho T) positions") {
    const auto seq = scanline_sequence(image(32, 32, 5));
    CHECK(corrupt_pixels(seq, 0.0, 1).values == seq.values);

    std::vector<std::size_t> replaced;
    const auto quarter = corrupt_pixels(seq, 0.25, 2, &replaced);
    CHECK(replaced.size() == 256);
    CHECK(std::adjacent_find(replaced.begin(), replaced.end()) == replaced.end());
    std::size_t untouched = 0;
    for (std::size_t t = 0; t < 1024; ++t) {
        const bool listed = std::binary_search(replaced.begin(), replaced.end(), t);
        if (quarter.values[t] == seq.values[t]) ++untouched;
        if (!listed) CHECK(quarter.values[t] == seq.values[t]);
    }
    CHECK(untouched == 1024 - 256);

    corrupt_pixels(seq, 1.0, 3, &replaced);
    CHECK(replaced.size() == 1024);
    CHECK(corrupt_pixels(seq, 0.5, 4).values == corrupt_pixels(seq, 0.5, 4).values);
    CHECK(corrupt_pixels(seq, 0.5, 4).values != corrupt_pixels(seq, 0.5, 5).values);
    CHECK_THROWS_AS(corrupt_pixels(seq, 1.5, 0), ValidationError);
    CHECK_THROWS_AS(corrupt_pixels(seq, -0.1, 0), ValidationError);
}

TEST_CASE("synthetic digits are deterministic, in range and cover every class") {
    const auto a = synthesize_digits(60, 8), b = synthesize_digits(60, 8);
    std::vector<int> seen(10, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].pixels == b[i].pixels);
        CHECK(a[i].height == 28);
        CHECK(a[i].label < 10);
        seen[a[i].label] = 1;
        for (double p : a[i].pixels) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
        CHECK(*std::max_element(a[i].pixels.begin(), a[i].pixels.end()) > 0.5);
    }
    CHECK(std::count(seen.begin(), seen.end(), 1) == 10);
    CHECK(synthesize_digits(5, 9)[0].pixels != a[0].pixels);
}

TEST_CASE("image batches stack resampled scans in step-major layout") {
    const std::vector<ImageSample> images{image(6, 6, 1), image(6, 6, 2)};
    const auto batch = image_batch(images, 3, 3, 0.0, 0);
    CHECK(batch.length == 9);
    CHECK(batch.count == 2);
    CHECK(batch.labels == std::vector<std::size_t>{3, 3});
    for (std::size_t i = 0; i < 2; ++i) {
        const auto seq = scanline_sequence(resample_nearest(images[i], 3, 3));
        for (std::size_t t = 0; t < 9; ++t) CHECK(batch.value(t, i, 0) == seq.values[t]);
    }
    const auto steps = batch.steps({1});
    REQUIRE(steps.size() == 9);
    CHECK(steps[4].shape() == Shape{1, 1});
    CHECK(steps[4].data()[0] == batch.value(4, 1, 0));
    const auto sub = batch.subset({1});
    CHECK(sub.count == 1);
    CHECK(sub.value(8, 0, 0) == batch.value(8, 1, 0));
    CHECK_THROWS_AS(batch.steps({2}), DimensionError);

    const auto noisy = image_batch(images, 3, 3, 0.5, 7);
    std::size_t changed = 0;
    for (std::size_t t = 0; t < 9; ++t) changed += noisy.value(t, 0, 0) != batch.value(t, 0, 0);
    CHECK(changed == 4);
    CHECK(noisy.meta.corruption == 0.5);
}
