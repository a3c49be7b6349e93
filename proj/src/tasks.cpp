#include "brims/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"

namespace brims {

namespace {

using Rng = std::mt19937_64;

constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr std::uint32_t kImageMagic = 0x00000803;
// Largest payload accepted from a header before any allocation happens.
constexpr std::size_t kMaxIdxBytes = std::size_t{1} << 32;

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// First `k` entries of a seeded partial Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    return idx;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

std::vector<Tensor> SequenceBatch::steps(const std::vector<std::size_t>& indices) const {
    std::vector<Tensor> out;
    out.reserve(length);
    for (std::size_t t = 0; t < length; ++t) {
        std::vector<double> vals(indices.size() * features);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= count) throw DimensionError("sample index out of range");
            const double* src = inputs.data() + (t * count + indices[i]) * features;
            std::copy(src, src + features, vals.begin() + static_cast<std::ptrdiff_t>(i * features));
        }
        out.push_back(Tensor::from({indices.size(), features}, std::move(vals)));
    }
    return out;
}

SequenceBatch SequenceBatch::subset(const std::vector<std::size_t>& indices) const {
    SequenceBatch out;
    out.length = length;
    out.count = indices.size();
    out.features = features;
    out.meta = meta;
    out.inputs.resize(length * out.count * features);
    for (std::size_t t = 0; t < length; ++t) {
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= count) throw DimensionError("sample index out of range");
            const double* src = inputs.data() + (t * count + indices[i]) * features;
            std::copy(src, src + features, out.inputs.begin() + static_cast<std::ptrdiff_t>((t * out.count + i) * features));
        }
    }
    for (std::size_t i : indices) {
        if (!targets.empty()) out.targets.push_back(targets[i]);
        if (!labels.empty()) out.labels.push_back(labels[i]);
    }
    return out;
}

// ---- adding ---------------------------------------------------------------

std::vector<AddingSample> adding_samples(std::size_t length, std::size_t summands, std::size_t count,
                                         std::uint64_t seed) {
    if (summands == 0) throw ValidationError("adding task needs at least one summand");
    if (summands > length) {
        throw ValidationError("adding task: k = " + std::to_string(summands) + " exceeds length " +
                              std::to_string(length));
    }
    Rng rng(seed);
    std::vector<AddingSample> out(count);
    for (auto& s : out) {
        s.values.resize(length);
        for (double& v : s.values) v = uniform01(rng);
        s.markers.assign(length, 0);
        auto marked = sample_without_replacement(length, summands, rng);
        std::sort(marked.begin(), marked.end());
        double total = 0.0;
        for (std::size_t p : marked) {
            s.markers[p] = 1;
            total += s.values[p];
        }
        s.target = total;
    }
    return out;
}

SequenceBatch encode_adding(const std::vector<AddingSample>& samples, std::size_t summands, std::uint64_t seed) {
    SequenceBatch batch;
    batch.length = samples.empty() ? 0 : samples.front().values.size();
    batch.count = samples.size();
    batch.features = 3;
    batch.meta.length = batch.length;
    batch.meta.summands = summands;
    batch.meta.seed = seed;
    batch.inputs.assign(batch.length * batch.count * 3, 0.0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.values.size() != batch.length) throw DimensionError("adding samples differ in length");
        std::size_t seen = 0;
        for (std::size_t t = 0; t < batch.length; ++t) {
            double* step = batch.inputs.data() + (t * batch.count + i) * 3;
            step[0] = s.values[t];
            if (!s.markers[t]) continue;
            if (summands == 2) {
                step[seen == 0 ? 1 : 2] = 1.0;
            } else {
                step[1] = 1.0;
                step[2] = 1.0;
            }
            ++seen;
        }
        batch.targets.push_back(s.target);
    }
    return batch;
}

SequenceBatch gen_adding(std::size_t length, std::size_t summands, std::size_t count, std::uint64_t seed) {
    return encode_adding(adding_samples(length, summands, count, seed), summands, seed);
}

void write_adding_ndjson(const std::filesystem::path& path, const std::vector<AddingSample>& samples) {
    std::ofstream out(path);
    if (!out) throw Error(path.string() + ": cannot write");
    for (const auto& s : samples) {
        nlohmann::ordered_json j;
        j["values"] = s.values;
        j["markers"] = s.markers;
        j["target"] = s.target;
        out << j.dump() << '\n';
    }
    if (!out) throw Error(path.string() + ": write failed");
}

std::vector<AddingSample> read_adding_ndjson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(path.string() + ": cannot open");
    std::vector<AddingSample> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            AddingSample s;
            s.values = j.at("values").get<std::vector<double>>();
            s.markers = j.at("markers").get<std::vector<std::uint8_t>>();
            s.target = j.at("target").get<double>();
            if (s.values.size() != s.markers.size()) throw FormatError("values and markers differ in length");
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

double predict_mean_baseline_mse(std::size_t summands) {
    if (summands == 0) throw ValidationError("adding task needs at least one summand");
    return static_cast<double>(summands) / 12.0;
}

std::optional<double> reported_random_prediction(std::size_t summands) {
    switch (summands) {
        case 2: return 0.500;
        case 3: return 1.000;
        case 4: return 1.333;
        case 5: return 2.500;
        case 10: return 9.161;
        default: return std::nullopt;
    }
}

// ---- IDX ------------------------------------------------------------------

IdxArray parse_idx(const std::vector<std::uint8_t>& file, const std::string& name) {
    if (file.size() < 4) throw FormatError(name + ": truncated header");
    if (file[0] != 0 || file[1] != 0) throw FormatError(name + ": bad magic");
    if (file[2] != 0x08) throw FormatError(name + ": unsupported element type (only unsigned bytes)");
    IdxArray out;
    out.magic = read_be32(file, 0);
    const std::size_t rank = file[3];
    if (rank == 0) throw FormatError(name + ": bad magic (zero dimensions)");
    if (file.size() < 4 + 4 * rank) throw FormatError(name + ": truncated header");
    std::size_t total = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t d = read_be32(file, 4 + 4 * i);
        if (d != 0 && total > kMaxIdxBytes / d) throw FormatError(name + ": dimension overflow");
        total *= d;
        out.dims.push_back(d);
    }
    const std::size_t offset = 4 + 4 * rank;
    const std::size_t available = file.size() - offset;
    if (available < total) {
        throw FormatError(name + ": payload length " + std::to_string(available) + " shorter than the " +
                          std::to_string(total) + " bytes declared");
    }
    if (available > total) throw FormatError(name + ": trailing bytes after payload");
    out.bytes.assign(file.begin() + static_cast<std::ptrdiff_t>(offset), file.end());
    return out;
}

IdxArray load_idx(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string() + ": cannot open");
    std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_idx(file, path.string());
}

std::vector<std::uint8_t> serialize_idx(const IdxArray& array) {
    std::size_t total = 1;
    for (std::size_t d : array.dims) total *= d;
    if (total != array.bytes.size()) throw DimensionError("IDX payload does not match its dimensions");
    std::vector<std::uint8_t> out;
    out.reserve(4 + 4 * array.dims.size() + total);
    write_be32(out, 0x00000800u | static_cast<std::uint32_t>(array.dims.size()));
    for (std::size_t d : array.dims) write_be32(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), array.bytes.begin(), array.bytes.end());
    return out;
}

void save_idx(const std::filesystem::path& path, const IdxArray& array) {
    const auto bytes = serialize_idx(array);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(path.string() + ": cannot write");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(path.string() + ": write failed");
}

std::vector<std::size_t> load_idx_labels(const std::filesystem::path& labels) {
    const IdxArray a = load_idx(labels);
    if (a.magic != kLabelMagic) throw FormatError(labels.string() + ": bad magic for a label file");
    return {a.bytes.begin(), a.bytes.end()};
}

std::vector<ImageSample> load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const IdxArray a = load_idx(images);
    if (a.magic != kImageMagic) throw FormatError(images.string() + ": bad magic for an image file");
    const auto y = load_idx_labels(labels);
    const std::size_t n = a.dims[0], h = a.dims[1], w = a.dims[2];
    if (y.size() != n) throw FormatError(labels.string() + ": label count does not match image count");
    if (h == 0 || w == 0) throw FormatError(images.string() + ": zero image extent");
    std::vector<ImageSample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& s = out[i];
        s.height = h;
        s.width = w;
        s.label = y[i];
        s.pixels.resize(h * w);
        for (std::size_t p = 0; p < h * w; ++p) s.pixels[p] = a.bytes[i * h * w + p] / 255.0;
    }
    return out;
}

void save_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels,
                     const std::vector<ImageSample>& samples) {
    IdxArray img, lab;
    const std::size_t h = samples.empty() ? 0 : samples.front().height;
    const std::size_t w = samples.empty() ? 0 : samples.front().width;
    img.dims = {samples.size(), h, w};
    lab.dims = {samples.size()};
    for (const auto& s : samples) {
        if (s.height != h || s.width != w || s.channels != 1) {
            throw DimensionError("IDX export needs equally sized single-channel images");
        }
        for (double p : s.pixels) img.bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0)));
        if (s.label > 255) throw ValidationError("label does not fit in a byte");
        lab.bytes.push_back(static_cast<std::uint8_t>(s.label));
    }
    save_idx(images, img);
    save_idx(labels, lab);
}

// ---- image sequences ------------------------------------------------------

ImageSample resample_nearest(const ImageSample& img, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw ValidationError("resample target extents must be positive");
    if (img.height == 0 || img.width == 0) throw ValidationError("cannot resample an empty image");
    ImageSample out;
    out.height = height;
    out.width = width;
    out.channels = img.channels;
    out.label = img.label;
    out.pixels.resize(height * width * img.channels);
    for (std::size_t r = 0; r < height; ++r) {
        const std::size_t sr = r * img.height / height;
        for (std::size_t c = 0; c < width; ++c) {
            const std::size_t sc = c * img.width / width;
            for (std::size_t ch = 0; ch < img.channels; ++ch) {
                out.pixels[(r * width + c) * img.channels + ch] = img.at(sr, sc, ch);
            }
        }
    }
    return out;
}

Sequence scanline_sequence(const ImageSample& img) {
    return Sequence{img.height * img.width, img.channels, img.pixels};
}

ImageSample unscan(const Sequence& seq, std::size_t height, std::size_t width, std::size_t label) {
    if (height * width != seq.length) throw DimensionError("sequence length does not match image extents");
    ImageSample img;
    img.height = height;
    img.width = width;
    img.channels = seq.features;
    img.pixels = seq.values;
    img.label = label;
    return img;
}

Sequence corrupt_pixels(const Sequence& seq, double rho, std::uint64_t seed, std::vector<std::size_t>* replaced) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("corruption fraction must lie in [0, 1]");
    const auto count = static_cast<std::size_t>(std::floor(rho * static_cast<double>(seq.length)));
    Rng rng(seed);
    auto positions = sample_without_replacement(seq.length, count, rng);
    Sequence out = seq;
    for (std::size_t p : positions) {
        for (std::size_t f = 0; f < seq.features; ++f) out.values[p * seq.features + f] = uniform01(rng);
    }
    if (replaced) {
        std::sort(positions.begin(), positions.end());
        *replaced = std::move(positions);
    }
    return out;
}

SequenceBatch image_batch(const std::vector<ImageSample>& images, std::size_t height, std::size_t width, double rho,
                          std::uint64_t seed) {
    SequenceBatch batch;
    batch.length = height * width;
    batch.count = images.size();
    batch.features = images.empty() ? 1 : images.front().channels;
    batch.meta = SequenceMeta{batch.length, height, width, rho, 0, seed};
    batch.inputs.resize(batch.length * batch.count * batch.features);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].channels != batch.features) throw DimensionError("images differ in channel count");
        Sequence seq = scanline_sequence(resample_nearest(images[i], height, width));
        if (rho > 0.0) seq = corrupt_pixels(seq, rho, seed ^ (0x9e3779b97f4a7c15ull * (i + 1)));
        for (std::size_t t = 0; t < batch.length; ++t) {
            for (std::size_t f = 0; f < batch.features; ++f) {
                batch.inputs[(t * batch.count + i) * batch.features + f] = seq.values[t * batch.features + f];
            }
        }
        batch.labels.push_back(images[i].label);
    }
    return batch;
}

// ---- synthetic digits -----------------------------------------------------

namespace {

struct Point {
    double x, y;
};
using Stroke = std::vector<Point>;

Stroke ellipse(double cx, double cy, double rx, double ry, double from = 0.0, double to = 2.0 * M_PI,
               int segments = 16) {
    Stroke s;
    for (int i = 0; i <= segments; ++i) {
        const double a = from + (to - from) * i / segments;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

std::vector<Stroke> digit_strokes(std::size_t digit) {
    switch (digit) {
        case 0: return {ellipse(0.5, 0.5, 0.26, 0.38)};
        case 1: return {{{0.36, 0.26}, {0.52, 0.12}, {0.52, 0.88}}};
        case 2:
            return {{{0.26, 0.3}, {0.34, 0.16}, {0.5, 0.11}, {0.66, 0.16}, {0.72, 0.3}, {0.66, 0.46}, {0.26, 0.88},
                     {0.76, 0.88}}};
        case 3:
            return {{{0.26, 0.16}, {0.5, 0.1}, {0.68, 0.18}, {0.68, 0.36}, {0.46, 0.48}, {0.7, 0.58}, {0.72, 0.76},
                     {0.56, 0.9}, {0.26, 0.84}}};
        case 4: return {{{0.64, 0.9}, {0.64, 0.1}, {0.22, 0.64}, {0.8, 0.64}}};
        case 5:
            return {{{0.74, 0.11}, {0.32, 0.11}, {0.28, 0.46}, {0.5, 0.4}, {0.7, 0.5}, {0.74, 0.7}, {0.6, 0.88},
                     {0.4, 0.9}, {0.25, 0.82}}};
        case 6:
            return {{{0.7, 0.12}, {0.46, 0.2}, {0.3, 0.44}, {0.28, 0.7}, {0.4, 0.88}, {0.6, 0.88}, {0.72, 0.72},
                     {0.64, 0.55}, {0.44, 0.52}, {0.29, 0.62}}};
        case 7: return {{{0.22, 0.11}, {0.78, 0.11}, {0.44, 0.9}}};
        case 8: return {ellipse(0.5, 0.3, 0.19, 0.18), ellipse(0.5, 0.7, 0.24, 0.2)};
        case 9:
            return {ellipse(0.5, 0.32, 0.22, 0.2), {{0.72, 0.32}, {0.68, 0.6}, {0.6, 0.9}}};
        default: throw ValidationError("digit out of range");
    }
}

double segment_distance(Point p, Point a, Point b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
    return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

std::vector<ImageSample> synthesize_digits(std::size_t count, std::uint64_t seed, std::size_t size) {
    if (size == 0) throw ValidationError("digit image size must be positive");
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<ImageSample> out(count);
    for (auto& img : out) {
        img.label = std::uniform_int_distribution<std::size_t>(0, 9)(rng);
        img.height = img.width = size;
        img.channels = 1;
        auto strokes = digit_strokes(img.label);
        const double scale = 0.85 + 0.12 * u(rng);
        const double angle = 0.22 * u(rng);
        const double shear = 0.18 * u(rng);
        const double tx = 0.07 * u(rng), ty = 0.07 * u(rng);
        const double thickness = 0.075 + 0.025 * u(rng);
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (auto& s : strokes) {
            for (auto& p : s) {
                double x = p.x - 0.5 + 0.025 * u(rng), y = p.y - 0.5 + 0.025 * u(rng);
                x += shear * y;
                const double rx = ca * x - sa * y, ry = sa * x + ca * y;
                p = {0.5 + scale * rx + tx, 0.5 + scale * ry + ty};
            }
        }
        img.pixels.assign(size * size, 0.0);
        const double pixel = 1.0 / static_cast<double>(size);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                const Point p{(c + 0.5) * pixel, (r + 0.5) * pixel};
                double d = std::numeric_limits<double>::infinity();
                for (const auto& s : strokes) {
                    for (std::size_t i = 0; i + 1 < s.size(); ++i) d = std::min(d, segment_distance(p, s[i], s[i + 1]));
                }
                const double v = std::clamp(1.0 - std::max(0.0, d - 0.5 * thickness) / pixel, 0.0, 1.0);
                // Quantize like an 8-bit scan so IDX export is lossless.
                img.pixels[r * size + c] = std::round(v * 255.0) / 255.0;
            }
        }
    }
    return out;
}

}  // namespace brims
