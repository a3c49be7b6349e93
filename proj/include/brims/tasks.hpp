#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "brims/tensor.hpp"

namespace brims {

/// Malformed or truncated data file.
class FormatError : public Error {
public:
    using Error::Error;
};

struct SequenceMeta {
    std::size_t length = 0;
    std::size_t height = 0;  // image tasks
    std::size_t width = 0;
    double corruption = 0.0;
    std::size_t summands = 0;  // adding task
    std::uint64_t seed = 0;
};

/// A batch of equal-length sequences with regression targets or class labels.
struct SequenceBatch {
    std::size_t length = 0;
    std::size_t count = 0;
    std::size_t features = 0;
    std::vector<double> inputs;  // [length x count x features]
    std::vector<double> targets;       // regression, one per sample
    std::vector<std::size_t> labels;   // classification, one per sample
    SequenceMeta meta;

    bool classification() const { return !labels.empty(); }
    /// Step inputs for the given samples, each [indices.size() x features].
    std::vector<Tensor> steps(const std::vector<std::size_t>& indices) const;
    SequenceBatch subset(const std::vector<std::size_t>& indices) const;
    double value(std::size_t t, std::size_t sample, std::size_t feature) const {
        return inputs[(t * count + sample) * features + feature];
    }
};

// ---- adding task ----------------------------------------------------------

struct AddingSample {
    std::vector<double> values;         // uniform in [0, 1)
    std::vector<std::uint8_t> markers;  // exactly `summands` ones
    double target = 0.0;                // sum of the marked values
};

/// Samples are a pure function of (length, summands, count, seed). Marker
/// positions are drawn uniformly without replacement.
std::vector<AddingSample> adding_samples(std::size_t length, std::size_t summands, std::size_t count,
                                         std::uint64_t seed);

/// Three input channels per step: the value and two marker channels. With two
/// summands channel 1 flags the earlier and channel 2 the later position;
/// otherwise both channels flag every marked position.
SequenceBatch encode_adding(const std::vector<AddingSample>& samples, std::size_t summands, std::uint64_t seed);

SequenceBatch gen_adding(std::size_t length, std::size_t summands, std::size_t count, std::uint64_t seed);

/// Audit cache: one JSON object per line with keys values, markers, target.
void write_adding_ndjson(const std::filesystem::path& path, const std::vector<AddingSample>& samples);
std::vector<AddingSample> read_adding_ndjson(const std::filesystem::path& path);

/// Expected squared error of always predicting k/2 for a sum of k uniforms: k/12.
double predict_mean_baseline_mse(std::size_t summands);

/// Values reported for the "Random Prediction" column of the original adding
/// results (k = 2, 3, 4, 5, 10); kept for reference output only.
std::optional<double> reported_random_prediction(std::size_t summands);

// ---- images ---------------------------------------------------------------

struct ImageSample {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<double> pixels;  // [height x width x channels] in [0, 1]
    std::size_t label = 0;

    double at(std::size_t r, std::size_t c, std::size_t ch = 0) const {
        return pixels[(r * width + c) * channels + ch];
    }
};

/// Raw IDX array: big-endian header, unsigned-byte payload.
struct IdxArray {
    std::uint32_t magic = 0;
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> bytes;
};

IdxArray load_idx(const std::filesystem::path& path);
IdxArray parse_idx(const std::vector<std::uint8_t>& file, const std::string& name = "<memory>");
std::vector<std::uint8_t> serialize_idx(const IdxArray& array);
void save_idx(const std::filesystem::path& path, const IdxArray& array);

/// Image file (magic 0x00000803) with pixel bytes scaled to [0, 1], paired with
/// a label file (magic 0x00000801).
std::vector<ImageSample> load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels);
std::vector<std::size_t> load_idx_labels(const std::filesystem::path& labels);

/// Nearest-neighbour resampling, source index = floor(dst * src_extent / dst_extent).
/// Used for both down- and upsampling.
ImageSample resample_nearest(const ImageSample& img, std::size_t height, std::size_t width);

struct Sequence {
    std::size_t length = 0;
    std::size_t features = 0;
    std::vector<double> values;  // [length x features]
};

/// Row-major pixel order; channels of one pixel form one step.
Sequence scanline_sequence(const ImageSample& img);
ImageSample unscan(const Sequence& seq, std::size_t height, std::size_t width, std::size_t label = 0);

/// Replaces floor(rho * length) distinct positions, each feature with an
/// independent uniform [0, 1) draw. Returns the positions in `replaced` if given.
Sequence corrupt_pixels(const Sequence& seq, double rho, std::uint64_t seed,
                        std::vector<std::size_t>* replaced = nullptr);

/// Procedurally drawn handwritten-style digits 0-9 (28x28, one channel):
/// stroke skeletons under random affine jitter and stroke width. Pure in seed.
std::vector<ImageSample> synthesize_digits(std::size_t count, std::uint64_t seed, std::size_t size = 28);

/// Packs images into IDX pairs (images: 0x00000803, labels: 0x00000801).
void save_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels,
                     const std::vector<ImageSample>& samples);

/// Resample to (height, width), scan, corrupt, and stack into a batch.
SequenceBatch image_batch(const std::vector<ImageSample>& images, std::size_t height, std::size_t width, double rho,
                          std::uint64_t seed);

}  // namespace brims
