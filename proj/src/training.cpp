#include "brims/training.hpp"

#include <malloc.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include "brims/ops.hpp"

namespace brims {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::string shortest(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

}  // namespace

// ---- optimization -------------------------------------------------------------

std::string to_string(ClipMode mode) {
    switch (mode) {
        case ClipMode::GlobalNorm: return "global_norm";
        case ClipMode::Value: return "value";
        case ClipMode::None: return "none";
    }
    return "unknown";
}

void validate(const TrainConfig& cfg, const std::string& path) {
    if (!(cfg.learning_rate > 0.0)) throw ConfigError(path + ".learning_rate", "must be positive");
    if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0)) throw ConfigError(path + ".beta1", "must lie in (0, 1)");
    if (!(cfg.beta2 > 0.0 && cfg.beta2 < 1.0)) throw ConfigError(path + ".beta2", "must lie in (0, 1)");
    if (!(cfg.epsilon > 0.0)) throw ConfigError(path + ".epsilon", "must be positive");
    if (cfg.clip_mode != ClipMode::None && !(cfg.clip > 0.0)) throw ConfigError(path + ".clip", "must be positive");
    if (cfg.batch_size == 0) throw ConfigError(path + ".batch_size", "must be positive");
    if (cfg.eval_every == 0) throw ConfigError(path + ".eval_every", "must be positive");
    if (cfg.eval_batch == 0) throw ConfigError(path + ".eval_batch", "must be positive");
}

nlohmann::ordered_json to_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["learning_rate"] = cfg.learning_rate;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["epsilon"] = cfg.epsilon;
    j["clip"] = cfg.clip;
    j["clip_mode"] = to_string(cfg.clip_mode);
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = cfg.seed;
    j["eval_every"] = cfg.eval_every;
    j["eval_batch"] = cfg.eval_batch;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path) {
    JsonFields f(j, path);
    TrainConfig cfg;
    cfg.learning_rate = f.real("learning_rate", cfg.learning_rate);
    cfg.beta1 = f.real("beta1", cfg.beta1);
    cfg.beta2 = f.real("beta2", cfg.beta2);
    cfg.epsilon = f.real("epsilon", cfg.epsilon);
    cfg.clip = f.real("clip", cfg.clip);
    const std::string mode = f.text("clip_mode", to_string(cfg.clip_mode));
    if (mode == "global_norm") {
        cfg.clip_mode = ClipMode::GlobalNorm;
    } else if (mode == "value") {
        cfg.clip_mode = ClipMode::Value;
    } else if (mode == "none") {
        cfg.clip_mode = ClipMode::None;
    } else {
        throw ConfigError(f.path("clip_mode"), "expected global_norm, value or none");
    }
    cfg.epochs = f.size("epochs", cfg.epochs);
    cfg.batch_size = f.size("batch_size", cfg.batch_size);
    cfg.seed = f.u64("seed", cfg.seed);
    cfg.eval_every = f.size("eval_every", cfg.eval_every);
    cfg.eval_batch = f.size("eval_batch", cfg.eval_batch);
    f.finish();
    validate(cfg, path);
    return cfg;
}

OptimizerState OptimizerState::for_parameters(const ParameterList& params) {
    OptimizerState st;
    for (const auto& p : params) {
        st.m.emplace_back(p.tensor.numel(), 0.0);
        st.v.emplace_back(p.tensor.numel(), 0.0);
    }
    return st;
}

void adam_step(const ParameterList& params, OptimizerState& state, const TrainConfig& cfg) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("optimizer state covers " + std::to_string(state.m.size()) + " parameters, model has " +
                             std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& t = params[i].tensor;
        if (state.m[i].size() != t.numel() || state.v[i].size() != t.numel()) {
            throw DimensionError("optimizer moments for " + params[i].name + " do not match shape " +
                                 shape_str(t.shape()));
        }
        if (!t.has_grad()) continue;
        for (double g : t.grad()) {
            if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient in " + params[i].name);
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto data = t.mutable_data();
        const bool has = t.has_grad();
        std::span<const double> grad = has ? t.grad() : std::span<const double>{};
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = has ? grad[k] : 0.0;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            data[k] -= cfg.learning_rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.epsilon);
        }
    }
}

double global_grad_norm(const ParameterList& params) {
    double total = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) total += g * g;
    }
    return std::sqrt(total);
}

double clip_global_norm(const ParameterList& params, double tau) {
    if (!(tau > 0.0)) throw ValidationError("clip threshold must be positive");
    const double norm = global_grad_norm(params);
    if (!(norm > tau)) return 1.0;
    const double s = tau / norm;
    for (const auto& p : params) {
        Tensor t = p.tensor;
        if (!t.has_grad()) continue;
        for (double& g : t.mutable_grad()) g *= s;
    }
    return s;
}

void clip_value(const ParameterList& params, double tau) {
    if (!(tau > 0.0)) throw ValidationError("clip threshold must be positive");
    for (const auto& p : params) {
        Tensor t = p.tensor;
        if (!t.has_grad()) continue;
        for (double& g : t.mutable_grad()) g = std::clamp(g, -tau, tau);
    }
}

// ---- losses -------------------------------------------------------------------

Targets batch_targets(const SequenceBatch& batch, const std::vector<std::size_t>& indices) {
    Targets t;
    for (std::size_t i : indices) {
        if (i >= batch.count) throw DimensionError("sample index out of range");
        if (!batch.targets.empty()) t.values.push_back(batch.targets[i]);
        if (!batch.labels.empty()) t.labels.push_back(batch.labels[i]);
    }
    return t;
}

Tensor head_loss(HeadKind kind, const Tensor& outputs, const Targets& targets) {
    if (outputs.rank() != 2) throw DimensionError("head outputs must be [batch x outputs]");
    const std::size_t b = outputs.dim(0);
    if (kind == HeadKind::Classification) {
        if (targets.labels.size() != b) throw ValidationError("classification loss needs one class label per sample");
        return ops::cross_entropy(outputs, targets.labels);
    }
    if (targets.values.size() != b) throw ValidationError("regression loss needs one real target per sample");
    if (outputs.dim(1) != 1) throw DimensionError("regression head must have a single output");
    return ops::mse(outputs, Tensor::from({b, 1}, targets.values));
}

Tensor loss_head(const Network& net, const NetworkState& final_state, const Targets& targets) {
    return head_loss(net.config().head, net.head(final_state), targets);
}

// ---- tasks --------------------------------------------------------------------

void validate(const TaskConfig& cfg, const std::string& path) {
    if (!(cfg.validation_fraction >= 0.0 && cfg.validation_fraction < 1.0)) {
        throw ConfigError(path + ".validation_fraction", "must lie in [0, 1)");
    }
    if (cfg.kind == TaskKind::Adding) {
        if (cfg.length == 0) throw ConfigError(path + ".length", "must be positive");
        if (cfg.summands == 0 || cfg.summands > cfg.length) throw ConfigError(path + ".summands", "must lie in [1, length]");
    } else {
        if (cfg.height == 0) throw ConfigError(path + ".height", "must be positive");
        if (cfg.width == 0) throw ConfigError(path + ".width", "must be positive");
        if (!(cfg.corruption >= 0.0 && cfg.corruption <= 1.0)) throw ConfigError(path + ".corruption", "must lie in [0, 1]");
        const bool any = !cfg.train_images.empty() || !cfg.train_labels.empty() || !cfg.test_images.empty() ||
                         !cfg.test_labels.empty();
        const bool all = !cfg.train_images.empty() && !cfg.train_labels.empty() && !cfg.test_images.empty() &&
                         !cfg.test_labels.empty();
        if (any && !all) throw ConfigError(path, "IDX sources need train_images, train_labels, test_images and test_labels");
    }
    if (cfg.train_samples == 0 && (cfg.kind == TaskKind::Adding || cfg.train_images.empty())) {
        throw ConfigError(path + ".train_samples", "must be positive");
    }
}

nlohmann::ordered_json to_json(const TaskConfig& cfg) {
    nlohmann::ordered_json j;
    j["kind"] = cfg.kind == TaskKind::Adding ? "adding" : "digits";
    j["seed"] = cfg.seed;
    j["validation_fraction"] = cfg.validation_fraction;
    j["train_samples"] = cfg.train_samples;
    j["test_samples"] = cfg.test_samples;
    if (cfg.kind == TaskKind::Adding) {
        j["length"] = cfg.length;
        j["summands"] = cfg.summands;
    } else {
        j["height"] = cfg.height;
        j["width"] = cfg.width;
        j["corruption"] = cfg.corruption;
        if (!cfg.train_images.empty()) {
            j["train_images"] = cfg.train_images;
            j["train_labels"] = cfg.train_labels;
            j["test_images"] = cfg.test_images;
            j["test_labels"] = cfg.test_labels;
        }
    }
    return j;
}

TaskConfig task_config_from_json(const nlohmann::json& j, const std::string& path) {
    JsonFields f(j, path);
    TaskConfig cfg;
    const std::string kind = f.text("kind", "adding");
    if (kind == "adding") {
        cfg.kind = TaskKind::Adding;
    } else if (kind == "digits") {
        cfg.kind = TaskKind::Digits;
    } else {
        throw ConfigError(f.path("kind"), "expected adding or digits");
    }
    cfg.seed = f.u64("seed", cfg.seed);
    cfg.validation_fraction = f.real("validation_fraction", cfg.validation_fraction);
    cfg.train_samples = f.size("train_samples", cfg.train_samples);
    cfg.test_samples = f.size("test_samples", cfg.test_samples);
    if (cfg.kind == TaskKind::Adding) {
        cfg.length = f.size("length", cfg.length);
        cfg.summands = f.size("summands", cfg.summands);
    } else {
        cfg.height = f.size("height", cfg.height);
        cfg.width = f.size("width", cfg.width);
        cfg.corruption = f.real("corruption", cfg.corruption);
        cfg.train_images = f.text("train_images", "");
        cfg.train_labels = f.text("train_labels", "");
        cfg.test_images = f.text("test_images", "");
        cfg.test_labels = f.text("test_labels", "");
    }
    f.finish();
    validate(cfg, path);
    return cfg;
}

std::string to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "unknown";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::Train;
    if (text == "validation") return Split::Validation;
    if (text == "test") return Split::Test;
    throw ValidationError("unknown split '" + text + "' (expected train, validation or test)");
}

const SequenceBatch& TaskData::split(Split s) const {
    switch (s) {
        case Split::Train: return train;
        case Split::Validation: return validation;
        case Split::Test: return test;
    }
    return test;
}

namespace {

// Seeds of the generated populations, fixed per task seed.
constexpr std::uint64_t kTrainPool = 1, kSplitShuffle = 2, kTestPool = 3;

std::uint64_t split_seed(const TaskConfig& cfg, Split s) { return mix(cfg.seed, 10 + static_cast<std::uint64_t>(s)); }

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout(std::size_t n, double fraction,
                                                                      std::uint64_t seed) {
    auto order = iota_indices(n);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<std::size_t> tr(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
    std::sort(val.begin(), val.end());
    std::sort(tr.begin(), tr.end());
    return {tr, val};
}

template <typename T>
std::vector<T> pick(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(all[i]);
    return out;
}

}  // namespace

TaskData prepare_task(const TaskConfig& cfg) {
    validate(cfg);
    TaskData data;
    data.config = cfg;
    if (cfg.kind == TaskKind::Adding) {
        const SequenceBatch pool = gen_adding(cfg.length, cfg.summands, cfg.train_samples, mix(cfg.seed, kTrainPool));
        auto [tr, val] = holdout(pool.count, cfg.validation_fraction, mix(cfg.seed, kSplitShuffle));
        data.train = pool.subset(tr);
        data.validation = pool.subset(val);
        data.test = gen_adding(cfg.length, cfg.summands, cfg.test_samples, mix(cfg.seed, kTestPool));
        return data;
    }
    std::vector<ImageSample> pool, test;
    if (!cfg.train_images.empty()) {
        pool = load_idx_images(cfg.train_images, cfg.train_labels);
        test = load_idx_images(cfg.test_images, cfg.test_labels);
        if (cfg.train_samples > 0 && cfg.train_samples < pool.size()) pool.resize(cfg.train_samples);
        if (cfg.test_samples > 0 && cfg.test_samples < test.size()) test.resize(cfg.test_samples);
    } else {
        pool = synthesize_digits(cfg.train_samples, mix(cfg.seed, kTrainPool));
        test = synthesize_digits(cfg.test_samples, mix(cfg.seed, kTestPool));
    }
    auto [tr, val] = holdout(pool.size(), cfg.validation_fraction, mix(cfg.seed, kSplitShuffle));
    data.train_images = pick(pool, tr);
    data.validation_images = pick(pool, val);
    data.test_images = std::move(test);
    data.train = image_batch(data.train_images, cfg.height, cfg.width, cfg.corruption, split_seed(cfg, Split::Train));
    data.validation = image_batch(data.validation_images, cfg.height, cfg.width, cfg.corruption,
                                  split_seed(cfg, Split::Validation));
    data.test = image_batch(data.test_images, cfg.height, cfg.width, cfg.corruption, split_seed(cfg, Split::Test));
    return data;
}

bool Shift::identity() const { return !length && !summands && !height && !width && !corruption; }

std::string Shift::label() const {
    std::vector<std::string> parts;
    if (length) parts.push_back("len=" + std::to_string(*length));
    if (summands) parts.push_back("k=" + std::to_string(*summands));
    if (height) parts.push_back("res=" + std::to_string(*height) + "x" + std::to_string(width.value_or(*height)));
    if (corruption) parts.push_back("rho=" + shortest(*corruption));
    if (parts.empty()) return "none";
    std::string out = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) out += "," + parts[i];
    return out;
}

Shift parse_shift(const std::string& text) {
    Shift s;
    if (text.empty() || text == "none") return s;
    std::stringstream ss(text);
    std::string item;
    auto whole = [&](const std::string& key, const std::string& v) {
        std::size_t out = 0;
        auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || out == 0) {
            throw ValidationError("shift '" + text + "': " + key + " expects a positive integer, got '" + v + "'");
        }
        return out;
    };
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ValidationError("shift '" + text + "': expected key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
        if (key == "len") {
            s.length = whole(key, value);
        } else if (key == "k") {
            s.summands = whole(key, value);
        } else if (key == "res") {
            const auto x = value.find('x');
            s.height = whole(key, value.substr(0, x));
            s.width = x == std::string::npos ? *s.height : whole(key, value.substr(x + 1));
        } else if (key == "rho") {
            double rho = 0.0;
            auto res = std::from_chars(value.data(), value.data() + value.size(), rho);
            if (res.ec != std::errc{} || res.ptr != value.data() + value.size() || !(rho >= 0.0 && rho <= 1.0)) {
                throw ValidationError("shift '" + text + "': rho expects a fraction in [0, 1], got '" + value + "'");
            }
            s.corruption = rho;
        } else {
            throw ValidationError("shift '" + text + "': unknown key '" + key + "' (expected len, k, res or rho)");
        }
    }
    return s;
}

SequenceBatch shifted_set(const TaskData& data, const Shift& shift, Split split) {
    const TaskConfig& cfg = data.config;
    if (cfg.kind == TaskKind::Adding) {
        if (shift.height || shift.corruption) {
            throw ValidationError("shift " + shift.label() + " does not apply to the adding task (use len or k)");
        }
        if (shift.identity()) return data.split(split);
        const std::size_t len = shift.length.value_or(cfg.length);
        const std::size_t k = shift.summands.value_or(cfg.summands);
        if (k > len) throw ValidationError("shift " + shift.label() + ": more summands than steps");
        const std::uint64_t seed = split == Split::Test ? mix(cfg.seed, kTestPool) : split_seed(cfg, split);
        return gen_adding(len, k, data.split(split).count, seed);
    }
    if (shift.length || shift.summands) {
        throw ValidationError("shift " + shift.label() + " does not apply to the digits task (use res or rho)");
    }
    if (shift.identity()) return data.split(split);
    const auto& images = split == Split::Train        ? data.train_images
                         : split == Split::Validation ? data.validation_images
                                                      : data.test_images;
    return image_batch(images, shift.height.value_or(cfg.height), shift.width.value_or(cfg.width),
                       shift.corruption.value_or(cfg.corruption), split_seed(cfg, split));
}

// ---- evaluation ---------------------------------------------------------------

Evaluation evaluate(const Network& net, const SequenceBatch& data, std::size_t chunk) {
    if (chunk == 0) throw ValidationError("evaluation chunk must be positive");
    const BrimsConfig& cfg = net.config();
    const bool classify = cfg.head == HeadKind::Classification;
    if (classify != data.classification()) throw ValidationError("head kind does not match the task's targets");
    if (data.features != cfg.input_size) {
        throw DimensionError("task has " + std::to_string(data.features) + " features per step, model expects " +
                             std::to_string(cfg.input_size));
    }
    NoGradScope no_grad;
    Evaluation ev;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < data.count; begin += chunk) {
        const std::size_t end = std::min(data.count, begin + chunk);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        auto raw = data.steps(idx);
        std::vector<Tensor> seq;
        seq.reserve(raw.size());
        for (const auto& x : raw) seq.push_back(net.embed(x, false, 0));
        const auto out = net.head(net.unroll(seq, net.init_state(idx.size())).final_state);
        const auto y = out.data();
        const std::size_t width = out.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* row = y.data() + i * width;
            if (classify) {
                const std::size_t label = data.labels[idx[i]];
                if (label >= width) throw ValidationError("label " + std::to_string(label) + " out of range");
                const double mx = *std::max_element(row, row + width);
                double z = 0.0;
                for (std::size_t c = 0; c < width; ++c) z += std::exp(row[c] - mx);
                loss_sum += std::log(z) + mx - row[label];
                if (static_cast<std::size_t>(std::max_element(row, row + width) - row) == label) ++correct;
            } else {
                const double d = row[0] - data.targets[idx[i]];
                loss_sum += d * d;
            }
        }
    }
    ev.samples = data.count;
    if (data.count > 0) {
        ev.loss = loss_sum / static_cast<double>(data.count);
        ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.count);
    }
    return ev;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "epoch,split,metric,value,seed\n";
    for (const auto& r : rows) {
        out += std::to_string(r.epoch) + "," + r.split + "," + r.metric + "," + g17(r.value) + "," +
               std::to_string(r.seed) + "\n";
    }
    return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(path.string() + ": cannot write");
    out << metrics_csv(rows);
    if (!out) throw Error(path.string() + ": write failed");
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(path.string() + ": cannot open");
    std::string line;
    if (!std::getline(in, line) || line != "epoch,split,metric,value,seed") {
        throw FormatError(path.string() + ": missing metrics header");
    }
    std::vector<MetricRow> rows;
    std::size_t number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 5) throw FormatError(path.string() + ":" + std::to_string(number) + ": expected 5 columns");
        try {
            rows.push_back({std::stoull(cells[0]), cells[1], cells[2], std::stod(cells[3]), std::stoull(cells[4])});
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(number) + ": malformed row");
        }
    }
    return rows;
}

std::vector<ShiftMetric> evaluate_shifted(const Network& net, const TaskData& data, const std::vector<Shift>& shifts,
                                          Split split, std::size_t chunk) {
    std::vector<ShiftMetric> out;
    for (const auto& shift : shifts) {
        const Evaluation ev = evaluate(net, shifted_set(data, shift, split), chunk);
        if (net.config().head == HeadKind::Classification) {
            out.push_back({shift.label(), "accuracy", ev.accuracy});
            out.push_back({shift.label(), "loss", ev.loss});
        } else {
            out.push_back({shift.label(), "mse", ev.loss});
        }
    }
    return out;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

std::vector<ParameterArray> snapshot(const Network& net) {
    std::vector<ParameterArray> out;
    for (const auto& p : net.parameters()) {
        const auto d = p.tensor.data();
        out.push_back({p.name, p.tensor.shape(), std::vector<double>(d.begin(), d.end())});
    }
    return out;
}

void load_arrays(Network& net, const std::vector<ParameterArray>& arrays) {
    const auto params = net.parameters();
    if (params.size() != arrays.size()) {
        throw ValidationError("checkpoint holds " + std::to_string(arrays.size()) + " parameters, model has " +
                              std::to_string(params.size()));
    }
    std::map<std::string, const ParameterArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (const auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw ValidationError("checkpoint lacks parameter " + p.name);
        if (it->second->shape != p.tensor.shape()) {
            throw DimensionError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second->shape) +
                                 ", model expects " + shape_str(p.tensor.shape()));
        }
        Tensor t = p.tensor;
        std::copy(it->second->values.begin(), it->second->values.end(), t.mutable_data().begin());
    }
}

constexpr char kMagic[8] = {'B', 'R', 'I', 'M', 'S', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void text(const std::string& s) {
        u64(s.size());
        out.insert(out.end(), s.begin(), s.end());
    }
    void reals(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    void arrays(const std::vector<ParameterArray>& list) {
        u64(list.size());
        for (const auto& a : list) {
            text(a.name);
            u32(static_cast<std::uint32_t>(a.shape.size()));
            for (std::size_t d : a.shape) u64(d);
            reals(a.values);
        }
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError(name_ + ": truncated checkpoint");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::size_t count(std::size_t unit) {
        const std::uint64_t n = u64();
        if (n > (bytes_.size() - pos_) / unit) throw FormatError(name_ + ": truncated checkpoint");
        return static_cast<std::size_t>(n);
    }
    std::string text() {
        const std::size_t n = count(1);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::vector<double> reals() {
        std::vector<double> v(count(8));
        for (double& x : v) x = f64();
        return v;
    }
    std::vector<ParameterArray> arrays() {
        std::vector<ParameterArray> list(count(1));
        for (auto& a : list) {
            a.name = text();
            const std::uint32_t rank = u32();
            if (rank > 8) throw FormatError(name_ + ": implausible parameter rank");
            for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(static_cast<std::size_t>(u64()));
            a.values = reals();
            if (shape_numel(a.shape) != a.values.size()) {
                throw FormatError(name_ + ": parameter " + a.name + " size does not match its shape");
            }
        }
        return list;
    }
    void magic() {
        need(sizeof kMagic);
        if (std::memcmp(bytes_.data(), kMagic, sizeof kMagic) != 0) throw FormatError(name_ + ": not a checkpoint file");
        pos_ += sizeof kMagic;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

nlohmann::ordered_json trainer_state(const Checkpoint& c) {
    nlohmann::ordered_json j;
    j["epoch"] = c.epoch;
    j["best_epoch"] = c.best_epoch;
    j["best_value"] = c.best_value;
    j["has_best"] = c.has_best;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : c.history) rows.push_back({r.epoch, r.split, r.metric, r.value, r.seed});
    j["history"] = rows;
    return j;
}

}  // namespace

Checkpoint capture(const Network& net, const TrainConfig& train, const TaskConfig& task) {
    Checkpoint c;
    c.model = net.config();
    c.train = train;
    c.task = task;
    c.parameters = snapshot(net);
    c.optimizer = OptimizerState::for_parameters(net.parameters());
    return c;
}

void restore(Network& net, const Checkpoint& ckpt) {
    if (!(net.config() == ckpt.model)) throw ValidationError("checkpoint was written for a different architecture");
    load_arrays(net, ckpt.parameters);
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
    Network net = Network::make(ckpt.model, 0);
    restore(net, ckpt);
    return net;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
    w.u32(kVersion);
    nlohmann::ordered_json config;
    config["model"] = to_json(ckpt.model);
    config["train"] = to_json(ckpt.train);
    config["task"] = to_json(ckpt.task);
    w.text(config.dump());
    w.arrays(ckpt.parameters);
    w.arrays(ckpt.best_parameters);
    w.u64(ckpt.optimizer.step);
    w.u64(ckpt.optimizer.m.size());
    for (std::size_t i = 0; i < ckpt.optimizer.m.size(); ++i) {
        w.reals(ckpt.optimizer.m[i]);
        w.reals(ckpt.optimizer.v[i]);
    }
    w.text(trainer_state(ckpt).dump());
    return std::move(w.out);
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    Reader r(bytes, name);
    r.magic();
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw FormatError(name + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    try {
        const auto config = nlohmann::json::parse(r.text());
        c.model = config_from_json(config.at("model"), "checkpoint.model");
        c.train = train_config_from_json(config.at("train"), "checkpoint.train");
        c.task = task_config_from_json(config.at("task"), "checkpoint.task");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(name + ": bad config blob: " + e.what());
    }
    c.parameters = r.arrays();
    c.best_parameters = r.arrays();
    c.optimizer.step = r.u64();
    const std::size_t moments = r.count(16);
    for (std::size_t i = 0; i < moments; ++i) {
        c.optimizer.m.push_back(r.reals());
        c.optimizer.v.push_back(r.reals());
    }
    try {
        const auto st = nlohmann::json::parse(r.text());
        c.epoch = st.at("epoch").get<std::size_t>();
        c.best_epoch = st.at("best_epoch").get<std::size_t>();
        c.best_value = st.at("best_value").get<double>();
        c.has_best = st.at("has_best").get<bool>();
        for (const auto& row : st.at("history")) {
            c.history.push_back({row.at(0).get<std::size_t>(), row.at(1).get<std::string>(),
                                 row.at(2).get<std::string>(), row.at(3).get<double>(),
                                 row.at(4).get<std::uint64_t>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(name + ": bad trainer state: " + e.what());
    }
    if (!r.done()) throw FormatError(name + ": trailing bytes after checkpoint");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(path.string() + ": cannot write");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path.string() + ": cannot open");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path.string());
}

// ---- training loop ----------------------------------------------------------------

namespace {

// Lower is better for loss-like metrics; accuracy is maximized.
bool improves(bool maximize, double candidate, double best) { return maximize ? candidate > best : candidate < best; }

}  // namespace

namespace {

// Every batch rebuilds a graph of the same size; keeping freed blocks in the
// heap avoids returning them to the kernel and faulting them back in.
void retain_heap() {
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
}

}  // namespace

TrainResult train(Network& net, const TaskData& data, const TrainConfig& cfg, const Checkpoint* resume,
                  const EpochCallback& on_epoch) {
    validate(cfg);
    retain_heap();
    const BrimsConfig& mcfg = net.config();
    const SequenceBatch& train_set = data.train;
    if ((mcfg.head == HeadKind::Classification) != train_set.classification()) {
        throw ValidationError("head kind does not match the task's targets");
    }
    if (train_set.features != mcfg.input_size) {
        throw DimensionError("task has " + std::to_string(train_set.features) + " features per step, model expects " +
                             std::to_string(mcfg.input_size));
    }
    const bool classify = mcfg.head == HeadKind::Classification;
    const bool has_validation = data.validation.count > 0;

    const ParameterList params = net.parameters();
    TrainResult result;
    Checkpoint state = capture(net, cfg, data.config);
    if (resume) {
        if (!(resume->model == mcfg)) throw ValidationError("resume checkpoint was written for a different architecture");
        load_arrays(net, resume->parameters);
        state = *resume;
        state.train = cfg;
        if (state.optimizer.m.empty()) state.optimizer = OptimizerState::for_parameters(params);
    }
    result.metrics.parameter_count = count_scalars(params);
    result.metrics.rows = state.history;
    result.metrics.epochs_completed = state.epoch;

    auto make_best = [&](const std::vector<ParameterArray>& weights) {
        Checkpoint b = state;
        b.parameters = weights;
        b.best_parameters.clear();
        return b;
    };
    result.best = make_best(state.has_best && !state.best_parameters.empty() ? state.best_parameters : snapshot(net));

    for (std::size_t epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::uint64_t epoch_seed = mix(cfg.seed, epoch);
        auto order = iota_indices(train_set.count);
        Rng shuffle_rng(epoch_seed);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        const std::size_t batches = (train_set.count + cfg.batch_size - 1) / cfg.batch_size;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(train_set.count, begin + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            const std::uint64_t batch_seed = mix(epoch_seed, b);
            try {
                Graph graph;
                GraphScope scope(graph);
                auto raw = train_set.steps(idx);
                std::vector<Tensor> seq;
                seq.reserve(raw.size());
                for (std::size_t t = 0; t < raw.size(); ++t) seq.push_back(net.embed(raw[t], true, mix(batch_seed, t)));
                const auto final_state = net.unroll(seq, net.init_state(idx.size())).final_state;
                const Tensor loss = loss_head(net, final_state, batch_targets(train_set, idx));
                for (const auto& p : params) {
                    Tensor t = p.tensor;
                    t.clear_grad();
                }
                backward(loss);
                if (cfg.clip_mode == ClipMode::GlobalNorm) {
                    clip_global_norm(params, cfg.clip);
                } else if (cfg.clip_mode == ClipMode::Value) {
                    clip_value(params, cfg.clip);
                }
                adam_step(params, state.optimizer, cfg);
                loss_sum += loss.item() * static_cast<double>(idx.size());
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " + e.what());
            }
        }
        for (const auto& p : params) {
            Tensor t = p.tensor;
            t.clear_grad();
        }
        auto& rows = result.metrics.rows;
        const double train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, train_set.count));
        rows.push_back({epoch, "train", "loss", train_loss, cfg.seed});

        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            double score = train_loss;
            bool maximize = false;
            if (has_validation) {
                const Evaluation ev = evaluate(net, data.validation, cfg.eval_batch);
                if (classify) {
                    rows.push_back({epoch, "validation", "accuracy", ev.accuracy, cfg.seed});
                    rows.push_back({epoch, "validation", "loss", ev.loss, cfg.seed});
                    score = ev.accuracy;
                    maximize = true;
                } else {
                    rows.push_back({epoch, "validation", "mse", ev.loss, cfg.seed});
                    score = ev.loss;
                }
            }
            if (!state.has_best || improves(maximize, score, state.best_value)) {
                state.has_best = true;
                state.best_value = score;
                state.best_epoch = epoch;
                state.best_parameters = snapshot(net);
            }
        }
        state.epoch = epoch;
        state.parameters = snapshot(net);
        state.history = rows;
        result.metrics.epochs_completed = epoch;
        result.metrics.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        if (state.best_epoch == epoch) result.best = make_best(state.best_parameters);
        if (on_epoch) on_epoch(state, result.metrics);
    }
    result.last = state;
    result.best.history = state.history;
    return result;
}

// ---- experiment runner ------------------------------------------------------------

std::vector<std::uint64_t> RunConfig::effective_seeds() const {
    return seeds.empty() ? std::vector<std::uint64_t>{train.seed} : seeds;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    JsonFields f(j, "config");
    RunConfig cfg;
    cfg.model = config_from_json(f.get("model"), "model");
    if (f.has("train")) cfg.train = train_config_from_json(f.get("train"), "train");
    if (f.has("task")) cfg.task = task_config_from_json(f.get("task"), "task");
    if (f.has("seeds")) {
        const auto& s = f.get("seeds");
        if (!s.is_array()) throw ConfigError("seeds", "expected an array of seeds");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!s[i].is_number_unsigned() && !(s[i].is_number_integer() && s[i].get<long long>() >= 0)) {
                throw ConfigError("seeds[" + std::to_string(i) + "]", "expected a seed");
            }
            cfg.seeds.push_back(s[i].get<std::uint64_t>());
        }
    }
    if (f.has("shifts")) {
        const auto& s = f.get("shifts");
        if (!s.is_array()) throw ConfigError("shifts", "expected an array of shift strings");
        for (std::size_t i = 0; i < s.size(); ++i) {
            const std::string at = "shifts[" + std::to_string(i) + "]";
            if (!s[i].is_string()) throw ConfigError(at, "expected a shift string");
            try {
                parse_shift(s[i].get<std::string>());
            } catch (const ValidationError& e) {
                throw ConfigError(at, e.what());
            }
            cfg.shifts.push_back(s[i].get<std::string>());
        }
    }
    f.finish();

    const bool adding = cfg.task.kind == TaskKind::Adding;
    const std::size_t features = adding ? 3 : 1;
    if (cfg.model.input_size != features) {
        throw ConfigError("model.input_size", "the " + std::string(adding ? "adding" : "digits") + " task has " +
                                                  std::to_string(features) + " features per step");
    }
    if (adding && (cfg.model.head != HeadKind::Regression || cfg.model.outputs != 1)) {
        throw ConfigError("model.head", "the adding task needs a regression head with one output");
    }
    if (!adding && (cfg.model.head != HeadKind::Classification || cfg.model.outputs != 10)) {
        throw ConfigError("model.head", "the digits task needs a classification head with 10 outputs");
    }
    return cfg;
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["model"] = to_json(cfg.model);
    j["train"] = to_json(cfg.train);
    j["task"] = to_json(cfg.task);
    if (!cfg.seeds.empty()) j["seeds"] = cfg.seeds;
    if (!cfg.shifts.empty()) j["shifts"] = cfg.shifts;
    return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), "cannot open config file");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

std::vector<SeedRun> run_experiment(const RunConfig& cfg, const TaskData& data,
                                    const std::function<void(const std::string&)>& log) {
    std::vector<Shift> shifts;
    for (const auto& s : cfg.shifts) shifts.push_back(parse_shift(s));
    if (shifts.empty()) shifts.push_back(Shift{});
    std::vector<SeedRun> runs;
    for (std::uint64_t seed : cfg.effective_seeds()) {
        TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;
        Network net = Network::make(cfg.model, seed);
        SeedRun run;
        run.seed = seed;
        EpochCallback progress;
        if (log) {
            progress = [&](const Checkpoint& c, const Metrics& m) {
                std::string line = "seed " + std::to_string(seed) + " epoch " + std::to_string(c.epoch);
                for (auto it = m.rows.rbegin(); it != m.rows.rend() && it->epoch == c.epoch; ++it) {
                    line += " " + it->split + "." + it->metric + "=" + g17(it->value);
                }
                log(line);
            };
        }
        run.result = train(net, data, tcfg, nullptr, progress);
        const Network best = network_from_checkpoint(run.result.best);
        run.shifted = evaluate_shifted(best, data, shifts, Split::Test, tcfg.eval_batch);
        runs.push_back(std::move(run));
    }
    return runs;
}

std::vector<ShiftMetric> seed_average(const std::vector<SeedRun>& runs) {
    std::vector<ShiftMetric> out;
    if (runs.empty()) return out;
    for (std::size_t i = 0; i < runs.front().shifted.size(); ++i) {
        ShiftMetric m = runs.front().shifted[i];
        double total = 0.0;
        for (const auto& r : runs) {
            if (r.shifted.size() != runs.front().shifted.size()) throw ValidationError("seed runs differ in shift rows");
            total += r.shifted[i].value;
        }
        m.value = total / static_cast<double>(runs.size());
        out.push_back(m);
    }
    return out;
}

}  // namespace brims
