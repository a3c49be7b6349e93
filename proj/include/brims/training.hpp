#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "brims/config.hpp"
#include "brims/network.hpp"
#include "brims/tasks.hpp"

namespace brims {

// ---- optimization -----------------------------------------------------------

enum class ClipMode { GlobalNorm, Value, None };

std::string to_string(ClipMode mode);

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip = 1.0;
    ClipMode clip_mode = ClipMode::GlobalNorm;
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    std::size_t eval_every = 1;    // validate every n epochs (and after the last)
    std::size_t eval_batch = 256;  // evaluation chunk size, no effect on results

    bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg, const std::string& path = "train");
nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");

/// Adam moments, one array per parameter in parameter-list order.
struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;

    static OptimizerState for_parameters(const ParameterList& params);
};

/// Bias-corrected Adam update in place. Parameters without a gradient count as
/// zero-gradient. Throws DimensionError when the state does not match the
/// parameters and NonFiniteError on a non-finite gradient.
void adam_step(const ParameterList& params, OptimizerState& state, const TrainConfig& cfg);

double global_grad_norm(const ParameterList& params);
/// Rescales all gradients jointly to norm tau when their norm exceeds it.
/// Returns the scale applied (1 when unchanged).
double clip_global_norm(const ParameterList& params, double tau);
/// Clamps every gradient entry to [-tau, tau].
void clip_value(const ParameterList& params, double tau);

// ---- losses -----------------------------------------------------------------

struct Targets {
    std::vector<double> values;       // regression, one per sample (single output)
    std::vector<std::size_t> labels;  // classification
};

Targets batch_targets(const SequenceBatch& batch, const std::vector<std::size_t>& indices);

/// Classification: softmax cross-entropy on logits. Regression: mean squared
/// error against one target per sample.
Tensor head_loss(HeadKind kind, const Tensor& outputs, const Targets& targets);
/// Runs the network's output head on the final state, then head_loss.
Tensor loss_head(const Network& net, const NetworkState& final_state, const Targets& targets);

// ---- tasks ------------------------------------------------------------------

enum class TaskKind { Adding, Digits };

struct TaskConfig {
    TaskKind kind = TaskKind::Adding;
    std::uint64_t seed = 1;
    double validation_fraction = 0.1;
    // adding
    std::size_t length = 100;
    std::size_t summands = 2;
    std::size_t train_samples = 2000;
    std::size_t test_samples = 1000;
    // digits: IDX files, or synthetic digits when no paths are given
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t height = 14;
    std::size_t width = 14;
    double corruption = 0.0;

    bool operator==(const TaskConfig&) const = default;
};

void validate(const TaskConfig& cfg, const std::string& path = "task");
nlohmann::ordered_json to_json(const TaskConfig& cfg);
TaskConfig task_config_from_json(const nlohmann::json& j, const std::string& path = "task");

enum class Split { Train, Validation, Test };
std::string to_string(Split split);
Split parse_split(const std::string& text);

struct TaskData {
    TaskConfig config;
    SequenceBatch train, validation, test;
    // Native-resolution images kept for resolution and corruption shifts.
    std::vector<ImageSample> train_images, validation_images, test_images;

    const SequenceBatch& split(Split s) const;
};

TaskData prepare_task(const TaskConfig& cfg);

/// One evaluation condition. Unset fields keep the training condition.
struct Shift {
    std::optional<std::size_t> length;
    std::optional<std::size_t> summands;
    std::optional<std::size_t> height, width;
    std::optional<double> corruption;

    bool identity() const;
    /// Canonical text, e.g. "len=200,k=5" or "res=19x19,rho=0.25"; "none" for identity.
    std::string label() const;
};

/// Comma-separated key=value pairs with keys len, k, res (HxW or H), rho.
Shift parse_shift(const std::string& text);

/// The evaluation population for a split under a shift. Throws
/// ValidationError when the shift does not apply to the task.
SequenceBatch shifted_set(const TaskData& data, const Shift& shift, Split split);

// ---- evaluation and metrics ---------------------------------------------------

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;  // classification only
    std::size_t samples = 0;
};

/// Eval mode (no dropout, no graph).
Evaluation evaluate(const Network& net, const SequenceBatch& data, std::size_t chunk = 256);

struct MetricRow {
    std::size_t epoch = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const MetricRow&) const = default;
};

struct Metrics {
    std::vector<MetricRow> rows;
    std::vector<double> epoch_seconds;  // wall clock, kept out of the CSV
    std::size_t parameter_count = 0;
    std::size_t epochs_completed = 0;
};

/// Columns epoch,split,metric,value,seed; values with 17 significant digits.
std::string metrics_csv(const std::vector<MetricRow>& rows);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

struct ShiftMetric {
    std::string shift;
    std::string metric;
    double value = 0.0;
};

/// One row per (shift, metric), in shift order: mse for regression,
/// accuracy then loss for classification.
std::vector<ShiftMetric> evaluate_shifted(const Network& net, const TaskData& data, const std::vector<Shift>& shifts,
                                          Split split = Split::Test, std::size_t chunk = 256);

// ---- checkpoints --------------------------------------------------------------

struct ParameterArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    BrimsConfig model;
    TrainConfig train;
    TaskConfig task;
    std::vector<ParameterArray> parameters;
    // Weights of the best validation epoch so far, carried by end-of-epoch
    // checkpoints so a resumed run keeps its best model. Empty otherwise.
    std::vector<ParameterArray> best_parameters;
    OptimizerState optimizer;
    std::size_t epoch = 0;  // completed epochs
    std::size_t best_epoch = 0;
    double best_value = 0.0;
    bool has_best = false;
    std::vector<MetricRow> history;
};

Checkpoint capture(const Network& net, const TrainConfig& train, const TaskConfig& task);
/// Copies parameter values into `net` by name; shapes must match.
void restore(Network& net, const Checkpoint& ckpt);
Network network_from_checkpoint(const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- training loop --------------------------------------------------------------

struct TrainResult {
    Metrics metrics;
    Checkpoint best;  // best validation metric so far (initial weights before any epoch)
    Checkpoint last;
};

using EpochCallback = std::function<void(const Checkpoint& last, const Metrics& metrics)>;

/// Seeded minibatch training. With `resume`, continues from its state so that
/// the result equals an uninterrupted run. Throws NonFiniteError naming the
/// epoch and batch when the loss or a gradient stops being finite.
TrainResult train(Network& net, const TaskData& data, const TrainConfig& cfg, const Checkpoint* resume = nullptr,
                  const EpochCallback& on_epoch = {});

// ---- experiment runner ------------------------------------------------------------

struct RunConfig {
    BrimsConfig model;
    TrainConfig train;
    TaskConfig task;
    std::vector<std::uint64_t> seeds;  // empty: train.seed only
    std::vector<std::string> shifts;   // evaluated on the test split after training

    std::vector<std::uint64_t> effective_seeds() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

struct SeedRun {
    std::uint64_t seed = 0;
    TrainResult result;
    std::vector<ShiftMetric> shifted;  // evaluated with the best checkpoint
};

/// Trains one model per seed (model init and batch order follow the seed, data
/// follows task.seed) and evaluates the best checkpoint under each shift.
std::vector<SeedRun> run_experiment(const RunConfig& cfg, const TaskData& data,
                                    const std::function<void(const std::string&)>& log = {});

/// Mean over seeds of each (shift, metric) row; rows keep the first run's order.
std::vector<ShiftMetric> seed_average(const std::vector<SeedRun>& runs);

}  // namespace brims
