#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "brims/network.hpp"
#include "brims/tasks.hpp"
#include "json.hpp"

namespace brims {

/// Attention shares of one module at one step of one sample.
struct AttentionLogRecord {
    std::string run;
    std::size_t sample = 0;
    std::size_t step = 0;
    std::size_t layer = 0;
    std::size_t module = 0;
    double rho = 0.0;  // pixel corruption of the evaluated input
    double null = 0.0;
    double bottom_up = 0.0;
    double top_down = 0.0;  // structurally 0 without a higher layer
    bool active = false;

    bool operator==(const AttentionLogRecord&) const = default;
};

/// Throws ValidationError unless shares are non-negative and sum to 1 within 1e-6.
void validate(const AttentionLogRecord& r);

/// Records for the attention layers of traced steps; sample indices start at
/// `first_sample` and follow the batch order.
std::vector<AttentionLogRecord> records_from_traces(const std::string& run, const std::vector<StepTrace>& traces,
                                                    std::size_t first_sample, double rho);

/// Eval-mode rollout of `data` with tracing, chunk by chunk.
std::vector<AttentionLogRecord> collect_attention(const Network& net, const SequenceBatch& data,
                                                  const std::string& run, std::size_t chunk = 128);

/// Orders by (run, sample, step, layer, module).
void sort_records(std::vector<AttentionLogRecord>& records);

struct GroupBy {
    bool rho = true;
    bool layer = false;
    bool module = false;
};

struct ShareFilter {
    std::optional<std::size_t> layer = 0;  // nullopt: all layers
    bool active_only = false;
};

/// Mean shares of one group; ungrouped keys are empty.
struct ShareRow {
    std::optional<double> rho;
    std::optional<std::size_t> layer;
    std::optional<std::size_t> module;
    double null = 0.0;
    double bottom_up = 0.0;
    double top_down = 0.0;
    std::size_t count = 0;

    bool operator==(const ShareRow&) const = default;
};

/// Arithmetic means per group over every matching record (modules, steps and
/// samples alike), rows in ascending key order. Throws ValidationError when
/// nothing matches the filter.
std::vector<ShareRow> aggregate_shares(const std::vector<AttentionLogRecord>& records, const GroupBy& group = {},
                                       const ShareFilter& filter = {});

struct UsageStatistics {
    double fraction_high_top_down = 0.0;  // samples with >= min_steps qualifying steps
    double mean_top_down = 0.0;
    std::size_t samples = 0;
};

/// A step qualifies when some module's top-down share reaches `threshold`.
/// Samples are keyed by (run, sample, rho).
UsageStatistics usage_statistics(const std::vector<AttentionLogRecord>& records, double threshold = 0.5,
                                 std::size_t min_steps = 5);

// ---- export ---------------------------------------------------------------

enum class ExportFormat { Csv, Ndjson };
ExportFormat parse_export_format(const std::string& text);
std::string extension(ExportFormat format);

/// CSV columns: run,sample,step,layer,module,rho,null,bottom_up,top_down,active
/// with reals at 17 significant digits. NDJSON: one object per line, keys in
/// the same order.
std::string records_csv(const std::vector<AttentionLogRecord>& records);
std::string records_ndjson(const std::vector<AttentionLogRecord>& records);
std::vector<AttentionLogRecord> parse_records_csv(const std::string& text);
std::vector<AttentionLogRecord> parse_records_ndjson(const std::string& text);

/// CSV columns: rho,layer,module,null,bottom_up,top_down,count; ungrouped keys
/// are left empty (CSV) or null (NDJSON).
std::string shares_csv(const std::vector<ShareRow>& rows);
std::string shares_ndjson(const std::vector<ShareRow>& rows);
std::vector<ShareRow> parse_shares_csv(const std::string& text);
std::vector<ShareRow> parse_shares_ndjson(const std::string& text);

void export_records(const std::filesystem::path& path, const std::vector<AttentionLogRecord>& records,
                    ExportFormat format);
std::vector<AttentionLogRecord> import_records(const std::filesystem::path& path, ExportFormat format);
void export_shares(const std::filesystem::path& path, const std::vector<ShareRow>& rows, ExportFormat format);
std::vector<ShareRow> import_shares(const std::filesystem::path& path, ExportFormat format);

/// Writes `text` to `path`, creating parent directories. Throws Error on failure.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// ---- run manifest -----------------------------------------------------------

struct RunManifest {
    nlohmann::ordered_json config;
    std::uint64_t seed = 0;
    std::string config_hash;  // git blob hash of the serialized config
    std::vector<std::string> data_sources;
    std::string started;  // ISO-8601 UTC
    std::string finished;
};

/// Serialized config bytes: compact JSON in insertion order.
std::string config_bytes(const nlohmann::ordered_json& config);
/// SHA-1 over "blob <size>\0<bytes>", as `git hash-object` computes it.
std::string git_blob_hash(const std::string& bytes);
std::string utc_timestamp();

RunManifest make_manifest(const nlohmann::ordered_json& config, std::uint64_t seed,
                          std::vector<std::string> data_sources);
/// True when the stored hash equals the hash of the stored config.
bool verify_manifest(const RunManifest& manifest);
nlohmann::ordered_json to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::ordered_json& j);

}  // namespace brims
