#include "brims/telemetry.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

namespace brims {

namespace {

std::string real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t begin = 0;
    for (;;) {
        const std::size_t comma = line.find(',', begin);
        out.push_back(line.substr(begin, comma - begin));
        if (comma == std::string::npos) return out;
        begin = comma + 1;
    }
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

std::size_t parse_index(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (s.empty() || used != s.size() || s.front() == '-') throw FormatError("bad " + what + " '" + s + "'");
    return static_cast<std::size_t>(v);
}

double parse_real(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (s.empty() || used != s.size()) throw FormatError("bad " + what + " '" + s + "'");
    return v;
}

const std::string kRecordHeader = "run,sample,step,layer,module,rho,null,bottom_up,top_down,active";
const std::string kShareHeader = "rho,layer,module,null,bottom_up,top_down,count";

void check_run_id(const std::string& run) {
    if (run.find_first_of(",\"\r\n") != std::string::npos)
        throw ValidationError("run id '" + run + "' contains a comma, quote or line break");
}

void check_row(const ShareRow& r) {
    const double sum = r.null + r.bottom_up + r.top_down;
    if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("share row sums to " + real(sum));
}

template <typename T>
nlohmann::ordered_json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<T>();
}

}  // namespace

void validate(const AttentionLogRecord& r) {
    for (double s : {r.null, r.bottom_up, r.top_down})
        if (!(s >= 0.0)) throw ValidationError("negative or non-finite share in record of run '" + r.run + "'");
    const double sum = r.null + r.bottom_up + r.top_down;
    if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("shares sum to " + real(sum) + " in run '" + r.run + "'");
}

std::vector<AttentionLogRecord> records_from_traces(const std::string& run, const std::vector<StepTrace>& traces,
                                                    std::size_t first_sample, double rho) {
    std::vector<AttentionLogRecord> out;
    for (std::size_t t = 0; t < traces.size(); ++t) {
        for (std::size_t l = 0; l < traces[t].layers.size(); ++l) {
            const LayerTrace& lt = traces[t].layers[l];
            if (lt.columns == 0) continue;
            for (std::size_t b = 0; b < lt.batch; ++b) {
                const auto& active = lt.active.at(b);
                for (std::size_t k = 0; k < lt.modules; ++k) {
                    AttentionLogRecord r;
                    r.run = run;
                    r.sample = first_sample + b;
                    r.step = t;
                    r.layer = l;
                    r.module = k;
                    r.rho = rho;
                    r.null = lt.share(b, k, 0);
                    r.bottom_up = lt.share(b, k, 1);
                    r.top_down = lt.columns > 2 ? lt.share(b, k, 2) : 0.0;
                    r.active = std::find(active.begin(), active.end(), k) != active.end();
                    validate(r);
                    out.push_back(std::move(r));
                }
            }
        }
    }
    return out;
}

std::vector<AttentionLogRecord> collect_attention(const Network& net, const SequenceBatch& data,
                                                  const std::string& run, std::size_t chunk) {
    if (chunk == 0) throw ValidationError("chunk must be positive");
    if (data.features != net.config().input_size) {
        throw DimensionError("data has " + std::to_string(data.features) + " features per step, model expects " +
                             std::to_string(net.config().input_size));
    }
    NoGradScope no_grad;
    std::vector<AttentionLogRecord> out;
    for (std::size_t begin = 0; begin < data.count; begin += chunk) {
        const std::size_t end = std::min(data.count, begin + chunk);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        std::vector<Tensor> seq;
        for (const auto& x : data.steps(idx)) seq.push_back(net.embed(x, false, 0));
        const auto result = net.unroll(seq, net.init_state(idx.size()), true);
        auto part = records_from_traces(run, result.traces, begin, data.meta.corruption);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    sort_records(out);
    return out;
}

void sort_records(std::vector<AttentionLogRecord>& records) {
    std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
        return std::tie(a.run, a.sample, a.step, a.layer, a.module) <
               std::tie(b.run, b.sample, b.step, b.layer, b.module);
    });
}

std::vector<ShareRow> aggregate_shares(const std::vector<AttentionLogRecord>& records, const GroupBy& group,
                                       const ShareFilter& filter) {
    using Key = std::tuple<std::optional<double>, std::optional<std::size_t>, std::optional<std::size_t>>;
    struct Sum {
        double null = 0.0, bottom_up = 0.0, top_down = 0.0;
        std::size_t count = 0;
    };
    std::map<Key, Sum> groups;
    for (const auto& r : records) {
        if (filter.layer && r.layer != *filter.layer) continue;
        if (filter.active_only && !r.active) continue;
        Key key{group.rho ? std::optional(r.rho) : std::nullopt,
                group.layer ? std::optional(r.layer) : std::nullopt,
                group.module ? std::optional(r.module) : std::nullopt};
        Sum& s = groups[key];
        s.null += r.null;
        s.bottom_up += r.bottom_up;
        s.top_down += r.top_down;
        ++s.count;
    }
    if (groups.empty()) throw ValidationError("no attention records match the share filter");
    std::vector<ShareRow> rows;
    for (const auto& [key, s] : groups) {
        const double n = static_cast<double>(s.count);
        rows.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), s.null / n, s.bottom_up / n,
                        s.top_down / n, s.count});
    }
    return rows;
}

UsageStatistics usage_statistics(const std::vector<AttentionLogRecord>& records, double threshold,
                                 std::size_t min_steps) {
    using SampleKey = std::tuple<std::string, std::size_t, double>;
    std::map<SampleKey, std::map<std::size_t, bool>> samples;  // step -> some module reached threshold
    double top_down = 0.0;
    for (const auto& r : records) {
        bool& high = samples[{r.run, r.sample, r.rho}][r.step];
        high = high || r.top_down >= threshold;
        top_down += r.top_down;
    }
    UsageStatistics stats;
    stats.samples = samples.size();
    if (records.empty()) return stats;
    std::size_t qualifying = 0;
    for (const auto& [key, steps] : samples) {
        const auto high = std::count_if(steps.begin(), steps.end(), [](const auto& s) { return s.second; });
        if (static_cast<std::size_t>(high) >= min_steps) ++qualifying;
    }
    stats.fraction_high_top_down = static_cast<double>(qualifying) / static_cast<double>(samples.size());
    stats.mean_top_down = top_down / static_cast<double>(records.size());
    return stats;
}

// ---- export ---------------------------------------------------------------

ExportFormat parse_export_format(const std::string& text) {
    if (text == "csv") return ExportFormat::Csv;
    if (text == "ndjson") return ExportFormat::Ndjson;
    throw ValidationError("unknown format '" + text + "' (expected csv or ndjson)");
}

std::string extension(ExportFormat format) { return format == ExportFormat::Csv ? ".csv" : ".ndjson"; }

std::string records_csv(const std::vector<AttentionLogRecord>& records) {
    std::string out = kRecordHeader + "\n";
    for (const auto& r : records) {
        check_run_id(r.run);
        validate(r);
        out += r.run + ',' + std::to_string(r.sample) + ',' + std::to_string(r.step) + ',' +
               std::to_string(r.layer) + ',' + std::to_string(r.module) + ',' + real(r.rho) + ',' + real(r.null) +
               ',' + real(r.bottom_up) + ',' + real(r.top_down) + ',' + (r.active ? "1" : "0") + '\n';
    }
    return out;
}

std::string records_ndjson(const std::vector<AttentionLogRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        validate(r);
        nlohmann::ordered_json j;
        j["run"] = r.run;
        j["sample"] = r.sample;
        j["step"] = r.step;
        j["layer"] = r.layer;
        j["module"] = r.module;
        j["rho"] = r.rho;
        j["null"] = r.null;
        j["bottom_up"] = r.bottom_up;
        j["top_down"] = r.top_down;
        j["active"] = r.active;
        out += j.dump() + '\n';
    }
    return out;
}

std::vector<AttentionLogRecord> parse_records_csv(const std::string& text) {
    const auto lines = lines_of(text);
    if (lines.empty() || lines.front() != kRecordHeader) throw FormatError("attention CSV lacks the expected header");
    std::vector<AttentionLogRecord> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_fields(lines[i]);
        if (f.size() != 10) throw FormatError("attention CSV line " + std::to_string(i + 1) + " has " +
                                              std::to_string(f.size()) + " fields");
        if (f[9] != "0" && f[9] != "1") throw FormatError("bad active flag '" + f[9] + "'");
        AttentionLogRecord r{f[0],
                             parse_index(f[1], "sample"),
                             parse_index(f[2], "step"),
                             parse_index(f[3], "layer"),
                             parse_index(f[4], "module"),
                             parse_real(f[5], "rho"),
                             parse_real(f[6], "null share"),
                             parse_real(f[7], "bottom-up share"),
                             parse_real(f[8], "top-down share"),
                             f[9] == "1"};
        validate(r);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<AttentionLogRecord> parse_records_ndjson(const std::string& text) {
    std::vector<AttentionLogRecord> out;
    for (const auto& line : lines_of(text)) {
        try {
            const auto j = nlohmann::json::parse(line);
            AttentionLogRecord r{j.at("run").get<std::string>(),  j.at("sample").get<std::size_t>(),
                                 j.at("step").get<std::size_t>(), j.at("layer").get<std::size_t>(),
                                 j.at("module").get<std::size_t>(), j.at("rho").get<double>(),
                                 j.at("null").get<double>(),      j.at("bottom_up").get<double>(),
                                 j.at("top_down").get<double>(),  j.at("active").get<bool>()};
            validate(r);
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("bad attention record: ") + e.what());
        }
    }
    return out;
}

std::string shares_csv(const std::vector<ShareRow>& rows) {
    std::string out = kShareHeader + "\n";
    for (const auto& r : rows) {
        check_row(r);
        out += (r.rho ? real(*r.rho) : "") + ',' + (r.layer ? std::to_string(*r.layer) : "") + ',' +
               (r.module ? std::to_string(*r.module) : "") + ',' + real(r.null) + ',' + real(r.bottom_up) + ',' +
               real(r.top_down) + ',' + std::to_string(r.count) + '\n';
    }
    return out;
}

std::string shares_ndjson(const std::vector<ShareRow>& rows) {
    std::string out;
    for (const auto& r : rows) {
        check_row(r);
        nlohmann::ordered_json j;
        j["rho"] = optional_json(r.rho);
        j["layer"] = optional_json(r.layer);
        j["module"] = optional_json(r.module);
        j["null"] = r.null;
        j["bottom_up"] = r.bottom_up;
        j["top_down"] = r.top_down;
        j["count"] = r.count;
        out += j.dump() + '\n';
    }
    return out;
}

std::vector<ShareRow> parse_shares_csv(const std::string& text) {
    const auto lines = lines_of(text);
    if (lines.empty() || lines.front() != kShareHeader) throw FormatError("share CSV lacks the expected header");
    std::vector<ShareRow> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_fields(lines[i]);
        if (f.size() != 7) throw FormatError("share CSV line " + std::to_string(i + 1) + " has " +
                                             std::to_string(f.size()) + " fields");
        ShareRow r;
        if (!f[0].empty()) r.rho = parse_real(f[0], "rho");
        if (!f[1].empty()) r.layer = parse_index(f[1], "layer");
        if (!f[2].empty()) r.module = parse_index(f[2], "module");
        r.null = parse_real(f[3], "null share");
        r.bottom_up = parse_real(f[4], "bottom-up share");
        r.top_down = parse_real(f[5], "top-down share");
        r.count = parse_index(f[6], "count");
        out.push_back(r);
    }
    return out;
}

std::vector<ShareRow> parse_shares_ndjson(const std::string& text) {
    std::vector<ShareRow> out;
    for (const auto& line : lines_of(text)) {
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({optional_from<double>(j.at("rho")), optional_from<std::size_t>(j.at("layer")),
                           optional_from<std::size_t>(j.at("module")), j.at("null").get<double>(),
                           j.at("bottom_up").get<double>(), j.at("top_down").get<double>(),
                           j.at("count").get<std::size_t>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("bad share row: ") + e.what());
        }
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
    out.flush();
    if (!out) throw Error("write to " + path.string() + " failed");
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void export_records(const std::filesystem::path& path, const std::vector<AttentionLogRecord>& records,
                    ExportFormat format) {
    write_text(path, format == ExportFormat::Csv ? records_csv(records) : records_ndjson(records));
}

std::vector<AttentionLogRecord> import_records(const std::filesystem::path& path, ExportFormat format) {
    const auto text = read_text(path);
    return format == ExportFormat::Csv ? parse_records_csv(text) : parse_records_ndjson(text);
}

void export_shares(const std::filesystem::path& path, const std::vector<ShareRow>& rows, ExportFormat format) {
    write_text(path, format == ExportFormat::Csv ? shares_csv(rows) : shares_ndjson(rows));
}

std::vector<ShareRow> import_shares(const std::filesystem::path& path, ExportFormat format) {
    const auto text = read_text(path);
    return format == ExportFormat::Csv ? parse_shares_csv(text) : parse_shares_ndjson(text);
}

// ---- run manifest -----------------------------------------------------------

std::string config_bytes(const nlohmann::ordered_json& config) { return config.dump(); }

std::string git_blob_hash(const std::string& bytes) {
    std::string blob = "blob " + std::to_string(bytes.size());
    blob.push_back('\0');
    blob += bytes;
    unsigned char digest[SHA_DIGEST_LENGTH];
    SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : digest) {
        out.push_back(hex[c >> 4]);
        out.push_back(hex[c & 15]);
    }
    return out;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

RunManifest make_manifest(const nlohmann::ordered_json& config, std::uint64_t seed,
                          std::vector<std::string> data_sources) {
    RunManifest m;
    m.config = config;
    m.seed = seed;
    m.config_hash = git_blob_hash(config_bytes(config));
    m.data_sources = std::move(data_sources);
    m.started = utc_timestamp();
    return m;
}

bool verify_manifest(const RunManifest& manifest) {
    return manifest.config_hash == git_blob_hash(config_bytes(manifest.config));
}

nlohmann::ordered_json to_json(const RunManifest& manifest) {
    nlohmann::ordered_json j;
    j["config"] = manifest.config;
    j["seed"] = manifest.seed;
    j["config_hash"] = manifest.config_hash;
    j["data_sources"] = manifest.data_sources;
    j["started"] = manifest.started;
    j["finished"] = manifest.finished;
    return j;
}

RunManifest manifest_from_json(const nlohmann::ordered_json& j) {
    try {
        RunManifest m;
        m.config = j.at("config");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.data_sources = j.at("data_sources").get<std::vector<std::string>>();
        m.started = j.at("started").get<std::string>();
        m.finished = j.at("finished").get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad run manifest: ") + e.what());
    }
}

}  // namespace brims
