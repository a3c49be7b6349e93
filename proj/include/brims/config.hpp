#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "brims/cells.hpp"
#include "brims/tensor.hpp"
#include "json.hpp"

namespace brims {

/// Invalid configuration; `path()` names the offending field (e.g. "model.active[1]").
class ConfigError : public ValidationError {
public:
    ConfigError(std::string path, const std::string& message)
        : ValidationError(path + ": " + message), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

/// Architecture family, from the plain LSTM stack to full BRIMs.
enum class Variant { Lstm, LstmH, LstmHB, LstmHA, LstmHAB, Rims, HierRims, MldRims, Brims };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

bool uses_attention(Variant v);
bool uses_top_down(Variant v);
bool uses_communication(Variant v);

enum class HeadKind { Regression, Classification };

struct BrimsConfig {
    Variant variant = Variant::Brims;
    CellKind cell = CellKind::Gru;
    std::size_t input_size = 1;  // raw features per time step
    std::size_t embed_size = 32;
    // Per layer; all three lists have one entry per layer.
    std::vector<std::size_t> modules{4, 4};
    std::vector<std::size_t> active{2, 2};
    std::vector<std::size_t> module_size{8, 8};
    std::size_t attention_size = 16;  // key/query width per head
    std::size_t value_size = 16;      // value width per head
    std::size_t comm_attention_size = 16;
    std::size_t heads = 1;
    bool per_module_rows = false;
    double dropout = 0.0;  // on the input embedding
    HeadKind head = HeadKind::Regression;
    std::size_t outputs = 1;
    std::size_t head_hidden = 0;  // classification only

    std::size_t layers() const { return modules.size(); }
    std::size_t layer_width(std::size_t l) const { return modules.at(l) * module_size.at(l); }
    bool operator==(const BrimsConfig&) const = default;
};

/// Checks every field and the variant constraints; throws ConfigError.
void validate(const BrimsConfig& cfg, const std::string& path = "model");

nlohmann::ordered_json to_json(const BrimsConfig& cfg);
/// Strict: unknown keys and wrong types are rejected with their field path.
BrimsConfig config_from_json(const nlohmann::json& j, const std::string& path = "model");

/// Helper for strict JSON objects: tracks consumed keys and reports paths.
class JsonFields {
public:
    JsonFields(const nlohmann::json& object, std::string path);

    bool has(const std::string& key) const;
    const nlohmann::json& get(const std::string& key);
    std::string path(const std::string& key) const { return path_ + "." + key; }

    std::size_t size(const std::string& key, std::size_t fallback);
    std::uint64_t u64(const std::string& key, std::uint64_t fallback);
    double real(const std::string& key, double fallback);
    bool flag(const std::string& key, bool fallback);
    std::string text(const std::string& key, const std::string& fallback);
    std::vector<std::size_t> sizes(const std::string& key, const std::vector<std::size_t>& fallback);

    /// Throws on any key that was not read.
    void finish() const;

private:
    const nlohmann::json& object_;
    std::string path_;
    std::vector<std::string> seen_;
};

}  // namespace brims
