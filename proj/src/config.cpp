#include "brims/config.hpp"

#include <algorithm>
#include <array>
#include <utility>

namespace brims {

namespace {

constexpr std::array<std::pair<Variant, const char*>, 9> kVariantNames{{
    {Variant::Lstm, "lstm"},
    {Variant::LstmH, "lstm_h"},
    {Variant::LstmHB, "lstm_hb"},
    {Variant::LstmHA, "lstm_ha"},
    {Variant::LstmHAB, "lstm_hab"},
    {Variant::Rims, "rims"},
    {Variant::HierRims, "hier_rims"},
    {Variant::MldRims, "mld_rims"},
    {Variant::Brims, "brims"},
}};

bool single_module(Variant v) {
    return v == Variant::Lstm || v == Variant::LstmH || v == Variant::LstmHB || v == Variant::LstmHA ||
           v == Variant::LstmHAB;
}

std::string indexed(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

}  // namespace

std::string to_string(Variant v) {
    for (const auto& [variant, name] : kVariantNames) {
        if (variant == v) return name;
    }
    return "unknown";
}

Variant parse_variant(const std::string& text) {
    for (const auto& [variant, name] : kVariantNames) {
        if (text == name) return variant;
    }
    throw ValidationError("unknown variant '" + text + "'");
}

bool uses_attention(Variant v) { return v != Variant::Lstm && v != Variant::LstmH && v != Variant::LstmHB; }

bool uses_top_down(Variant v) { return v == Variant::LstmHB || v == Variant::LstmHAB || v == Variant::Brims; }

bool uses_communication(Variant v) {
    return v == Variant::Rims || v == Variant::HierRims || v == Variant::MldRims || v == Variant::Brims;
}

void validate(const BrimsConfig& cfg, const std::string& path) {
    const std::size_t layers = cfg.modules.size();
    if (layers == 0) throw ConfigError(path + ".modules", "at least one layer is required");
    if (cfg.active.size() != layers) throw ConfigError(path + ".active", "needs one entry per layer");
    if (cfg.module_size.size() != layers) throw ConfigError(path + ".module_size", "needs one entry per layer");
    for (std::size_t l = 0; l < layers; ++l) {
        if (cfg.modules[l] == 0) throw ConfigError(indexed(path + ".modules", l), "must be positive");
        if (cfg.module_size[l] == 0) throw ConfigError(indexed(path + ".module_size", l), "must be positive");
        if (cfg.active[l] < 1 || cfg.active[l] > cfg.modules[l]) {
            throw ConfigError(indexed(path + ".active", l), "must lie in [1, modules]");
        }
    }
    if (cfg.input_size == 0) throw ConfigError(path + ".input_size", "must be positive");
    if (cfg.embed_size == 0) throw ConfigError(path + ".embed_size", "must be positive");
    if (cfg.attention_size == 0) throw ConfigError(path + ".attention_size", "must be positive");
    if (cfg.value_size == 0) throw ConfigError(path + ".value_size", "must be positive");
    if (cfg.comm_attention_size == 0) throw ConfigError(path + ".comm_attention_size", "must be positive");
    if (cfg.heads == 0) throw ConfigError(path + ".heads", "must be positive");
    if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ConfigError(path + ".dropout", "must lie in [0, 1)");
    if (cfg.outputs == 0) throw ConfigError(path + ".head.outputs", "must be positive");
    if (cfg.head == HeadKind::Classification) {
        if (cfg.outputs < 2) throw ConfigError(path + ".head.outputs", "classification needs at least 2 classes");
        if (cfg.head_hidden == 0) throw ConfigError(path + ".head.hidden", "classification head needs a hidden width");
    }

    const Variant v = cfg.variant;
    if (single_module(v)) {
        for (std::size_t l = 0; l < layers; ++l) {
            if (cfg.modules[l] != 1 || cfg.active[l] != 1) {
                throw ConfigError(indexed(path + ".modules", l), to_string(v) + " requires one module per layer");
            }
        }
    }
    if ((v == Variant::Lstm || v == Variant::Rims) && layers != 1) {
        throw ConfigError(path + ".modules", to_string(v) + " is single-layer");
    }
    if ((v == Variant::LstmH || v == Variant::LstmHB || v == Variant::LstmHA || v == Variant::LstmHAB ||
         v == Variant::HierRims || v == Variant::MldRims) &&
        layers < 2) {
        throw ConfigError(path + ".modules", to_string(v) + " needs at least two layers");
    }
    if (v == Variant::MldRims) {
        for (std::size_t l = 1; l < layers; ++l) {
            if (cfg.modules[l] != cfg.modules[0] || cfg.active[l] != cfg.active[0]) {
                throw ConfigError(indexed(path + ".modules", l),
                                  "mld_rims copies activation sets, so every layer needs the first layer's counts");
            }
        }
    }
    if (!uses_attention(v) && (cfg.per_module_rows || cfg.heads != 1)) {
        throw ConfigError(path + ".attention", to_string(v) + " has no inter-layer attention to configure");
    }
}

nlohmann::ordered_json to_json(const BrimsConfig& cfg) {
    nlohmann::ordered_json j;
    j["variant"] = to_string(cfg.variant);
    j["cell"] = to_string(cfg.cell);
    j["input_size"] = cfg.input_size;
    j["embed_size"] = cfg.embed_size;
    j["modules"] = cfg.modules;
    j["active"] = cfg.active;
    j["module_size"] = cfg.module_size;
    j["attention_size"] = cfg.attention_size;
    j["value_size"] = cfg.value_size;
    j["comm_attention_size"] = cfg.comm_attention_size;
    j["heads"] = cfg.heads;
    j["per_module_rows"] = cfg.per_module_rows;
    j["dropout"] = cfg.dropout;
    nlohmann::ordered_json head;
    head["kind"] = cfg.head == HeadKind::Regression ? "regression" : "classification";
    head["outputs"] = cfg.outputs;
    head["hidden"] = cfg.head_hidden;
    j["head"] = head;
    return j;
}

BrimsConfig config_from_json(const nlohmann::json& j, const std::string& path) {
    JsonFields f(j, path);
    BrimsConfig cfg;
    try {
        cfg.variant = parse_variant(f.text("variant", to_string(cfg.variant)));
    } catch (const ValidationError& e) {
        throw ConfigError(f.path("variant"), e.what());
    }
    try {
        cfg.cell = parse_cell_kind(f.text("cell", to_string(cfg.cell)));
    } catch (const ValidationError& e) {
        throw ConfigError(f.path("cell"), e.what());
    }
    cfg.input_size = f.size("input_size", cfg.input_size);
    cfg.embed_size = f.size("embed_size", cfg.embed_size);
    cfg.modules = f.sizes("modules", cfg.modules);
    cfg.active = f.sizes("active", cfg.active);
    cfg.module_size = f.sizes("module_size", cfg.module_size);
    cfg.attention_size = f.size("attention_size", cfg.attention_size);
    cfg.value_size = f.size("value_size", cfg.value_size);
    cfg.comm_attention_size = f.size("comm_attention_size", cfg.comm_attention_size);
    cfg.heads = f.size("heads", cfg.heads);
    cfg.per_module_rows = f.flag("per_module_rows", cfg.per_module_rows);
    cfg.dropout = f.real("dropout", cfg.dropout);
    if (f.has("head")) {
        JsonFields h(f.get("head"), f.path("head"));
        const std::string kind = h.text("kind", "regression");
        if (kind == "regression") {
            cfg.head = HeadKind::Regression;
        } else if (kind == "classification") {
            cfg.head = HeadKind::Classification;
        } else {
            throw ConfigError(h.path("kind"), "expected regression or classification");
        }
        cfg.outputs = h.size("outputs", cfg.outputs);
        cfg.head_hidden = h.size("hidden", cfg.head_hidden);
        h.finish();
    }
    f.finish();
    validate(cfg, path);
    return cfg;
}

JsonFields::JsonFields(const nlohmann::json& object, std::string path) : object_(object), path_(std::move(path)) {
    if (!object_.is_object()) throw ConfigError(path_, "expected a JSON object");
}

bool JsonFields::has(const std::string& key) const { return object_.contains(key); }

const nlohmann::json& JsonFields::get(const std::string& key) {
    if (!object_.contains(key)) throw ConfigError(path(key), "missing required field");
    seen_.push_back(key);
    return object_.at(key);
}

std::size_t JsonFields::size(const std::string& key, std::size_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = get(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw ConfigError(path(key), "expected a non-negative integer");
    }
    return v.get<std::size_t>();
}

std::uint64_t JsonFields::u64(const std::string& key, std::uint64_t fallback) {
    return static_cast<std::uint64_t>(size(key, static_cast<std::size_t>(fallback)));
}

double JsonFields::real(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = get(key);
    if (!v.is_number()) throw ConfigError(path(key), "expected a number");
    return v.get<double>();
}

bool JsonFields::flag(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = get(key);
    if (!v.is_boolean()) throw ConfigError(path(key), "expected true or false");
    return v.get<bool>();
}

std::string JsonFields::text(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = get(key);
    if (!v.is_string()) throw ConfigError(path(key), "expected a string");
    return v.get<std::string>();
}

std::vector<std::size_t> JsonFields::sizes(const std::string& key, const std::vector<std::size_t>& fallback) {
    if (!has(key)) return fallback;
    const auto& v = get(key);
    if (!v.is_array()) throw ConfigError(path(key), "expected an array of non-negative integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number_integer() || v[i].get<long long>() < 0) {
            throw ConfigError(indexed(path(key), i), "expected a non-negative integer");
        }
        out.push_back(v[i].get<std::size_t>());
    }
    return out;
}

void JsonFields::finish() const {
    for (const auto& [key, value] : object_.items()) {
        if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
            throw ConfigError(path(key), "unknown field");
        }
    }
}

}  // namespace brims
