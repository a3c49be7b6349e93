#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "brims/diagnostics.hpp"
#include "brims/telemetry.hpp"
#include "brims/training.hpp"

namespace fs = std::filesystem;
using namespace brims;

namespace {

constexpr int kValidationFailure = 1;
constexpr int kRuntimeFailure = 2;

fs::path output_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("BRIMS_OUT_DIR"); env && *env) return env;
    return "runs";
}

std::string g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fixed(double v, int digits = 6) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

nlohmann::json read_json(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError(path.string(), "config file not found");
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
    }
}

RunConfig read_run_config(const fs::path& path) {
    read_json(path);
    return load_run_config(path);
}

Checkpoint read_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError(path.string() + ": checkpoint not found");
    return load_checkpoint(path);
}

std::vector<std::string> data_sources(const TaskConfig& t) {
    if (t.kind == TaskKind::Adding) {
        return {"adding:len=" + std::to_string(t.length) + ",k=" + std::to_string(t.summands) +
                ",seed=" + std::to_string(t.seed)};
    }
    if (t.train_images.empty()) return {"synthetic-digits:seed=" + std::to_string(t.seed)};
    return {t.train_images, t.train_labels, t.test_images, t.test_labels};
}

std::string shift_table(const std::vector<ShiftMetric>& rows, ExportFormat format) {
    std::string out;
    if (format == ExportFormat::Csv) {
        out = "shift,metric,value\n";
        for (const auto& r : rows) out += r.shift + "," + r.metric + "," + g17(r.value) + "\n";
        return out;
    }
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        j["shift"] = r.shift;
        j["metric"] = r.metric;
        j["value"] = r.value;
        out += j.dump() + "\n";
    }
    return out;
}

void print_shifts(const std::vector<ShiftMetric>& rows) {
    for (const auto& r : rows) std::cout << "  " << r.shift << "  " << r.metric << " = " << fixed(r.value) << "\n";
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config, checkpoint, out, format = "csv";
    std::vector<std::string> shifts;
    std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
    RunConfig cfg = read_run_config(a.config);
    const ExportFormat format = parse_export_format(a.format);
    for (const auto& s : a.shifts) {
        parse_shift(s);
        cfg.shifts.push_back(s);
    }
    if (a.seed) cfg.seeds = {*a.seed};
    std::optional<Checkpoint> resume;
    if (!a.checkpoint.empty()) {
        resume = read_checkpoint(a.checkpoint);
        if (cfg.effective_seeds().size() != 1) throw ValidationError("--checkpoint resumes a single seed; pass --seed");
    }
    std::vector<Shift> shifts{Shift{}};
    for (const auto& s : cfg.shifts)
        if (Shift parsed = parse_shift(s); !parsed.identity()) shifts.push_back(parsed);

    const fs::path run_dir = output_root(a.out) / fs::path(a.config).stem();
    const TaskData data = prepare_task(cfg.task);
    std::cout << "task: " << data.train.count << " train, " << data.validation.count << " validation, "
              << data.test.count << " test sequences of length " << data.train.length << "\n";

    std::vector<SeedRun> runs;
    for (std::uint64_t seed : cfg.effective_seeds()) {
        TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;
        Network net = Network::make(cfg.model, seed);
        std::cout << "seed " << seed << ": " << to_string(cfg.model.variant) << " with " << net.parameter_count()
                  << " parameters\n";
        const fs::path dir = run_dir / ("seed-" + std::to_string(seed));
        fs::create_directories(dir);

        RunConfig snapshot = cfg;
        snapshot.seeds = {seed};
        RunManifest manifest = make_manifest(to_json(snapshot), seed, data_sources(cfg.task));
        write_text(dir / "manifest.json", to_json(manifest).dump(2) + "\n");

        auto on_epoch = [&](const Checkpoint& last, const Metrics& m) {
            save_checkpoint(dir / "last.ckpt", last);
            write_metrics_csv(dir / "metrics.csv", m.rows);
            std::string line = "  epoch " + std::to_string(last.epoch);
            for (const auto& row : m.rows)
                if (row.epoch == last.epoch) line += "  " + row.split + "." + row.metric + "=" + fixed(row.value);
            std::cout << line << "  (" << fixed(m.epoch_seconds.back(), 3) << " s)\n" << std::flush;
        };
        SeedRun run;
        run.seed = seed;
        run.result = train(net, data, tcfg, resume ? &*resume : nullptr, on_epoch);
        save_checkpoint(dir / "best.ckpt", run.result.best);
        save_checkpoint(dir / "last.ckpt", run.result.last);
        write_metrics_csv(dir / "metrics.csv", run.result.metrics.rows);
        run.shifted = evaluate_shifted(network_from_checkpoint(run.result.best), data, shifts, Split::Test,
                                       tcfg.eval_batch);
        write_text(dir / ("shifted" + extension(format)), shift_table(run.shifted, format));
        std::cout << "  best epoch " << run.result.best.best_epoch << ", test:\n";
        print_shifts(run.shifted);

        manifest.finished = utc_timestamp();
        write_text(dir / "manifest.json", to_json(manifest).dump(2) + "\n");
        runs.push_back(std::move(run));
    }
    if (runs.size() > 1) {
        const auto mean = seed_average(runs);
        write_text(run_dir / ("seed_mean" + extension(format)), shift_table(mean, format));
        std::cout << "mean over " << runs.size() << " seeds:\n";
        print_shifts(mean);
    }
    std::cout << "outputs in " << run_dir.string() << "\n";
    return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, out, format = "csv", split = "test";
    std::vector<std::string> shifts;
};

int run_eval(const EvalArgs& a) {
    const Checkpoint ckpt = read_checkpoint(a.checkpoint);
    const ExportFormat format = parse_export_format(a.format);
    const Split split = parse_split(a.split);
    std::vector<Shift> shifts;
    for (const auto& s : a.shifts) shifts.push_back(parse_shift(s));
    if (shifts.empty()) shifts.push_back(Shift{});
    const Network net = network_from_checkpoint(ckpt);
    const TaskData data = prepare_task(ckpt.task);
    const auto rows = evaluate_shifted(net, data, shifts, split, ckpt.train.eval_batch);
    std::cout << to_string(ckpt.model.variant) << " after epoch " << ckpt.epoch << ", " << to_string(split)
              << " split:\n";
    print_shifts(rows);
    if (!a.out.empty()) {
        const fs::path path = fs::path(a.out) / ("eval" + extension(format));
        write_text(path, shift_table(rows, format));
        std::cout << "wrote " << path.string() << "\n";
    }
    return 0;
}

// ---- gradcheck ----------------------------------------------------------------

struct GradcheckArgs {
    std::string config;
    std::uint64_t seed = 1;
    std::size_t steps = 3;
};

int run_gradcheck(const GradcheckArgs& a) {
    std::vector<BrimsConfig> models;
    if (a.config.empty()) {
        models = {reference_gradcheck_config(CellKind::Gru), reference_gradcheck_config(CellKind::Lstm)};
    } else {
        const auto j = read_json(a.config);
        models = {j.contains("model") ? run_config_from_json(j).model : config_from_json(j)};
    }
    double worst = 0.0;
    std::size_t failed = 0;
    auto report = [&](const std::string& scope, const std::vector<NamedCheck>& checks) {
        for (const auto& c : checks) {
            worst = std::max(worst, c.result.max_rel_err);
            failed += !c.passed();
            std::printf("%-10s %-52s %.3e %s\n", scope.c_str(), c.name.c_str(), c.result.max_rel_err,
                        c.passed() ? "ok" : "FAIL");
        }
    };
    report("primitive", primitive_gradchecks(a.seed));
    for (const auto& m : models) report(to_string(m.variant) + "/" + to_string(m.cell),
                                        unroll_gradchecks(m, a.seed, a.steps));
    std::printf("max relative error %.3e over all checks (%zu failed, tolerance 1e-5)\n", worst, failed);
    return failed == 0 ? 0 : kRuntimeFailure;
}

// ---- analyze-attention --------------------------------------------------------

struct AnalyzeArgs {
    std::string checkpoint, out, format = "csv", layer = "0", split = "test";
    std::vector<std::string> shifts;
    std::size_t samples = 0;
    bool active_only = false, by_module = false;
};

int run_analyze(const AnalyzeArgs& a) {
    const Checkpoint ckpt = read_checkpoint(a.checkpoint);
    const ExportFormat format = parse_export_format(a.format);
    const Split split = parse_split(a.split);
    ShareFilter filter;
    filter.active_only = a.active_only;
    if (a.layer == "all") {
        filter.layer = std::nullopt;
    } else {
        try {
            filter.layer = std::stoul(a.layer);
        } catch (const std::exception&) {
            throw ValidationError("--layer expects a layer index or 'all', got '" + a.layer + "'");
        }
        if (*filter.layer >= ckpt.model.layers()) throw ValidationError("--layer " + a.layer + " out of range");
    }
    std::vector<std::string> specs = a.shifts;
    if (specs.empty()) {
        specs = ckpt.task.kind == TaskKind::Digits ? std::vector<std::string>{"rho=0", "rho=0.125", "rho=0.25", "rho=0.5"}
                                                  : std::vector<std::string>{"none"};
    }
    const Network net = network_from_checkpoint(ckpt);
    const TaskData data = prepare_task(ckpt.task);
    const std::string run = to_string(ckpt.model.variant) + "-seed" + std::to_string(ckpt.train.seed);

    std::vector<AttentionLogRecord> records;
    for (const auto& spec : specs) {
        SequenceBatch batch = shifted_set(data, parse_shift(spec), split);
        if (a.samples > 0 && a.samples < batch.count) {
            std::vector<std::size_t> idx(a.samples);
            std::iota(idx.begin(), idx.end(), 0);
            const SequenceMeta meta = batch.meta;
            batch = batch.subset(idx);
            batch.meta = meta;
        }
        auto part = collect_attention(net, batch, run, ckpt.train.eval_batch);
        records.insert(records.end(), part.begin(), part.end());
    }
    sort_records(records);
    if (records.empty()) throw ValidationError("the model has no attention layers to analyze");

    GroupBy group;
    group.module = a.by_module;
    const auto rows = aggregate_shares(records, group, filter);
    const auto usage = usage_statistics(records);

    std::cout << "mean attention shares (" << (filter.layer ? "layer " + std::to_string(*filter.layer) : "all layers")
              << (a.active_only ? ", active modules" : ", all modules") << "):\n";
    std::printf("  %-8s %-7s %-10s %-10s %-10s %s\n", "rho", "module", "null", "input", "higher", "count");
    for (const auto& r : rows) {
        std::printf("  %-8s %-7s %-10.6f %-10.6f %-10.6f %zu\n", r.rho ? fixed(*r.rho).c_str() : "-",
                    r.module ? std::to_string(*r.module).c_str() : "-", r.null, r.bottom_up, r.top_down, r.count);
    }
    std::printf("samples with >= 5 steps of top-down share >= 0.5: %.2f%%; mean top-down share %.2f%%\n",
                100.0 * usage.fraction_high_top_down, 100.0 * usage.mean_top_down);

    const fs::path dir = output_root(a.out) / "attention";
    export_records(dir / ("records" + extension(format)), records, format);
    export_shares(dir / ("shares" + extension(format)), rows, format);
    nlohmann::ordered_json u;
    u["fraction_high_top_down"] = usage.fraction_high_top_down;
    u["mean_top_down"] = usage.mean_top_down;
    u["samples"] = usage.samples;
    u["threshold"] = 0.5;
    u["min_steps"] = 5;
    write_text(dir / "usage.json", u.dump(2) + "\n");
    std::cout << "outputs in " << dir.string() << "\n";
    return 0;
}

// ---- gen-data -----------------------------------------------------------------

struct GenArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

std::vector<AddingSample> adding_from_batch(const SequenceBatch& b) {
    std::vector<AddingSample> out(b.count);
    for (std::size_t i = 0; i < b.count; ++i) {
        auto& s = out[i];
        for (std::size_t t = 0; t < b.length; ++t) {
            s.values.push_back(b.value(t, i, 0));
            s.markers.push_back(b.value(t, i, 1) != 0.0 || b.value(t, i, 2) != 0.0);
        }
        s.target = b.targets[i];
    }
    return out;
}

int run_gen_data(const GenArgs& a) {
    RunConfig cfg = read_run_config(a.config);
    if (a.seed) cfg.task.seed = *a.seed;
    const TaskData data = prepare_task(cfg.task);
    const fs::path dir = output_root(a.out) / "data" / fs::path(a.config).stem();
    fs::create_directories(dir);
    for (Split split : {Split::Train, Split::Validation, Split::Test}) {
        const std::string name = to_string(split);
        if (cfg.task.kind == TaskKind::Adding) {
            const auto path = dir / (name + ".ndjson");
            write_adding_ndjson(path, adding_from_batch(data.split(split)));
            std::cout << path.string() << ": " << data.split(split).count << " sequences\n";
        } else {
            const auto& images = split == Split::Train        ? data.train_images
                                 : split == Split::Validation ? data.validation_images
                                                              : data.test_images;
            save_idx_images(dir / (name + "-images.idx"), dir / (name + "-labels.idx"), images);
            std::cout << (dir / (name + "-images.idx")).string() << ": " << images.size() << " images\n";
        }
    }
    nlohmann::ordered_json task;
    task["task"] = to_json(cfg.task);
    write_text(dir / "task.json", task.dump(2) + "\n");
    return 0;
}

// ---- param-count --------------------------------------------------------------

struct CountArgs {
    std::string config;
    std::vector<std::string> compare;
};

int run_param_count(const CountArgs& a) {
    const auto j = read_json(a.config);
    const BrimsConfig cfg = j.contains("model") ? run_config_from_json(j).model : config_from_json(j);
    const std::size_t count = parameter_count(make_variant(cfg, 0));
    std::cout << to_string(cfg.variant) << " " << count << "\n";
    for (const auto& name : a.compare) {
        const Variant v = parse_variant(name);
        const BrimsConfig base = matched_baseline(cfg, v);
        const std::size_t n = parameter_count(make_variant(base, 0));
        std::cout << to_string(v) << " " << n << " (width " << base.module_size.front() << ")\n";
        std::cout << "ratio " << fixed(static_cast<double>(n) / static_cast<double>(count)) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train, evaluate and inspect bidirectional recurrent independent mechanisms"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 success, 1 invalid input, 2 runtime failure. BRIMS_OUT_DIR sets the default --out.");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train one model per seed from a JSON config");
    train_cmd->add_option("--config", train_args.config, "Run config (JSON)")->required();
    train_cmd->add_option("--seed", train_args.seed, "Train this seed only");
    train_cmd->add_option("--checkpoint", train_args.checkpoint, "Resume from a last.ckpt");
    train_cmd->add_option("--out", train_args.out, "Output directory");
    train_cmd->add_option("--format", train_args.format, "Table format: csv or ndjson");
    train_cmd->add_option("--shift", train_args.shifts, "Extra test condition, e.g. len=200 or res=19x19");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint under distribution shifts");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--shift", eval_args.shifts, "Test condition (repeatable): len=, k=, res=, rho=");
    eval_cmd->add_option("--split", eval_args.split, "train, validation or test");
    eval_cmd->add_option("--out", eval_args.out, "Write the table to this directory");
    eval_cmd->add_option("--format", eval_args.format, "Table format: csv or ndjson");

    GradcheckArgs gc_args;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gc_cmd->add_option("--config", gc_args.config, "Model or run config; default: two-layer reference models");
    gc_cmd->add_option("--seed", gc_args.seed, "Seed for shapes, inputs and parameters");
    gc_cmd->add_option("--steps", gc_args.steps, "Unroll length");

    AnalyzeArgs an_args;
    auto* an_cmd = app.add_subcommand("analyze-attention", "Attention shares under a corruption sweep");
    an_cmd->add_option("--checkpoint", an_args.checkpoint, "Checkpoint file")->required();
    an_cmd->add_option("--shift", an_args.shifts, "Conditions to sweep; default rho=0,0.125,0.25,0.5 for digits");
    an_cmd->add_option("--samples", an_args.samples, "Sequences per condition (0: whole split)");
    an_cmd->add_option("--layer", an_args.layer, "Layer index to average over, or 'all'");
    an_cmd->add_option("--split", an_args.split, "train, validation or test");
    an_cmd->add_flag("--active-only", an_args.active_only, "Average over active modules only");
    an_cmd->add_flag("--by-module", an_args.by_module, "One row per module");
    an_cmd->add_option("--out", an_args.out, "Output directory");
    an_cmd->add_option("--format", an_args.format, "Export format: csv or ndjson");

    GenArgs gen_args;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write the seeded task data of a config");
    gen_cmd->add_option("--config", gen_args.config, "Run config (JSON)")->required();
    gen_cmd->add_option("--seed", gen_args.seed, "Override the task seed");
    gen_cmd->add_option("--out", gen_args.out, "Output directory");

    CountArgs count_args;
    auto* count_cmd = app.add_subcommand("param-count", "Parameter counts of a config and matched baselines");
    count_cmd->add_option("--config", count_args.config, "Model or run config")->required();
    count_cmd->add_option("--compare", count_args.compare, "Baseline variant (repeatable), e.g. lstm");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kValidationFailure;
    }

    try {
        if (*train_cmd) return run_train(train_args);
        if (*eval_cmd) return run_eval(eval_args);
        if (*gc_cmd) return run_gradcheck(gc_args);
        if (*an_cmd) return run_analyze(an_args);
        if (*gen_cmd) return run_gen_data(gen_args);
        if (*count_cmd) return run_param_count(count_args);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationFailure;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationFailure;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return kRuntimeFailure;
    }
    return kValidationFailure;
}
