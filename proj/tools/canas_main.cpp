// canas: conflict-aware NAS toolkit command line.
//
// Subcommands: space, flops, train, analyze, search, bank.
// Exit codes: 0 ok, 1 usage, 2 config/input error, 3 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "canas/arch_space.hpp"
#include "canas/conflict.hpp"
#include "canas/dataset.hpp"
#include "canas/evosearch.hpp"
#include "canas/flops.hpp"
#include "canas/manifest.hpp"
#include "canas/trainer.hpp"

namespace {

using namespace canas;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string join_args(int argc, char** argv) {
    std::ostringstream os;
    for (int i = 0; i < argc; ++i) os << (i ? " " : "") << argv[i];
    return os.str();
}

SpaceSpec load_space_checked(const std::string& path) {
    SpaceSpec space;
    try {
        space = load_space(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    const auto errs = validate(space);
    if (!errs.empty()) {
        std::ostringstream os;
        os << "invalid space " << path << ":";
        for (const auto& e : errs) os << "\n  - " << e;
        throw ConfigError(os.str());
    }
    return space;
}

TrainerSnapshot load_checkpoint_checked(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path);
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

// Rebuilds the pieces analyze/search need from a self-contained checkpoint.
struct LoadedRun {
    TrainConfig config;
    SpaceSpec space;
    SupernetWeights weights;
    Dataset dataset;
    std::int64_t step = 0;
    TrainerSnapshot snapshot;
};

LoadedRun load_run(const std::string& checkpoint_path) {
    auto snap = load_checkpoint_checked(checkpoint_path);
    LoadedRun run{parse_train_config(snap.config_text, ""), parse_space(snap.space_text),
                  SupernetWeights{}, Dataset{}, snap.step, {}};
    if (run.space.hash() != snap.space_hash) throw ConfigError("checkpoint space hash mismatch");
    run.weights.params = std::move(snap.weights);
    run.dataset = run.config.dataset.kind == DatasetSpec::Kind::File
                      ? Dataset::from_file(run.config.dataset.path)
                      : Dataset::synthetic(run.config.dataset, run.space.in_channels,
                                           run.space.resolutions.back());
    return run;
}

std::vector<double> parse_limits(const std::string& csv) {
    std::vector<double> out;
    std::string item;
    std::istringstream is(csv);
    while (std::getline(is, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw ConfigError("no values in '" + csv + "'");
    return out;
}

// ---------------------------------------------------------------------------

int cmd_space(const std::string& path, bool as_json) {
    SpaceSpec space;
    try {
        space = load_space(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    const auto errs = validate(space);
    const bool ok = errs.empty();

    nlohmann::json j{{"space", space.name}, {"valid", ok}, {"errors", errs}};
    if (ok) {
        const auto card = cardinality(space);
        const auto card_pl = cardinality(space, CountingConvention::PerLayerChoices);
        const double mn = subnet_mflops(space, min_subnet(space));
        const double mx = subnet_mflops(space, max_subnet(space));
        j["cardinality"] = card.exact.str();
        j["log10_cardinality"] = card.log10;
        j["per_layer_cardinality"] = card_pl.exact.str();
        j["per_layer_log10"] = card_pl.log10;
        j["min_mflops"] = mn;
        j["max_mflops"] = mx;
        j["stages"] = space.stages.size();
        j["resolutions"] = space.resolutions;
        j["space_hash"] = hex64(space.hash());
    }
    if (as_json) {
        std::cout << j.dump(2) << "\n";
    } else if (ok) {
        std::printf("space %s: valid\n", space.name.c_str());
        std::printf("  stages            %zu\n", space.stages.size());
        std::printf("  subnets           %s (log10 = %.3f)\n", j["cardinality"].get<std::string>().c_str(),
                    j["log10_cardinality"].get<double>());
        std::printf("  per-layer count   log10 = %.3f\n", j["per_layer_log10"].get<double>());
        std::printf("  min subnet        %.2f MFLOPs\n", j["min_mflops"].get<double>());
        std::printf("  max subnet        %.2f MFLOPs\n", j["max_mflops"].get<double>());
    } else {
        std::printf("space %s: INVALID\n", space.name.c_str());
        for (const auto& e : errs) std::printf("  - %s\n", e.c_str());
    }
    return ok ? 0 : 2;
}

int cmd_flops(const std::string& space_path, const std::string& subnet, bool use_min, bool use_max,
              bool as_json) {
    const auto space = load_space_checked(space_path);
    SubnetConfig cfg;
    if (use_min) {
        cfg = min_subnet(space);
    } else if (use_max) {
        cfg = max_subnet(space);
    } else if (!subnet.empty()) {
        try {
            cfg = parse_subnet(space, subnet);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    } else {
        throw ConfigError("flops: pass --subnet, --min or --max");
    }
    const auto bd = subnet_flops(space, cfg);

    if (as_json) {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : bd.layers)
            layers.push_back({{"stage", l.stage},
                              {"layer", l.layer},
                              {"kind", to_string(l.kind)},
                              {"mflops", l.mflops}});
        nlohmann::json j{{"space", space.name},
                         {"subnet", serialize_subnet(space, cfg)},
                         {"resolution", cfg.resolution},
                         {"total_mflops", bd.total_mflops},
                         {"stage_mflops", bd.stage_mflops},
                         {"stage_out_size", bd.stage_out_size},
                         {"layers", std::move(layers)}};
        std::cout << j.dump(2) << "\n";
    } else {
        std::printf("subnet: %s\n", serialize_subnet(space, cfg).c_str());
        std::printf("resolution: %d\n", cfg.resolution);
        std::printf("%-6s %-12s %6s %12s\n", "stage", "kind", "out", "MFLOPs");
        for (std::size_t s = 0; s < space.stages.size(); ++s)
            std::printf("%-6zu %-12s %6d %12.4f\n", s, to_string(space.stages[s].kind),
                        bd.stage_out_size[s], bd.stage_mflops[s]);
        std::printf("total: %.4f MFLOPs\n", bd.total_mflops);
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& mode_override,
              std::int64_t seed_override, const std::string& out_dir,
              const std::string& resume_path, const std::string& command_line) {
    RunManifest manifest;
    manifest.command_line = command_line;
    manifest.started_at = iso8601_utc_now();

    std::unique_ptr<Trainer> trainer;
    if (!resume_path.empty()) {
        try {
            trainer = std::make_unique<Trainer>(Trainer::resume(resume_path));
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    } else {
        if (!std::filesystem::exists(config_path))
            throw ConfigError("config not found: " + config_path);
        TrainConfig cfg = load_train_config(config_path);
        if (mode_override == "sandwich") cfg.mode = TrainMode::Sandwich;
        else if (mode_override == "elastic") cfg.mode = TrainMode::Elastic;
        else if (!mode_override.empty()) throw ConfigError("unknown mode: " + mode_override);
        if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
        const auto errs = validate(cfg);
        if (!errs.empty()) throw ConfigError("invalid config: " + errs.front());
        try {
            trainer = std::make_unique<Trainer>(std::move(cfg));
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    }

    manifest.config_hash = fnv1a64(serialize(trainer->config()));
    manifest.space_hash = trainer->space().hash();
    manifest.seed = trainer->config().seed;

    trainer->run(out_dir);

    manifest.finished_at = iso8601_utc_now();
    write_manifest((std::filesystem::path(out_dir) / "manifest.json").string(), manifest);
    std::printf("trained to step %lld; metrics and checkpoints in %s\n",
                static_cast<long long>(trainer->current_step()), out_dir.c_str());
    return 0;
}

int cmd_analyze(const std::string& checkpoint_path, const std::string& targets_csv, int n, int top,
                double band, std::int64_t seed, const std::string& out_path, bool emit_csv,
                const std::string& command_line) {
    RunManifest manifest;
    manifest.command_line = command_line;
    manifest.started_at = iso8601_utc_now();
    manifest.seed = static_cast<std::uint64_t>(seed);

    LoadedRun run = load_run(checkpoint_path);
    manifest.config_hash = fnv1a64(run.config.raw_text);
    manifest.space_hash = run.space.hash();

    std::vector<double> targets;
    if (!targets_csv.empty()) {
        targets = parse_limits(targets_csv);
    } else {
        const auto& levels = run.config.ladder_levels;
        if (levels.empty()) throw ConfigError("checkpoint has no ladder; pass --targets");
        targets = {levels.front(), levels[levels.size() / 2], levels.back()};
    }
    if (band <= 0) band = run.config.band;

    RngStream rng(static_cast<std::uint64_t>(seed));
    RngStream batch_rng(static_cast<std::uint64_t>(seed) ^ 0x5851f42d4c957f2dULL);
    const Batch grad_batch = run.dataset.train_batch(run.config.eval_batch_size, batch_rng);
    const auto eval_b = run.dataset.eval_batches(run.config.eval_batch_size);

    SimilarityReport report =
        similarity_sweep(run.weights, run.space, targets, n, band, grad_batch, rng,
                         /*strict_targets=*/false);
    report.good_vs_random = good_vs_random(run.weights, run.space, targets[targets.size() / 2],
                                           band, n, top, eval_b, grad_batch, rng);

    nlohmann::json j = to_json(report);
    j["checkpoint"] = checkpoint_path;
    j["checkpoint_step"] = run.step;
    j["targets"] = targets;
    j["band"] = band;
    write_file_atomic(out_path, j.dump(2) + "\n");
    if (emit_csv) {
        const std::string csv_path =
            (std::filesystem::path(out_path).replace_extension(".csv")).string();
        write_file_atomic(csv_path, to_csv(report));
    }

    manifest.finished_at = iso8601_utc_now();
    write_manifest(out_path + ".manifest.json", manifest);
    std::printf("report written to %s (pearson %.4f, good %.4f vs random %.4f)\n",
                out_path.c_str(), report.pearson_gap_vs_cosine,
                report.good_vs_random->mean_good, report.good_vs_random->mean_random);
    return 0;
}

int cmd_search(const std::string& checkpoint_path, const std::string& device_path,
               const std::string& latency_csv, const std::string& mflops_csv, int budget,
               int population, std::int64_t seed, const std::string& out_path, bool emit_csv,
               const std::string& command_line) {
    RunManifest manifest;
    manifest.command_line = command_line;
    manifest.started_at = iso8601_utc_now();
    manifest.seed = static_cast<std::uint64_t>(seed);

    if (latency_csv.empty() == mflops_csv.empty())
        throw ConfigError("search: pass exactly one of --latency-ms or --mflops");

    LoadedRun run = load_run(checkpoint_path);
    manifest.config_hash = fnv1a64(run.config.raw_text);
    manifest.space_hash = run.space.hash();

    DeviceProfile profile;
    try {
        profile = load_device_profile(device_path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }

    SearchConfig sc;
    sc.constraint.kind = latency_csv.empty() ? Constraint::Kind::MFlops
                                             : Constraint::Kind::LatencyMs;
    const auto limits = parse_limits(latency_csv.empty() ? mflops_csv : latency_csv);
    sc.budget = budget;
    sc.population = population;
    sc.seed = static_cast<std::uint64_t>(seed);

    const auto eval_b = run.dataset.eval_batches(run.config.eval_batch_size);
    const auto results = pareto_sweep(run.weights, run.space, profile, sc, limits, eval_b);

    nlohmann::json j;
    if (results.size() == 1) {
        j = to_json(results[0]);
        if (results[0].feasible) j["subnet"] = serialize_subnet(run.space, results[0].best);
    } else {
        j["results"] = nlohmann::json::array();
        for (const auto& r : results) {
            auto jr = to_json(r);
            if (r.feasible) jr["subnet"] = serialize_subnet(run.space, r.best);
            j["results"].push_back(std::move(jr));
        }
    }
    j["device"] = profile.name;
    j["checkpoint"] = checkpoint_path;
    j["constraint_kind"] = latency_csv.empty() ? "mflops" : "latency_ms";
    j["limits"] = limits;
    write_file_atomic(out_path, j.dump(2) + "\n");
    if (emit_csv) {
        const std::string csv_path =
            (std::filesystem::path(out_path).replace_extension(".csv")).string();
        write_file_atomic(csv_path, sweep_csv(results));
    }

    manifest.finished_at = iso8601_utc_now();
    write_manifest(out_path + ".manifest.json", manifest);
    for (const auto& r : results) {
        if (r.feasible)
            std::printf("limit ok: fitness %.4f, %.2f ms, %.2f MFLOPs, %d evals\n", r.fitness,
                        r.latency_ms, r.mflops, r.evaluations);
        else
            std::printf("limit %.4f: infeasible\n", r.latency_ms);
    }
    return 0;
}

int cmd_bank(const std::string& checkpoint_path) {
    const auto snap = load_checkpoint_checked(checkpoint_path);
    const auto space = parse_space(snap.space_text);
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& level : snap.bank_levels) {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [genome, loss, step_seen] : level)
            entries.push_back({{"genome", genome},
                               {"subnet", serialize_subnet(space, decode(space, genome))},
                               {"loss", loss},
                               {"step_seen", step_seen}});
        levels.push_back(std::move(entries));
    }
    const nlohmann::json j{{"checkpoint", checkpoint_path},
                           {"step", snap.step},
                           {"capacity", snap.bank_capacity},
                           {"levels", std::move(levels)}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conflict-aware two-stage NAS toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));
    const std::string command_line = join_args(argc, argv);

    // space
    auto* sp = app.add_subcommand("space", "validate a space file, report size and FLOPs range");
    std::string sp_path;
    bool sp_json = false;
    sp->add_option("file", sp_path, "space file")->required();
    sp->add_flag("--json", sp_json, "machine-readable output");

    // flops
    auto* fl = app.add_subcommand("flops", "per-stage FLOPs of one subnet");
    std::string fl_space, fl_subnet;
    bool fl_min = false, fl_max = false, fl_json = false;
    fl->add_option("--space", fl_space, "space file")->required();
    fl->add_option("--subnet", fl_subnet, "encoded subnet string");
    fl->add_flag("--min", fl_min, "use the smallest subnet");
    fl->add_flag("--max", fl_max, "use the largest subnet");
    fl->add_flag("--json", fl_json, "machine-readable output");

    // train
    auto* tr = app.add_subcommand("train", "train a supernet");
    std::string tr_config, tr_mode, tr_out = "train-out", tr_resume;
    std::int64_t tr_seed = -1;
    tr->add_option("--config", tr_config, "run config file");
    tr->add_option("--mode", tr_mode, "sandwich|elastic (overrides the config)");
    tr->add_option("--seed", tr_seed, "seed override");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");

    // analyze
    auto* an = app.add_subcommand("analyze", "gradient-conflict reports from a checkpoint");
    std::string an_ckpt, an_targets, an_out = "report.json";
    int an_n = 50, an_top = 10;
    double an_band = 0.0;
    std::int64_t an_seed = 0;
    bool an_csv = false;
    an->add_option("--checkpoint", an_ckpt, "trained checkpoint")->required();
    an->add_option("--targets", an_targets, "comma-separated MFLOPs targets");
    an->add_option("--n", an_n, "subnets per target");
    an->add_option("--top", an_top, "good-subnet count for the comparison");
    an->add_option("--band", an_band, "relative FLOPs band (default: config band)");
    an->add_option("--seed", an_seed, "sampling seed");
    an->add_option("--out", an_out, "report path");
    an->add_flag("--csv", an_csv, "also write plot-ready csv");

    // search
    auto* se = app.add_subcommand("search", "latency-constrained evolutionary search");
    std::string se_ckpt, se_device, se_latency, se_mflops, se_out = "result.json";
    int se_budget = 5000, se_population = 64;
    std::int64_t se_seed = 0;
    bool se_csv = false;
    se->add_option("--checkpoint", se_ckpt, "trained checkpoint")->required();
    se->add_option("--device", se_device, "device profile file")->required();
    se->add_option("--latency-ms", se_latency, "latency limit(s), comma-separated");
    se->add_option("--mflops", se_mflops, "FLOPs limit(s), comma-separated");
    se->add_option("--budget", se_budget, "total evaluation budget");
    se->add_option("--population", se_population, "population size");
    se->add_option("--seed", se_seed, "search seed");
    se->add_option("--out", se_out, "result path");
    se->add_flag("--csv", se_csv, "also write sweep csv");

    // bank
    auto* bk = app.add_subcommand("bank", "dump the memory bank of a checkpoint as JSON");
    std::string bk_ckpt, bk_action = "dump";
    bk->add_option("action", bk_action, "dump (default)");
    bk->add_option("--checkpoint", bk_ckpt, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage error
    }

    try {
        if (sp->parsed()) return cmd_space(sp_path, sp_json);
        if (fl->parsed()) return cmd_flops(fl_space, fl_subnet, fl_min, fl_max, fl_json);
        if (tr->parsed()) {
            if (tr_config.empty() && tr_resume.empty())
                throw ConfigError("train: pass --config or --resume");
            return cmd_train(tr_config, tr_mode, tr_seed, tr_out, tr_resume, command_line);
        }
        if (an->parsed())
            return cmd_analyze(an_ckpt, an_targets, an_n, an_top, an_band, an_seed, an_out, an_csv,
                               command_line);
        if (se->parsed())
            return cmd_search(se_ckpt, se_device, se_latency, se_mflops, se_budget, se_population,
                              se_seed, se_out, se_csv, command_line);
        if (bk->parsed()) {
            if (bk_action != "dump") throw ConfigError("bank: unknown action '" + bk_action + "'");
            return cmd_bank(bk_ckpt);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 3;
    }
    return 1;
}
