#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "etta/config.hpp"

namespace etta {

// ---- episodes.csv (fixed column order; empty cells for absent channels) -----

inline constexpr const char* kEpisodesHeader =
    "iteration,loss_task_tr,loss_sa,loss_pa,loss_meta,loss_task_metatest,loss_task_unseen,r_ho";

namespace detail {

inline std::string csv_cell(const std::optional<double>& v) {
    if (!v) return "";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", *v);
    return buf;
}

} // namespace detail

inline void write_episodes_csv(const std::vector<EpisodeLog>& logs, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << kEpisodesHeader << "\n";
    for (const auto& log : logs) {
        out << log.iteration << "," << detail::csv_cell(log.loss_task_tr) << "," << detail::csv_cell(log.sa)
            << "," << detail::csv_cell(log.pa) << "," << detail::csv_cell(log.meta) << ","
            << detail::csv_cell(log.loss_task_metatest) << "," << detail::csv_cell(log.loss_task_unseen)
            << "," << detail::csv_cell(log.r_ho) << "\n";
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::vector<EpisodeLog> read_episodes_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kEpisodesHeader)
        throw std::runtime_error("unexpected episodes.csv header in " + path.string());
    std::vector<EpisodeLog> logs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                cells.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        cells.push_back(cur);
        if (cells.size() != 8) throw std::runtime_error("malformed episodes.csv row in " + path.string());
        EpisodeLog log;
        log.iteration = std::stoi(cells[0]);
        auto opt = [](const std::string& s) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return std::stod(s);
        };
        log.loss_task_tr = cells[1].empty() ? 0.0 : std::stod(cells[1]);
        log.sa = opt(cells[2]);
        log.pa = opt(cells[3]);
        log.meta = opt(cells[4]);
        log.loss_task_metatest = opt(cells[5]);
        log.loss_task_unseen = opt(cells[6]);
        log.r_ho = opt(cells[7]);
        logs.push_back(log);
    }
    return logs;
}

namespace detail {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    bool force = false;
};

inline ExperimentConfig load_experiment(const CommonOpts& opts) {
    json merged = merge_config(load_config_file(opts.config_path));
    apply_set_args(merged, opts.sets);
    return ExperimentConfig::from_resolved(merged);
}

inline std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg) {
    if (!cfg.eval.out_dir.empty()) return cfg.eval.out_dir;
    if (const char* env = std::getenv("ETTA_OUT_DIR"); env && *env) return env;
    throw ConfigError("no output directory: set eval.out_dir or the ETTA_OUT_DIR environment variable");
}

// A directory holding a previous run is never silently overwritten.
inline void prepare_out_dir(const std::filesystem::path& dir, bool force) {
    if (std::filesystem::exists(dir / "config.resolved.json") && !force)
        throw ConfigError("output directory " + dir.string() +
                          " already holds a run; pass --force to overwrite");
    std::filesystem::create_directories(dir);
}

inline void write_resolved_config(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    std::ofstream out(dir / "config.resolved.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "config.resolved.json").string());
    out << cfg.resolved.dump(2) << "\n";
}

// Positional index of the held-out domain, by id or by name.
inline std::size_t resolve_held_out(const std::vector<DomainDataset>& domains,
                                    const std::variant<int, std::string>& sel) {
    for (std::size_t i = 0; i < domains.size(); ++i) {
        if (std::holds_alternative<int>(sel)
                ? domains[i].domain_id() == std::get<int>(sel)
                : domains[i].name() == std::get<std::string>(sel)) {
            return i;
        }
    }
    throw ConfigError("train.held_out does not match any configured domain");
}

inline nlohmann::json final_metrics(const ModelParams& params, const std::vector<DomainDataset>& domains,
                                    const DomainDataset* held_out) {
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& d : domains) acc[d.name()] = dataset_accuracy(params, d);
    nlohmann::json out = {{"acc", acc}};
    if (held_out) {
        out["held_out"] = held_out->name();
        out["acc_held_out"] = dataset_accuracy(params, *held_out);
    } else {
        out["held_out"] = nullptr;
    }
    return out;
}

inline int cmd_generate_data(const CommonOpts& opts) {
    ExperimentConfig cfg = load_experiment(opts);
    if (cfg.data.source != DataConfig::Source::synthetic)
        throw ConfigError("generate-data requires data.source='synthetic'");
    if (cfg.data.dir.empty()) throw ConfigError("generate-data requires data.dir");
    std::filesystem::path root = cfg.data.dir;
    if (std::filesystem::exists(root) && !std::filesystem::is_empty(root) && !opts.force)
        throw ConfigError("data directory " + root.string() + " is not empty; pass --force to overwrite");
    auto domains = generate_synthetic_domains(cfg.data.family, cfg.data.num_domains,
                                              cfg.data.samples_per_domain, cfg.data.domain_params,
                                              cfg.data.seed, cfg.data.noise);
    for (const auto& d : domains) save_domain_dir(d, root / d.name());
    std::cout << "wrote " << domains.size() << " domains under " << root.string() << "\n";
    return 0;
}

inline int cmd_train(const CommonOpts& opts, bool deepall) {
    ExperimentConfig cfg = load_experiment(opts);
    auto out_dir = resolve_out_dir(cfg);
    prepare_out_dir(out_dir, opts.force);
    write_resolved_config(cfg, out_dir);

    auto all_domains = load_domains(cfg);
    std::vector<DomainDataset> train_domains;
    const DomainDataset* diagnostics = nullptr;
    if (cfg.held_out) {
        std::size_t h = resolve_held_out(all_domains, *cfg.held_out);
        for (std::size_t i = 0; i < all_domains.size(); ++i)
            if (i != h) train_domains.push_back(all_domains[i]);
        diagnostics = &all_domains[h];
    } else {
        train_domains = all_domains;
    }

    TrainHooks hooks;
    if (cfg.checkpoint_interval > 0) {
        hooks.on_iteration = [&](int it, const ModelParams& params, const EpisodeLog&) {
            if (it % cfg.checkpoint_interval == 0) {
                char name[64];
                std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", it);
                save_checkpoint(params, cfg.hash, out_dir / name);
            }
        };
    }

    TrainResult result = deepall ? train_deepall(train_domains, cfg.train, hooks)
                                 : train(train_domains, cfg.train, diagnostics, hooks);

    write_episodes_csv(result.logs, out_dir / "episodes.csv");
    save_checkpoint(result.params, cfg.hash, out_dir / "final.ckpt");
    nlohmann::json results = {{"command", deepall ? "deepall" : "train"},
                              {"config_hash", cfg.hash},
                              {"iterations", cfg.train.iterations},
                              {"final", final_metrics(result.params, train_domains, diagnostics)}};
    std::ofstream rf(out_dir / "results.json");
    rf << results.dump(2) << "\n";
    std::cout << "run complete: " << (out_dir / "results.json").string() << "\n";
    return 0;
}

inline int cmd_lodo(const CommonOpts& opts, int jobs_override) {
    ExperimentConfig cfg = load_experiment(opts);
    auto out_dir = resolve_out_dir(cfg);
    prepare_out_dir(out_dir, opts.force);
    write_resolved_config(cfg, out_dir);

    auto domains = load_domains(cfg);
    std::vector<MethodConfig> methods;
    for (const auto& spec : cfg.eval.methods) {
        MethodConfig m;
        m.name = spec.name;
        m.kind = spec.kind;
        m.train = method_train_config(cfg, spec);
        methods.push_back(std::move(m));
    }
    LodoOptions options;
    options.train_fraction = cfg.eval.train_fraction;
    options.split_seed = cfg.eval.split_seed;
    options.jobs = jobs_override > 0 ? jobs_override : cfg.eval.jobs;
    options.config_hash = cfg.hash;

    auto results = leave_one_domain_out(domains, methods, cfg.eval.seeds, options);

    nlohmann::json out = {{"command", "lodo"},
                          {"config_hash", cfg.hash},
                          {"seeds", cfg.eval.seeds},
                          {"results", run_results_to_json(results)}};
    std::ofstream rf(out_dir / "results.json");
    rf << out.dump(2) << "\n";

    std::vector<std::string> names;
    for (const auto& d : domains) names.push_back(d.name());
    std::string table = run_results_table(results, names);
    std::ofstream tf(out_dir / "results.txt");
    tf << table;
    std::cout << table;
    return 0;
}

inline int cmd_gap_area(const CommonOpts& opts, const std::string& run_dir) {
    ExperimentConfig cfg = load_experiment(opts);
    std::filesystem::path run = run_dir.empty() ? resolve_out_dir(cfg) : std::filesystem::path(run_dir);
    auto logs = read_episodes_csv(run / "episodes.csv");
    double area = overfit_gap_area(logs, cfg.eval.burn_in, cfg.eval.smooth_window);
    nlohmann::json out = {{"command", "gap-area"},
                          {"config_hash", cfg.hash},
                          {"burn_in", cfg.eval.burn_in},
                          {"smooth_window", cfg.eval.smooth_window},
                          {"gap_area", area}};
    std::ofstream rf(run / "gap_area.json");
    rf << out.dump(2) << "\n";
    std::cout << "gap_area " << area << "\n";
    return 0;
}

inline int cmd_export_embeddings(const CommonOpts& opts, const std::string& checkpoint,
                                 const std::string& out_file) {
    ExperimentConfig cfg = load_experiment(opts);
    std::filesystem::path ckpt =
        checkpoint.empty() ? resolve_out_dir(cfg) / "final.ckpt" : std::filesystem::path(checkpoint);
    std::filesystem::path out =
        out_file.empty() ? resolve_out_dir(cfg) / "embeddings.csv" : std::filesystem::path(out_file);
    if (std::filesystem::exists(out) && !opts.force)
        throw ConfigError("output file " + out.string() + " exists; pass --force to overwrite");
    Checkpoint ck = load_checkpoint(ckpt);
    auto domains = load_domains(cfg);
    export_embeddings(ck.params, domains, out);
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

} // namespace detail

// Entry point shared by the binary and the in-process tests. Exit codes:
// 0 success, 1 runtime failure, 2 usage or configuration error.
inline int run_command(std::vector<std::string> argv) {
    CLI::App app{"episodic training with task augmentation for domain generalization"};
    app.require_subcommand(1);

    struct Sub {
        CLI::App* cmd = nullptr;
        detail::CommonOpts opts;
    };
    auto add_common = [&](const char* name, const char* desc) {
        Sub s;
        s.cmd = app.add_subcommand(name, desc);
        s.cmd->add_option("--config", s.opts.config_path, "experiment config (JSON)")->required();
        s.cmd->add_option("--set", s.opts.sets, "dotted-path override, key=value");
        s.cmd->add_flag("--force", s.opts.force, "allow overwriting an existing run");
        return s;
    };

    Sub gen = add_common("generate-data", "write synthetic domains to data.dir");
    Sub train = add_common("train", "episodic training run");
    Sub deepall = add_common("deepall", "pooled supervised baseline run");
    Sub lodo = add_common("lodo", "leave-one-domain-out evaluation grid");
    int jobs_override = 0;
    lodo.cmd->add_option("--jobs", jobs_override, "max concurrent grid cells");
    Sub gap = add_common("gap-area", "overfitting-gap area of a finished run");
    std::string run_dir;
    gap.cmd->add_option("--run", run_dir, "run directory holding episodes.csv");
    Sub exp = add_common("export-embeddings", "embed the configured domains with a checkpoint");
    std::string checkpoint, out_file;
    exp.cmd->add_option("--checkpoint", checkpoint, "checkpoint file (default: <out_dir>/final.ckpt)");
    exp.cmd->add_option("--out", out_file, "output CSV (default: <out_dir>/embeddings.csv)");

    // CLI11 consumes the vector back-to-front.
    std::reverse(argv.begin(), argv.end());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help() << std::flush;
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "etta: error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen.cmd->parsed()) return detail::cmd_generate_data(gen.opts);
        if (train.cmd->parsed()) return detail::cmd_train(train.opts, false);
        if (deepall.cmd->parsed()) return detail::cmd_train(deepall.opts, true);
        if (lodo.cmd->parsed()) return detail::cmd_lodo(lodo.opts, jobs_override);
        if (gap.cmd->parsed()) return detail::cmd_gap_area(gap.opts, run_dir);
        if (exp.cmd->parsed()) return detail::cmd_export_embeddings(exp.opts, checkpoint, out_file);
    } catch (const ConfigError& e) {
        std::cerr << "etta: error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "etta: error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "etta: error: no command\n";
    return 2;
}

} // namespace etta
