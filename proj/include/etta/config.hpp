#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "etta/bilevel.hpp"
#include "etta/eval.hpp"
#include "etta/metatrain.hpp"

namespace etta {

// Configuration / usage problems map to exit code 2 in the CLI.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using json = nlohmann::ordered_json;

inline json config_defaults() {
    return json{
        {"data",
         {{"source", "synthetic"},
          {"family", "rotated_two_moons"},
          {"num_domains", 4},
          {"samples_per_domain", 400},
          {"domain_params", {0.0, 30.0, 60.0, 90.0}},
          {"noise", 0.1},
          {"seed", 7},
          {"dir", ""}}},
        {"model",
         {{"backbone", "mlp"}, {"hidden", 64}, {"d_z", 32}, {"temperature", 0.1}}},
        {"train",
         {{"alpha", 5e-5},
          {"beta", 5e-5},
          {"gamma1", 1.0},
          {"gamma2", 0.5},
          {"clip_norm", 2.0},
          {"iterations", 2000},
          {"inner_steps", 1},
          {"batch_per_domain", 120},
          {"n_te", 120},
          {"meta_objective_mode", "se"},
          {"sampler_mode", "mts"},
          {"mts", {{"mode", "uniform_range"}, {"r_ho", 1.0}, {"r_ho_lo", 0.0}, {"r_ho_hi", 1.0}}},
          {"second_order", true},
          {"class_balanced", true},
          {"optimizer_roles", "standard"},
          {"adam_beta1", 0.9},
          {"adam_beta2", 0.999},
          {"adam_eps", 1e-8},
          {"seed", 0},
          {"held_out", nullptr},
          {"checkpoint_interval", 0}}},
        {"eval",
         {{"seeds", {1, 2, 3}},
          {"methods",
           json::array({json{{"name", "deepall"}, {"kind", "deepall"}, {"overrides", json::object()}},
                        json{{"name", "etta_se"}, {"kind", "etta"}, {"overrides", json::object()}}})},
          {"out_dir", ""},
          {"split_seed", 7301},
          {"train_fraction", 0.7},
          {"burn_in", 0},
          {"smooth_window", 0},
          {"jobs", 1}}}};
}

namespace detail {

// Every provided key must exist in the defaults tree; unknown keys are hard
// errors so config typos cannot pass silently.
inline void validate_keys(const json& provided, const json& defaults, const std::string& prefix) {
    if (!provided.is_object()) return;
    for (const auto& [key, value] : provided.items()) {
        std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!defaults.is_object() || !defaults.contains(key))
            throw ConfigError("unknown config key: " + path);
        // methods is an array of structured entries validated separately
        if (key == "methods" && value.is_array()) {
            for (const auto& entry : value) {
                if (!entry.is_object()) throw ConfigError("eval.methods entries must be objects");
                for (const auto& [mk, mv] : entry.items()) {
                    if (mk != "name" && mk != "kind" && mk != "overrides")
                        throw ConfigError("unknown config key: " + path + "[]." + mk);
                    (void)mv;
                }
            }
            continue;
        }
        if (value.is_object()) validate_keys(value, defaults.at(key), path);
    }
}

inline void merge_into(json& base, const json& overlay) {
    for (const auto& [key, value] : overlay.items()) {
        if (value.is_object() && base.contains(key) && base.at(key).is_object()) {
            merge_into(base.at(key), value);
        } else {
            base[key] = value;
        }
    }
}

inline std::vector<std::string> split_path(const std::string& dotted) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : dotted) {
        if (c == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    return parts;
}

} // namespace detail

// Merged config (defaults <- file <- --set overrides), canonical form.
inline json merge_config(const json& file_config) {
    json merged = config_defaults();
    detail::validate_keys(file_config, merged, "");
    detail::merge_into(merged, file_config);
    return merged;
}

inline json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json parsed;
    try {
        parsed = json::parse(in);
    } catch (const std::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return parsed;
}

// Applies one dotted-path key=value override; the key must already exist.
inline void apply_override(json& config, const std::string& dotted, const std::string& raw_value) {
    auto parts = detail::split_path(dotted);
    json* node = &config;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i]))
            throw ConfigError("unknown config key: " + dotted);
        node = &node->at(parts[i]);
    }
    if (!node->is_object() || !node->contains(parts.back()))
        throw ConfigError("unknown config key: " + dotted);
    json value;
    try {
        value = json::parse(raw_value);
    } catch (...) {
        value = raw_value; // plain string
    }
    (*node)[parts.back()] = value;
}

inline void apply_set_args(json& config, const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + s);
        apply_override(config, s.substr(0, eq), s.substr(eq + 1));
    }
}

// Stable content hash over the canonicalized (sorted-key, compact) form.
inline std::string config_hash(const json& config) {
    nlohmann::json sorted = nlohmann::json::parse(config.dump()); // plain json sorts object keys
    std::string canon = sorted.dump();
    std::uint64_t h = fnv1a64(canon.data(), canon.size());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---- typed sections ---------------------------------------------------------

struct DataConfig {
    enum class Source { synthetic, dir };
    Source source = Source::synthetic;
    SyntheticFamily family = SyntheticFamily::rotated_two_moons;
    int num_domains = 4;
    int samples_per_domain = 400;
    std::vector<double> domain_params;
    double noise = 0.1;
    std::uint64_t seed = 7;
    std::string dir;
};

struct EvalMethodSpec {
    std::string name;
    MethodConfig::Kind kind = MethodConfig::Kind::etta;
    json overrides; // dotted-path -> value, applied over the full config
};

struct EvalSection {
    std::vector<std::uint64_t> seeds;
    std::vector<EvalMethodSpec> methods;
    std::string out_dir;
    std::uint64_t split_seed = 7301;
    double train_fraction = 0.7;
    int burn_in = 0;
    int smooth_window = 0;
    int jobs = 1;
};

struct ExperimentConfig {
    json resolved;
    std::string hash;
    DataConfig data;
    TrainConfig train; // includes backbone + temperature from the model section
    std::optional<std::variant<int, std::string>> held_out;
    int checkpoint_interval = 0;
    EvalSection eval;

    static ExperimentConfig from_resolved(const json& merged);
};

namespace detail {

template <typename T>
T get_as(const json& node, const std::string& path) {
    try {
        return node.get<T>();
    } catch (const std::exception&) {
        throw ConfigError("config key " + path + " has the wrong type");
    }
}

} // namespace detail

inline ExperimentConfig ExperimentConfig::from_resolved(const json& merged) {
    ExperimentConfig c;
    c.resolved = merged;
    c.hash = config_hash(merged);

    const json& d = merged.at("data");
    {
        std::string src = detail::get_as<std::string>(d.at("source"), "data.source");
        if (src == "synthetic") {
            c.data.source = DataConfig::Source::synthetic;
        } else if (src == "dir") {
            c.data.source = DataConfig::Source::dir;
        } else {
            throw ConfigError("data.source must be 'synthetic' or 'dir'");
        }
        try {
            c.data.family = synthetic_family_from_string(detail::get_as<std::string>(d.at("family"), "data.family"));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        c.data.num_domains = detail::get_as<int>(d.at("num_domains"), "data.num_domains");
        c.data.samples_per_domain = detail::get_as<int>(d.at("samples_per_domain"), "data.samples_per_domain");
        c.data.domain_params = detail::get_as<std::vector<double>>(d.at("domain_params"), "data.domain_params");
        c.data.noise = detail::get_as<double>(d.at("noise"), "data.noise");
        c.data.seed = detail::get_as<std::uint64_t>(d.at("seed"), "data.seed");
        c.data.dir = detail::get_as<std::string>(d.at("dir"), "data.dir");
    }

    const json& m = merged.at("model");
    {
        try {
            c.train.backbone.kind = backbone_from_string(detail::get_as<std::string>(m.at("backbone"), "model.backbone"));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        c.train.backbone.hidden = detail::get_as<int>(m.at("hidden"), "model.hidden");
        c.train.backbone.d_z = detail::get_as<int>(m.at("d_z"), "model.d_z");
        c.train.temperature = detail::get_as<double>(m.at("temperature"), "model.temperature");
    }

    const json& t = merged.at("train");
    {
        c.train.alpha = detail::get_as<double>(t.at("alpha"), "train.alpha");
        c.train.beta = detail::get_as<double>(t.at("beta"), "train.beta");
        c.train.gamma1 = detail::get_as<double>(t.at("gamma1"), "train.gamma1");
        c.train.gamma2 = detail::get_as<double>(t.at("gamma2"), "train.gamma2");
        c.train.clip_norm = detail::get_as<double>(t.at("clip_norm"), "train.clip_norm");
        c.train.iterations = detail::get_as<int>(t.at("iterations"), "train.iterations");
        c.train.inner_steps = detail::get_as<int>(t.at("inner_steps"), "train.inner_steps");
        c.train.batch_per_domain = detail::get_as<std::size_t>(t.at("batch_per_domain"), "train.batch_per_domain");
        c.train.n_te = detail::get_as<std::size_t>(t.at("n_te"), "train.n_te");
        std::string mode = detail::get_as<std::string>(t.at("meta_objective_mode"), "train.meta_objective_mode");
        if (mode == "se") {
            c.train.meta_objective_mode = MetaObjectiveMode::se;
        } else if (mode == "task_only") {
            c.train.meta_objective_mode = MetaObjectiveMode::task_only;
        } else {
            throw ConfigError("train.meta_objective_mode must be 'se' or 'task_only'");
        }
        std::string sampler = detail::get_as<std::string>(t.at("sampler_mode"), "train.sampler_mode");
        if (sampler == "ts") {
            c.train.sampler_mode = SamplerMode::ts;
        } else if (sampler == "mts") {
            c.train.sampler_mode = SamplerMode::mts;
        } else {
            throw ConfigError("train.sampler_mode must be 'ts' or 'mts'");
        }
        const json& mts = t.at("mts");
        std::string smode = detail::get_as<std::string>(mts.at("mode"), "train.mts.mode");
        if (smode == "fixed") {
            c.train.schedule.mode = MixRatioSchedule::Mode::fixed;
        } else if (smode == "uniform_range") {
            c.train.schedule.mode = MixRatioSchedule::Mode::uniform_range;
        } else {
            throw ConfigError("train.mts.mode must be 'fixed' or 'uniform_range'");
        }
        c.train.schedule.r_ho_value = detail::get_as<double>(mts.at("r_ho"), "train.mts.r_ho");
        c.train.schedule.r_ho_lo = detail::get_as<double>(mts.at("r_ho_lo"), "train.mts.r_ho_lo");
        c.train.schedule.r_ho_hi = detail::get_as<double>(mts.at("r_ho_hi"), "train.mts.r_ho_hi");
        c.train.second_order = detail::get_as<bool>(t.at("second_order"), "train.second_order");
        c.train.class_balanced = detail::get_as<bool>(t.at("class_balanced"), "train.class_balanced");
        std::string roles = detail::get_as<std::string>(t.at("optimizer_roles"), "train.optimizer_roles");
        if (roles == "standard") {
            c.train.optimizer_roles = OptimizerRoles::standard;
        } else if (roles == "swapped") {
            c.train.optimizer_roles = OptimizerRoles::swapped;
        } else {
            throw ConfigError("train.optimizer_roles must be 'standard' or 'swapped'");
        }
        c.train.adam_beta1 = detail::get_as<double>(t.at("adam_beta1"), "train.adam_beta1");
        c.train.adam_beta2 = detail::get_as<double>(t.at("adam_beta2"), "train.adam_beta2");
        c.train.adam_eps = detail::get_as<double>(t.at("adam_eps"), "train.adam_eps");
        c.train.seed = detail::get_as<std::uint64_t>(t.at("seed"), "train.seed");
        const json& held = t.at("held_out");
        if (held.is_null()) {
            c.held_out.reset();
        } else if (held.is_number_integer()) {
            c.held_out = held.get<int>();
        } else if (held.is_string()) {
            c.held_out = held.get<std::string>();
        } else {
            throw ConfigError("train.held_out must be null, a domain id, or a domain name");
        }
        c.checkpoint_interval = detail::get_as<int>(t.at("checkpoint_interval"), "train.checkpoint_interval");
        if (c.checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval must be >= 0");
    }

    const json& e = merged.at("eval");
    {
        c.eval.seeds = detail::get_as<std::vector<std::uint64_t>>(e.at("seeds"), "eval.seeds");
        for (const auto& entry : e.at("methods")) {
            EvalMethodSpec spec;
            spec.name = detail::get_as<std::string>(entry.at("name"), "eval.methods[].name");
            std::string kind = detail::get_as<std::string>(entry.at("kind"), "eval.methods[].kind");
            if (kind == "etta") {
                spec.kind = MethodConfig::Kind::etta;
            } else if (kind == "deepall") {
                spec.kind = MethodConfig::Kind::deepall;
            } else {
                throw ConfigError("eval.methods[].kind must be 'etta' or 'deepall'");
            }
            spec.overrides = entry.contains("overrides") ? entry.at("overrides") : json::object();
            c.eval.methods.push_back(std::move(spec));
        }
        c.eval.out_dir = detail::get_as<std::string>(e.at("out_dir"), "eval.out_dir");
        c.eval.split_seed = detail::get_as<std::uint64_t>(e.at("split_seed"), "eval.split_seed");
        c.eval.train_fraction = detail::get_as<double>(e.at("train_fraction"), "eval.train_fraction");
        c.eval.burn_in = detail::get_as<int>(e.at("burn_in"), "eval.burn_in");
        c.eval.smooth_window = detail::get_as<int>(e.at("smooth_window"), "eval.smooth_window");
        c.eval.jobs = detail::get_as<int>(e.at("jobs"), "eval.jobs");
    }

    try {
        c.train.validate();
    } catch (const std::invalid_argument& e2) {
        throw ConfigError(e2.what());
    }
    return c;
}

// Domains as configured: generated in memory for synthetic sources, loaded
// from disk otherwise.
inline std::vector<DomainDataset> load_domains(const ExperimentConfig& cfg) {
    if (cfg.data.source == DataConfig::Source::synthetic) {
        return generate_synthetic_domains(cfg.data.family, cfg.data.num_domains, cfg.data.samples_per_domain,
                                          cfg.data.domain_params, cfg.data.seed, cfg.data.noise);
    }
    if (cfg.data.dir.empty()) throw ConfigError("data.source='dir' requires data.dir");
    return load_domain_root(cfg.data.dir);
}

// The method's effective config: its overrides applied on top of the resolved
// experiment config, re-validated.
inline TrainConfig method_train_config(const ExperimentConfig& cfg, const EvalMethodSpec& method) {
    json merged = cfg.resolved;
    for (const auto& [key, value] : method.overrides.items()) {
        apply_override(merged, key, value.is_string() ? value.get<std::string>() : value.dump());
    }
    return ExperimentConfig::from_resolved(merged).train;
}

} // namespace etta
