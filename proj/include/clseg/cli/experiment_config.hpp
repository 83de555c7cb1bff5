#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/data/volume_io.hpp"
#include "clseg/report/report.hpp"
#include "clseg/synth/phantom.hpp"
#include "clseg/train/trainer.hpp"

namespace clseg {

inline TaskSpec task_spec_from_json(const nlohmann::json& j, uint64_t exp_seed) {
    TaskSpec s;
    s.name = j.at("name").get<std::string>();
    if (j.contains("n_cases")) s.n_cases = j.at("n_cases").get<int>();
    if (j.contains("shape")) s.shape = j.at("shape").get<std::vector<int>>();
    if (j.contains("shift")) {
        const auto& sh = j.at("shift");
        if (sh.contains("noise_sigma")) s.shift.noise_sigma = sh.at("noise_sigma").get<double>();
        if (sh.contains("bias_field_amp")) s.shift.bias_field_amp = sh.at("bias_field_amp").get<double>();
        if (sh.contains("contrast_gamma")) s.shift.contrast_gamma = sh.at("contrast_gamma").get<double>();
        if (sh.contains("fg_intensity")) s.shift.fg_intensity = sh.at("fg_intensity").get<double>();
    }
    s.seed = j.contains("seed") ? j.at("seed").get<uint64_t>() : derive_seed(exp_seed, "task/" + s.name);
    return s;
}

inline nlohmann::json task_spec_to_json(const TaskSpec& s) {
    return {{"name", s.name},
            {"n_cases", s.n_cases},
            {"shape", s.shape},
            {"shift",
             {{"noise_sigma", s.shift.noise_sigma},
              {"bias_field_amp", s.shift.bias_field_amp},
              {"contrast_gamma", s.shift.contrast_gamma},
              {"fg_intensity", s.shift.fg_intensity}}},
            {"seed", s.seed}};
}

/// One experiment = one JSON file. Tasks are either inline TaskSpec blocks
/// (generated on the fly), paths to task.json manifests, or the string
/// "default" for the built-in three-task sequence.
struct ExperimentConfig {
    uint64_t seed = 1234;
    std::filesystem::path output_dir = "runs/exp";
    ArchConfig arch;
    StrategyConfig strategy;
    TrainConfig train;
    FreezeSpec freeze;
    EmptyDicePolicy empty_dice = EmptyDicePolicy::OneWhenBothEmpty;
    bool tuning_mode = false;
    nlohmann::json tasks_json = "default";
    nlohmann::json raw;  // the config as loaded, for provenance

    RunSettings settings() const {
        RunSettings rs;
        rs.arch = arch;
        rs.strategy = strategy;
        rs.train = train;
        rs.freeze = freeze;
        rs.exp_seed = seed;
        rs.empty_dice = empty_dice;
        rs.tuning_mode = tuning_mode;
        return rs;
    }

    /// Resolves the task list into concrete datasets; manifest paths are
    /// interpreted relative to `base_dir`.
    TaskSequence load_tasks(const std::filesystem::path& base_dir = ".") const {
        TaskSequence seq;
        if (tasks_json.is_string() && tasks_json.get<std::string>() == "default") {
            for (const TaskSpec& s : default_task_specs(seed)) seq.tasks.push_back(generate_task(s));
        } else {
            CLSEG_CHECK(tasks_json.is_array(), ErrorCode::ConfigInvalid, "$.tasks: must be \"default\" or an array");
            for (const auto& tj : tasks_json) {
                if (tj.is_string()) {
                    std::filesystem::path p = tj.get<std::string>();
                    seq.tasks.push_back(load_task_manifest(p.is_absolute() ? p : base_dir / p));
                } else {
                    seq.tasks.push_back(generate_task(task_spec_from_json(tj, seed)));
                }
            }
        }
        seq.validate();
        return seq;
    }

    std::vector<TaskSpec> task_specs() const {
        std::vector<TaskSpec> specs;
        if (tasks_json.is_string() && tasks_json.get<std::string>() == "default") return default_task_specs(seed);
        CLSEG_CHECK(tasks_json.is_array(), ErrorCode::ConfigInvalid, "$.tasks: must be \"default\" or an array");
        for (const auto& tj : tasks_json)
            if (!tj.is_string()) specs.push_back(task_spec_from_json(tj, seed));
        return specs;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["output_dir"] = output_dir.string();
        j["arch"] = arch.to_json();
        j["strategy"] = strategy.to_json();
        j["train"] = train.to_json();
        j["freeze"] = freeze.to_json();
        j["metrics"] = {{"empty_dice", empty_dice == EmptyDicePolicy::OneWhenBothEmpty ? "one" : "exclude"}};
        j["tuning_mode"] = tuning_mode;
        j["tasks"] = tasks_json;
        return j;
    }
};

namespace detail {

/// Collects every violated field instead of stopping at the first one.
inline void validate_config_json(const nlohmann::json& j, std::vector<std::string>& problems) {
    auto check = [&](bool ok, const std::string& path, const std::string& msg) {
        if (!ok) problems.push_back(path + ": " + msg);
    };

    if (j.contains("arch")) {
        const auto& a = j.at("arch");
        if (a.contains("variant")) {
            std::string v = a.at("variant").get<std::string>();
            check(v == "plain-unet" || v == "vit-v1" || v == "vit-v2", "$.arch.variant",
                  "must be plain-unet|vit-v1|vit-v2");
        }
        auto pos_int = [&](const char* key, int lo) {
            if (a.contains(key)) check(a.at(key).is_number_integer() && a.at(key).get<int>() >= lo,
                                       std::string("$.arch.") + key, "must be an integer >= " + std::to_string(lo));
        };
        pos_int("levels", 2);
        pos_int("base_channels", 1);
        pos_int("vit_depth", 1);
        pos_int("vit_heads", 1);
        pos_int("vit_dim", 1);
        pos_int("patch_size", 1);
        if (a.contains("vit_dim") && a.contains("vit_heads") && a.at("vit_dim").is_number_integer() &&
            a.at("vit_heads").is_number_integer() && a.at("vit_heads").get<int>() > 0)
            check(a.at("vit_dim").get<int>() % a.at("vit_heads").get<int>() == 0, "$.arch.vit_dim",
                  "must be divisible by vit_heads");
    }
    if (j.contains("strategy")) {
        const auto& s = j.at("strategy");
        if (s.contains("kind")) {
            try {
                strategy_kind_from_string(s.at("kind").get<std::string>());
            } catch (const Error&) {
                problems.push_back("$.strategy.kind: unknown strategy");
            }
        }
        if (s.contains("lambda")) check(s.at("lambda").get<double>() >= 0.0, "$.strategy.lambda", "must be >= 0");
        if (s.contains("alpha")) {
            double v = s.at("alpha").get<double>();
            check(v >= 0.0 && v <= 1.0, "$.strategy.alpha", "must be in [0,1]");
        }
        if (s.contains("update_interval"))
            check(s.at("update_interval").get<int>() >= 1, "$.strategy.update_interval", "must be >= 1");
        if (s.contains("scales")) check(s.at("scales").get<int>() >= 1, "$.strategy.scales", "must be >= 1");
        if (s.contains("replay_fraction")) {
            double v = s.at("replay_fraction").get<double>();
            check(v >= 0.0 && v <= 1.0, "$.strategy.replay_fraction", "must be in [0,1]");
        }
        if (s.contains("tau")) {
            double v = s.at("tau").get<double>();
            check(v >= 0.0 && v <= 1.0, "$.strategy.tau", "must be in [0,1]");
        }
        if (s.contains("target")) {
            std::string t = s.at("target").get<std::string>();
            check(t == "all" || t == "unet" || t == "vit", "$.strategy.target", "must be all|unet|vit");
        }
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        if (t.contains("epochs_per_task"))
            check(t.at("epochs_per_task").get<int>() >= 0, "$.train.epochs_per_task", "must be >= 0");
        if (t.contains("batch_size")) check(t.at("batch_size").get<int>() >= 1, "$.train.batch_size", "must be >= 1");
        if (t.contains("learning_rate"))
            check(t.at("learning_rate").get<double>() > 0.0, "$.train.learning_rate", "must be > 0");
        if (t.contains("optimizer")) {
            std::string o = t.at("optimizer").get<std::string>();
            check(o == "adam" || o == "sgd-momentum", "$.train.optimizer", "must be adam|sgd-momentum");
        }
    }
    if (j.contains("freeze")) {
        const auto& f = j.at("freeze");
        if (f.contains("groups"))
            for (const auto& gj : f.at("groups")) {
                std::string g = gj.get<std::string>();
                bool known = false;
                for (const auto& k : param_groups()) known = known || g == k;
                check(known, "$.freeze.groups", "unknown group " + g);
            }
        if (f.contains("activate_after_task"))
            check(f.at("activate_after_task").get<int>() >= 1, "$.freeze.activate_after_task", "must be >= 1");
    }
    if (j.contains("metrics") && j.at("metrics").contains("empty_dice")) {
        std::string p = j.at("metrics").at("empty_dice").get<std::string>();
        check(p == "one" || p == "exclude", "$.metrics.empty_dice", "must be one|exclude");
    }
    if (j.contains("tasks")) {
        const auto& t = j.at("tasks");
        check(t.is_array() || (t.is_string() && t.get<std::string>() == "default"), "$.tasks",
              "must be \"default\" or an array of specs/manifest paths");
        if (t.is_array()) {
            for (size_t i = 0; i < t.size(); ++i) {
                const auto& e = t[i];
                std::string path = "$.tasks[" + std::to_string(i) + "]";
                if (e.is_object()) {
                    check(e.contains("name"), path + ".name", "required");
                    if (e.contains("n_cases")) check(e.at("n_cases").get<int>() >= 2, path + ".n_cases", "must be >= 2");
                    if (e.contains("shape")) {
                        auto sh = e.at("shape").get<std::vector<int>>();
                        bool ok = sh.size() == 3;
                        for (int d : sh) ok = ok && d >= 8;
                        check(ok, path + ".shape", "must be [D,H,W] with dims >= 8");
                    }
                    if (e.contains("shift")) {
                        const auto& sh = e.at("shift");
                        if (sh.contains("noise_sigma"))
                            check(sh.at("noise_sigma").get<double>() >= 0.0, path + ".shift.noise_sigma", "must be >= 0");
                        if (sh.contains("bias_field_amp"))
                            check(sh.at("bias_field_amp").get<double>() >= 0.0, path + ".shift.bias_field_amp",
                                  "must be >= 0");
                        if (sh.contains("contrast_gamma"))
                            check(sh.at("contrast_gamma").get<double>() > 0.0, path + ".shift.contrast_gamma",
                                  "must be > 0");
                        if (sh.contains("fg_intensity")) {
                            double v = sh.at("fg_intensity").get<double>();
                            check(v > 0.0 && v <= 1.0, path + ".shift.fg_intensity", "must be in (0,1]");
                        }
                    }
                } else {
                    check(e.is_string(), path, "must be a TaskSpec object or a manifest path");
                }
            }
        }
    }
}

}  // namespace detail

/// Applies a dotted-path override like `strategy.lambda=0.2`. The value is
/// parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    auto eq = assignment.find('=');
    CLSEG_CHECK(eq != std::string::npos, ErrorCode::ConfigInvalid, "--set expects key.path=value, got " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    nlohmann::json* node = &j;
    size_t start = 0;
    while (true) {
        size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        CLSEG_CHECK(!key.empty(), ErrorCode::ConfigInvalid, "--set path has an empty segment: " + path);
        if (dot == std::string::npos) {
            nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    std::vector<std::string> problems;
    detail::validate_config_json(j, problems);
    if (!problems.empty()) {
        std::string msg = "invalid experiment config:";
        for (const auto& p : problems) msg += "\n  " + p;
        raise(ErrorCode::ConfigInvalid, msg);
    }

    ExperimentConfig cfg;
    cfg.raw = j;
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("arch")) cfg.arch = ArchConfig::from_json(j.at("arch"));
    if (j.contains("strategy")) cfg.strategy = StrategyConfig::from_json(j.at("strategy"));
    if (j.contains("train")) cfg.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("freeze")) cfg.freeze = FreezeSpec::from_json(j.at("freeze"));
    if (j.contains("metrics") && j.at("metrics").contains("empty_dice"))
        cfg.empty_dice = empty_dice_policy_from_string(j.at("metrics").at("empty_dice").get<std::string>());
    if (j.contains("tuning_mode")) cfg.tuning_mode = j.at("tuning_mode").get<bool>();
    if (j.contains("tasks")) cfg.tasks_json = j.at("tasks");
    if (!j.contains("train") || !j.at("train").contains("seed")) cfg.train.seed = cfg.seed;
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                               const std::vector<std::string>& overrides = {}) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    return parse_experiment_config(j);
}

/// Output directory resolution: relative paths hang off $CLSEG_OUTPUT_ROOT
/// when that is set.
inline std::filesystem::path resolve_output_dir(const std::filesystem::path& dir) {
    if (dir.is_absolute()) return dir;
    const char* root = std::getenv("CLSEG_OUTPUT_ROOT");
    if (root && *root) return std::filesystem::path(root) / dir;
    return dir;
}

}  // namespace clseg
