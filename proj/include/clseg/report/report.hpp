#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/train/trainer.hpp"

namespace clseg {

/// One hyperparameter grid: a method, its fixed parameters, and the list of
/// values for the single tuned parameter.
struct GridSpec {
    StrategyKind method = StrategyKind::Ewc;
    std::map<std::string, double> fixed;
    std::string tuned_name = "lambda";
    std::vector<double> tuned_values;
    int tuning_epochs = 10;

    void validate() const {
        CLSEG_CHECK(!tuned_values.empty(), ErrorCode::ConfigInvalid, "grid value list must be non-empty");
        CLSEG_CHECK(tuning_epochs >= 0, ErrorCode::ConfigInvalid, "tuning_epochs must be >= 0");
    }

    nlohmann::json to_json() const {
        return {{"method", to_string(method)}, {"fixed", fixed}, {"tuned_name", tuned_name},
                {"tuned_values", tuned_values}, {"tuning_epochs", tuning_epochs}};
    }

    static GridSpec from_json(const nlohmann::json& j) {
        GridSpec s;
        if (j.contains("method")) s.method = strategy_kind_from_string(j.at("method").get<std::string>());
        if (j.contains("fixed")) s.fixed = j.at("fixed").get<std::map<std::string, double>>();
        if (j.contains("tuned_name")) s.tuned_name = j.at("tuned_name").get<std::string>();
        if (j.contains("tuned_values")) s.tuned_values = j.at("tuned_values").get<std::vector<double>>();
        if (j.contains("tuning_epochs")) s.tuning_epochs = j.at("tuning_epochs").get<int>();
        return s;
    }
};

/// The published per-method grids: lambda lists with the per-method fixed
/// parameters (RWalk alpha/update interval, MiB alpha, POD/PLOP scales).
inline GridSpec builtin_grid(StrategyKind method, int tuning_epochs = 10) {
    GridSpec s;
    s.method = method;
    s.tuning_epochs = tuning_epochs;
    switch (method) {
        case StrategyKind::Ewc:
            s.tuned_values = {0.01, 0.20, 0.50};
            break;
        case StrategyKind::Rwalk:
            s.fixed = {{"alpha", 0.9}, {"update_interval", 10}};
            s.tuned_values = {0.80, 2.10, 3.30};
            break;
        case StrategyKind::Mib:
            s.fixed = {{"alpha", 0.9}};
            s.tuned_values = {0.10, 1.00, 2.50};
            break;
        case StrategyKind::Pod:
            s.fixed = {{"scales", 3}};
            s.tuned_values = {0.01, 0.10, 0.20};
            break;
        case StrategyKind::Plop:
            s.fixed = {{"scales", 3}};
            s.tuned_values = {0.01, 0.10, 0.20};
            break;
        default:
            raise(ErrorCode::ConfigInvalid, "no hyperparameter grid for method " + to_string(method));
    }
    return s;
}

inline void set_strategy_param(StrategyConfig& cfg, const std::string& name, double value) {
    if (name == "lambda")
        cfg.lambda = value;
    else if (name == "alpha")
        cfg.alpha = value;
    else if (name == "update_interval")
        cfg.update_interval = static_cast<int>(value);
    else if (name == "scales")
        cfg.scales = static_cast<int>(value);
    else if (name == "replay_fraction")
        cfg.replay_fraction = value;
    else if (name == "tau")
        cfg.tau = value;
    else
        raise(ErrorCode::ConfigInvalid, "unknown strategy parameter: " + name);
}

struct GridCell {
    double value = 0.0;
    ExperimentRecord record;
};

/// Derives the settings for one grid cell. The training seed is hashed from
/// the base seed, the method and the parameter value, so every cell is an
/// independent reproducible experiment; the experiment seed (and with it the
/// data splits) stays shared so cells compare on identical data.
inline RunSettings grid_cell_settings(const GridSpec& spec, const RunSettings& base, double value) {
    RunSettings rs = base;
    rs.strategy.kind = spec.method;
    for (const auto& [k, v] : spec.fixed) set_strategy_param(rs.strategy, k, v);
    set_strategy_param(rs.strategy, spec.tuned_name, value);
    rs.train.epochs_per_task = spec.tuning_epochs;
    rs.train.train_baselines = false;  // selection uses the dice matrix only
    rs.tuning_mode = true;
    std::string tag = "grid/" + to_string(spec.method) + "/" + spec.tuned_name + "=" + std::to_string(value);
    rs.train.seed = derive_seed(base.train.seed, tag);
    return rs;
}

/// Runs one tuning experiment per tuned value, on an inner 80:20 split of the
/// training split.
inline std::vector<GridCell> run_grid(const GridSpec& spec, const RunSettings& base, const TaskSequence& seq,
                                      const std::filesystem::path& out_dir) {
    spec.validate();
    std::vector<GridCell> cells;
    for (double value : spec.tuned_values) {
        RunSettings rs = grid_cell_settings(spec, base, value);
        auto cell_dir = out_dir / (spec.tuned_name + "_" + std::to_string(value));
        nlohmann::json cfg{{"grid_cell", {{"method", to_string(spec.method)}, {spec.tuned_name, value}}}};
        cells.push_back({value, run_sequence(seq, rs, cell_dir, cfg)});
    }
    return cells;
}

/// Mean Dice over all intermediate checkpoints evaluated on all tasks.
inline double grid_score(const ExperimentRecord& rec) {
    double acc = 0.0;
    size_t count = 0;
    for (const auto& row : rec.matrix.values)
        for (double v : row) {
            acc += v;
            ++count;
        }
    return acc / static_cast<double>(count);
}

inline double grid_sigma(const ExperimentRecord& rec) {
    double acc = 0.0;
    size_t count = 0;
    for (const auto& row : rec.matrix.sigma)
        for (double v : row) {
            acc += v;
            ++count;
        }
    return acc / static_cast<double>(count);
}

/// Best setting: highest mean Dice over all intermediate networks on all
/// tasks; ties resolved by the lowest sigma, then by the lower parameter
/// value so the choice does not depend on record order.
inline size_t select_best(const std::vector<GridCell>& cells) {
    CLSEG_CHECK(!cells.empty(), ErrorCode::IncompleteGrid, "select_best needs at least one record");
    size_t best = 0;
    double best_score = grid_score(cells[0].record);
    double best_sigma = grid_sigma(cells[0].record);
    for (size_t i = 1; i < cells.size(); ++i) {
        double score = grid_score(cells[i].record);
        double sigma = grid_sigma(cells[i].record);
        bool better = false;
        if (score > best_score + 1e-12)
            better = true;
        else if (std::fabs(score - best_score) <= 1e-12) {
            if (sigma < best_sigma - 1e-12)
                better = true;
            else if (std::fabs(sigma - best_sigma) <= 1e-12 && cells[i].value < cells[best].value)
                better = true;
        }
        if (better) {
            best = i;
            best_score = score;
            best_sigma = sigma;
        }
    }
    return best;
}

// ---- radar data ----

/// The five radar axes: final-model Dice statistics plus plot-normalized mean
/// BWT/FWT.
struct RadarData {
    double dice_mean = 0.0;
    double dice_first = 0.0;
    double dice_last = 0.0;
    double bwt_normalized = 0.0;  // in [0,2]
    double fwt_normalized = 0.0;

    nlohmann::json to_json() const {
        return {{"dice_mean", dice_mean},
                {"dice_first", dice_first},
                {"dice_last", dice_last},
                {"bwt_normalized", bwt_normalized},
                {"fwt_normalized", fwt_normalized}};
    }

    std::string render_text() const {
        auto line = [](const std::string& k, double v) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "  %-16s %8.4f\n", k.c_str(), v);
            return std::string(buf);
        };
        return "radar axes:\n" + line("dice_mean", dice_mean) + line("dice_first", dice_first) +
               line("dice_last", dice_last) + line("bwt_normalized", bwt_normalized) +
               line("fwt_normalized", fwt_normalized);
    }
};

inline RadarData emit_radar(const ExperimentRecord& rec) {
    CLSEG_CHECK(rec.summary.mean_bwt.has_value() && rec.summary.mean_fwt.has_value(), ErrorCode::UndefinedMetric,
                "radar data needs defined BWT and FWT (>= 2 tasks with baselines)");
    RadarData r;
    r.dice_mean = rec.summary.dice_mean;
    r.dice_first = rec.summary.dice_first;
    r.dice_last = rec.summary.dice_last;
    r.bwt_normalized = normalize_for_plot(*rec.summary.mean_bwt);
    r.fwt_normalized = normalize_for_plot(*rec.summary.mean_fwt);
    return r;
}

// ---- ablation table ----

struct AblationTable {
    std::vector<std::string> row_labels;  // 8 ablation cells
    std::vector<std::string> task_names;
    std::vector<std::vector<double>> dice;   // [8][tasks], final-model Dice
    std::vector<std::vector<double>> sigma;  // [8][tasks]
    std::vector<std::vector<bool>> best;     // column-best flags

    std::string to_csv() const {
        std::string out = "ablation";
        for (const auto& t : task_names) out += "," + t + "_mean," + t + "_sigma," + t + "_best";
        out += "\n";
        for (size_t r = 0; r < row_labels.size(); ++r) {
            out += row_labels[r];
            for (size_t c = 0; c < task_names.size(); ++c) {
                char buf[80];
                std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%d", dice[r][c], sigma[r][c], best[r][c] ? 1 : 0);
                out += buf;
            }
            out += "\n";
        }
        return out;
    }
};

inline std::string ablation_cell_label(const ArchConfig& arch) {
    std::string mods;
    if (arch.spt && arch.lsa)
        mods = "spt+lsa";
    else if (arch.spt)
        mods = "spt";
    else if (arch.lsa)
        mods = "lsa";
    else
        mods = "unmodified";
    return to_string(arch.variant) + "/" + mods;
}

/// Final-model per-task Dice for the 8 ViT U-Net ablation cells
/// (V1/V2 x {none, SPT, LSA, SPT+LSA}), column best flagged.
inline AblationTable emit_ablation_table(const std::vector<ExperimentRecord>& records) {
    std::vector<std::string> expected;
    for (const std::string& variant : {"vit-v1", "vit-v2"})
        for (const std::string& mods : {"unmodified", "spt", "lsa", "spt+lsa"})
            expected.push_back(variant + "/" + mods);

    CLSEG_CHECK(records.size() == expected.size(), ErrorCode::IncompleteGrid,
                "ablation table needs exactly 8 records, got " + std::to_string(records.size()));

    std::map<std::string, const ExperimentRecord*> by_label;
    for (const auto& rec : records) {
        ArchConfig arch = ArchConfig::from_json(rec.config.at("arch"));
        std::string label = ablation_cell_label(arch);
        CLSEG_CHECK(!by_label.count(label), ErrorCode::IncompleteGrid, "duplicate ablation cell " + label);
        by_label[label] = &rec;
    }

    AblationTable table;
    table.row_labels = expected;
    for (const auto& label : expected)
        CLSEG_CHECK(by_label.count(label), ErrorCode::IncompleteGrid, "missing ablation cell " + label);
    table.task_names = by_label[expected[0]]->task_names;

    for (const auto& label : expected) {
        const ExperimentRecord& rec = *by_label[label];
        CLSEG_CHECK(rec.task_names == table.task_names, ErrorCode::IncompleteGrid,
                    "ablation records over differing task sequences");
        table.dice.push_back(rec.matrix.values.back());
        table.sigma.push_back(rec.matrix.sigma.back());
    }

    size_t n_tasks = table.task_names.size();
    table.best.assign(table.dice.size(), std::vector<bool>(n_tasks, false));
    for (size_t c = 0; c < n_tasks; ++c) {
        size_t arg = 0;
        for (size_t r = 1; r < table.dice.size(); ++r)
            if (table.dice[r][c] > table.dice[arg][c]) arg = r;
        table.best[arg][c] = true;
    }
    return table;
}

}  // namespace clseg
