// clseg command line: generate | train | evaluate | grid | report | attention

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clseg/cli/experiment_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string self_path(const char* argv0) {
    std::error_code ec;
    auto p = fs::read_symlink("/proc/self/exe", ec);
    if (!ec) return p.string();
    return argv0;
}

void print_summary(const clseg::ExperimentRecord& rec) {
    std::printf("tasks:");
    for (const auto& t : rec.task_names) std::printf(" %s", t.c_str());
    std::printf("\ndice matrix (rows = checkpoints, cols = tasks):\n");
    for (int i = 0; i < rec.matrix.n(); ++i) {
        std::printf("  after_task_%d:", i + 1);
        for (int j = 0; j < rec.matrix.n(); ++j) std::printf(" %.4f", rec.matrix.values[i][j]);
        std::printf("\n");
    }
    std::printf("dice_mean %.4f  dice_first %.4f  dice_last %.4f\n", rec.summary.dice_mean, rec.summary.dice_first,
                rec.summary.dice_last);
    if (rec.summary.mean_bwt) std::printf("mean BWT %.4f\n", *rec.summary.mean_bwt);
    if (rec.summary.mean_fwt) std::printf("mean FWT %.4f\n", *rec.summary.mean_fwt);
}

clseg::ExperimentRecord run_from_config(const clseg::ExperimentConfig& cfg) {
    clseg::TaskSequence seq = cfg.load_tasks();
    fs::path out = clseg::resolve_output_dir(cfg.output_dir);
    return clseg::run_sequence(seq, cfg.settings(), out, cfg.raw);
}

int cmd_generate(const clseg::ExperimentConfig& cfg) {
    fs::path out = clseg::resolve_output_dir(cfg.output_dir);
    auto specs = cfg.task_specs();
    CLSEG_CHECK(!specs.empty(), clseg::ErrorCode::ConfigInvalid, "no TaskSpec blocks in $.tasks to generate");
    for (const auto& spec : specs) {
        clseg::TaskDataset ds = clseg::generate_task(spec);
        fs::path dir = out / "tasks" / ds.name;
        clseg::write_task_manifest(ds, dir);
        std::printf("generated %s: %zu cases [%d,%d,%d] -> %s\n", ds.name.c_str(), ds.cases.size(), spec.shape[0],
                    spec.shape[1], spec.shape[2], dir.string().c_str());
    }
    return 0;
}

int cmd_train(const clseg::ExperimentConfig& cfg) {
    clseg::ExperimentRecord rec = run_from_config(cfg);
    print_summary(rec);
    std::printf("run dir: %s\n", clseg::resolve_output_dir(cfg.output_dir).string().c_str());
    return 0;
}

int cmd_evaluate(const fs::path& run_dir) {
    fs::path record_path = run_dir / "record.json";
    CLSEG_CHECK(fs::exists(record_path), clseg::ErrorCode::RunNotFound, "no record.json under " + run_dir.string());
    auto rec = clseg::ExperimentRecord::from_json(json::parse(clseg::read_text_file(record_path)));
    clseg::ExperimentConfig cfg = clseg::parse_experiment_config(rec.config);
    clseg::TaskSequence seq = cfg.load_tasks();
    clseg::RunSettings rs = cfg.settings();

    std::vector<clseg::TaskDataset> eval_sets;
    for (const auto& task : seq.tasks) {
        auto [train, test] = clseg::split_dataset(task, 0.8, rs.exp_seed);
        if (rs.tuning_mode) {
            auto [it, iv] = clseg::split_dataset(train, 0.8, clseg::derive_seed(rs.exp_seed, "inner"));
            eval_sets.push_back(iv);
        } else {
            eval_sets.push_back(test);
        }
    }

    clseg::ExperimentRecord fresh = rec;
    fresh.matrix = clseg::DiceMatrix{};
    double max_diff = 0.0;
    for (size_t i = 0; i < rec.task_checkpoints.size(); ++i) {
        auto [model, meta] = clseg::load_checkpoint<float>(run_dir / rec.task_checkpoints[i]);
        std::vector<double> row, sig;
        for (size_t j = 0; j < eval_sets.size(); ++j) {
            clseg::EvalResult r = clseg::evaluate_on_dataset(model, rs.arch, eval_sets[j], rs.empty_dice);
            row.push_back(r.mean);
            sig.push_back(r.sigma);
            max_diff = std::max(max_diff, std::fabs(r.mean - rec.matrix.values[i][j]));
        }
        fresh.matrix.values.push_back(row);
        fresh.matrix.sigma.push_back(sig);
    }
    fresh.baseline_dice.clear();
    fresh.baseline_sigma.clear();
    for (size_t i = 0; i < rec.baseline_checkpoints.size(); ++i) {
        auto [model, meta] = clseg::load_checkpoint<float>(run_dir / rec.baseline_checkpoints[i]);
        clseg::EvalResult r = clseg::evaluate_on_dataset(model, rs.arch, eval_sets[i], rs.empty_dice);
        fresh.baseline_dice.push_back(r.mean);
        fresh.baseline_sigma.push_back(r.sigma);
        max_diff = std::max(max_diff, std::fabs(r.mean - rec.baseline_dice[i]));
    }
    fresh.summary = clseg::summarize(fresh.matrix, fresh.baseline_dice);

    clseg::detail::write_dice_csv(fresh, run_dir / "dice_matrix.csv");
    clseg::write_text_file(run_dir / "summary.json", fresh.summary.to_json().dump(2) + "\n");
    print_summary(fresh);
    std::printf("max |re-evaluated - stored| = %.3g\n", max_diff);
    CLSEG_CHECK(max_diff <= 1e-7, clseg::ErrorCode::ShapeMismatch,
                "re-evaluation deviates from the stored record by " + std::to_string(max_diff));
    return 0;
}

struct GridJob {
    json config;
    fs::path dir;
};

int run_jobs(const std::vector<GridJob>& cells, int jobs, const std::string& self) {
    if (jobs <= 1) {
        for (const auto& cell : cells) {
            clseg::ExperimentConfig cfg = clseg::parse_experiment_config(cell.config);
            run_from_config(cfg);
        }
        return 0;
    }
    // isolated worker processes, bounded by --jobs
    std::vector<std::string> commands;
    for (const auto& cell : cells) {
        fs::create_directories(cell.dir);
        fs::path cfg_path = cell.dir / "config.json";
        clseg::write_text_file(cfg_path, cell.config.dump(2) + "\n");
        commands.push_back("\"" + self + "\" train --config \"" + cfg_path.string() + "\" > \"" +
                           (cell.dir / "train.log").string() + "\" 2>&1");
    }
    std::atomic<size_t> next{0};
    std::atomic<int> failures{0};
    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= commands.size()) return;
            int rc = std::system(commands[i].c_str());
            if (rc != 0) failures.fetch_add(1);
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    CLSEG_CHECK(failures.load() == 0, clseg::ErrorCode::RunNotFound,
                std::to_string(failures.load()) + " grid worker(s) failed");
    return 0;
}

/// Pins generated-task seeds so every cell trains on identical data, and
/// makes manifest paths absolute for worker processes.
json resolved_tasks_json(const clseg::ExperimentConfig& base) {
    json tasks = json::array();
    for (const auto& spec : base.task_specs()) tasks.push_back(clseg::task_spec_to_json(spec));
    if (base.tasks_json.is_array())
        for (const auto& t : base.tasks_json)
            if (t.is_string()) tasks.push_back(fs::absolute(t.get<std::string>()).string());
    return tasks;
}

int cmd_grid(const clseg::ExperimentConfig& base, const std::string& method, const std::string& grid_file,
             int tuning_epochs, int jobs, const std::string& self) {
    clseg::GridSpec spec;
    if (!grid_file.empty())
        spec = clseg::GridSpec::from_json(json::parse(clseg::read_text_file(grid_file)));
    else
        spec = clseg::builtin_grid(clseg::strategy_kind_from_string(method), tuning_epochs);
    spec.validate();

    fs::path out = clseg::resolve_output_dir(base.output_dir) / "grid" / clseg::to_string(spec.method);
    clseg::RunSettings bs = base.settings();

    std::vector<GridJob> cells;
    std::vector<fs::path> cell_dirs;
    for (double value : spec.tuned_values) {
        clseg::RunSettings rs = clseg::grid_cell_settings(spec, bs, value);
        fs::path dir = out / (spec.tuned_name + "_" + std::to_string(value));
        json j = base.raw;
        j["strategy"] = rs.strategy.to_json();
        j["train"] = rs.train.to_json();
        j["tuning_mode"] = true;
        j["output_dir"] = dir.string();
        j["seed"] = rs.exp_seed;
        j["tasks"] = resolved_tasks_json(base);
        cells.push_back({j, dir});
        cell_dirs.push_back(dir);
    }
    run_jobs(cells, jobs, self);

    std::vector<clseg::GridCell> results;
    for (size_t i = 0; i < cells.size(); ++i) {
        auto rec = clseg::ExperimentRecord::from_json(
            json::parse(clseg::read_text_file(cell_dirs[i] / "record.json")));
        results.push_back({spec.tuned_values[i], rec});
    }
    size_t best = clseg::select_best(results);

    json best_json;
    best_json["method"] = clseg::to_string(spec.method);
    best_json["tuned_name"] = spec.tuned_name;
    best_json["tuned_values"] = spec.tuned_values;
    best_json["fixed"] = spec.fixed;
    best_json["best_value"] = results[best].value;
    json cell_arr = json::array();
    for (size_t i = 0; i < results.size(); ++i)
        cell_arr.push_back({{"value", results[i].value},
                            {"score", clseg::grid_score(results[i].record)},
                            {"sigma", clseg::grid_sigma(results[i].record)},
                            {"dir", cell_dirs[i].string()}});
    best_json["cells"] = cell_arr;
    clseg::write_text_file(out / "best.json", best_json.dump(2) + "\n");

    std::printf("grid %s over %s:", clseg::to_string(spec.method).c_str(), spec.tuned_name.c_str());
    for (size_t i = 0; i < results.size(); ++i)
        std::printf(" %g->%.4f", results[i].value, clseg::grid_score(results[i].record));
    std::printf("\nbest %s = %g\nwrote %s\n", spec.tuned_name.c_str(), results[best].value,
                (out / "best.json").string().c_str());
    return 0;
}

int cmd_grid_ablation(const clseg::ExperimentConfig& base, int jobs, const std::string& self) {
    fs::path out = clseg::resolve_output_dir(base.output_dir) / "grid" / "ablation";
    std::vector<GridJob> cells;
    std::vector<fs::path> cell_dirs;
    for (const std::string& variant : {"vit-v1", "vit-v2"})
        for (int mods = 0; mods < 4; ++mods) {
            clseg::RunSettings rs = base.settings();
            rs.arch.variant = clseg::arch_variant_from_string(variant);
            rs.arch.spt = mods & 1;
            rs.arch.lsa = mods & 2;
            std::string label = clseg::ablation_cell_label(rs.arch);
            rs.train.seed = clseg::derive_seed(base.train.seed, "ablation/" + label);

            std::string dir_name = label;
            for (char& c : dir_name)
                if (c == '/' || c == '+') c = '_';
            fs::path dir = out / dir_name;

            json j = base.raw;
            j["arch"] = rs.arch.to_json();
            j["train"] = rs.train.to_json();
            j["output_dir"] = dir.string();
            j["tasks"] = resolved_tasks_json(base);
            cells.push_back({j, dir});
            cell_dirs.push_back(dir);
        }
    run_jobs(cells, jobs, self);

    std::vector<clseg::ExperimentRecord> records;
    for (const auto& dir : cell_dirs)
        records.push_back(
            clseg::ExperimentRecord::from_json(json::parse(clseg::read_text_file(dir / "record.json"))));
    clseg::AblationTable table = clseg::emit_ablation_table(records);
    clseg::write_text_file(out / "ablation.csv", table.to_csv());
    std::printf("%swrote %s\n", table.to_csv().c_str(), (out / "ablation.csv").string().c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, bool ablation) {
    if (ablation) {
        std::vector<clseg::ExperimentRecord> records;
        for (const auto& d : run_dirs)
            records.push_back(clseg::ExperimentRecord::from_json(
                json::parse(clseg::read_text_file(fs::path(d) / "record.json"))));
        clseg::AblationTable table = clseg::emit_ablation_table(records);
        fs::path out = fs::path(run_dirs[0]) / "ablation.csv";
        clseg::write_text_file(out, table.to_csv());
        std::printf("%swrote %s\n", table.to_csv().c_str(), out.string().c_str());
        return 0;
    }
    CLSEG_CHECK(run_dirs.size() == 1, clseg::ErrorCode::ConfigInvalid, "report expects one run dir (or --ablation)");
    fs::path run_dir = run_dirs[0];
    fs::path record_path = run_dir / "record.json";
    CLSEG_CHECK(fs::exists(record_path), clseg::ErrorCode::RunNotFound, "no record.json under " + run_dir.string());
    auto rec = clseg::ExperimentRecord::from_json(json::parse(clseg::read_text_file(record_path)));
    clseg::RadarData radar = clseg::emit_radar(rec);
    clseg::write_text_file(run_dir / "radar.json", radar.to_json().dump(2) + "\n");
    std::printf("%s", radar.render_text().c_str());
    std::printf("wrote %s\n", (run_dir / "radar.json").string().c_str());
    return 0;
}

int cmd_attention(const fs::path& run_dir, const std::string& case_id, int slice_index, int layer, int head) {
    fs::path record_path = run_dir / "record.json";
    CLSEG_CHECK(fs::exists(record_path), clseg::ErrorCode::RunNotFound, "no record.json under " + run_dir.string());
    auto rec = clseg::ExperimentRecord::from_json(json::parse(clseg::read_text_file(record_path)));
    clseg::ExperimentConfig cfg = clseg::parse_experiment_config(rec.config);
    CLSEG_CHECK(!rec.task_checkpoints.empty(), clseg::ErrorCode::RunNotFound, "record lists no checkpoints");
    auto [model, meta] = clseg::load_checkpoint<float>(run_dir / rec.task_checkpoints.back());

    clseg::TaskSequence seq = cfg.load_tasks();
    const clseg::Case* found = nullptr;
    for (const auto& task : seq.tasks)
        for (const auto& c : task.cases)
            if (c.id == case_id) found = &c;
    CLSEG_CHECK(found, clseg::ErrorCode::RunNotFound, "case " + case_id + " not found in the run's tasks");

    clseg::SliceBatch slices = clseg::slice_volume(*found);
    CLSEG_CHECK(slice_index >= 0 && slice_index < slices.count(), clseg::ErrorCode::OutOfRange,
                "slice index out of range (case has " + std::to_string(slices.count()) + " slices)");
    clseg::SliceBatch one = clseg::gather_slices(slices, {slice_index});

    clseg::AttentionMap map = clseg::extract_attention(model, cfg.arch, one.images, layer, head);
    std::string name = "attention_" + case_id + "_slice" + std::to_string(slice_index) + "_layer" +
                       std::to_string(map.layer) + "_head" + std::to_string(map.head) + ".pgm";
    clseg::write_pgm(map, run_dir / name);
    std::printf("layer %d head %d -> %s\n", map.layer, map.head, (run_dir / name).string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning segmentation harness"};
    app.require_subcommand(1);
    std::string self = self_path(argv[0]);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config JSON")->required();
        cmd->add_option("--set", overrides, "override a config leaf, e.g. strategy.lambda=0.2");
    };

    auto* gen = app.add_subcommand("generate", "write synthetic task datasets to disk");
    add_config_opts(gen);

    auto* train = app.add_subcommand("train", "run the sequential training protocol");
    add_config_opts(train);

    std::string run_dir;
    auto* eval = app.add_subcommand("evaluate", "re-evaluate a run's checkpoints and regenerate metrics files");
    eval->add_option("run_dir", run_dir, "experiment run directory")->required();

    auto* grid = app.add_subcommand("grid", "hyperparameter grid / architecture ablation");
    add_config_opts(grid);
    std::string method;
    std::string grid_file;
    int jobs = 1;
    int tuning_epochs = 10;
    bool ablation = false;
    grid->add_option("--method", method, "CL method: ewc|rwalk|mib|pod|plop");
    grid->add_option("--grid", grid_file, "explicit GridSpec JSON (overrides --method)");
    grid->add_option("--jobs", jobs, "worker processes")->check(CLI::PositiveNumber);
    grid->add_option("--tuning-epochs", tuning_epochs, "epochs per task for tuning runs");
    grid->add_flag("--ablation", ablation, "run the V1/V2 x SPT/LSA ablation grid instead");

    auto* report = app.add_subcommand("report", "emit radar data (or an ablation table) from finished runs");
    std::vector<std::string> report_dirs;
    bool report_ablation = false;
    report->add_option("run_dirs", report_dirs, "run directory (8 of them with --ablation)")->required();
    report->add_flag("--ablation", report_ablation, "combine 8 runs into the ablation table");

    auto* attn = app.add_subcommand("attention", "export an attention heat map as PGM");
    std::string attn_run, attn_case;
    int attn_slice = 0, attn_layer = -1, attn_head = -1;
    attn->add_option("run_dir", attn_run, "experiment run directory")->required();
    attn->add_option("--case", attn_case, "case id")->required();
    attn->add_option("--slice", attn_slice, "axial slice index")->required();
    attn->add_option("--layer", attn_layer, "ViT layer (default: last)");
    attn->add_option("--head", attn_head, "attention head (default: last)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(clseg::load_experiment_config(config_path, overrides));
        if (train->parsed()) return cmd_train(clseg::load_experiment_config(config_path, overrides));
        if (eval->parsed()) return cmd_evaluate(run_dir);
        if (grid->parsed()) {
            auto cfg = clseg::load_experiment_config(config_path, overrides);
            if (ablation) return cmd_grid_ablation(cfg, jobs, self);
            CLSEG_CHECK(!method.empty() || !grid_file.empty(), clseg::ErrorCode::ConfigInvalid,
                        "grid needs --method or --grid");
            return cmd_grid(cfg, method, grid_file, tuning_epochs, jobs, self);
        }
        if (report->parsed()) return cmd_report(report_dirs, report_ablation);
        if (attn->parsed()) return cmd_attention(attn_run, attn_case, attn_slice, attn_layer, attn_head);
    } catch (const clseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
