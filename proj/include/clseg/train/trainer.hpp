#pragma once

#include <chrono>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/cl/strategies.hpp"
#include "clseg/data/split.hpp"
#include "clseg/eval/metrics.hpp"
#include "clseg/train/optimizer.hpp"

namespace clseg {

struct FreezeSpec {
    std::set<std::string> groups;
    int activate_after_task = 1;

    void validate() const {
        for (const auto& g : groups) {
            bool known = false;
            for (const auto& k : param_groups()) known = known || g == k;
            CLSEG_CHECK(known, ErrorCode::UnknownGroup, "unknown freeze group: " + g);
        }
        CLSEG_CHECK(activate_after_task >= 1, ErrorCode::ConfigInvalid, "activate_after_task must be >= 1");
    }

    /// Freezing engages only after the configured task (1-based indices): the
    /// first task always trains everything.
    bool active_for_task(int task_index) const { return !groups.empty() && task_index > activate_after_task; }

    nlohmann::json to_json() const {
        return {{"groups", std::vector<std::string>(groups.begin(), groups.end())},
                {"activate_after_task", activate_after_task}};
    }

    static FreezeSpec from_json(const nlohmann::json& j) {
        FreezeSpec f;
        if (j.contains("groups"))
            for (const auto& g : j.at("groups")) f.groups.insert(g.get<std::string>());
        if (j.contains("activate_after_task")) f.activate_after_task = j.at("activate_after_task").get<int>();
        return f;
    }
};

/// Zeroes gradients of frozen groups for the given task index.
template <typename T>
void apply_freeze(std::map<std::string, Tensor<T>>& grads, const FreezeSpec& freeze, int task_index) {
    freeze.validate();
    if (!freeze.active_for_task(task_index)) return;
    for (auto& [name, g] : grads)
        if (freeze.groups.count(group_of(name)))
            for (size_t i = 0; i < g.numel(); ++i) g[i] = T(0);
}

template <typename T>
std::set<std::string> frozen_param_names(const ParamStore<T>& params, const FreezeSpec& freeze, int task_index) {
    std::set<std::string> out;
    if (!freeze.active_for_task(task_index)) return out;
    for (const auto& [name, t] : params.entries())
        if (freeze.groups.count(group_of(name))) out.insert(name);
    return out;
}

struct TrainConfig {
    int epochs_per_task = 20;
    int batch_size = 8;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    uint64_t seed = 0;
    bool train_baselines = true;

    void validate() const {
        CLSEG_CHECK(epochs_per_task >= 0, ErrorCode::ConfigInvalid, "epochs_per_task must be >= 0");
        CLSEG_CHECK(batch_size >= 1, ErrorCode::ConfigInvalid, "batch_size must be >= 1");
        CLSEG_CHECK(learning_rate > 0.0, ErrorCode::ConfigInvalid, "learning_rate must be > 0");
    }

    nlohmann::json to_json() const {
        return {{"epochs_per_task", epochs_per_task}, {"batch_size", batch_size},
                {"learning_rate", learning_rate},     {"optimizer", to_string(optimizer)},
                {"seed", seed},                       {"train_baselines", train_baselines}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("epochs_per_task")) c.epochs_per_task = j.at("epochs_per_task").get<int>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
        if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
        if (j.contains("optimizer")) c.optimizer = optimizer_kind_from_string(j.at("optimizer").get<std::string>());
        if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
        if (j.contains("train_baselines")) c.train_baselines = j.at("train_baselines").get<bool>();
        return c;
    }
};

namespace detail {

inline SliceBatch all_slices(const TaskDataset& ds) {
    std::vector<SliceBatch> parts;
    parts.reserve(ds.cases.size());
    for (const Case& c : ds.cases) parts.push_back(slice_volume(c));
    return concat_batches(parts);
}

inline std::vector<uint8_t> batch_labels(const SliceBatch& b) { return b.masks; }

}  // namespace detail

/// Trains the model on one task: epochs over shuffled slice batches with the
/// strategy's loss hooks, freezing honored, and the strategy state updated at
/// task end (anchor/Fisher/previous-model/replay bookkeeping).
inline void train_task(ParamStore<float>& model, StrategyState<float>& state, const TaskDataset& train_data,
                       const ArchConfig& arch, const TrainConfig& cfg, const StrategyConfig& strategy,
                       const FreezeSpec& freeze, int task_index) {
    cfg.validate();
    strategy.validate();
    freeze.validate();
    train_data.validate();

    TaskDataset data = train_data;
    if (strategy.kind == StrategyKind::Rehearsal && !state.replay_memory.empty())
        data = rehearsal_mix(train_data, state.replay_memory, strategy.replay_fraction,
                             derive_seed(cfg.seed, "rehearsal/task" + std::to_string(task_index)));

    if (strategy.kind == StrategyKind::Rwalk) rwalk_init_state(state, model);

    SliceBatch slices = detail::all_slices(data);
    std::set<std::string> frozen = frozen_param_names(model, freeze, task_index);
    Optimizer<float> opt(cfg.optimizer, cfg.learning_rate);
    Pcg32 shuffle_rng(derive_seed(cfg.seed, "shuffle/task" + std::to_string(task_index)));

    bool needs_prev = (strategy.kind == StrategyKind::Mib || strategy.kind == StrategyKind::Pod ||
                       strategy.kind == StrategyKind::Plop) &&
                      state.prev_model.has_value();
    int64_t step_index = 0;

    for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
        std::vector<int> order(slices.count());
        for (int i = 0; i < slices.count(); ++i) order[i] = i;
        shuffle_rng.shuffle(order);

        for (int start = 0; start < slices.count(); start += cfg.batch_size) {
            int end = std::min(start + cfg.batch_size, slices.count());
            std::vector<int> idx(order.begin() + start, order.begin() + end);
            SliceBatch batch = gather_slices(slices, idx);

            std::optional<PrevOutputs<float>> prev;
            if (needs_prev) {
                ForwardTrace pt = forward_trace(*state.prev_model, arch, batch.images);
                prev = PrevOutputs<float>{pt.logits, distillation_maps(pt)};
            }

            std::vector<uint8_t> labels = batch.masks;
            if (strategy.kind == StrategyKind::Plop && prev)
                labels = plop_pseudo_labels(labels, prev->logits, strategy.tau);

            ad::Graph<float> g;
            BoundModel<float> P = bind_params(g, model, true);
            TraceValues trace = model_forward(g, P, arch, g.constant(batch.images));
            ad::Value seg = seg_loss(g, trace.logits, labels);
            ad::Value loss = total_loss(g, seg, strategy, state, P, trace, prev);

            float loss_value = g.val(loss)[0];
            CLSEG_CHECK(std::isfinite(loss_value), ErrorCode::NonFiniteLoss,
                        "non-finite loss at task " + std::to_string(task_index) + " epoch " +
                            std::to_string(epoch) + " step " + std::to_string(step_index) + " (value " +
                            std::to_string(loss_value) + ")");

            g.backward(loss);
            std::map<std::string, Tensor<float>> grads;
            for (const auto& [name, t] : model.entries()) grads.emplace(name, g.grad(P.at(name)));
            apply_freeze(grads, freeze, task_index);

            std::map<std::string, Tensor<float>> before;
            if (strategy.kind == StrategyKind::Rwalk)
                for (const auto& [name, t] : model.entries()) before.emplace(name, t);

            opt.step(model, grads, frozen);
            ++step_index;

            if (strategy.kind == StrategyKind::Rwalk) {
                std::map<std::string, Tensor<float>> deltas;
                for (const auto& [name, t] : model.entries()) {
                    Tensor<float> d = t;
                    const Tensor<float>& b = before.at(name);
                    for (size_t i = 0; i < d.numel(); ++i) d[i] -= b[i];
                    deltas.emplace(name, std::move(d));
                }
                rwalk_step(state, grads, deltas, step_index, strategy);
            }
        }
    }

    // ---- post-task strategy bookkeeping ----
    switch (strategy.kind) {
        case StrategyKind::Ewc: {
            // sample = patient case; the loss is the case log-likelihood
            // (pixel-sum CE over all its slices)
            auto sample_loss = [&](ad::Graph<float>& g, const BoundModel<float>& P, size_t s) {
                SliceBatch slices_of_case = slice_volume(train_data.cases[s]);
                TraceValues tr = model_forward(g, P, arch, g.constant(slices_of_case.images));
                ad::Value ce = cross_entropy_mean(g, tr.logits, slices_of_case.masks);
                return g.scale(ce, static_cast<double>(slices_of_case.images.numel()));
            };
            ParamStore<float> fisher = compute_fisher<float>(model, train_data.cases.size(), sample_loss);
            // rescale to unit global mean: keeps the relative importance
            // structure but makes lambda independent of the loss scale
            double total = 0.0;
            size_t count = 0;
            for (const auto& [name, f] : fisher.entries()) {
                for (size_t i = 0; i < f.numel(); ++i) total += f[i];
                count += f.numel();
            }
            if (total > 0.0) {
                float inv = static_cast<float>(static_cast<double>(count) / total);
                for (auto& [name, f] : fisher.entries())
                    for (size_t i = 0; i < f.numel(); ++i) f[i] *= inv;
            }
            state.fishers.push_back(std::move(fisher));
            state.anchors.push_back(model);
            break;
        }
        case StrategyKind::Rwalk:
            rwalk_fold_scores(state);
            state.anchors.push_back(model);
            break;
        case StrategyKind::Mib:
        case StrategyKind::Pod:
        case StrategyKind::Plop:
            state.prev_model = model;
            break;
        case StrategyKind::Rehearsal:
            state.replay_memory.emplace_back(train_data.name, train_data.cases);
            break;
        case StrategyKind::Sequential:
            break;
    }
}

// ---- sequential experiment protocol ----

struct ExperimentRecord {
    nlohmann::json config;  // experiment config as given
    std::string rng_name = kRngName;
    std::vector<std::string> task_names;
    DiceMatrix matrix;
    std::vector<double> baseline_dice;
    std::vector<double> baseline_sigma;
    MetricSummary summary;
    std::vector<std::string> task_checkpoints;
    std::vector<std::string> baseline_checkpoints;
    nlohmann::json timing;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "clseg-record-v1";
        j["rng"] = rng_name;
        j["config"] = config;
        j["tasks"] = task_names;
        j["dice_matrix"] = matrix.to_json();
        j["baselines"] = {{"dice", baseline_dice}, {"sigma", baseline_sigma}};
        j["summary"] = summary.to_json();
        j["checkpoints"] = {{"tasks", task_checkpoints}, {"baselines", baseline_checkpoints}};
        j["timing"] = timing;
        return j;
    }

    static ExperimentRecord from_json(const nlohmann::json& j) {
        ExperimentRecord r;
        CLSEG_CHECK(j.value("format", "") == "clseg-record-v1", ErrorCode::MalformedHeader,
                    "not a clseg experiment record");
        r.rng_name = j.at("rng").get<std::string>();
        r.config = j.at("config");
        r.task_names = j.at("tasks").get<std::vector<std::string>>();
        r.matrix = DiceMatrix::from_json(j.at("dice_matrix"));
        r.baseline_dice = j.at("baselines").at("dice").get<std::vector<double>>();
        r.baseline_sigma = j.at("baselines").at("sigma").get<std::vector<double>>();
        r.summary = MetricSummary::from_json(j.at("summary"));
        r.task_checkpoints = j.at("checkpoints").at("tasks").get<std::vector<std::string>>();
        r.baseline_checkpoints = j.at("checkpoints").at("baselines").get<std::vector<std::string>>();
        r.timing = j.value("timing", nlohmann::json::object());
        return r;
    }
};

struct RunSettings {
    ArchConfig arch;
    StrategyConfig strategy;
    TrainConfig train;
    FreezeSpec freeze;
    uint64_t exp_seed = 0;
    EmptyDicePolicy empty_dice = EmptyDicePolicy::OneWhenBothEmpty;
    bool tuning_mode = false;  // inner 80:20 of the train split, for grids
};

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_dice_csv(const ExperimentRecord& rec, const std::filesystem::path& path) {
    std::string csv = "checkpoint";
    for (const auto& name : rec.task_names) csv += "," + name + "_mean," + name + "_sigma";
    csv += "\n";
    for (int i = 0; i < rec.matrix.n(); ++i) {
        csv += "after_task_" + std::to_string(i + 1);
        for (int j = 0; j < rec.matrix.n(); ++j)
            csv += "," + format_double(rec.matrix.values[i][j]) + "," + format_double(rec.matrix.sigma[i][j]);
        csv += "\n";
    }
    write_text_file(path, csv);
}

inline nlohmann::json strategy_state_meta(const StrategyState<float>& state, int task_index) {
    nlohmann::json replay = nlohmann::json::array();
    for (const auto& [task, cases] : state.replay_memory) {
        std::vector<std::string> ids;
        for (const Case& c : cases) ids.push_back(c.id);
        replay.push_back({{"task", task}, {"case_ids", ids}});
    }
    return {{"task_index", task_index},
            {"n_anchors", state.anchors.size()},
            {"replay", replay},
            {"has_prev_model", state.prev_model.has_value()}};
}

inline void save_strategy_state(const StrategyState<float>& state, int task_index,
                                const std::filesystem::path& path) {
    std::map<std::string, Tensor<float>> tensors;
    for (size_t a = 0; a < state.anchors.size(); ++a)
        for (const auto& [name, t] : state.anchors[a].entries())
            tensors.emplace("anchor" + std::to_string(a) + "/" + name, t);
    for (size_t a = 0; a < state.fishers.size(); ++a)
        for (const auto& [name, t] : state.fishers[a].entries())
            tensors.emplace("fisher" + std::to_string(a) + "/" + name, t);
    for (const auto& [name, t] : state.rwalk_fisher.entries()) tensors.emplace("rwalk.fisher/" + name, t);
    for (const auto& [name, t] : state.rwalk_scores.entries()) tensors.emplace("rwalk.scores/" + name, t);
    save_tensor_file(tensors, strategy_state_meta(state, task_index), path);
}

}  // namespace detail

/// Runs the full sequential protocol: per task, split, train, checkpoint,
/// evaluate the intermediate model on every task's evaluation set; then train
/// the single-task baselines FWT needs. Everything is derived from the seeds
/// in the settings, so identical inputs give bit-identical outputs.
inline ExperimentRecord run_sequence(const TaskSequence& seq, const RunSettings& rs,
                                     const std::filesystem::path& out_dir, nlohmann::json config_json = {}) {
    seq.validate();
    rs.arch.validate(seq.tasks[0].cases[0].volume.shape[1], seq.tasks[0].cases[0].volume.shape[2]);
    rs.train.validate();
    rs.strategy.validate();
    rs.freeze.validate();
    auto t_start = std::chrono::steady_clock::now();

    int n = static_cast<int>(seq.tasks.size());
    int H = seq.tasks[0].cases[0].volume.shape[1], W = seq.tasks[0].cases[0].volume.shape[2];
    for (const auto& t : seq.tasks)
        for (const auto& c : t.cases)
            CLSEG_CHECK(c.volume.shape[1] == H && c.volume.shape[2] == W, ErrorCode::ConfigInvalid,
                        "all tasks in a sequence must share slice dims (ViT positional embedding is fixed)");

    std::vector<TaskDataset> train_sets, eval_sets;
    for (const auto& task : seq.tasks) {
        auto [train, test] = split_dataset(task, 0.8, rs.exp_seed);
        if (rs.tuning_mode) {
            auto [inner_train, inner_val] = split_dataset(train, 0.8, derive_seed(rs.exp_seed, "inner"));
            train_sets.push_back(inner_train);
            eval_sets.push_back(inner_val);
        } else {
            train_sets.push_back(train);
            eval_sets.push_back(test);
        }
    }

    ExperimentRecord rec;
    rec.config = std::move(config_json);
    for (const auto& t : seq.tasks) rec.task_names.push_back(t.name);

    ParamStore<float> model = build_model<float>(rs.arch, H, W, derive_seed(rs.train.seed, "init"));
    StrategyState<float> state;

    nlohmann::json ckpt_meta_base{{"arch", rs.arch.to_json()}, {"rng", kRngName}, {"seed", rs.train.seed}};

    for (int i = 1; i <= n; ++i) {
        train_task(model, state, train_sets[i - 1], rs.arch, rs.train, rs.strategy, rs.freeze, i);

        std::string rel = "task_" + std::to_string(i) + "/model.ckpt";
        nlohmann::json meta = ckpt_meta_base;
        meta["checkpoint"] = {{"kind", "sequential"}, {"task_index", i}, {"task", seq.tasks[i - 1].name}};
        save_checkpoint(model, meta, out_dir / rel);
        rec.task_checkpoints.push_back(rel);
        detail::save_strategy_state(state, i, out_dir / ("task_" + std::to_string(i) + "/strategy.ckpt"));

        std::vector<double> row, sig;
        for (int j = 0; j < n; ++j) {
            EvalResult r = evaluate_on_dataset(model, rs.arch, eval_sets[j], rs.empty_dice);
            row.push_back(r.mean);
            sig.push_back(r.sigma);
        }
        rec.matrix.values.push_back(row);
        rec.matrix.sigma.push_back(sig);
    }

    if (rs.train.train_baselines) {
        for (int i = 1; i <= n; ++i) {
            ParamStore<float> baseline = build_model<float>(rs.arch, H, W, derive_seed(rs.train.seed, "init"));
            StrategyState<float> bstate;
            StrategyConfig bstrategy;  // plain single-task training
            train_task(baseline, bstate, train_sets[i - 1], rs.arch, rs.train, bstrategy, FreezeSpec{}, 1);

            std::string rel = "baseline_" + std::to_string(i) + "/model.ckpt";
            nlohmann::json meta = ckpt_meta_base;
            meta["checkpoint"] = {{"kind", "baseline"}, {"task_index", i}, {"task", seq.tasks[i - 1].name}};
            save_checkpoint(baseline, meta, out_dir / rel);
            rec.baseline_checkpoints.push_back(rel);

            EvalResult r = evaluate_on_dataset(baseline, rs.arch, eval_sets[i - 1], rs.empty_dice);
            rec.baseline_dice.push_back(r.mean);
            rec.baseline_sigma.push_back(r.sigma);
        }
    }

    rec.summary = summarize(rec.matrix, rec.baseline_dice);
    auto t_end = std::chrono::steady_clock::now();
    rec.timing = {{"wall_seconds", std::chrono::duration<double>(t_end - t_start).count()}};

    write_text_file(out_dir / "record.json", rec.to_json().dump(2) + "\n");
    detail::write_dice_csv(rec, out_dir / "dice_matrix.csv");
    write_text_file(out_dir / "summary.json", rec.summary.to_json().dump(2) + "\n");
    return rec;
}

}  // namespace clseg
