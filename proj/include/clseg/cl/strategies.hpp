#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/core/rng.hpp"
#include "clseg/data/types.hpp"
#include "clseg/nn/losses.hpp"
#include "clseg/nn/model.hpp"

namespace clseg {

enum class StrategyKind { Sequential, Rehearsal, Ewc, Rwalk, Mib, Pod, Plop };

inline std::string to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::Sequential: return "sequential";
        case StrategyKind::Rehearsal: return "rehearsal";
        case StrategyKind::Ewc: return "ewc";
        case StrategyKind::Rwalk: return "rwalk";
        case StrategyKind::Mib: return "mib";
        case StrategyKind::Pod: return "pod";
        case StrategyKind::Plop: return "plop";
    }
    return "?";
}

inline StrategyKind strategy_kind_from_string(const std::string& s) {
    if (s == "sequential") return StrategyKind::Sequential;
    if (s == "rehearsal") return StrategyKind::Rehearsal;
    if (s == "ewc") return StrategyKind::Ewc;
    if (s == "rwalk") return StrategyKind::Rwalk;
    if (s == "mib") return StrategyKind::Mib;
    if (s == "pod") return StrategyKind::Pod;
    if (s == "plop") return StrategyKind::Plop;
    raise(ErrorCode::ConfigInvalid, "unknown strategy kind: " + s);
}

struct StrategyConfig {
    StrategyKind kind = StrategyKind::Sequential;
    double lambda = 0.0;
    double alpha = 0.9;
    int update_interval = 10;
    int scales = 3;
    double replay_fraction = 0.25;
    double tau = 0.8;           // PLOP pseudo-label threshold
    std::string target = "all"; // parameter-group selector: all | unet | vit

    void validate() const {
        CLSEG_CHECK(lambda >= 0.0, ErrorCode::ConfigInvalid, "strategy.lambda must be >= 0");
        CLSEG_CHECK(alpha >= 0.0 && alpha <= 1.0, ErrorCode::ConfigInvalid, "strategy.alpha must be in [0,1]");
        CLSEG_CHECK(update_interval >= 1, ErrorCode::ConfigInvalid, "strategy.update_interval must be >= 1");
        CLSEG_CHECK(scales >= 1, ErrorCode::ConfigInvalid, "strategy.scales must be >= 1");
        CLSEG_CHECK(replay_fraction >= 0.0 && replay_fraction <= 1.0, ErrorCode::ConfigInvalid,
                    "strategy.replay_fraction must be in [0,1]");
        CLSEG_CHECK(tau >= 0.0 && tau <= 1.0, ErrorCode::ConfigInvalid, "strategy.tau must be in [0,1]");
        CLSEG_CHECK(target == "all" || target == "unet" || target == "vit", ErrorCode::ConfigInvalid,
                    "strategy.target must be all|unet|vit");
    }

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind)},
                {"lambda", lambda},
                {"alpha", alpha},
                {"update_interval", update_interval},
                {"scales", scales},
                {"replay_fraction", replay_fraction},
                {"tau", tau},
                {"target", target}};
    }

    static StrategyConfig from_json(const nlohmann::json& j) {
        StrategyConfig c;
        if (j.contains("kind")) c.kind = strategy_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
        if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
        if (j.contains("update_interval")) c.update_interval = j.at("update_interval").get<int>();
        if (j.contains("scales")) c.scales = j.at("scales").get<int>();
        if (j.contains("replay_fraction")) c.replay_fraction = j.at("replay_fraction").get<double>();
        if (j.contains("tau")) c.tau = j.at("tau").get<double>();
        if (j.contains("target")) c.target = j.at("target").get<std::string>();
        return c;
    }
};

/// Accumulated continual-learning state across the task sequence.
template <typename T>
struct StrategyState {
    std::vector<ParamStore<T>> anchors;   // theta* snapshot per completed task
    std::vector<ParamStore<T>> fishers;   // EWC: per-anchor diagonal Fisher
    ParamStore<T> rwalk_fisher;           // RWalk: online EMA Fisher
    ParamStore<T> rwalk_scores;           // RWalk: folded path-importance scores
    ParamStore<T> rwalk_scores_accum;     // RWalk: scores accumulating within the current task
    std::optional<ParamStore<T>> prev_model;                     // frozen snapshot for distillation
    std::vector<std::pair<std::string, std::vector<Case>>> replay_memory;  // per previous task

    bool has_anchor() const { return !anchors.empty(); }
};

/// Frozen forward outputs of the previous-task model on the current batch.
template <typename T>
struct PrevOutputs {
    Tensor<T> logits;
    std::vector<Tensor<T>> feature_maps;  // skip maps + bottleneck, matching current trace order
};

// ---- rehearsal ----

/// Current task plus floor(fraction * |T|) cases sampled without replacement
/// from every previous task T. Deterministic per seed.
inline TaskDataset rehearsal_mix(const TaskDataset& current,
                                 const std::vector<std::pair<std::string, std::vector<Case>>>& memory,
                                 double fraction, uint64_t seed) {
    CLSEG_CHECK(fraction >= 0.0 && fraction <= 1.0, ErrorCode::ConfigInvalid, "replay fraction must be in [0,1]");
    TaskDataset mixed = current;
    for (const auto& [task_name, cases] : memory) {
        size_t k = static_cast<size_t>(std::floor(fraction * static_cast<double>(cases.size())));
        if (k == 0) continue;
        Pcg32 rng(derive_seed(seed, "rehearsal/" + task_name));
        for (size_t idx : rng.sample_without_replacement(cases.size(), k)) mixed.cases.push_back(cases[idx]);
    }
    return mixed;
}

// ---- Fisher information ----

/// Empirical diagonal Fisher: mean over samples of the squared per-sample
/// loss gradient. The loss builder runs one sample's forward and returns its
/// scalar loss.
template <typename T>
ParamStore<T> compute_fisher(const ParamStore<T>& params, size_t n_samples,
                             const std::function<ad::Value(ad::Graph<T>&, const BoundModel<T>&, size_t)>& sample_loss) {
    CLSEG_CHECK(n_samples > 0, ErrorCode::EmptyDataset, "fisher needs at least one sample");
    ParamStore<T> fisher;
    for (const auto& [name, t] : params.entries()) fisher.add(name, Tensor<T>(t.shape()));
    for (size_t s = 0; s < n_samples; ++s) {
        ad::Graph<T> g;
        BoundModel<T> P = bind_params(g, params, true);
        ad::Value loss = sample_loss(g, P, s);
        g.backward(loss);
        for (auto& [name, f] : fisher.entries()) {
            const Tensor<T>& gr = g.grad(P.at(name));
            for (size_t i = 0; i < f.numel(); ++i) f[i] += gr[i] * gr[i];
        }
    }
    T inv = T(1) / static_cast<T>(n_samples);
    for (auto& [name, f] : fisher.entries())
        for (size_t i = 0; i < f.numel(); ++i) f[i] *= inv;
    return fisher;
}

// ---- quadratic penalties ----

namespace detail {

/// lambda * sum_anchors sum_{k in target} w_k (theta_k - theta*_k)^2, with
/// per-anchor weights supplied by a callback.
template <typename T>
ad::Value weighted_quadratic_penalty(ad::Graph<T>& g, const BoundModel<T>& P, const StrategyState<T>& state,
                                     double lambda, const std::string& target,
                                     const std::function<Tensor<T>(size_t, const std::string&)>& weight_of) {
    CLSEG_CHECK(state.has_anchor(), ErrorCode::NoAnchor, "penalty requires at least one completed task");
    ad::Value acc = g.constant(Tensor<T>::scalar(T(0)));
    for (size_t a = 0; a < state.anchors.size(); ++a) {
        for (const auto& [name, anchor] : state.anchors[a].entries()) {
            if (!group_matches(name, target)) continue;
            ad::Value diff = g.sub(P.at(name), g.constant(anchor));
            ad::Value sq = g.mul(diff, diff);
            ad::Value weighted = g.mul(sq, g.constant(weight_of(a, name)));
            acc = g.add(acc, g.sum_all(weighted));
        }
    }
    return g.scale(acc, lambda);
}

}  // namespace detail

/// EWC: lambda * sum_tasks sum_k F_k (theta_k - theta*_k)^2 (no 1/2 factor;
/// lambda absorbs it).
template <typename T>
ad::Value ewc_penalty(ad::Graph<T>& g, const BoundModel<T>& P, const StrategyState<T>& state, double lambda,
                      const std::string& target) {
    CLSEG_CHECK(state.fishers.size() == state.anchors.size(), ErrorCode::NoAnchor,
                "EWC state is missing a Fisher for some anchor");
    return detail::weighted_quadratic_penalty<T>(g, P, state, lambda, target,
                                                 [&](size_t a, const std::string& name) -> Tensor<T> {
                                                     return state.fishers[a].at(name);
                                                 });
}

/// RWalk: as EWC but weighted by (F_k + s_k) with the online Fisher and the
/// folded path scores.
template <typename T>
ad::Value rwalk_penalty(ad::Graph<T>& g, const BoundModel<T>& P, const StrategyState<T>& state, double lambda,
                        const std::string& target) {
    return detail::weighted_quadratic_penalty<T>(g, P, state, lambda, target,
                                                 [&](size_t, const std::string& name) -> Tensor<T> {
                                                     Tensor<T> w = state.rwalk_fisher.at(name);
                                                     const Tensor<T>& s = state.rwalk_scores.at(name);
                                                     for (size_t i = 0; i < w.numel(); ++i) w[i] += s[i];
                                                     return w;
                                                 });
}

// ---- RWalk online updates ----

inline constexpr double kRwalkDamping = 1e-3;

template <typename T>
void rwalk_init_state(StrategyState<T>& state, const ParamStore<T>& params) {
    if (state.rwalk_fisher.tensor_count() != 0) return;
    for (const auto& [name, t] : params.entries()) {
        state.rwalk_fisher.add(name, Tensor<T>(t.shape()));
        state.rwalk_scores.add(name, Tensor<T>(t.shape()));
        state.rwalk_scores_accum.add(name, Tensor<T>(t.shape()));
    }
}

/// Called once per optimizer step (1-based step index). Every
/// update_interval steps the Fisher EMA updates first; path scores then
/// accumulate s += max(0, -g*d) / (F*d^2/2 + xi).
template <typename T>
void rwalk_step(StrategyState<T>& state, const std::map<std::string, Tensor<T>>& grads,
                const std::map<std::string, Tensor<T>>& deltas, int64_t step_index, const StrategyConfig& cfg) {
    if (step_index % cfg.update_interval == 0) {
        T a = static_cast<T>(cfg.alpha);
        for (auto& [name, f] : state.rwalk_fisher.entries()) {
            const Tensor<T>& gr = grads.at(name);
            for (size_t i = 0; i < f.numel(); ++i) f[i] = a * f[i] + (T(1) - a) * gr[i] * gr[i];
        }
    }
    for (auto& [name, s] : state.rwalk_scores_accum.entries()) {
        const Tensor<T>& gr = grads.at(name);
        const Tensor<T>& d = deltas.at(name);
        const Tensor<T>& f = state.rwalk_fisher.at(name);
        for (size_t i = 0; i < s.numel(); ++i) {
            T num = std::max(T(0), -gr[i] * d[i]);
            if (num != T(0)) s[i] += num / (T(0.5) * f[i] * d[i] * d[i] + static_cast<T>(kRwalkDamping));
        }
    }
}

/// At task end the accumulated scores are averaged into the folded scores
/// (halving), then reset.
template <typename T>
void rwalk_fold_scores(StrategyState<T>& state) {
    for (auto& [name, s] : state.rwalk_scores.entries()) {
        Tensor<T>& acc = state.rwalk_scores_accum.at(name);
        for (size_t i = 0; i < s.numel(); ++i) {
            s[i] = (s[i] + acc[i]) * T(0.5);
            acc[i] = T(0);
        }
    }
}

// ---- distillation losses ----

/// MiB knowledge-distillation term: alpha-weighted KL of the previous class
/// distribution against the current one. Zero when the distributions agree.
template <typename T>
ad::Value mib_kd_term(ad::Graph<T>& g, ad::Value logits, const Tensor<T>& prev_logits, double alpha) {
    return g.scale(kl_divergence_mean(g, logits, prev_logits), alpha);
}

/// MiB total: unbiased CE (plain pixel CE in the one-foreground-class,
/// domain-incremental setting) plus lambda * KD. Without a previous model the
/// KD term vanishes.
template <typename T>
ad::Value mib_loss(ad::Graph<T>& g, ad::Value logits, const std::vector<uint8_t>& labels,
                   const std::optional<Tensor<T>>& prev_logits, double alpha, double lambda) {
    ad::Value ce = cross_entropy_mean(g, logits, labels);
    if (!prev_logits) return ce;
    return g.add(ce, g.scale(mib_kd_term(g, logits, *prev_logits, alpha), lambda));
}

/// Spatial POD distillation: lambda * mean over (maps x scales) of the mean
/// squared embedding distances.
template <typename T>
ad::Value pod_loss(ad::Graph<T>& g, const std::vector<ad::Value>& cur_maps,
                   const std::vector<Tensor<T>>& prev_maps, int scales, double lambda) {
    CLSEG_CHECK(!prev_maps.empty(), ErrorCode::NoPreviousModel, "POD distillation requires a previous model");
    CLSEG_CHECK(cur_maps.size() == prev_maps.size(), ErrorCode::ShapeMismatch,
                "current/previous feature map counts differ");
    ad::Value acc = g.constant(Tensor<T>::scalar(T(0)));
    for (size_t m = 0; m < cur_maps.size(); ++m)
        for (int s = 1; s <= scales; ++s) acc = g.add(acc, pod_scale_distance(g, cur_maps[m], prev_maps[m], s));
    return g.scale(acc, lambda / static_cast<double>(cur_maps.size() * scales));
}

/// PLOP pseudo-labeling: background pixels whose previous-model foreground
/// probability exceeds tau are relabeled foreground. Ground-truth foreground
/// is never altered; tau = 1.0 disables relabeling (strict inequality).
template <typename T>
std::vector<uint8_t> plop_pseudo_labels(const std::vector<uint8_t>& labels, const Tensor<T>& prev_logits,
                                        double tau) {
    CLSEG_CHECK(prev_logits.ndim() == 4 && prev_logits.dim(1) == 2, ErrorCode::NoPreviousModel,
                "pseudo-labeling requires previous-model logits");
    int N = prev_logits.dim(0), H = prev_logits.dim(2), W = prev_logits.dim(3);
    size_t plane = static_cast<size_t>(H) * W;
    CLSEG_CHECK(labels.size() == static_cast<size_t>(N) * plane, ErrorCode::ShapeMismatch,
                "label count != prev logits pixels");
    std::vector<uint8_t> out = labels;
    for (int n = 0; n < N; ++n)
        for (size_t i = 0; i < plane; ++i) {
            size_t li = static_cast<size_t>(n) * plane + i;
            if (out[li] != 0) continue;
            T l0 = prev_logits[(static_cast<size_t>(n) * 2 + 0) * plane + i];
            T l1 = prev_logits[(static_cast<size_t>(n) * 2 + 1) * plane + i];
            double fg = 1.0 / (1.0 + std::exp(static_cast<double>(l0 - l1)));
            if (fg > tau) out[li] = 1;
        }
    return out;
}

// ---- composition ----

/// Collects the feature maps POD/PLOP distill over: all U-Net skip maps plus
/// the encoder bottleneck.
inline std::vector<ad::Value> distillation_maps(const TraceValues& trace) {
    std::vector<ad::Value> maps = trace.skips;
    maps.push_back(trace.bottleneck);
    return maps;
}

inline std::vector<Tensor<float>> distillation_maps(const ForwardTrace& trace) {
    std::vector<Tensor<float>> maps = trace.skips;
    maps.push_back(trace.bottleneck);
    return maps;
}

/// seg_loss plus the strategy's penalty/distillation term. Sequential and
/// rehearsal leave the loss untouched (rehearsal acts on the data instead).
template <typename T>
ad::Value total_loss(ad::Graph<T>& g, ad::Value seg, const StrategyConfig& cfg, const StrategyState<T>& state,
                     const BoundModel<T>& P, const TraceValues& trace, const std::optional<PrevOutputs<T>>& prev) {
    cfg.validate();
    switch (cfg.kind) {
        case StrategyKind::Sequential:
        case StrategyKind::Rehearsal:
            return seg;
        case StrategyKind::Ewc:
            if (!state.has_anchor()) return seg;
            return g.add(seg, ewc_penalty(g, P, state, cfg.lambda, cfg.target));
        case StrategyKind::Rwalk:
            if (!state.has_anchor()) return seg;
            return g.add(seg, rwalk_penalty(g, P, state, cfg.lambda, cfg.target));
        case StrategyKind::Mib:
            if (!prev) return seg;
            return g.add(seg, g.scale(mib_kd_term(g, trace.logits, prev->logits, cfg.alpha), cfg.lambda));
        case StrategyKind::Pod:
        case StrategyKind::Plop:
            if (!prev) return seg;
            return g.add(seg, pod_loss(g, distillation_maps(trace), prev->feature_maps, cfg.scales, cfg.lambda));
    }
    return seg;
}

}  // namespace clseg
