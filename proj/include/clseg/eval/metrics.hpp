#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/core/io.hpp"
#include "clseg/data/slicing.hpp"
#include "clseg/data/types.hpp"
#include "clseg/nn/model.hpp"

namespace clseg {

/// Sorensen-Dice overlap 2|A n B| / (|A| + |B|). Two empty masks count as
/// perfect agreement (1.0); aggregation can exclude such cases instead, see
/// EmptyDicePolicy.
inline double dice(const SegMask& pred, const SegMask& gt) {
    CLSEG_CHECK(pred.shape == gt.shape, ErrorCode::ShapeMismatch, "dice: mask shapes differ");
    size_t inter = 0, a = 0, b = 0;
    for (size_t i = 0; i < pred.labels.size(); ++i) {
        a += pred.labels[i];
        b += gt.labels[i];
        inter += static_cast<size_t>(pred.labels[i]) & gt.labels[i];
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

enum class EmptyDicePolicy { OneWhenBothEmpty, ExcludeFromMean };

inline EmptyDicePolicy empty_dice_policy_from_string(const std::string& s) {
    if (s == "one") return EmptyDicePolicy::OneWhenBothEmpty;
    if (s == "exclude") return EmptyDicePolicy::ExcludeFromMean;
    raise(ErrorCode::ConfigInvalid, "unknown empty-dice policy: " + s);
}

/// Checkpoints x tasks Dice table; values[i][j] is the Dice of the model
/// after task i+1 on task j+1's evaluation set, with the per-cell standard
/// deviation across test cases.
struct DiceMatrix {
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> sigma;

    int n() const { return static_cast<int>(values.size()); }

    void validate() const {
        CLSEG_CHECK(!values.empty(), ErrorCode::ShapeMismatch, "empty dice matrix");
        for (const auto& row : values) {
            CLSEG_CHECK(row.size() == values.size(), ErrorCode::ShapeMismatch, "dice matrix must be square");
            for (double v : row)
                CLSEG_CHECK(v >= 0.0 && v <= 1.0, ErrorCode::OutOfRange, "dice values must be in [0,1]");
        }
        CLSEG_CHECK(sigma.size() == values.size(), ErrorCode::ShapeMismatch, "sigma dims mismatch");
    }

    /// 1-based accessors matching the protocol notation.
    double value(int i, int j) const {
        CLSEG_CHECK(i >= 1 && i <= n() && j >= 1 && j <= n(), ErrorCode::OutOfRange, "dice matrix index out of range");
        return values[i - 1][j - 1];
    }

    nlohmann::json to_json() const { return {{"values", values}, {"sigma", sigma}}; }

    static DiceMatrix from_json(const nlohmann::json& j) {
        DiceMatrix m;
        m.values = j.at("values").get<std::vector<std::vector<double>>>();
        m.sigma = j.at("sigma").get<std::vector<std::vector<double>>>();
        return m;
    }
};

/// Backward transfer for task i (1..n-1): final-row Dice minus the Dice right
/// after training task i. Undefined for the last task.
inline double bwt(const DiceMatrix& m, int i) {
    int n = m.n();
    CLSEG_CHECK(i >= 1 && i <= n - 1, ErrorCode::UndefinedMetric,
                "BWT is undefined for task " + std::to_string(i) + " of " + std::to_string(n));
    return m.value(n, i) - m.value(i, i);
}

/// Forward transfer for task i (2..n): Dice of the model trained on tasks
/// 1..i-1 on task i, minus the single-task baseline. Undefined for the first
/// task.
inline double fwt(const DiceMatrix& m, const std::vector<double>& baselines, int i) {
    int n = m.n();
    CLSEG_CHECK(i >= 2 && i <= n, ErrorCode::UndefinedMetric,
                "FWT is undefined for task " + std::to_string(i));
    CLSEG_CHECK(static_cast<int>(baselines.size()) >= i, ErrorCode::UndefinedMetric,
                "no baseline available for task " + std::to_string(i));
    return m.value(i - 1, i) - baselines[i - 1];
}

struct MetricSummary {
    double dice_mean = 0.0;
    double dice_first = 0.0;
    double dice_last = 0.0;
    std::vector<double> bwt_per_task;  // tasks 1..n-1
    std::vector<double> fwt_per_task;  // tasks 2..n
    std::optional<double> mean_bwt;
    std::optional<double> mean_fwt;

    nlohmann::json to_json() const {
        nlohmann::json j{{"dice_mean", dice_mean}, {"dice_first", dice_first}, {"dice_last", dice_last},
                         {"bwt_per_task", bwt_per_task}, {"fwt_per_task", fwt_per_task}};
        j["mean_bwt"] = mean_bwt ? nlohmann::json(*mean_bwt) : nlohmann::json();
        j["mean_fwt"] = mean_fwt ? nlohmann::json(*mean_fwt) : nlohmann::json();
        return j;
    }

    static MetricSummary from_json(const nlohmann::json& j) {
        MetricSummary s;
        s.dice_mean = j.at("dice_mean").get<double>();
        s.dice_first = j.at("dice_first").get<double>();
        s.dice_last = j.at("dice_last").get<double>();
        s.bwt_per_task = j.at("bwt_per_task").get<std::vector<double>>();
        s.fwt_per_task = j.at("fwt_per_task").get<std::vector<double>>();
        if (!j.at("mean_bwt").is_null()) s.mean_bwt = j.at("mean_bwt").get<double>();
        if (!j.at("mean_fwt").is_null()) s.mean_fwt = j.at("mean_fwt").get<double>();
        return s;
    }
};

/// Final-row Dice statistics plus BWT/FWT over their defined ranges. FWT is
/// skipped when no baselines were trained.
inline MetricSummary summarize(const DiceMatrix& m, const std::vector<double>& baselines) {
    m.validate();
    int n = m.n();
    MetricSummary s;
    double acc = 0.0;
    for (int j = 1; j <= n; ++j) acc += m.value(n, j);
    s.dice_mean = acc / n;
    s.dice_first = m.value(n, 1);
    s.dice_last = m.value(n, n);
    for (int i = 1; i <= n - 1; ++i) s.bwt_per_task.push_back(bwt(m, i));
    if (!s.bwt_per_task.empty()) {
        double b = 0.0;
        for (double v : s.bwt_per_task) b += v;
        s.mean_bwt = b / static_cast<double>(s.bwt_per_task.size());
    }
    if (!baselines.empty()) {
        for (int i = 2; i <= n; ++i) s.fwt_per_task.push_back(fwt(m, baselines, i));
        if (!s.fwt_per_task.empty()) {
            double f = 0.0;
            for (double v : s.fwt_per_task) f += v;
            s.mean_fwt = f / static_cast<double>(s.fwt_per_task.size());
        }
    }
    return s;
}

/// Radar-plot normalization: [-1,1] -> [0,2] by adding 1.
inline double normalize_for_plot(double v) {
    CLSEG_CHECK(v >= -1.0 && v <= 1.0, ErrorCode::OutOfRange,
                "normalize_for_plot expects a value in [-1,1], got " + std::to_string(v));
    return v + 1.0;
}

// ---- model evaluation ----

/// Predicted 3-d mask for one case (argmax over the two logits per pixel).
inline SegMask predict_case(const ParamStore<float>& params, const ArchConfig& cfg, const Case& c) {
    SliceBatch batch = slice_volume(c);
    ForwardTrace tr = forward_trace(params, cfg, batch.images);
    SegMask pred;
    pred.shape = c.volume.shape;
    pred.labels = predict_labels(tr.logits);
    return pred;
}

struct EvalResult {
    double mean = 0.0;
    double sigma = 0.0;
    std::vector<double> per_case;
};

/// Case-level Dice statistics of a model over a dataset. Sigma is the
/// population standard deviation across cases ("between patients").
inline EvalResult evaluate_on_dataset(const ParamStore<float>& params, const ArchConfig& cfg, const TaskDataset& ds,
                                      EmptyDicePolicy policy = EmptyDicePolicy::OneWhenBothEmpty) {
    EvalResult r;
    for (const Case& c : ds.cases) {
        SegMask pred = predict_case(params, cfg, c);
        if (policy == EmptyDicePolicy::ExcludeFromMean && pred.foreground_count() == 0 &&
            c.mask.foreground_count() == 0)
            continue;
        r.per_case.push_back(dice(pred, c.mask));
    }
    CLSEG_CHECK(!r.per_case.empty(), ErrorCode::EmptyDataset, "no cases left to evaluate");
    for (double v : r.per_case) r.mean += v;
    r.mean /= static_cast<double>(r.per_case.size());
    double var = 0.0;
    for (double v : r.per_case) var += (v - r.mean) * (v - r.mean);
    r.sigma = std::sqrt(var / static_cast<double>(r.per_case.size()));
    return r;
}

// ---- attention maps ----

struct AttentionMap {
    int layer = 0;  // 0-based
    int head = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;  // [H*W], min-max normalized to [0,1]
};

namespace detail {

inline std::vector<float> bilinear_upsample(const std::vector<float>& src, int sh, int sw, int dh, int dw) {
    std::vector<float> dst(static_cast<size_t>(dh) * dw);
    double fy = static_cast<double>(sh) / dh, fx = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        double sy = (y + 0.5) * fy - 0.5;
        int y0 = static_cast<int>(std::floor(sy));
        double wy = sy - y0;
        int y0c = std::min(std::max(y0, 0), sh - 1), y1c = std::min(std::max(y0 + 1, 0), sh - 1);
        for (int x = 0; x < dw; ++x) {
            double sx = (x + 0.5) * fx - 0.5;
            int x0 = static_cast<int>(std::floor(sx));
            double wx = sx - x0;
            int x0c = std::min(std::max(x0, 0), sw - 1), x1c = std::min(std::max(x0 + 1, 0), sw - 1);
            double v = (1 - wy) * ((1 - wx) * src[y0c * sw + x0c] + wx * src[y0c * sw + x1c]) +
                       wy * ((1 - wx) * src[y1c * sw + x0c] + wx * src[y1c * sw + x1c]);
            dst[static_cast<size_t>(y) * dw + x] = static_cast<float>(v);
        }
    }
    return dst;
}

}  // namespace detail

/// Attention received per token (column mean of the chosen head's matrix),
/// reshaped to the patch grid, bilinearly upsampled to the slice dims and
/// min-max normalized. A constant map degenerates to 0.5 everywhere.
/// Defaults (-1) select the last layer and last head.
inline AttentionMap extract_attention(const ParamStore<float>& params, const ArchConfig& cfg,
                                      const Tensor<float>& slice_image, int layer = -1, int head = -1) {
    CLSEG_CHECK(cfg.has_vit(), ErrorCode::NoViTComponent, "attention extraction needs a ViT component");
    CLSEG_CHECK(slice_image.ndim() == 4 && slice_image.dim(0) == 1 && slice_image.dim(1) == 1,
                ErrorCode::BadInputShape, "expected a single slice [1,1,H,W]");
    ForwardTrace tr = forward_trace(params, cfg, slice_image);
    int n_layers = static_cast<int>(tr.attention.size());
    if (layer < 0) layer = n_layers - 1;
    CLSEG_CHECK(layer >= 0 && layer < n_layers, ErrorCode::OutOfRange, "attention layer out of range");
    const Tensor<float>& att = tr.attention[layer];  // [1, heads, T, T]
    int heads = att.dim(1), T = att.dim(2);
    if (head < 0) head = heads - 1;
    CLSEG_CHECK(head >= 0 && head < heads, ErrorCode::OutOfRange, "attention head out of range");

    std::vector<float> received(static_cast<size_t>(T), 0.0f);
    const float* a = att.data() + static_cast<size_t>(head) * T * T;
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) received[j] += a[i * T + j];
    for (float& v : received) v /= static_cast<float>(T);

    int H = slice_image.dim(2), W = slice_image.dim(3);
    int gh = H / cfg.patch_size, gw = W / cfg.patch_size;
    CLSEG_CHECK(gh * gw == T, ErrorCode::ShapeMismatch, "token count does not match patch grid");

    AttentionMap out;
    out.layer = layer;
    out.head = head;
    out.height = H;
    out.width = W;
    out.values = detail::bilinear_upsample(received, gh, gw, H, W);
    float lo = out.values[0], hi = out.values[0];
    for (float v : out.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12f) {
        std::fill(out.values.begin(), out.values.end(), 0.5f);
    } else {
        for (float& v : out.values) v = (v - lo) / (hi - lo);
    }
    return out;
}

/// Binary PGM (P5, 8-bit), min-max scaled input in [0,1].
inline void write_pgm(const AttentionMap& map, const std::filesystem::path& path) {
    std::string header = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    std::vector<uint8_t> buf(header.begin(), header.end());
    for (float v : map.values)
        buf.push_back(static_cast<uint8_t>(std::lround(std::min(std::max(v, 0.0f), 1.0f) * 255.0f)));
    write_file_bytes(path, buf.data(), buf.size());
}

}  // namespace clseg
