#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/ad/graph.hpp"
#include "clseg/core/rng.hpp"
#include "clseg/nn/param_store.hpp"

namespace clseg {

enum class ArchVariant { PlainUnet, VitV1, VitV2 };

inline std::string to_string(ArchVariant v) {
    switch (v) {
        case ArchVariant::PlainUnet: return "plain-unet";
        case ArchVariant::VitV1: return "vit-v1";
        case ArchVariant::VitV2: return "vit-v2";
    }
    return "?";
}

inline ArchVariant arch_variant_from_string(const std::string& s) {
    if (s == "plain-unet") return ArchVariant::PlainUnet;
    if (s == "vit-v1") return ArchVariant::VitV1;
    if (s == "vit-v2") return ArchVariant::VitV2;
    raise(ErrorCode::ConfigInvalid, "unknown arch variant: " + s);
}

struct ArchConfig {
    ArchVariant variant = ArchVariant::VitV2;
    bool spt = true;
    bool lsa = false;
    int levels = 4;
    int base_channels = 16;
    int vit_depth = 4;
    int vit_heads = 4;
    int vit_dim = 64;
    int patch_size = 8;

    bool has_vit() const { return variant != ArchVariant::PlainUnet; }
    int head_dim() const { return vit_dim / vit_heads; }
    int level_channels(int level) const { return base_channels << level; }

    /// The paper-scale ViT profile. Not used by the test suites; kept so the
    /// full-size configuration stays one flag away.
    static ArchConfig base_profile() {
        ArchConfig c;
        c.vit_depth = 12;
        c.vit_heads = 12;
        c.vit_dim = 768;
        return c;
    }

    void validate(int input_h, int input_w) const {
        CLSEG_CHECK(levels >= 2, ErrorCode::ConfigInvalid, "levels must be >= 2");
        CLSEG_CHECK(base_channels >= 1, ErrorCode::ConfigInvalid, "base_channels must be >= 1");
        int down = 1 << (levels - 1);
        CLSEG_CHECK(input_h % down == 0 && input_w % down == 0, ErrorCode::BadInputShape,
                    "input dims must be divisible by 2^(levels-1)");
        if (has_vit()) {
            CLSEG_CHECK(vit_dim >= 1 && vit_heads >= 1 && vit_depth >= 1, ErrorCode::ConfigInvalid,
                        "vit dims must be positive");
            CLSEG_CHECK(vit_dim % vit_heads == 0, ErrorCode::ConfigInvalid, "vit_dim must be divisible by heads");
            CLSEG_CHECK(patch_size >= 1 && input_h % patch_size == 0 && input_w % patch_size == 0,
                        ErrorCode::IncompatiblePatchSize, "patch size must divide the first-skip spatial dims");
            if (spt)
                CLSEG_CHECK(patch_size % 2 == 0, ErrorCode::IncompatiblePatchSize,
                            "SPT shifts by half a patch; patch size must be even");
            if (lsa)
                CLSEG_CHECK((input_h / patch_size) * (input_w / patch_size) >= 2, ErrorCode::IncompatiblePatchSize,
                            "LSA masks the attention diagonal and needs >= 2 tokens");
            if (variant == ArchVariant::VitV2)
                CLSEG_CHECK(levels >= 3, ErrorCode::ConfigInvalid, "vit-v2 fuses two skip levels; needs levels >= 3");
            // token grid must reach bottleneck dims through factor-2 stages
            int grid = input_h / patch_size, bott = input_h >> (levels - 1);
            int lo = std::min(grid, bott), hi = std::max(grid, bott);
            CLSEG_CHECK(hi % lo == 0 && (hi / lo & (hi / lo - 1)) == 0, ErrorCode::IncompatiblePatchSize,
                        "token grid and bottleneck dims must differ by a power of two");
        }
    }

    nlohmann::json to_json() const {
        return {{"variant", to_string(variant)}, {"spt", spt},           {"lsa", lsa},
                {"levels", levels},              {"base_channels", base_channels},
                {"vit_depth", vit_depth},        {"vit_heads", vit_heads},
                {"vit_dim", vit_dim},            {"patch_size", patch_size}};
    }

    static ArchConfig from_json(const nlohmann::json& j) {
        ArchConfig c;
        if (j.contains("profile") && j.at("profile").get<std::string>() == "base") c = base_profile();
        if (j.contains("variant")) c.variant = arch_variant_from_string(j.at("variant").get<std::string>());
        if (j.contains("spt")) c.spt = j.at("spt").get<bool>();
        if (j.contains("lsa")) c.lsa = j.at("lsa").get<bool>();
        if (j.contains("levels")) c.levels = j.at("levels").get<int>();
        if (j.contains("base_channels")) c.base_channels = j.at("base_channels").get<int>();
        if (j.contains("vit_depth")) c.vit_depth = j.at("vit_depth").get<int>();
        if (j.contains("vit_heads")) c.vit_heads = j.at("vit_heads").get<int>();
        if (j.contains("vit_dim")) c.vit_dim = j.at("vit_dim").get<int>();
        if (j.contains("patch_size")) c.patch_size = j.at("patch_size").get<int>();
        return c;
    }
};

// ---- deterministic initialization ----

namespace init {

template <typename T>
Tensor<T> he_normal(std::vector<int> shape, int fan_in, uint64_t seed, double slope = 0.01) {
    double std = std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in));
    Tensor<T> t(std::move(shape));
    Pcg32 rng(seed);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.gaussian() * std);
    return t;
}

template <typename T>
Tensor<T> xavier_normal(std::vector<int> shape, int fan_in, int fan_out, uint64_t seed) {
    double std = std::sqrt(2.0 / (fan_in + fan_out));
    Tensor<T> t(std::move(shape));
    Pcg32 rng(seed);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.gaussian() * std);
    return t;
}

template <typename T>
Tensor<T> normal(std::vector<int> shape, double std, uint64_t seed) {
    Tensor<T> t(std::move(shape));
    Pcg32 rng(seed);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.gaussian() * std);
    return t;
}

}  // namespace init

/// Builds all parameters for the configured architecture. Initialization is
/// derived per tensor name, so identical names get identical values across
/// variants and runs.
template <typename T>
ParamStore<T> build_model(const ArchConfig& cfg, int input_h, int input_w, uint64_t seed) {
    cfg.validate(input_h, input_w);
    ParamStore<T> store;
    auto sub = [&](const std::string& name) { return derive_seed(seed, "init/" + name); };

    auto add_conv = [&](const std::string& name, int cout, int cin, int k) {
        store.add(name + ".w", init::he_normal<T>({cout, cin, k, k}, cin * k * k, sub(name + ".w")));
        store.add(name + ".b", Tensor<T>({cout}));
    };
    auto add_norm = [&](const std::string& name, int c) {
        store.add(name + ".g", Tensor<T>::full({c}, T(1)));
        store.add(name + ".b", Tensor<T>({c}));
    };
    auto add_block = [&](const std::string& prefix, int cin, int cout) {
        add_conv(prefix + ".conv1", cout, cin, 3);
        add_norm(prefix + ".norm1", cout);
        add_conv(prefix + ".conv2", cout, cout, 3);
        add_norm(prefix + ".norm2", cout);
    };
    auto add_upconv = [&](const std::string& name, int cin, int cout) {
        store.add(name + ".w", init::he_normal<T>({cin, cout, 2, 2}, cin * 4, sub(name + ".w")));
        store.add(name + ".b", Tensor<T>({cout}));
    };
    auto add_linear = [&](const std::string& name, int in, int out) {
        store.add(name + ".w", init::xavier_normal<T>({in, out}, in, out, sub(name + ".w")));
        store.add(name + ".b", Tensor<T>({out}));
    };

    // U-Net
    for (int l = 0; l < cfg.levels; ++l) {
        int cin = l == 0 ? 1 : cfg.level_channels(l - 1);
        add_block("unet.encoder.L" + std::to_string(l), cin, cfg.level_channels(l));
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        std::string p = "unet.decoder.L" + std::to_string(l);
        add_upconv(p + ".up", cfg.level_channels(l + 1), cfg.level_channels(l));
        add_block(p, 2 * cfg.level_channels(l), cfg.level_channels(l));
    }
    store.add("unet.other.head.w",
              init::xavier_normal<T>({2, cfg.base_channels, 1, 1}, cfg.base_channels, 2, sub("unet.other.head.w")));
    store.add("unet.other.head.b", Tensor<T>({2}));

    if (!cfg.has_vit()) return store;

    // V2 fusion: upsample chain from the last skip to first-skip shape
    if (cfg.variant == ArchVariant::VitV2) {
        for (int k = 0; k < cfg.levels - 2; ++k) {
            int cin = cfg.level_channels(cfg.levels - 2 - k);
            add_upconv("vit.fuse.up" + std::to_string(k), cin, cin / 2);
        }
    }

    // patch embedding
    int tokens = (input_h / cfg.patch_size) * (input_w / cfg.patch_size);
    int patch_len = cfg.base_channels * (cfg.spt ? 5 : 1) * cfg.patch_size * cfg.patch_size;
    add_linear("vit.embed.proj", patch_len, cfg.vit_dim);
    store.add("vit.embed.pos", init::normal<T>({tokens, cfg.vit_dim}, 0.02, sub("vit.embed.pos")));

    // transformer blocks
    for (int i = 0; i < cfg.vit_depth; ++i) {
        std::string p = "vit.block" + std::to_string(i);
        add_norm(p + ".norm1", cfg.vit_dim);
        add_linear(p + ".attn.q", cfg.vit_dim, cfg.vit_dim);
        add_linear(p + ".attn.k", cfg.vit_dim, cfg.vit_dim);
        add_linear(p + ".attn.v", cfg.vit_dim, cfg.vit_dim);
        add_linear(p + ".attn.o", cfg.vit_dim, cfg.vit_dim);
        if (cfg.lsa)
            store.add(p + ".attn.temp", Tensor<T>::scalar(static_cast<T>(std::sqrt(double(cfg.head_dim())))));
        add_norm(p + ".norm2", cfg.vit_dim);
        add_linear(p + ".mlp.fc1", cfg.vit_dim, 4 * cfg.vit_dim);
        add_linear(p + ".mlp.fc2", 4 * cfg.vit_dim, cfg.vit_dim);
    }

    // re-injection into the bottleneck: resize stages plus a zero-initialized
    // 1x1 projection, so the whole ViT path is inert at init
    int grid = input_h / cfg.patch_size, bott = input_h >> (cfg.levels - 1);
    for (int k = 0; (grid << k) < bott; ++k)
        add_upconv("vit.inject.up" + std::to_string(k), cfg.vit_dim, cfg.vit_dim);
    store.add("vit.inject.proj.w", Tensor<T>({cfg.level_channels(cfg.levels - 1), cfg.vit_dim, 1, 1}));
    store.add("vit.inject.proj.b", Tensor<T>({cfg.level_channels(cfg.levels - 1)}));
    return store;
}

// ---- forward pass ----

/// Graph-embedded forward results; values stay differentiable.
struct TraceValues {
    ad::Value logits;
    std::vector<ad::Value> skips;
    ad::Value bottleneck;        // encoder bottleneck before ViT injection
    ad::Value bottleneck_fused;  // decoder input (equals bottleneck for plain U-Net)
    std::optional<ad::Value> fused;
    std::optional<ad::Value> vit_tokens;
    std::vector<ad::Value> attention;  // per layer, [N*heads, T, T]
};

/// Plain-tensor snapshot of a forward pass.
struct ForwardTrace {
    Tensor<float> logits;
    std::vector<Tensor<float>> skips;
    Tensor<float> bottleneck;
    std::optional<Tensor<float>> vit_tokens;
    std::vector<Tensor<float>> attention;  // per layer, [N, heads, T, T]
};

template <typename T>
struct BoundModel {
    std::map<std::string, ad::Value> values;

    ad::Value at(const std::string& name) const {
        auto it = values.find(name);
        CLSEG_CHECK(it != values.end(), ErrorCode::ConfigInvalid, "unbound parameter " + name);
        return it->second;
    }
};

template <typename T>
BoundModel<T> bind_params(ad::Graph<T>& g, const ParamStore<T>& store, bool requires_grad = true) {
    BoundModel<T> bound;
    for (const auto& [name, t] : store.entries()) bound.values.emplace(name, g.leaf(t, requires_grad));
    return bound;
}

namespace detail {

template <typename T>
ad::Value double_block(ad::Graph<T>& g, const BoundModel<T>& P, const std::string& prefix, ad::Value x) {
    x = g.conv2d(x, P.at(prefix + ".conv1.w"), P.at(prefix + ".conv1.b"), 1);
    x = g.instance_norm(x, P.at(prefix + ".norm1.g"), P.at(prefix + ".norm1.b"));
    x = g.leaky_relu(x, 0.01);
    x = g.conv2d(x, P.at(prefix + ".conv2.w"), P.at(prefix + ".conv2.b"), 1);
    x = g.instance_norm(x, P.at(prefix + ".norm2.g"), P.at(prefix + ".norm2.b"));
    return g.leaky_relu(x, 0.01);
}

template <typename T>
std::pair<std::vector<ad::Value>, ad::Value> encode(ad::Graph<T>& g, const BoundModel<T>& P, const ArchConfig& cfg,
                                                    ad::Value x) {
    std::vector<ad::Value> skips;
    for (int l = 0; l < cfg.levels - 1; ++l) {
        x = double_block(g, P, "unet.encoder.L" + std::to_string(l), x);
        skips.push_back(x);
        x = g.maxpool2(x);
    }
    ad::Value bottleneck = double_block(g, P, "unet.encoder.L" + std::to_string(cfg.levels - 1), x);
    return {skips, bottleneck};
}

template <typename T>
ad::Value decode(ad::Graph<T>& g, const BoundModel<T>& P, const ArchConfig& cfg, ad::Value bottleneck,
                 const std::vector<ad::Value>& skips) {
    ad::Value h = bottleneck;
    for (int l = cfg.levels - 2; l >= 0; --l) {
        std::string p = "unet.decoder.L" + std::to_string(l);
        ad::Value up = g.conv_transpose2x2(h, P.at(p + ".up.w"), P.at(p + ".up.b"));
        h = double_block(g, P, p, g.concat_channels({up, skips[l]}));
    }
    return g.conv2d(h, P.at("unet.other.head.w"), P.at("unet.other.head.b"), 0);
}

/// V1 fusion: the first skip, unchanged.
template <typename T>
ad::Value fuse_v1(ad::Graph<T>&, const std::vector<ad::Value>& skips) {
    CLSEG_CHECK(!skips.empty(), ErrorCode::BadInputShape, "fuse_v1 needs at least one skip");
    return skips.front();
}

/// V2 fusion: last skip upsampled through stride-2 transposed convolutions to
/// first-skip shape, then added channel-wise to the first skip.
template <typename T>
ad::Value fuse_v2(ad::Graph<T>& g, const BoundModel<T>& P, const ArchConfig& cfg,
                  const std::vector<ad::Value>& skips) {
    CLSEG_CHECK(skips.size() >= 2, ErrorCode::BadInputShape, "fuse_v2 needs at least two skip levels");
    ad::Value h = skips.back();
    for (size_t k = 0; k + 1 < skips.size(); ++k) {
        std::string p = "vit.fuse.up" + std::to_string(k);
        h = g.conv_transpose2x2(h, P.at(p + ".w"), P.at(p + ".b"));
    }
    return g.add(h, skips.front());
}

/// SPT + patch flattening + linear projection + learned positional embedding.
template <typename T>
ad::Value patch_tokenize(ad::Graph<T>& g, const BoundModel<T>& P, ad::Value fmap, int patch, bool spt) {
    ad::Value input = fmap;
    if (spt) {
        int s = patch / 2;
        input = g.concat_channels({fmap, g.shift2d(fmap, s, s), g.shift2d(fmap, s, -s), g.shift2d(fmap, -s, s),
                                   g.shift2d(fmap, -s, -s)});
    }
    ad::Value tokens = g.extract_patches(input, patch);  // [N, T, L]
    const auto& sh = g.val(tokens).shape();
    int N = sh[0], Tn = sh[1], L = sh[2];
    ad::Value flat = g.reshape(tokens, {N * Tn, L});
    ad::Value proj = g.add_rowvec(g.matmul(flat, P.at("vit.embed.proj.w")), P.at("vit.embed.proj.b"));
    int dim = g.val(proj).dim(1);
    return g.add_pos_embedding(g.reshape(proj, {N, Tn, dim}), P.at("vit.embed.pos"));
}

template <typename T>
ad::Value linear_tokens(ad::Graph<T>& g, const BoundModel<T>& P, const std::string& name, ad::Value x) {
    const auto& sh = g.val(x).shape();
    int N = sh[0], Tn = sh[1], D = sh[2];
    ad::Value flat = g.reshape(x, {N * Tn, D});
    ad::Value y = g.add_rowvec(g.matmul(flat, P.at(name + ".w")), P.at(name + ".b"));
    return g.reshape(y, {N, Tn, g.val(y).dim(1)});
}

/// Pre-norm transformer stack. Returns final tokens and per-layer attention.
template <typename T>
std::pair<ad::Value, std::vector<ad::Value>> vit_forward(ad::Graph<T>& g, const BoundModel<T>& P,
                                                         const ArchConfig& cfg, ad::Value tokens) {
    const auto& sh = g.val(tokens).shape();
    CLSEG_CHECK(sh.size() == 3 && sh[2] == cfg.vit_dim, ErrorCode::DimMismatch,
                "token dim does not match vit_dim");
    int N = sh[0], Tn = sh[1], H = cfg.vit_heads, hd = cfg.head_dim();
    std::vector<ad::Value> attentions;

    ad::Value x = tokens;
    for (int i = 0; i < cfg.vit_depth; ++i) {
        std::string p = "vit.block" + std::to_string(i);
        ad::Value n1 = g.layer_norm(x, P.at(p + ".norm1.g"), P.at(p + ".norm1.b"));
        auto heads = [&](const std::string& name) {
            ad::Value t = linear_tokens(g, P, p + ".attn." + name, n1);
            return g.reshape(g.permute_0213(g.reshape(t, {N, Tn, H, hd})), {N * H, Tn, hd});
        };
        ad::Value q = heads("q"), k = heads("k"), v = heads("v");
        ad::Value logits = g.bmm(q, k, true);
        if (cfg.lsa) {
            logits = g.div_by_scalar(logits, P.at(p + ".attn.temp"));
            logits = g.mask_diagonal(logits);
        } else {
            logits = g.scale(logits, 1.0 / std::sqrt(double(hd)));
        }
        ad::Value attn = g.softmax_last(logits);
        attentions.push_back(attn);
        ad::Value ctx = g.bmm(attn, v);  // [N*H, T, hd]
        ctx = g.reshape(g.permute_0213(g.reshape(ctx, {N, H, Tn, hd})), {N, Tn, H * hd});
        ad::Value attn_out = linear_tokens(g, P, p + ".attn.o", ctx);
        x = g.add(x, attn_out);

        ad::Value n2 = g.layer_norm(x, P.at(p + ".norm2.g"), P.at(p + ".norm2.b"));
        ad::Value h1 = g.gelu(linear_tokens(g, P, p + ".mlp.fc1", n2));
        ad::Value h2 = linear_tokens(g, P, p + ".mlp.fc2", h1);
        x = g.add(x, h2);
    }
    return {x, attentions};
}

}  // namespace detail

/// Full forward pass for any variant. For plain U-Net the ViT-specific trace
/// fields stay empty.
template <typename T>
TraceValues model_forward(ad::Graph<T>& g, const BoundModel<T>& P, const ArchConfig& cfg, ad::Value images) {
    const auto& ish = g.val(images).shape();
    CLSEG_CHECK(ish.size() == 4 && ish[1] == 1, ErrorCode::BadInputShape, "expected input images [N,1,H,W]");
    cfg.validate(ish[2], ish[3]);

    TraceValues tr;
    auto [skips, bottleneck] = detail::encode(g, P, cfg, images);
    tr.skips = skips;
    tr.bottleneck = bottleneck;
    tr.bottleneck_fused = bottleneck;

    if (cfg.has_vit()) {
        ad::Value fused = cfg.variant == ArchVariant::VitV1 ? detail::fuse_v1(g, skips)
                                                            : detail::fuse_v2(g, P, cfg, skips);
        tr.fused = fused;
        ad::Value tokens = detail::patch_tokenize(g, P, fused, cfg.patch_size, cfg.spt);
        auto [tokens_out, attns] = detail::vit_forward(g, P, cfg, tokens);
        tr.vit_tokens = tokens_out;
        tr.attention = attns;

        // token grid back to a spatial map, resized to the bottleneck shape,
        // projected and injected residually
        const auto& fsh = g.val(fused).shape();
        int N = fsh[0], gh = fsh[2] / cfg.patch_size, gw = fsh[3] / cfg.patch_size;
        ad::Value grid = g.reshape(g.permute_021(tokens_out), {N, cfg.vit_dim, gh, gw});
        const auto& bsh = g.val(bottleneck).shape();
        int up_idx = 0;
        while (g.val(grid).dim(2) < bsh[2]) {
            std::string p = "vit.inject.up" + std::to_string(up_idx++);
            grid = g.conv_transpose2x2(grid, P.at(p + ".w"), P.at(p + ".b"));
        }
        while (g.val(grid).dim(2) > bsh[2]) grid = g.avgpool2(grid);
        ad::Value proj = g.conv2d(grid, P.at("vit.inject.proj.w"), P.at("vit.inject.proj.b"), 0);
        tr.bottleneck_fused = g.add(bottleneck, proj);
    }

    tr.logits = detail::decode(g, P, cfg, tr.bottleneck_fused, skips);
    return tr;
}

/// Inference helper: runs the forward without gradients and snapshots the
/// trace as plain tensors.
inline ForwardTrace forward_trace(const ParamStore<float>& store, const ArchConfig& cfg,
                                  const Tensor<float>& images) {
    ad::Graph<float> g(false);
    auto P = bind_params(g, store, false);
    ad::Value x = g.constant(images);
    TraceValues tr = model_forward(g, P, cfg, x);

    ForwardTrace out;
    out.logits = g.val(tr.logits);
    for (ad::Value s : tr.skips) out.skips.push_back(g.val(s));
    out.bottleneck = g.val(tr.bottleneck);
    if (tr.vit_tokens) out.vit_tokens = g.val(*tr.vit_tokens);
    int N = images.dim(0);
    for (ad::Value a : tr.attention) {
        const auto& t = g.val(a);  // [N*heads, T, T]
        int heads = t.dim(0) / N;
        out.attention.push_back(t.reshaped({N, heads, t.dim(1), t.dim(2)}));
    }
    return out;
}

/// Argmax class per pixel from logits [N,2,H,W] -> labels [N*H*W].
inline std::vector<uint8_t> predict_labels(const Tensor<float>& logits) {
    int N = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
    size_t plane = static_cast<size_t>(H) * W;
    std::vector<uint8_t> out(static_cast<size_t>(N) * plane);
    for (int n = 0; n < N; ++n) {
        const float* c0 = logits.data() + static_cast<size_t>(n) * 2 * plane;
        const float* c1 = c0 + plane;
        for (size_t i = 0; i < plane; ++i) out[static_cast<size_t>(n) * plane + i] = c1[i] > c0[i] ? 1 : 0;
    }
    return out;
}

}  // namespace clseg
