#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "clseg/ad/graph.hpp"

namespace clseg {

namespace detail {

/// Per-pixel softmax over C classes for logits [N,C,H,W], NCHW layout.
template <typename T>
void pixel_softmax(const Tensor<T>& logits, Tensor<T>& probs) {
    int N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    size_t plane = static_cast<size_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (size_t i = 0; i < plane; ++i) {
            T m = logits[(static_cast<size_t>(n) * C) * plane + i];
            for (int c = 1; c < C; ++c)
                m = std::max(m, logits[(static_cast<size_t>(n) * C + c) * plane + i]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                T e = std::exp(logits[(static_cast<size_t>(n) * C + c) * plane + i] - m);
                probs[(static_cast<size_t>(n) * C + c) * plane + i] = e;
                sum += e;
            }
            for (int c = 0; c < C; ++c) probs[(static_cast<size_t>(n) * C + c) * plane + i] /= sum;
        }
}

}  // namespace detail

/// Mean per-pixel cross entropy against integer labels.
template <typename T>
ad::Value cross_entropy_mean(ad::Graph<T>& g, ad::Value logits, const std::vector<uint8_t>& labels) {
    const Tensor<T>& lv = g.val(logits);
    CLSEG_CHECK(lv.ndim() == 4, ErrorCode::ShapeMismatch, "cross entropy expects [N,C,H,W] logits");
    int N = lv.dim(0), C = lv.dim(1), H = lv.dim(2), W = lv.dim(3);
    size_t npix = static_cast<size_t>(N) * H * W;
    CLSEG_CHECK(labels.size() == npix, ErrorCode::ShapeMismatch, "label count != pixel count");

    auto probs = std::make_shared<Tensor<T>>(lv.shape());
    detail::pixel_softmax(lv, *probs);

    size_t plane = static_cast<size_t>(H) * W;
    double total = 0.0;
    for (int n = 0; n < N; ++n)
        for (size_t i = 0; i < plane; ++i) {
            int y = labels[static_cast<size_t>(n) * plane + i];
            T p = (*probs)[(static_cast<size_t>(n) * C + y) * plane + i];
            total -= std::log(std::max(static_cast<double>(p), 1e-30));
        }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(npix)));

    auto labels_copy = std::make_shared<std::vector<uint8_t>>(labels);
    return g.unary(std::move(out), logits,
                   [probs, labels_copy, N, C, plane, npix](ad::Graph<T>& gg, ad::Value lg, const Tensor<T>& dy) {
        Tensor<T>& grad = gg.mutable_grad(lg);
        T s = dy[0] / static_cast<T>(npix);
        for (int n = 0; n < N; ++n)
            for (size_t i = 0; i < plane; ++i) {
                int y = (*labels_copy)[static_cast<size_t>(n) * plane + i];
                for (int c = 0; c < C; ++c) {
                    size_t idx = (static_cast<size_t>(n) * C + c) * plane + i;
                    grad[idx] += s * ((*probs)[idx] - (c == y ? T(1) : T(0)));
                }
            }
    });
}

/// Soft-Dice loss on the foreground channel of two-class logits, computed
/// over the whole batch: 1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps).
template <typename T>
ad::Value soft_dice_loss(ad::Graph<T>& g, ad::Value logits, const std::vector<uint8_t>& labels, double eps = 1e-5) {
    const Tensor<T>& lv = g.val(logits);
    CLSEG_CHECK(lv.ndim() == 4 && lv.dim(1) == 2, ErrorCode::ShapeMismatch, "soft dice expects [N,2,H,W] logits");
    int N = lv.dim(0), H = lv.dim(2), W = lv.dim(3);
    size_t plane = static_cast<size_t>(H) * W;
    CLSEG_CHECK(labels.size() == static_cast<size_t>(N) * plane, ErrorCode::ShapeMismatch,
                "label count != pixel count");

    auto probs = std::make_shared<Tensor<T>>(lv.shape());
    detail::pixel_softmax(lv, *probs);

    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (int n = 0; n < N; ++n)
        for (size_t i = 0; i < plane; ++i) {
            T p1 = (*probs)[(static_cast<size_t>(n) * 2 + 1) * plane + i];
            int y = labels[static_cast<size_t>(n) * plane + i];
            inter += static_cast<double>(p1) * y;
            psum += p1;
            ysum += y;
        }
    double dice = (2.0 * inter + eps) / (psum + ysum + eps);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(1.0 - dice));

    auto labels_copy = std::make_shared<std::vector<uint8_t>>(labels);
    return g.unary(std::move(out), logits,
                   [probs, labels_copy, N, plane, inter, psum, ysum, eps](ad::Graph<T>& gg, ad::Value lg,
                                                                          const Tensor<T>& dy) {
        Tensor<T>& grad = gg.mutable_grad(lg);
        double denom = psum + ysum + eps;
        // d(1-dice)/dp1 = -(2y*denom - (2inter+eps)) / denom^2
        for (int n = 0; n < N; ++n)
            for (size_t i = 0; i < plane; ++i) {
                size_t i0 = (static_cast<size_t>(n) * 2 + 0) * plane + i;
                size_t i1 = (static_cast<size_t>(n) * 2 + 1) * plane + i;
                int y = (*labels_copy)[static_cast<size_t>(n) * plane + i];
                double dldp = -(2.0 * y * denom - (2.0 * inter + eps)) / (denom * denom);
                T p1 = (*probs)[i1];
                T p0 = (*probs)[i0];
                T local = static_cast<T>(dldp) * p1 * p0;  // dp1/dl1 = p1*p0, dp1/dl0 = -p1*p0
                grad[i1] += dy[0] * local;
                grad[i0] -= dy[0] * local;
            }
    });
}

/// nnU-Net style compound segmentation loss: mean of soft-Dice and pixel CE.
template <typename T>
ad::Value seg_loss(ad::Graph<T>& g, ad::Value logits, const std::vector<uint8_t>& labels) {
    ad::Value ce = cross_entropy_mean(g, logits, labels);
    ad::Value dl = soft_dice_loss(g, logits, labels);
    return g.scale(g.add(ce, dl), 0.5);
}

/// Mean per-pixel KL(prev || cur) between class distributions. Gradient flows
/// into the current logits only; the previous model's logits are frozen.
template <typename T>
ad::Value kl_divergence_mean(ad::Graph<T>& g, ad::Value cur_logits, const Tensor<T>& prev_logits) {
    const Tensor<T>& lv = g.val(cur_logits);
    CLSEG_CHECK(lv.same_shape(prev_logits), ErrorCode::ShapeMismatch, "prev/cur logits shape mismatch");
    int N = lv.dim(0), C = lv.dim(1), H = lv.dim(2), W = lv.dim(3);
    size_t plane = static_cast<size_t>(H) * W;
    size_t npix = static_cast<size_t>(N) * plane;

    auto cur_p = std::make_shared<Tensor<T>>(lv.shape());
    auto prev_p = std::make_shared<Tensor<T>>(lv.shape());
    detail::pixel_softmax(lv, *cur_p);
    detail::pixel_softmax(prev_logits, *prev_p);

    double total = 0.0;
    for (size_t idx = 0; idx < lv.numel(); ++idx) {
        double q = (*prev_p)[idx];
        if (q > 0)
            total += q * (std::log(std::max(q, 1e-30)) -
                          std::log(std::max(static_cast<double>((*cur_p)[idx]), 1e-30)));
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(npix)));

    return g.unary(std::move(out), cur_logits,
                   [cur_p, prev_p, N, C, plane, npix](ad::Graph<T>& gg, ad::Value lg, const Tensor<T>& dy) {
        Tensor<T>& grad = gg.mutable_grad(lg);
        T s = dy[0] / static_cast<T>(npix);
        // d/dl_c of -sum_k q_k log p_k = p_c - q_c
        for (size_t idx = 0; idx < grad.numel(); ++idx) grad[idx] += s * ((*cur_p)[idx] - (*prev_p)[idx]);
    });
}

// ---- POD spatial distillation ----

namespace detail {

inline std::vector<int> region_bounds(int extent, int parts) {
    std::vector<int> b(parts + 1);
    for (int i = 0; i <= parts; ++i) b[i] = static_cast<int>(static_cast<int64_t>(extent) * i / parts);
    return b;
}

}  // namespace detail

/// Pooled-output embedding for one feature map at one scale: the map is split
/// into 2^(s-1) x 2^(s-1) regions; per region and channel the width-pooled
/// (per-row) and height-pooled (per-column) means are concatenated.
template <typename T>
std::vector<T> pod_embedding(const Tensor<T>& map, int scale) {
    CLSEG_CHECK(map.ndim() == 4, ErrorCode::ShapeMismatch, "pod embedding expects [N,C,H,W]");
    int N = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
    int parts = 1 << (scale - 1);
    auto hb = detail::region_bounds(H, parts);
    auto wb = detail::region_bounds(W, parts);
    std::vector<T> emb;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* mp = map.data() + (static_cast<size_t>(n) * C + c) * H * W;
            for (int ri = 0; ri < parts; ++ri)
                for (int rj = 0; rj < parts; ++rj) {
                    int h0 = hb[ri], h1 = hb[ri + 1], w0 = wb[rj], w1 = wb[rj + 1];
                    if (h1 <= h0 || w1 <= w0) continue;
                    for (int h = h0; h < h1; ++h) {
                        T acc = T(0);
                        for (int w = w0; w < w1; ++w) acc += mp[h * W + w];
                        emb.push_back(acc / static_cast<T>(w1 - w0));
                    }
                    for (int w = w0; w < w1; ++w) {
                        T acc = T(0);
                        for (int h = h0; h < h1; ++h) acc += mp[h * W + w];
                        emb.push_back(acc / static_cast<T>(h1 - h0));
                    }
                }
        }
    return emb;
}

/// Mean squared distance between current and previous pooled embeddings of
/// one feature map at one scale, differentiable in the current map.
template <typename T>
ad::Value pod_scale_distance(ad::Graph<T>& g, ad::Value cur_map, const Tensor<T>& prev_map, int scale) {
    const Tensor<T>& cv = g.val(cur_map);
    CLSEG_CHECK(cv.same_shape(prev_map), ErrorCode::ShapeMismatch, "pod feature map shape mismatch");
    auto cur_emb = pod_embedding(cv, scale);
    auto prev_emb = pod_embedding(prev_map, scale);
    size_t L = cur_emb.size();
    if (L == 0) return g.constant(Tensor<T>::scalar(T(0)));

    double total = 0.0;
    auto diff = std::make_shared<std::vector<T>>(L);
    for (size_t i = 0; i < L; ++i) {
        (*diff)[i] = cur_emb[i] - prev_emb[i];
        total += static_cast<double>((*diff)[i]) * (*diff)[i];
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(L)));

    int N = cv.dim(0), C = cv.dim(1), H = cv.dim(2), W = cv.dim(3);
    return g.unary(std::move(out), cur_map,
                   [diff, N, C, H, W, scale, L](ad::Graph<T>& gg, ad::Value cm, const Tensor<T>& dy) {
        Tensor<T>& grad = gg.mutable_grad(cm);
        int parts = 1 << (scale - 1);
        auto hb = detail::region_bounds(H, parts);
        auto wb = detail::region_bounds(W, parts);
        size_t e = 0;
        T s = dy[0] * T(2) / static_cast<T>(L);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T* gp = grad.data() + (static_cast<size_t>(n) * C + c) * H * W;
                for (int ri = 0; ri < parts; ++ri)
                    for (int rj = 0; rj < parts; ++rj) {
                        int h0 = hb[ri], h1 = hb[ri + 1], w0 = wb[rj], w1 = wb[rj + 1];
                        if (h1 <= h0 || w1 <= w0) continue;
                        for (int h = h0; h < h1; ++h, ++e) {
                            T d = s * (*diff)[e] / static_cast<T>(w1 - w0);
                            for (int w = w0; w < w1; ++w) gp[h * W + w] += d;
                        }
                        for (int w = w0; w < w1; ++w, ++e) {
                            T d = s * (*diff)[e] / static_cast<T>(h1 - h0);
                            for (int h = h0; h < h1; ++h) gp[h * W + w] += d;
                        }
                    }
            }
    });
}

}  // namespace clseg
