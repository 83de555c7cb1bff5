#pragma once

#include "clseg/data/types.hpp"

namespace clseg {

/// Axial slice extraction with per-volume min-max normalization to [0,1].
/// Constant-intensity volumes normalize to all zeros.
inline SliceBatch slice_volume(const Case& c) {
    c.validate();
    int D = c.volume.shape[0], H = c.volume.shape[1], W = c.volume.shape[2];
    float lo = c.volume.voxels[0], hi = c.volume.voxels[0];
    for (float v : c.volume.voxels) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    float scale = hi > lo ? 1.0f / (hi - lo) : 0.0f;

    SliceBatch out;
    out.images = Tensor<float>({D, 1, H, W});
    out.masks.resize(static_cast<size_t>(D) * H * W);
    out.provenance.reserve(static_cast<size_t>(D));
    size_t plane = static_cast<size_t>(H) * W;
    for (int d = 0; d < D; ++d) {
        const float* src = c.volume.voxels.data() + static_cast<size_t>(d) * plane;
        float* dst = out.images.data() + static_cast<size_t>(d) * plane;
        for (size_t i = 0; i < plane; ++i) dst[i] = (src[i] - lo) * scale;
        const uint8_t* ms = c.mask.labels.data() + static_cast<size_t>(d) * plane;
        std::copy(ms, ms + plane, out.masks.data() + static_cast<size_t>(d) * plane);
        out.provenance.emplace_back(c.id, d);
    }
    return out;
}

/// Concatenates slice batches; spatial dims must agree.
inline SliceBatch concat_batches(const std::vector<SliceBatch>& batches) {
    CLSEG_CHECK(!batches.empty(), ErrorCode::EmptyDataset, "no slice batches to concatenate");
    int H = batches[0].height(), W = batches[0].width();
    int N = 0;
    for (const auto& b : batches) {
        CLSEG_CHECK(b.height() == H && b.width() == W, ErrorCode::ShapeMismatch,
                    "slice batches with differing spatial dims");
        N += b.count();
    }
    SliceBatch out;
    out.images = Tensor<float>({N, 1, H, W});
    out.masks.resize(static_cast<size_t>(N) * H * W);
    size_t plane = static_cast<size_t>(H) * W;
    size_t off = 0;
    for (const auto& b : batches) {
        std::copy(b.images.data(), b.images.data() + b.images.numel(), out.images.data() + off * plane);
        std::copy(b.masks.begin(), b.masks.end(), out.masks.begin() + off * plane);
        for (const auto& p : b.provenance) out.provenance.push_back(p);
        off += static_cast<size_t>(b.count());
    }
    return out;
}

/// Gathers selected slices into a new batch.
inline SliceBatch gather_slices(const SliceBatch& b, const std::vector<int>& idx) {
    int H = b.height(), W = b.width();
    SliceBatch out;
    out.images = Tensor<float>({static_cast<int>(idx.size()), 1, H, W});
    out.masks.resize(idx.size() * H * W);
    size_t plane = static_cast<size_t>(H) * W;
    for (size_t k = 0; k < idx.size(); ++k) {
        std::copy(b.images.data() + static_cast<size_t>(idx[k]) * plane,
                  b.images.data() + static_cast<size_t>(idx[k] + 1) * plane, out.images.data() + k * plane);
        std::copy(b.masks.begin() + static_cast<size_t>(idx[k]) * plane,
                  b.masks.begin() + static_cast<size_t>(idx[k] + 1) * plane, out.masks.begin() + k * plane);
        out.provenance.push_back(b.provenance[idx[k]]);
    }
    return out;
}

}  // namespace clseg
