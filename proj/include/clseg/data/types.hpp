#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "clseg/core/error.hpp"
#include "clseg/core/tensor.hpp"

namespace clseg {

/// 3-d scalar field with voxel spacing in millimeters. Axial slicing runs
/// along the first (D) axis.
struct Volume {
    std::vector<int> shape;  // [D, H, W]
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> voxels;  // row-major, D-major

    size_t numel() const { return voxels.size(); }

    void validate() const {
        CLSEG_CHECK(shape.size() == 3 && shape[0] >= 1 && shape[1] >= 1 && shape[2] >= 1, ErrorCode::BadInputShape,
                    "volume dims must all be >= 1");
        CLSEG_CHECK(voxels.size() == Tensor<float>::compute_numel(shape), ErrorCode::ShapeMismatch,
                    "voxel count does not match shape");
        for (double s : spacing) CLSEG_CHECK(s > 0.0, ErrorCode::MalformedHeader, "spacing must be positive");
        for (float v : voxels)
            CLSEG_CHECK(std::isfinite(v), ErrorCode::NonFiniteVoxel, "volume contains NaN or Inf");
    }
};

/// Binary label field paired with a Volume; 1 marks the foreground class.
struct SegMask {
    std::vector<int> shape;  // [D, H, W]
    std::vector<uint8_t> labels;

    size_t numel() const { return labels.size(); }

    void validate() const {
        CLSEG_CHECK(shape.size() == 3, ErrorCode::BadInputShape, "mask must be 3-d");
        CLSEG_CHECK(labels.size() == Tensor<float>::compute_numel(shape), ErrorCode::ShapeMismatch,
                    "label count does not match shape");
        for (uint8_t v : labels)
            CLSEG_CHECK(v == 0 || v == 1, ErrorCode::InvalidMaskValue, "mask values must be 0 or 1");
    }

    size_t foreground_count() const {
        size_t n = 0;
        for (uint8_t v : labels) n += v;
        return n;
    }
};

struct Case {
    std::string id;
    Volume volume;
    SegMask mask;

    void validate() const {
        volume.validate();
        mask.validate();
        CLSEG_CHECK(volume.shape == mask.shape, ErrorCode::ShapeMismatch, "case " + id + ": mask shape != volume shape");
    }
};

struct TaskDataset {
    std::string name;
    std::vector<Case> cases;

    void validate() const {
        CLSEG_CHECK(!cases.empty(), ErrorCode::EmptyDataset, "task " + name + " has no cases");
        for (size_t i = 0; i < cases.size(); ++i)
            for (size_t j = i + 1; j < cases.size(); ++j)
                CLSEG_CHECK(cases[i].id != cases[j].id, ErrorCode::ConfigInvalid,
                            "duplicate case id " + cases[i].id + " in task " + name);
    }
};

struct TaskSequence {
    std::vector<TaskDataset> tasks;

    void validate() const {
        CLSEG_CHECK(!tasks.empty(), ErrorCode::EmptyDataset, "task sequence is empty");
        for (size_t i = 0; i < tasks.size(); ++i)
            for (size_t j = i + 1; j < tasks.size(); ++j)
                CLSEG_CHECK(tasks[i].name != tasks[j].name, ErrorCode::ConfigInvalid,
                            "duplicate task name " + tasks[i].name);
    }
};

/// A stack of 2-d training samples. images is [N,1,H,W], masks is [N,H,W].
struct SliceBatch {
    Tensor<float> images;
    std::vector<uint8_t> masks;
    std::vector<std::pair<std::string, int>> provenance;  // (case id, slice index)

    int count() const { return images.empty() ? 0 : images.dim(0); }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }
};

}  // namespace clseg
