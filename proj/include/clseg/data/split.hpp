#pragma once

#include <cmath>
#include <utility>

#include "clseg/core/rng.hpp"
#include "clseg/data/types.hpp"

namespace clseg {

/// Case-level deterministic split. Train size is round-half-up(ratio * n),
/// clamped so both sides stay non-empty. All slices of a case stay on one
/// side.
inline std::pair<TaskDataset, TaskDataset> split_dataset(const TaskDataset& ds, double ratio, uint64_t seed) {
    CLSEG_CHECK(ratio > 0.0 && ratio < 1.0, ErrorCode::ConfigInvalid, "split ratio must be in (0,1)");
    size_t n = ds.cases.size();
    CLSEG_CHECK(n >= 2, ErrorCode::TooFewCases, "need at least 2 cases to split, got " + std::to_string(n));

    size_t n_train = static_cast<size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
    n_train = std::max<size_t>(1, std::min(n_train, n - 1));

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Pcg32 rng(derive_seed(seed, "split/" + ds.name));
    rng.shuffle(order);

    TaskDataset train{ds.name, {}};
    TaskDataset test{ds.name, {}};
    for (size_t i = 0; i < n; ++i)
        (i < n_train ? train : test).cases.push_back(ds.cases[order[i]]);
    return {std::move(train), std::move(test)};
}

}  // namespace clseg
