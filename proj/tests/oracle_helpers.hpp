#pragma once

#include <gtest/gtest.h>

#include <vector>

#include "esegeta/rng.hpp"
#include "esegeta/tensor.hpp"

namespace testutil {

inline esegeta::Tensor rand_tensor(std::vector<int> shape, uint64_t seed, float lo = -1.0f,
                                   float hi = 1.0f) {
    esegeta::Rng rng = esegeta::stream_rng(seed, 0);
    std::vector<float> v(static_cast<size_t>(esegeta::shape_numel(shape)));
    for (auto& f : v) f = static_cast<float>(rng.uniform(lo, hi));
    return esegeta::Tensor(std::move(shape), std::move(v));
}

// Values drawn from +-[margin, margin+span] so activation kinks stay clear of
// finite-difference probes.
inline esegeta::Tensor rand_tensor_kink_free(std::vector<int> shape, uint64_t seed,
                                             float margin = 0.25f, float span = 0.75f) {
    esegeta::Rng rng = esegeta::stream_rng(seed, 1);
    std::vector<float> v(static_cast<size_t>(esegeta::shape_numel(shape)));
    for (auto& f : v) {
        const float mag = static_cast<float>(rng.uniform(margin, margin + span));
        f = rng.uniform() < 0.5 ? -mag : mag;
    }
    return esegeta::Tensor(std::move(shape), std::move(v));
}

inline void expect_all_near(const esegeta::Tensor& got, const std::vector<float>& want,
                            float tol = 1e-5f) {
    ASSERT_EQ(got.numel(), static_cast<int64_t>(want.size()));
    for (size_t i = 0; i < want.size(); ++i)
        EXPECT_NEAR(got.values()[i], want[i], tol) << "flat index " << i;
}

}  // namespace testutil
