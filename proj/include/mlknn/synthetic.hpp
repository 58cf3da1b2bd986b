#pragma once

#include "mlknn/common.hpp"
#include "mlknn/dataset.hpp"

#include <cstdint>
#include <vector>

namespace mlknn {

struct SyntheticRegression {
    RowMatrix X;
    Vector y;
};

/// y = sum_j sin(u_j) + noise with u = L x_I, where x_I are the first
/// `informative` columns and the remaining `distractors` columns are pure
/// noise of the same scale. L depends only on `function_seed`, so samples drawn
/// with different `sample_seed`s share one target function.
SyntheticRegression make_mahalanobis_regression(std::size_t n, std::uint64_t function_seed, std::uint64_t sample_seed,
                                                std::size_t informative = 5, std::size_t distractors = 45,
                                                double noise = 0.05);

/// x ~ U(0, 1), y = sin(2 pi x) + (0.1 + 0.5 x) N(0, 1).
SyntheticRegression make_heteroscedastic(std::size_t n, std::uint64_t seed);

/// x ~ U(0, 1), y = sin(2 pi x) + noise N(0, noise^2).
SyntheticRegression make_smooth_1d(std::size_t n, std::uint64_t seed, double noise = 0.3);

/// x ~ U(0, 1), y = x + N(0, 1).
SyntheticRegression make_additive_noise(std::size_t n, std::uint64_t seed);

struct ClusterOptions {
    int max_acid = 4;             // acid-like molecules per cluster, 1..max_acid
    int max_water = 5;            // water molecules per cluster, 0..max_water
    std::size_t per_composition = 20;
    double noise = 0.05;
};

/// Molecular clusters of rigid acid-like (H2SO4) and water molecules with
/// composition tags "aSAbW" and an extensive binding-energy-like label: a
/// per-molecule term plus a smooth pair term between molecular centres.
/// Low-level labels (0.9 y + offset) are attached for delta learning.
LabeledSet make_cluster_set(const ClusterOptions& options, std::uint64_t seed);

}  // namespace mlknn
