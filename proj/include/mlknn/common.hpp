#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mlknn {

/// Row-major dense matrix; one row per item (point, atom, structure).
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = std::size_t;

// Bounded uniform integer in [0, bound) from a 64-bit engine, with rejection so
// the draw sequence is identical on every standard library.
template <class Engine>
std::uint64_t uniform_below(Engine& rng, std::uint64_t bound) {
    const std::uint64_t limit = Engine::max() - (Engine::max() % bound);
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % bound;
}

/// 64-bit FNV-1a, used to fingerprint parameter blocks and datasets.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 14695981039346656037ULL);

std::string hex64(std::uint64_t v);

void log_warning(std::string_view message);

}  // namespace mlknn
