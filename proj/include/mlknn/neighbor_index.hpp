#pragma once

#include "mlknn/common.hpp"
#include "mlknn/kernels.hpp"
#include "mlknn/mlkr.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mlknn {

enum class Backend { automatic, kd_tree, ball_tree, vp_tree, brute };

std::string to_string(Backend b);
Backend parse_backend(std::string_view name);

enum class MetricKind { euclidean, mahalanobis, kernel_induced };

std::string to_string(MetricKind m);

struct MetricSpec {
    MetricKind kind = MetricKind::euclidean;
    std::optional<MlkrTransform> transform;  // mahalanobis only
    KernelParams kernel;                     // kernel_induced only

    static MetricSpec euclidean() { return {}; }
    static MetricSpec mahalanobis(MlkrTransform t) { return {MetricKind::mahalanobis, std::move(t), {}}; }
    static MetricSpec kernel_induced(KernelParams k) { return {MetricKind::kernel_induced, std::nullopt, k}; }

    std::uint64_t fingerprint() const;
};

/// k nearest training items, ascending by (distance, training index).
struct NeighborSet {
    std::vector<std::size_t> indices;
    std::vector<double> distances;
    std::vector<double> labels;

    std::size_t size() const { return indices.size(); }
    bool empty() const { return indices.empty(); }
    /// First k entries.
    NeighborSet prefix(std::size_t k) const;
};

struct IndexOptions {
    Backend backend = Backend::automatic;
    std::uint64_t seed = 0;      // vantage-point selection
    std::size_t leaf_size = 16;  // kd / ball trees
};

/// Exact nearest-neighbour index. Every backend returns the same neighbours as
/// brute force: ties in distance go to the lower training index. Mahalanobis
/// points are transformed once at build time and searched with Euclidean trees;
/// kernel-induced metrics use a vantage-point tree or brute force.
class NeighborIndex {
public:
    NeighborIndex();
    ~NeighborIndex();
    NeighborIndex(const NeighborIndex&);
    NeighborIndex& operator=(const NeighborIndex&);
    NeighborIndex(NeighborIndex&&) noexcept;
    NeighborIndex& operator=(NeighborIndex&&) noexcept;

    static NeighborIndex build(DescriptorBatch points, std::vector<double> labels, MetricSpec metric,
                               IndexOptions options = {});
    /// Rebuilds an index from points already in the searched space (as returned by points()).
    static NeighborIndex restore(DescriptorBatch searched_points, std::vector<double> labels, MetricSpec metric,
                                 IndexOptions options = {});

    /// Query by raw descriptor (transformed internally for Mahalanobis).
    NeighborSet query(const Eigen::Ref<const Vector>& x, std::size_t k) const;
    NeighborSet query(const LocalDescriptor& x, std::size_t k) const;
    /// Query with stored training item `i` as the probe (it is not excluded).
    NeighborSet query_stored(std::size_t i, std::size_t k) const;
    /// Parallel over queries; warns once when k exceeds the index size.
    std::vector<NeighborSet> query_batch(const DescriptorBatch& queries, std::size_t k) const;

    /// Distance between a raw query descriptor and stored item i.
    double distance_to(const Eigen::Ref<const Vector>& x, std::size_t i) const;

    std::size_t size() const;
    std::size_t dimension() const;
    Backend backend() const;
    const MetricSpec& metric() const;
    std::span<const double> labels() const;
    /// Stored points as searched (transformed for Mahalanobis).
    const DescriptorBatch& points() const;
    double build_time_cpu_s() const;
    IndexOptions options() const;

    struct Impl;

private:
    static NeighborIndex create(DescriptorBatch points, std::vector<double> labels, MetricSpec metric,
                                IndexOptions options, bool pretransformed);

    std::unique_ptr<Impl> impl_;
};

/// Backend chosen for `automatic`: brute below 500 points, vp_tree for
/// kernel-induced metrics, kd_tree up to 30 dimensions, vp_tree above.
Backend auto_backend(std::size_t n, std::size_t dim, MetricKind metric);

/// Squared Euclidean distance summed in dimension order (the order every backend uses).
double squared_distance(const double* a, const double* b, std::size_t dim);

}  // namespace mlknn
