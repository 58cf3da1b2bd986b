#pragma once

#include "mlknn/neighbor_index.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mlknn {

enum class Weighting {
    uniform,                     // mean of neighbour labels
    reciprocal_distance,         // weights 1/d
    reciprocal_squared_distance  // weights 1/d^2
};

std::string to_string(Weighting w);
Weighting parse_weighting(std::string_view name);

/// Distances at or below this count as exact matches; the prediction is then
/// the mean label of all such neighbours.
inline constexpr double kZeroDistance = 1e-12;

/// Weighted label average over a neighbour set, accumulated in neighbour order.
double knn_predict(const NeighborSet& ns, Weighting weighting);

struct KnnModel {
    NeighborIndex index;
    std::size_t k = 10;
    Weighting weighting = Weighting::reciprocal_distance;
};

KnnModel fit_knn(DescriptorBatch points, std::vector<double> labels, MetricSpec metric, std::size_t k,
                 Weighting weighting = Weighting::reciprocal_distance, IndexOptions options = {});

std::vector<NeighborSet> knn_neighbors(const KnnModel& model, const DescriptorBatch& queries);
Vector knn_predict(const KnnModel& model, const DescriptorBatch& queries);

struct TuneKResult {
    std::size_t k_best = 1;
    std::vector<double> loo_mae;  // entry k-1 holds the leave-one-out MAE of k neighbours
};

/// Leave-one-out MAE for every k <= k_max from a single neighbour pass over the
/// training set (each item excluded from its own list). Identical to refitting
/// without each item. Ties in MAE go to the smaller k.
TuneKResult tune_k(const NeighborIndex& index, std::size_t k_max, Weighting weighting = Weighting::reciprocal_distance);
TuneKResult tune_k(const DescriptorBatch& points, std::span<const double> labels, const MetricSpec& metric,
                   std::size_t k_max, Weighting weighting = Weighting::reciprocal_distance, IndexOptions options = {});

/// Empirical quantiles of the unweighted neighbour labels; linear interpolation
/// between order statistics at position q (n - 1).
std::vector<double> predict_quantiles(const NeighborSet& ns, std::span<const double> qs);
double quantile_sorted(std::span<const double> sorted, double q);

/// Row per query, column per level.
Matrix knn_predict_quantiles(const KnnModel& model, const DescriptorBatch& queries, std::span<const double> qs);

struct CalibrationPoint {
    double nominal;
    double empirical;  // fraction of items with y strictly below the predicted quantile
};

std::vector<CalibrationPoint> calibration_curve(const Matrix& quantile_predictions, std::span<const double> y,
                                                std::span<const double> levels);

struct NeighborRow {
    std::size_t index = 0;
    std::string id;
    std::string composition;
    double distance = 0.0;
    double label = 0.0;

    bool operator==(const NeighborRow&) const = default;
};

struct NeighborReport {
    std::string query_id;
    double prediction = 0.0;
    std::vector<double> quantile_levels;
    std::vector<double> quantiles;
    std::vector<NeighborRow> neighbors;  // ascending distance

    nlohmann::json to_json() const;
    static NeighborReport from_json(const nlohmann::json& j);
    bool operator==(const NeighborReport&) const = default;
};

NeighborReport explain(const NeighborSet& ns, std::span<const std::string> ids, std::span<const std::string> compositions,
                       Weighting weighting, std::span<const double> quantile_levels, std::string query_id = {});

/// Index points, labels, metric (with any transform) and a metric fingerprint checked on load.
void save_knn_model(const std::filesystem::path& path, const KnnModel& model);
KnnModel load_knn_model(const std::filesystem::path& path);

}  // namespace mlknn
