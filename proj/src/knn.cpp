#include "mlknn/knn.hpp"

#include "mlknn/archive.hpp"
#include "mlknn/error.hpp"

#include <algorithm>
#include <cmath>

namespace mlknn {

std::string to_string(Weighting w) {
    switch (w) {
        case Weighting::uniform: return "uniform";
        case Weighting::reciprocal_distance: return "reciprocal_distance";
        case Weighting::reciprocal_squared_distance: return "reciprocal_squared_distance";
    }
    return "?";
}

Weighting parse_weighting(std::string_view name) {
    for (Weighting w : {Weighting::uniform, Weighting::reciprocal_distance, Weighting::reciprocal_squared_distance})
        if (to_string(w) == name) return w;
    throw ConfigError("unknown weighting '" + std::string(name) + "'");
}

double knn_predict(const NeighborSet& ns, Weighting weighting) {
    if (ns.empty()) throw ShapeError("prediction from an empty neighbour set");
    if (weighting != Weighting::uniform) {
        double sum = 0.0;
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < ns.size(); ++i)
            if (ns.distances[i] <= kZeroDistance) {
                sum += ns.labels[i];
                ++zeros;
            }
        if (zeros > 0) return sum / static_cast<double>(zeros);
        double num = 0.0, den = 0.0;
        double lo = ns.labels.front(), hi = ns.labels.front();
        for (std::size_t i = 0; i < ns.size(); ++i) {
            const double d = ns.distances[i];
            const double w = weighting == Weighting::reciprocal_distance ? 1.0 / d : 1.0 / (d * d);
            num += w * ns.labels[i];
            den += w;
            lo = std::min(lo, ns.labels[i]);
            hi = std::max(hi, ns.labels[i]);
        }
        return std::clamp(num / den, lo, hi);
    }
    double sum = 0.0;
    for (double y : ns.labels) sum += y;
    return sum / static_cast<double>(ns.size());
}

KnnModel fit_knn(DescriptorBatch points, std::vector<double> labels, MetricSpec metric, std::size_t k,
                 Weighting weighting, IndexOptions options) {
    if (k == 0) throw ConfigError("k must be at least 1");
    KnnModel model;
    model.index = NeighborIndex::build(std::move(points), std::move(labels), std::move(metric), options);
    model.k = k;
    model.weighting = weighting;
    return model;
}

std::vector<NeighborSet> knn_neighbors(const KnnModel& model, const DescriptorBatch& queries) {
    return model.index.query_batch(queries, model.k);
}

Vector knn_predict(const KnnModel& model, const DescriptorBatch& queries) {
    const auto sets = knn_neighbors(model, queries);
    Vector out(static_cast<Eigen::Index>(sets.size()));
    for (std::size_t q = 0; q < sets.size(); ++q) out[static_cast<Eigen::Index>(q)] = knn_predict(sets[q], model.weighting);
    return out;
}

TuneKResult tune_k(const NeighborIndex& index, std::size_t k_max, Weighting weighting) {
    const std::size_t n = index.size();
    if (n < 2) throw ConfigError("k tuning needs at least 2 points");
    if (k_max == 0 || k_max >= n)
        throw ConfigError("k_max must lie in [1, n-1]; n = " + std::to_string(n));
    const auto labels = index.labels();
    Matrix loo(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k_max));
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(n); ++s) {
        try {
            const auto i = static_cast<std::size_t>(s);
            const NeighborSet all = index.query_stored(i, k_max + 1);
            NeighborSet others;
            for (std::size_t r = 0; r < all.size() && others.size() < k_max; ++r) {
                if (all.indices[r] == i) continue;
                others.indices.push_back(all.indices[r]);
                others.distances.push_back(all.distances[r]);
                others.labels.push_back(all.labels[r]);
            }
            for (std::size_t k = 1; k <= k_max; ++k)
                loo(s, static_cast<Eigen::Index>(k - 1)) = std::abs(knn_predict(others.prefix(k), weighting) - labels[i]);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);

    TuneKResult result;
    result.loo_mae.resize(k_max);
    for (std::size_t k = 0; k < k_max; ++k) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += loo(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        result.loo_mae[k] = sum / static_cast<double>(n);
    }
    result.k_best = 1;
    for (std::size_t k = 2; k <= k_max; ++k)
        if (result.loo_mae[k - 1] < result.loo_mae[result.k_best - 1]) result.k_best = k;
    return result;
}

TuneKResult tune_k(const DescriptorBatch& points, std::span<const double> labels, const MetricSpec& metric,
                   std::size_t k_max, Weighting weighting, IndexOptions options) {
    const auto index =
        NeighborIndex::build(points, std::vector<double>(labels.begin(), labels.end()), metric, options);
    return tune_k(index, k_max, weighting);
}

double quantile_sorted(std::span<const double> sorted, double q) {
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
    if (sorted.empty()) throw ShapeError("quantile of an empty set");
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = h - static_cast<double>(lo);
    if (frac == 0.0) return sorted[lo];
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

std::vector<double> predict_quantiles(const NeighborSet& ns, std::span<const double> qs) {
    for (double q : qs)
        if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
    if (ns.empty()) throw ShapeError("quantiles of an empty neighbour set");
    std::vector<double> sorted = ns.labels;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> out;
    out.reserve(qs.size());
    for (double q : qs) out.push_back(quantile_sorted(sorted, q));
    return out;
}

Matrix knn_predict_quantiles(const KnnModel& model, const DescriptorBatch& queries, std::span<const double> qs) {
    const auto sets = knn_neighbors(model, queries);
    Matrix out(static_cast<Eigen::Index>(sets.size()), static_cast<Eigen::Index>(qs.size()));
    for (std::size_t q = 0; q < sets.size(); ++q) {
        const auto v = predict_quantiles(sets[q], qs);
        for (std::size_t j = 0; j < v.size(); ++j) out(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(j)) = v[j];
    }
    return out;
}

std::vector<CalibrationPoint> calibration_curve(const Matrix& quantile_predictions, std::span<const double> y,
                                                std::span<const double> levels) {
    if (static_cast<std::size_t>(quantile_predictions.rows()) != y.size())
        throw ShapeError("calibration: " + std::to_string(quantile_predictions.rows()) + " prediction rows for " +
                         std::to_string(y.size()) + " labels");
    if (static_cast<std::size_t>(quantile_predictions.cols()) != levels.size())
        throw ShapeError("calibration: prediction columns differ from the number of levels");
    if (y.empty()) throw ShapeError("calibration needs at least one item");
    std::vector<CalibrationPoint> out;
    for (std::size_t j = 0; j < levels.size(); ++j) {
        std::size_t below = 0;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y[i] < quantile_predictions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) ++below;
        out.push_back({levels[j], static_cast<double>(below) / static_cast<double>(y.size())});
    }
    return out;
}

nlohmann::json NeighborReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : neighbors)
        rows.push_back({{"index", r.index},
                        {"id", r.id},
                        {"composition", r.composition},
                        {"distance", r.distance},
                        {"label", r.label}});
    return {{"query_id", query_id},
            {"prediction", prediction},
            {"quantile_levels", quantile_levels},
            {"quantiles", quantiles},
            {"neighbors", rows}};
}

NeighborReport NeighborReport::from_json(const nlohmann::json& j) {
    NeighborReport r;
    r.query_id = j.at("query_id").get<std::string>();
    r.prediction = j.at("prediction").get<double>();
    r.quantile_levels = j.at("quantile_levels").get<std::vector<double>>();
    r.quantiles = j.at("quantiles").get<std::vector<double>>();
    for (const auto& row : j.at("neighbors"))
        r.neighbors.push_back({row.at("index").get<std::size_t>(), row.at("id").get<std::string>(),
                               row.at("composition").get<std::string>(), row.at("distance").get<double>(),
                               row.at("label").get<double>()});
    return r;
}

NeighborReport explain(const NeighborSet& ns, std::span<const std::string> ids, std::span<const std::string> compositions,
                       Weighting weighting, std::span<const double> quantile_levels, std::string query_id) {
    NeighborReport report;
    report.query_id = std::move(query_id);
    report.prediction = knn_predict(ns, weighting);
    report.quantile_levels.assign(quantile_levels.begin(), quantile_levels.end());
    report.quantiles = predict_quantiles(ns, quantile_levels);
    for (std::size_t r = 0; r < ns.size(); ++r) {
        const std::size_t i = ns.indices[r];
        if (i >= ids.size()) throw ShapeError("neighbour index " + std::to_string(i) + " outside the training set");
        report.neighbors.push_back(
            {i, ids[i], i < compositions.size() ? compositions[i] : std::string{}, ns.distances[r], ns.labels[r]});
    }
    return report;
}

void save_knn_model(const std::filesystem::path& path, const KnnModel& model) {
    Archive ar;
    const auto& metric = model.index.metric();
    const auto opts = model.index.options();
    ar.meta["model"] = "knn";
    ar.meta["k"] = model.k;
    ar.meta["weighting"] = to_string(model.weighting);
    ar.meta["metric"] = to_string(metric.kind);
    ar.meta["kernel"] = metric.kernel.to_json();
    ar.meta["backend"] = to_string(model.index.backend());
    ar.meta["seed"] = opts.seed;
    ar.meta["leaf_size"] = opts.leaf_size;
    ar.meta["metric_fingerprint"] = hex64(metric.fingerprint());
    put_batch(ar, "points", model.index.points());
    const auto labels = model.index.labels();
    ar.arrays["labels"] = as_column(Eigen::Map<const Vector>(labels.data(), static_cast<Eigen::Index>(labels.size())));
    if (metric.transform) put_transform(ar, "transform", *metric.transform);
    save_archive(path, ar);
}

KnnModel load_knn_model(const std::filesystem::path& path) {
    const Archive ar = load_archive(path);
    if (ar.meta.value("model", std::string()) != "knn") throw IOError(path.string() + " is not a k-NN model");
    MetricSpec metric;
    const auto kind = ar.meta.at("metric").get<std::string>();
    if (kind == "euclidean") metric = MetricSpec::euclidean();
    else if (kind == "mahalanobis") metric = MetricSpec::mahalanobis(get_transform(ar, "transform"));
    else if (kind == "kernel_induced") metric = MetricSpec::kernel_induced(KernelParams::from_json(ar.meta.at("kernel")));
    else throw IOError(path.string() + ": unknown metric '" + kind + "'");
    if (hex64(metric.fingerprint()) != ar.meta.at("metric_fingerprint").get<std::string>())
        throw IOError(path.string() + ": metric fingerprint mismatch");
    IndexOptions opts;
    opts.backend = parse_backend(ar.meta.at("backend").get<std::string>());
    opts.seed = ar.meta.at("seed").get<std::uint64_t>();
    opts.leaf_size = ar.meta.at("leaf_size").get<std::size_t>();
    const Vector y = column_to_vector(ar.array("labels"));
    KnnModel model;
    model.index = NeighborIndex::restore(get_batch(ar, "points"), std::vector<double>(y.data(), y.data() + y.size()),
                                         std::move(metric), opts);
    model.k = ar.meta.at("k").get<std::size_t>();
    model.weighting = parse_weighting(ar.meta.at("weighting").get<std::string>());
    return model;
}

}  // namespace mlknn
