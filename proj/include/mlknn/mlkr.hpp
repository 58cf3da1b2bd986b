#pragma once

#include "mlknn/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mlknn {

enum class MlkrOptimizer { gradient_descent_backtracking, adaptive_moment };

std::string to_string(MlkrOptimizer opt);
MlkrOptimizer parse_mlkr_optimizer(std::string_view name);

struct MlkrConfig {
    std::size_t p_out = 50;
    std::size_t max_train_points = 25000;
    std::size_t max_iter = 200;
    double grad_tol = 1e-6;  // on the label-standardized objective
    std::uint64_t seed = 0;
    MlkrOptimizer optimizer = MlkrOptimizer::gradient_descent_backtracking;

    // Backtracking line search (Armijo condition).
    double armijo_c = 1e-4;
    double shrink = 0.5;
    double grow = 2.0;
    // Adaptive-moment variant.
    double adam_learning_rate = 0.02;
    // Above this many training points each step uses a random batch of anchor rows.
    std::size_t full_batch_limit = 5000;
    std::size_t batch_size = 1000;
    std::size_t trace_every = 10;

    void validate() const;
    nlohmann::json to_json() const;
    static MlkrConfig from_json(const nlohmann::json& j);
};

/// A learned linear map z = A (x - mean) / scale. Distances between mapped
/// points are Mahalanobis distances with M = A^T A on the standardized inputs.
struct MlkrTransform {
    Matrix A;       // p_out x p_in
    Vector mean;    // p_in
    Vector scale;   // p_in, entries >= 1e-12
    std::uint64_t training_fingerprint = 0;
    std::vector<std::pair<std::size_t, double>> objective_trace;  // (iteration, loss)

    std::size_t p_in() const { return static_cast<std::size_t>(A.cols()); }
    std::size_t p_out() const { return static_cast<std::size_t>(A.rows()); }
    Matrix metric() const { return A.transpose() * A; }

    /// Transform with no standardization (mean 0, scale 1).
    static MlkrTransform from_matrix(Matrix A);
};

struct LooObjective {
    double loss = 0.0;
    Matrix gradient;         // empty unless requested
    Vector predictions;      // leave-one-out kernel-regression estimate per anchor
};

/// Leave-one-out kernel-regression objective sum_i (y_i - yhat_i)^2 with
/// k_ij = exp(-|A (x_i - x_j)|^2), summed over `anchors` (all rows when empty).
/// Row weights use a max-shifted exponential; a row whose weights cannot be
/// formed falls back to its nearest other point.
LooObjective mlkr_objective(const Matrix& A, const RowMatrix& X, const Vector& y, bool with_gradient,
                            std::span<const std::size_t> anchors = {});

double mlkr_loss(const Matrix& A, const RowMatrix& X, const Vector& y);
Matrix mlkr_gradient(const Matrix& A, const RowMatrix& X, const Vector& y);

/// Standardizes X, initialises A from a scaled PCA projection and minimises the
/// leave-one-out loss. Fits on a seeded subsample when n > max_train_points.
MlkrTransform mlkr_fit(const RowMatrix& X, const Vector& y, const MlkrConfig& config);

RowMatrix transform(const MlkrTransform& t, const RowMatrix& X);

/// Kernel regression in transformed space: softmax(-|z - z_j|^2) weighted labels.
Vector kernel_regression_predict(const RowMatrix& train_z, const Vector& y, const RowMatrix& query_z);

void save_transform(const std::filesystem::path& path, const MlkrTransform& t);
MlkrTransform load_transform(const std::filesystem::path& path);
void write_trace_csv(const std::filesystem::path& path, const MlkrTransform& t);

struct Archive;
void put_transform(Archive& ar, const std::string& prefix, const MlkrTransform& t);
MlkrTransform get_transform(const Archive& ar, const std::string& prefix);

}  // namespace mlknn
