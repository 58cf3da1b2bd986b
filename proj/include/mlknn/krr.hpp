#pragma once

#include "mlknn/common.hpp"
#include "mlknn/kernels.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace mlknn {

struct KrrSolution {
    Vector alpha;
    double lambda = 0.0;  // ridge actually used after any jitter retries
};

/// Solves (K + lambda I) alpha = y by Cholesky. A failed factorization (or a
/// residual above 1e-8 |y|_inf after refinement) retries with lambda * 10, up to
/// `max_retries` times, then throws NumericalError.
KrrSolution krr_train(const Matrix& K, const Vector& y, double lambda, int max_retries = 3);

/// Relative residual |(K + lambda I) alpha - y|_inf / |y|_inf.
double krr_residual(const Matrix& K, const Vector& alpha, const Vector& y, double lambda);

struct KrrModel {
    Vector alpha;
    KernelParams kernel_params;
    double lambda = 0.0;
    DescriptorBatch train_descriptors;
    double train_time_cpu_s = 0.0;

    std::size_t n_train() const { return static_cast<std::size_t>(alpha.size()); }
};

KrrModel fit_krr(DescriptorBatch train, const Vector& y, const KernelParams& kernel, double lambda);

Vector krr_predict(const KrrModel& model, const DescriptorBatch& queries);

struct GridPoint {
    double sigma;
    double lambda;
    double mae;  // +inf when the solve failed
};

struct GridSearchResult {
    double sigma = 0.0;
    double lambda = 0.0;
    double mae = 0.0;
    std::vector<GridPoint> table;
};

/// Picks the (sigma, lambda) minimising validation MAE. Exact ties go to the
/// larger lambda, then the larger sigma.
GridSearchResult krr_grid_search(const DescriptorBatch& train, const Vector& y_train, const DescriptorBatch& val,
                                 const Vector& y_val, std::span<const double> sigma_grid,
                                 std::span<const double> lambda_grid, KernelParams base = {});

std::vector<double> default_sigma_grid(bool local_kernel);
std::vector<double> default_lambda_grid();

void save_krr_model(const std::filesystem::path& path, const KrrModel& model);
KrrModel load_krr_model(const std::filesystem::path& path);

}  // namespace mlknn
