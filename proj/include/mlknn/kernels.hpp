#pragma once

#include "mlknn/common.hpp"
#include "mlknn/descriptors.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace mlknn {

/// RBF kernel settings. The Gaussian prefactor 1/(sigma*sqrt(2*pi)) is omitted
/// everywhere, so the global RBF has unit self-similarity.
struct KernelParams {
    double sigma = 1.0;
    bool local_mode = false;      // sum of atomic kernels over LocalDescriptor rows
    bool normalize = false;       // K(a,b) / sqrt(K(a,a) K(b,b))
    bool match_elements = true;   // local mode: only pair atoms with the same centre element

    void validate() const;
    nlohmann::json to_json() const;
    static KernelParams from_json(const nlohmann::json& j);
};

/// exp(-|a-b|^2 / (2 sigma^2)).
double rbf_kernel(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double sigma);
double rbf_kernel(const GlobalDescriptor& a, const GlobalDescriptor& b, double sigma);

double local_sum_kernel(const LocalDescriptor& a, const LocalDescriptor& b, double sigma, bool match_elements = true);

/// Scalar kernel honouring every KernelParams flag.
double kernel_value(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, const KernelParams& params);
double kernel_value(const LocalDescriptor& a, const LocalDescriptor& b, const KernelParams& params);

/// Cross kernel matrix, K(i, j) = k(x_i, y_j). Rows of X and Y are global descriptors.
Matrix kernel_matrix(const RowMatrix& X, const RowMatrix& Y, const KernelParams& params);
Matrix kernel_matrix(std::span<const LocalDescriptor> X, std::span<const LocalDescriptor> Y, const KernelParams& params);

/// Training kernel matrix; each unordered pair is evaluated once and mirrored,
/// so the result is exactly symmetric.
Matrix kernel_matrix(const RowMatrix& X, const KernelParams& params);
Matrix kernel_matrix(std::span<const LocalDescriptor> X, const KernelParams& params);

/// Self-similarities k(x, x) for every item.
Vector self_kernels(std::span<const LocalDescriptor> X, const KernelParams& params);

/// K(i,j) / sqrt(K(i,i) K(j,j)); throws NumericalError on a nonpositive diagonal.
Matrix normalize_kernel(const Matrix& K);

/// Radicand tolerance below which a negative k(a,a)+k(b,b)-2k(a,b) is an error
/// rather than rounding noise.
inline constexpr double kInducedDistanceClamp = 1e-9;

/// sqrt(max(0, kaa + kbb - 2 kab)), with NumericalError beyond the clamp tolerance.
double induced_distance(double kaa, double kbb, double kab);
double kernel_induced_distance(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                               const KernelParams& params);
double kernel_induced_distance(const LocalDescriptor& a, const LocalDescriptor& b, const KernelParams& params);

/// Either global descriptor rows or per-structure local descriptors.
using DescriptorBatch = std::variant<RowMatrix, std::vector<LocalDescriptor>>;

std::size_t batch_size(const DescriptorBatch& batch);
DescriptorBatch select_rows(const DescriptorBatch& batch, std::span<const std::size_t> rows);
/// Dispatches on the batch kind; both batches must hold the same kind.
Matrix kernel_matrix(const DescriptorBatch& X, const DescriptorBatch& Y, const KernelParams& params);
Matrix kernel_matrix(const DescriptorBatch& X, const KernelParams& params);

struct Archive;
/// Stores a batch under `<prefix>.*` arrays and meta keys.
void put_batch(Archive& ar, const std::string& prefix, const DescriptorBatch& batch);
DescriptorBatch get_batch(const Archive& ar, const std::string& prefix);

/// Hash of a descriptor matrix and kernel params, used to key kernel caches.
std::uint64_t kernel_fingerprint(const RowMatrix& X, const KernelParams& params);

void save_kernel_cache(const std::filesystem::path& path, const Matrix& K, std::uint64_t fingerprint);
/// Empty when the file is missing or was written for different inputs.
std::optional<Matrix> load_kernel_cache(const std::filesystem::path& path, std::uint64_t fingerprint);

}  // namespace mlknn
