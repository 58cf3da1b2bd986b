#include "mlknn/kernels.hpp"

#include "mlknn/archive.hpp"
#include "mlknn/error.hpp"

#include <algorithm>
#include <cmath>

namespace mlknn {

namespace {

// Atoms of every structure grouped by centre-element channel, contiguous per structure.
struct AtomStacks {
    std::size_t channels = 0;
    std::vector<RowMatrix> rows;                 // per channel
    std::vector<Vector> sqnorm;                  // per channel
    std::vector<std::vector<Eigen::Index>> start;  // per channel, n_structures + 1 offsets
};

AtomStacks stack_atoms(std::span<const LocalDescriptor> X, bool match_elements) {
    AtomStacks st;
    st.channels = match_elements ? kElementCount : 1;
    const Eigen::Index dim = X.empty() ? 0 : X.front().rows.cols();
    std::vector<std::vector<Eigen::Index>> counts(st.channels, std::vector<Eigen::Index>(X.size(), 0));
    for (std::size_t s = 0; s < X.size(); ++s) {
        if (X[s].rows.cols() != dim) throw ShapeError("local descriptors of differing width");
        for (Element e : X[s].centers) ++counts[match_elements ? element_slot(e) : 0][s];
    }
    st.rows.resize(st.channels);
    st.sqnorm.resize(st.channels);
    st.start.assign(st.channels, std::vector<Eigen::Index>(X.size() + 1, 0));
    for (std::size_t c = 0; c < st.channels; ++c) {
        for (std::size_t s = 0; s < X.size(); ++s) st.start[c][s + 1] = st.start[c][s] + counts[c][s];
        st.rows[c].resize(st.start[c][X.size()], dim);
    }
    std::vector<std::vector<Eigen::Index>> fill(st.channels, std::vector<Eigen::Index>(X.size(), 0));
    for (std::size_t s = 0; s < X.size(); ++s) {
        for (std::size_t a = 0; a < X[s].atoms(); ++a) {
            const std::size_t c = match_elements ? element_slot(X[s].centers[a]) : 0;
            st.rows[c].row(st.start[c][s] + fill[c][s]++) = X[s].rows.row(static_cast<Eigen::Index>(a));
        }
    }
    for (std::size_t c = 0; c < st.channels; ++c) st.sqnorm[c] = st.rows[c].rowwise().squaredNorm();
    return st;
}

void check_provenance(std::span<const LocalDescriptor> X, std::span<const LocalDescriptor> Y) {
    const LocalDescriptor* ref = !X.empty() ? &X.front() : (!Y.empty() ? &Y.front() : nullptr);
    if (!ref) return;
    for (const auto* set : {&X, &Y})
        for (const auto& d : *set)
            if (d.provenance != ref->provenance)
                throw ConfigError("local descriptors come from different descriptor parameters");
}

// Accumulates the sum-of-atomic-RBF kernel between structure blocks into K.
// With `upper_only`, structure j < i pairs are skipped (caller mirrors).
void accumulate_local(const AtomStacks& xs, const AtomStacks& ys, std::size_t nx, std::size_t ny, double sigma,
                      bool upper_only, Matrix& K) {
    const double scale = -1.0 / (2.0 * sigma * sigma);
    constexpr std::size_t kBlock = 32;
    const auto blocks = static_cast<std::ptrdiff_t>((nx + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t b = 0; b < blocks; ++b) {
        const std::size_t s0 = static_cast<std::size_t>(b) * kBlock;
        const std::size_t s1 = std::min(nx, s0 + kBlock);
        Matrix G;
        for (std::size_t c = 0; c < xs.channels; ++c) {
            const Eigen::Index a0 = xs.start[c][s0], a1 = xs.start[c][s1];
            if (a1 == a0) continue;
            const std::size_t t0 = upper_only ? s0 : 0;
            const Eigen::Index b0 = ys.start[c][t0], b1 = ys.start[c][ny];
            if (b1 == b0) continue;
            G.noalias() = xs.rows[c].middleRows(a0, a1 - a0) * ys.rows[c].middleRows(b0, b1 - b0).transpose();
            for (std::size_t s = s0; s < s1; ++s) {
                for (Eigen::Index ai = xs.start[c][s]; ai < xs.start[c][s + 1]; ++ai) {
                    const double na = xs.sqnorm[c][ai];
                    std::size_t t = t0;
                    for (Eigen::Index bj = b0; bj < b1; ++bj) {
                        while (bj >= ys.start[c][t + 1]) ++t;
                        const double sq = std::max(0.0, na + ys.sqnorm[c][bj] - 2.0 * G(ai - a0, bj - b0));
                        K(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) += std::exp(scale * sq);
                    }
                }
            }
        }
    }
}

void apply_normalization(Matrix& K, const Vector& dx, const Vector& dy) {
    for (Eigen::Index i = 0; i < dx.size(); ++i)
        if (!(dx[i] > 0)) throw NumericalError("kernel normalization needs a strictly positive diagonal");
    for (Eigen::Index j = 0; j < dy.size(); ++j)
        if (!(dy[j] > 0)) throw NumericalError("kernel normalization needs a strictly positive diagonal");
    const Vector ix = dx.cwiseSqrt().cwiseInverse();
    const Vector iy = dy.cwiseSqrt().cwiseInverse();
    K = ix.asDiagonal() * K * iy.asDiagonal();
}

}  // namespace

void KernelParams::validate() const {
    if (!(sigma > 0) || !std::isfinite(sigma)) throw ConfigError("kernel sigma must be positive");
}

nlohmann::json KernelParams::to_json() const {
    return {{"sigma", sigma}, {"local_mode", local_mode}, {"normalize", normalize}, {"match_elements", match_elements}};
}

KernelParams KernelParams::from_json(const nlohmann::json& j) {
    KernelParams p;
    p.sigma = j.value("sigma", p.sigma);
    p.local_mode = j.value("local_mode", p.local_mode);
    p.normalize = j.value("normalize", p.normalize);
    p.match_elements = j.value("match_elements", p.match_elements);
    p.validate();
    return p;
}

double rbf_kernel(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double sigma) {
    if (a.size() != b.size())
        throw ShapeError("rbf_kernel: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    return std::exp(-(a - b).squaredNorm() / (2.0 * sigma * sigma));
}

double rbf_kernel(const GlobalDescriptor& a, const GlobalDescriptor& b, double sigma) {
    return rbf_kernel(a.values, b.values, sigma);
}

double local_sum_kernel(const LocalDescriptor& a, const LocalDescriptor& b, double sigma, bool match_elements) {
    if (a.provenance != b.provenance) throw ConfigError("local descriptors come from different descriptor parameters");
    if (a.rows.cols() != b.rows.cols()) throw ShapeError("local descriptors of differing width");
    const double scale = -1.0 / (2.0 * sigma * sigma);
    double sum = 0.0;
    for (std::size_t i = 0; i < a.atoms(); ++i) {
        for (std::size_t j = 0; j < b.atoms(); ++j) {
            if (match_elements && a.centers[i] != b.centers[j]) continue;
            const double sq =
                (a.rows.row(static_cast<Eigen::Index>(i)) - b.rows.row(static_cast<Eigen::Index>(j))).squaredNorm();
            sum += std::exp(scale * sq);
        }
    }
    return sum;
}

double kernel_value(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, const KernelParams& params) {
    // unit self-similarity, so normalization is the identity
    return rbf_kernel(a, b, params.sigma);
}

double kernel_value(const LocalDescriptor& a, const LocalDescriptor& b, const KernelParams& params) {
    const double kab = local_sum_kernel(a, b, params.sigma, params.match_elements);
    if (!params.normalize) return kab;
    const double kaa = local_sum_kernel(a, a, params.sigma, params.match_elements);
    const double kbb = local_sum_kernel(b, b, params.sigma, params.match_elements);
    if (!(kaa > 0) || !(kbb > 0)) throw NumericalError("kernel normalization needs positive self-similarity");
    return kab / std::sqrt(kaa * kbb);
}

Matrix kernel_matrix(const RowMatrix& X, const RowMatrix& Y, const KernelParams& params) {
    params.validate();
    if (X.cols() != Y.cols()) throw ShapeError("kernel_matrix: descriptor dimensions differ");
    const double scale = -1.0 / (2.0 * params.sigma * params.sigma);
    Matrix K = X * Y.transpose();
    const Vector nx = X.rowwise().squaredNorm();
    const Vector ny = Y.rowwise().squaredNorm();
#pragma omp parallel for schedule(static)
    for (Eigen::Index j = 0; j < K.cols(); ++j)
        for (Eigen::Index i = 0; i < K.rows(); ++i)
            K(i, j) = std::exp(scale * std::max(0.0, nx[i] + ny[j] - 2.0 * K(i, j)));
    return K;
}

Matrix kernel_matrix(const RowMatrix& X, const KernelParams& params) {
    params.validate();
    const double scale = -1.0 / (2.0 * params.sigma * params.sigma);
    const Eigen::Index n = X.rows();
    Matrix K = Matrix::Zero(n, n);
    K.selfadjointView<Eigen::Lower>().rankUpdate(X);
    const Vector nx = X.rowwise().squaredNorm();
#pragma omp parallel for schedule(dynamic, 64)
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = j + 1; i < n; ++i)
            K(i, j) = std::exp(scale * std::max(0.0, nx[i] + nx[j] - 2.0 * K(i, j)));
        K(j, j) = 1.0;
    }
    K.triangularView<Eigen::StrictlyUpper>() = K.transpose();
    return K;
}

Vector self_kernels(std::span<const LocalDescriptor> X, const KernelParams& params) {
    Vector d(static_cast<Eigen::Index>(X.size()));
    for (std::size_t i = 0; i < X.size(); ++i)
        d[static_cast<Eigen::Index>(i)] = local_sum_kernel(X[i], X[i], params.sigma, params.match_elements);
    return d;
}

Matrix kernel_matrix(std::span<const LocalDescriptor> X, std::span<const LocalDescriptor> Y,
                     const KernelParams& params) {
    params.validate();
    check_provenance(X, Y);
    const auto xs = stack_atoms(X, params.match_elements);
    const auto ys = stack_atoms(Y, params.match_elements);
    if (!X.empty() && !Y.empty() && X.front().rows.cols() != Y.front().rows.cols())
        throw ShapeError("local descriptors of differing width");
    Matrix K = Matrix::Zero(static_cast<Eigen::Index>(X.size()), static_cast<Eigen::Index>(Y.size()));
    accumulate_local(xs, ys, X.size(), Y.size(), params.sigma, false, K);
    if (params.normalize) apply_normalization(K, self_kernels(X, params), self_kernels(Y, params));
    return K;
}

Matrix kernel_matrix(std::span<const LocalDescriptor> X, const KernelParams& params) {
    params.validate();
    check_provenance(X, X);
    const auto xs = stack_atoms(X, params.match_elements);
    const auto n = static_cast<Eigen::Index>(X.size());
    Matrix K = Matrix::Zero(n, n);
    accumulate_local(xs, xs, X.size(), X.size(), params.sigma, true, K);
    K.triangularView<Eigen::StrictlyLower>() = K.transpose();
    if (params.normalize) {
        const Vector d = K.diagonal();
        apply_normalization(K, d, d);
        K.diagonal().setOnes();
        K.triangularView<Eigen::StrictlyLower>() = K.transpose();
    }
    return K;
}

Matrix normalize_kernel(const Matrix& K) {
    if (K.rows() != K.cols()) throw ShapeError("normalize_kernel: matrix must be square");
    Matrix out = K;
    const Vector d = K.diagonal();
    apply_normalization(out, d, d);
    out.diagonal().setOnes();
    return out;
}

double induced_distance(double kaa, double kbb, double kab) {
    const double r = kaa + kbb - 2.0 * kab;
    if (r < -kInducedDistanceClamp)
        throw NumericalError("kernel-induced distance radicand " + std::to_string(r) +
                             " is negative; kernel not positive definite");
    return std::sqrt(std::max(0.0, r));
}

double kernel_induced_distance(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                               const KernelParams& params) {
    return induced_distance(1.0, 1.0, kernel_value(a, b, params));
}

double kernel_induced_distance(const LocalDescriptor& a, const LocalDescriptor& b, const KernelParams& params) {
    if (params.normalize) return induced_distance(1.0, 1.0, kernel_value(a, b, params));
    const double kaa = local_sum_kernel(a, a, params.sigma, params.match_elements);
    const double kbb = local_sum_kernel(b, b, params.sigma, params.match_elements);
    return induced_distance(kaa, kbb, local_sum_kernel(a, b, params.sigma, params.match_elements));
}

std::size_t batch_size(const DescriptorBatch& batch) {
    if (const auto* m = std::get_if<RowMatrix>(&batch)) return static_cast<std::size_t>(m->rows());
    return std::get<std::vector<LocalDescriptor>>(batch).size();
}

DescriptorBatch select_rows(const DescriptorBatch& batch, std::span<const std::size_t> rows) {
    if (const auto* m = std::get_if<RowMatrix>(&batch)) {
        RowMatrix out(static_cast<Eigen::Index>(rows.size()), m->cols());
        for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m->row(static_cast<Eigen::Index>(rows[r]));
        return out;
    }
    const auto& local = std::get<std::vector<LocalDescriptor>>(batch);
    std::vector<LocalDescriptor> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(local.at(r));
    return out;
}

Matrix kernel_matrix(const DescriptorBatch& X, const DescriptorBatch& Y, const KernelParams& params) {
    if (X.index() != Y.index()) throw ShapeError("kernel_matrix: mixing global and local descriptors");
    if (const auto* m = std::get_if<RowMatrix>(&X)) return kernel_matrix(*m, std::get<RowMatrix>(Y), params);
    return kernel_matrix(std::span<const LocalDescriptor>(std::get<std::vector<LocalDescriptor>>(X)),
                         std::span<const LocalDescriptor>(std::get<std::vector<LocalDescriptor>>(Y)), params);
}

Matrix kernel_matrix(const DescriptorBatch& X, const KernelParams& params) {
    if (const auto* m = std::get_if<RowMatrix>(&X)) return kernel_matrix(*m, params);
    return kernel_matrix(std::span<const LocalDescriptor>(std::get<std::vector<LocalDescriptor>>(X)), params);
}

void put_batch(Archive& ar, const std::string& prefix, const DescriptorBatch& batch) {
    if (const auto* m = std::get_if<RowMatrix>(&batch)) {
        ar.meta[prefix] = {{"kind", "global"}};
        ar.arrays[prefix + ".rows"] = *m;
        return;
    }
    const auto& local = std::get<std::vector<LocalDescriptor>>(batch);
    std::size_t total = 0;
    for (const auto& d : local) total += d.atoms();
    const Eigen::Index dim = local.empty() ? 0 : local.front().rows.cols();
    RowMatrix rows(static_cast<Eigen::Index>(total), dim);
    RowMatrix z(static_cast<Eigen::Index>(total), 1);
    RowMatrix counts(static_cast<Eigen::Index>(local.size()), 1);
    Eigen::Index r = 0;
    for (std::size_t s = 0; s < local.size(); ++s) {
        counts(static_cast<Eigen::Index>(s), 0) = static_cast<double>(local[s].atoms());
        for (std::size_t a = 0; a < local[s].atoms(); ++a, ++r) {
            rows.row(r) = local[s].rows.row(static_cast<Eigen::Index>(a));
            z(r, 0) = atomic_number(local[s].centers[a]);
        }
    }
    ar.meta[prefix] = {{"kind", "local"}, {"provenance", local.empty() ? std::string() : hex64(local.front().provenance)}};
    ar.arrays[prefix + ".rows"] = std::move(rows);
    ar.arrays[prefix + ".centers"] = std::move(z);
    ar.arrays[prefix + ".atoms"] = std::move(counts);
}

DescriptorBatch get_batch(const Archive& ar, const std::string& prefix) {
    const auto& info = ar.meta.at(prefix);
    if (info.at("kind") == "global") return ar.array(prefix + ".rows");
    const auto& rows = ar.array(prefix + ".rows");
    const auto& z = ar.array(prefix + ".centers");
    const auto& counts = ar.array(prefix + ".atoms");
    const auto prov = std::stoull(info.at("provenance").get<std::string>(), nullptr, 16);
    std::vector<LocalDescriptor> out;
    Eigen::Index r = 0;
    for (Eigen::Index s = 0; s < counts.rows(); ++s) {
        const auto atoms = static_cast<Eigen::Index>(counts(s, 0));
        LocalDescriptor d;
        d.rows = rows.middleRows(r, atoms);
        for (Eigen::Index a = 0; a < atoms; ++a) {
            const int zn = static_cast<int>(z(r + a, 0));
            d.centers.push_back(static_cast<Element>(zn));
        }
        d.provenance = prov;
        r += atoms;
        out.push_back(std::move(d));
    }
    return out;
}

std::uint64_t kernel_fingerprint(const RowMatrix& X, const KernelParams& params) {
    std::uint64_t h = fnv1a64(params.to_json().dump());
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(X.data()), X.size() * sizeof(double)), h);
    const std::int64_t shape[2] = {X.rows(), X.cols()};
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(shape), sizeof shape), h);
}

void save_kernel_cache(const std::filesystem::path& path, const Matrix& K, std::uint64_t fingerprint) {
    Archive ar;
    ar.meta = {{"kind", "kernel_cache"}, {"fingerprint", hex64(fingerprint)}};
    ar.arrays["K"] = K;
    save_archive(path, ar);
}

std::optional<Matrix> load_kernel_cache(const std::filesystem::path& path, std::uint64_t fingerprint) {
    if (!std::filesystem::exists(path)) return std::nullopt;
    auto ar = load_archive(path);
    if (ar.meta.value("kind", std::string()) != "kernel_cache" ||
        ar.meta.value("fingerprint", std::string()) != hex64(fingerprint))
        return std::nullopt;
    return Matrix(ar.array("K"));
}

}  // namespace mlknn
