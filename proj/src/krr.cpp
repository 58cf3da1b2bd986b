#include "mlknn/krr.hpp"

#include "mlknn/archive.hpp"
#include "mlknn/error.hpp"
#include "mlknn/timing.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace mlknn {

namespace {

constexpr double kResidualTolerance = 1e-8;

std::string short_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

double mean_abs_error(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().mean(); }

}  // namespace

double krr_residual(const Matrix& K, const Vector& alpha, const Vector& y, double lambda) {
    const Vector r = K * alpha + lambda * alpha - y;
    const double scale = y.cwiseAbs().maxCoeff();
    return r.cwiseAbs().maxCoeff() / (scale > 0 ? scale : 1.0);
}

KrrSolution krr_train(const Matrix& K, const Vector& y, double lambda, int max_retries) {
    if (K.rows() != K.cols()) throw ShapeError("krr_train: kernel matrix must be square");
    if (K.rows() != y.size()) throw ShapeError("krr_train: label count differs from kernel size");
    if (!(lambda >= 0)) throw ConfigError("krr_train: lambda must be nonnegative");

    double lam = lambda;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        Matrix A = K;
        A.diagonal().array() += lam;
        Eigen::LLT<Eigen::Ref<Matrix>> llt(A);
        if (llt.info() == Eigen::Success) {
            Vector alpha = llt.solve(y);
            // two rounds of iterative refinement against the unfactored system
            for (int it = 0; it < 2 && krr_residual(K, alpha, y, lam) > kResidualTolerance; ++it) {
                const Vector r = y - (K * alpha + lam * alpha);
                alpha += llt.solve(r);
            }
            if (alpha.allFinite() && krr_residual(K, alpha, y, lam) <= kResidualTolerance) return {alpha, lam};
        }
        if (attempt < max_retries) {
            const double next = lam > 0 ? lam * 10.0 : 1e-12;
            log_warning("KRR factorization failed at lambda=" + short_double(lam) + "; retrying with " +
                        short_double(next));
            lam = next;
        }
    }
    throw NumericalError("KRR solve failed up to lambda=" + short_double(lam) +
                         "; the kernel matrix is ill-conditioned, use a larger lambda");
}

KrrModel fit_krr(DescriptorBatch train, const Vector& y, const KernelParams& kernel, double lambda) {
    KrrModel model;
    model.kernel_params = kernel;
    model.train_time_cpu_s = capture_timing([&] {
        const Matrix K = kernel_matrix(train, kernel);
        auto sol = krr_train(K, y, lambda);
        model.alpha = std::move(sol.alpha);
        model.lambda = sol.lambda;
    });
    model.train_descriptors = std::move(train);
    return model;
}

Vector krr_predict(const KrrModel& model, const DescriptorBatch& queries) {
    if (batch_size(model.train_descriptors) != model.n_train())
        throw ShapeError("KRR model: alpha length differs from training set size");
    if (queries.index() != model.train_descriptors.index())
        throw ShapeError("KRR predict: query descriptors differ in kind from training descriptors");
    const Matrix Kq = kernel_matrix(queries, model.train_descriptors, model.kernel_params);
    return Kq * model.alpha;
}

GridSearchResult krr_grid_search(const DescriptorBatch& train, const Vector& y_train, const DescriptorBatch& val,
                                 const Vector& y_val, std::span<const double> sigma_grid,
                                 std::span<const double> lambda_grid, KernelParams base) {
    if (sigma_grid.empty() || lambda_grid.empty()) throw ConfigError("grid search needs nonempty grids");
    GridSearchResult best;
    best.mae = std::numeric_limits<double>::infinity();
    bool have = false;
    for (double sigma : sigma_grid) {
        KernelParams params = base;
        params.sigma = sigma;
        const Matrix K = kernel_matrix(train, params);
        const Matrix Kv = kernel_matrix(val, train, params);
        for (double lambda : lambda_grid) {
            double mae = std::numeric_limits<double>::infinity();
            try {
                const auto sol = krr_train(K, y_train, lambda, 0);
                mae = mean_abs_error(Kv * sol.alpha, y_val);
                if (!std::isfinite(mae)) mae = std::numeric_limits<double>::infinity();
            } catch (const NumericalError&) {
            }
            best.table.push_back({sigma, lambda, mae});
            const bool better = !have || mae < best.mae ||
                                (mae == best.mae && (lambda > best.lambda || (lambda == best.lambda && sigma > best.sigma)));
            if (better) {
                best.sigma = sigma;
                best.lambda = lambda;
                best.mae = mae;
                have = true;
            }
        }
    }
    return best;
}

std::vector<double> default_sigma_grid(bool local_kernel) {
    std::vector<double> g;
    if (local_kernel)
        for (double s = 0.5; s <= 64.0; s *= 2) g.push_back(s);
    else
        for (double s = 1.0; s <= 1024.0; s *= 2) g.push_back(s);
    return g;
}

std::vector<double> default_lambda_grid() { return {1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4}; }

void save_krr_model(const std::filesystem::path& path, const KrrModel& model) {
    Archive ar;
    ar.meta["model"] = "krr";
    ar.meta["kernel"] = model.kernel_params.to_json();
    ar.meta["lambda"] = model.lambda;
    ar.meta["train_time_cpu_s"] = model.train_time_cpu_s;
    ar.meta["fingerprint"] = hex64(fnv1a64(model.kernel_params.to_json().dump()));
    ar.arrays["alpha"] = as_column(model.alpha);
    put_batch(ar, "train", model.train_descriptors);
    save_archive(path, ar);
}

KrrModel load_krr_model(const std::filesystem::path& path) {
    const auto ar = load_archive(path);
    if (ar.meta.value("model", std::string()) != "krr") throw IOError(path.string() + " is not a KRR model");
    KrrModel m;
    m.kernel_params = KernelParams::from_json(ar.meta.at("kernel"));
    if (ar.meta.at("fingerprint").get<std::string>() != hex64(fnv1a64(m.kernel_params.to_json().dump())))
        throw ConfigError("KRR model fingerprint mismatch");
    m.lambda = ar.meta.at("lambda").get<double>();
    m.train_time_cpu_s = ar.meta.value("train_time_cpu_s", 0.0);
    m.alpha = column_to_vector(ar.array("alpha"));
    m.train_descriptors = get_batch(ar, "train");
    if (batch_size(m.train_descriptors) != m.n_train()) throw ShapeError("KRR model arrays disagree in length");
    return m;
}

}  // namespace mlknn
