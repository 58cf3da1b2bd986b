#include "mlknn/mlkr.hpp"

#include "mlknn/archive.hpp"
#include "mlknn/dataset.hpp"
#include "mlknn/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

namespace mlknn {

namespace {

constexpr double kMinScale = 1e-12;

RowMatrix gather_rows(const RowMatrix& X, std::span<const std::size_t> rows) {
    RowMatrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(rows[r]));
    return out;
}

std::uint64_t data_fingerprint(const RowMatrix& X, const Vector& y, const MlkrConfig& config) {
    std::uint64_t h = fnv1a64(config.to_json().dump());
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(X.data()), X.size() * sizeof(double)), h);
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(y.data()), y.size() * sizeof(double)), h);
}

// Optimisation state on standardized inputs and labels.
struct Problem {
    const RowMatrix& X;
    const Vector& y;
    double label_scale2;  // raw loss = standardized loss * label_scale2

    LooObjective eval(const Matrix& A, bool grad, std::span<const std::size_t> anchors) const {
        return mlkr_objective(A, X, y, grad, anchors);
    }
};

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace

std::string to_string(MlkrOptimizer opt) {
    return opt == MlkrOptimizer::adaptive_moment ? "adaptive_moment" : "gradient_descent_backtracking";
}

MlkrOptimizer parse_mlkr_optimizer(std::string_view name) {
    if (name == "gradient_descent_backtracking" || name == "gd") return MlkrOptimizer::gradient_descent_backtracking;
    if (name == "adaptive_moment" || name == "adam") return MlkrOptimizer::adaptive_moment;
    throw ConfigError("unknown MLKR optimizer '" + std::string(name) + "'");
}

void MlkrConfig::validate() const {
    if (p_out < 1) throw ConfigError("MLKR p_out must be at least 1");
    if (max_iter < 1) throw ConfigError("MLKR max_iter must be at least 1");
    if (max_train_points < 2) throw ConfigError("MLKR max_train_points must be at least 2");
    if (!(shrink > 0 && shrink < 1)) throw ConfigError("MLKR line-search shrink must be in (0, 1)");
    if (batch_size < 1) throw ConfigError("MLKR batch_size must be positive");
}

nlohmann::json MlkrConfig::to_json() const {
    return {{"p_out", p_out},
            {"max_train_points", max_train_points},
            {"max_iter", max_iter},
            {"grad_tol", grad_tol},
            {"seed", seed},
            {"optimizer", to_string(optimizer)},
            {"armijo_c", armijo_c},
            {"shrink", shrink},
            {"grow", grow},
            {"adam_learning_rate", adam_learning_rate},
            {"full_batch_limit", full_batch_limit},
            {"batch_size", batch_size},
            {"trace_every", trace_every}};
}

MlkrConfig MlkrConfig::from_json(const nlohmann::json& j) {
    MlkrConfig c;
    c.p_out = j.value("p_out", c.p_out);
    c.max_train_points = j.value("max_train_points", c.max_train_points);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.grad_tol = j.value("grad_tol", c.grad_tol);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer")) c.optimizer = parse_mlkr_optimizer(j["optimizer"].get<std::string>());
    c.armijo_c = j.value("armijo_c", c.armijo_c);
    c.shrink = j.value("shrink", c.shrink);
    c.grow = j.value("grow", c.grow);
    c.adam_learning_rate = j.value("adam_learning_rate", c.adam_learning_rate);
    c.full_batch_limit = j.value("full_batch_limit", c.full_batch_limit);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.trace_every = j.value("trace_every", c.trace_every);
    c.validate();
    return c;
}

MlkrTransform MlkrTransform::from_matrix(Matrix A) {
    MlkrTransform t;
    t.mean = Vector::Zero(A.cols());
    t.scale = Vector::Ones(A.cols());
    t.A = std::move(A);
    return t;
}

LooObjective mlkr_objective(const Matrix& A, const RowMatrix& X, const Vector& y, bool with_gradient,
                            std::span<const std::size_t> anchors) {
    const Eigen::Index n = X.rows();
    if (n < 2) throw ConfigError("MLKR objective needs at least two points");
    if (y.size() != n) throw ShapeError("MLKR objective: label count differs from point count");
    if (A.cols() != X.cols()) throw ShapeError("MLKR objective: A has " + std::to_string(A.cols()) +
                                               " columns for " + std::to_string(X.cols()) + "-dimensional data");

    std::vector<std::size_t> all;
    if (anchors.empty()) {
        all.resize(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), std::size_t{0});
        anchors = all;
    }
    const auto b = static_cast<Eigen::Index>(anchors.size());

    const RowMatrix Z = X * A.transpose();
    const Vector zn = Z.rowwise().squaredNorm();
    RowMatrix ZB(b, Z.cols());
    for (Eigen::Index r = 0; r < b; ++r) ZB.row(r) = Z.row(static_cast<Eigen::Index>(anchors[static_cast<std::size_t>(r)]));
    // P holds squared distances, then the normalised row weights.
    RowMatrix P = ZB * Z.transpose();

    Vector yhat(b);
    Vector resid(b);
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < b; ++r) {
        const auto i = static_cast<Eigen::Index>(anchors[static_cast<std::size_t>(r)]);
        auto row = P.row(r);
        double dmin = std::numeric_limits<double>::infinity();
        Eigen::Index nearest = -1;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double d = std::max(0.0, zn[i] + zn[j] - 2.0 * row[j]);
            row[j] = d;
            if (d < dmin) {
                dmin = d;
                nearest = j;
            }
        }
        row[i] = 0.0;
        double sum = 0.0;
        if (std::isfinite(dmin)) {
            for (Eigen::Index j = 0; j < n; ++j) {
                if (j == i) continue;
                row[j] = std::exp(dmin - row[j]);
                sum += row[j];
            }
        }
        if (!(sum > 0) || !std::isfinite(sum)) {
            // fallback: 1-nearest-other-point prediction
            row.setZero();
            if (nearest < 0) nearest = (i == 0) ? 1 : 0;
            row[nearest] = 1.0;
            sum = 1.0;
        }
        row /= sum;
        yhat[r] = row.dot(y);
        resid[r] = y[i] - yhat[r];
    }

    LooObjective out;
    out.loss = resid.squaredNorm();
    out.predictions = yhat;
    if (!with_gradient) return out;

    // W_ij = (yhat_i - y_i)(yhat_i - y_j) p_ij;  grad = 4 A sum_ij W_ij x_ij x_ij^T
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < b; ++r) {
        const double e = -resid[r];
        P.row(r) = (P.row(r).array() * (yhat[r] - y.transpose().array()) * e).matrix();
    }
    const Vector rsum = P.rowwise().sum();
    const Vector csum = P.colwise().sum().transpose();
    RowMatrix XB(b, X.cols());
    for (Eigen::Index r = 0; r < b; ++r) XB.row(r) = X.row(static_cast<Eigen::Index>(anchors[static_cast<std::size_t>(r)]));

    const RowMatrix WX = P * X;                   // b x p_in
    const RowMatrix WtXB = P.transpose() * XB;    // n x p_in
    Matrix S = ZB.transpose() * (rsum.asDiagonal() * XB);
    S.noalias() += Z.transpose() * (csum.asDiagonal() * X);
    S.noalias() -= ZB.transpose() * WX;
    S.noalias() -= Z.transpose() * WtXB;
    out.gradient = 4.0 * S;
    return out;
}

double mlkr_loss(const Matrix& A, const RowMatrix& X, const Vector& y) { return mlkr_objective(A, X, y, false).loss; }

Matrix mlkr_gradient(const Matrix& A, const RowMatrix& X, const Vector& y) {
    return mlkr_objective(A, X, y, true).gradient;
}

MlkrTransform mlkr_fit(const RowMatrix& X_in, const Vector& y_in, const MlkrConfig& config) {
    config.validate();
    if (X_in.rows() < 2) throw ConfigError("MLKR fit needs at least two points");
    if (y_in.size() != X_in.rows()) throw ShapeError("MLKR fit: label count differs from point count");

    RowMatrix Xs;
    Vector ys;
    if (static_cast<std::size_t>(X_in.rows()) > config.max_train_points) {
        std::vector<std::size_t> pool(static_cast<std::size_t>(X_in.rows()));
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        const auto keep = subsample(pool, config.max_train_points, config.seed);
        Xs = gather_rows(X_in, keep);
        ys.resize(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t r = 0; r < keep.size(); ++r) ys[static_cast<Eigen::Index>(r)] = y_in[static_cast<Eigen::Index>(keep[r])];
    } else {
        Xs = X_in;
        ys = y_in;
    }
    const Eigen::Index n = Xs.rows();
    const Eigen::Index p_in = Xs.cols();

    MlkrTransform t;
    t.training_fingerprint = data_fingerprint(Xs, ys, config);
    t.mean = Xs.colwise().mean().transpose();
    t.scale = ((Xs.rowwise() - t.mean.transpose()).colwise().squaredNorm().transpose() / static_cast<double>(n))
                  .cwiseSqrt()
                  .cwiseMax(kMinScale);
    const RowMatrix X = (Xs.rowwise() - t.mean.transpose()).array().rowwise() / t.scale.transpose().array();

    const double y_mean = ys.mean();
    double y_sd = std::sqrt((ys.array() - y_mean).square().mean());
    if (!(y_sd > 0)) y_sd = 1.0;
    const Vector y = (ys.array() - y_mean) / y_sd;
    const Problem prob{X, y, y_sd * y_sd};

    std::size_t p_out = config.p_out;
    if (p_out > static_cast<std::size_t>(p_in)) {
        log_warning("MLKR p_out " + std::to_string(p_out) + " exceeds input dimension " + std::to_string(p_in) +
                    "; using " + std::to_string(p_in));
        p_out = static_cast<std::size_t>(p_in);
    }
    const auto po = static_cast<Eigen::Index>(p_out);

    // Initial direction: leading principal axes, or the identity when nothing is dropped.
    Matrix A0;
    if (po == p_in) {
        A0 = Matrix::Identity(po, p_in);
    } else {
        const Matrix cov = (X.transpose() * X) / static_cast<double>(n);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
        A0 = eig.eigenvectors().rightCols(po).rowwise().reverse().transpose();
    }

    const bool full_batch = static_cast<std::size_t>(n) <= config.full_batch_limit;
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto draw_batch = [&]() {
        std::vector<std::size_t> batch = subsample(all, std::min(config.batch_size, all.size()),
                                                   static_cast<std::uint64_t>(rng()));
        return batch;
    };
    const auto init_anchors = full_batch ? std::vector<std::size_t>{} : draw_batch();

    // Scale of the initial projection chosen on the leave-one-out loss.
    double best_scale = 1.0, best_loss = std::numeric_limits<double>::infinity();
    const double base = 1.0 / std::sqrt(static_cast<double>(po));
    for (int e = -4; e <= 6; ++e) {
        const double s = base * std::pow(2.0, e);
        const double L = prob.eval(s * A0, false, init_anchors).loss;
        if (L < best_loss) {
            best_loss = L;
            best_scale = s;
        }
    }
    if (!std::isfinite(best_loss)) throw NumericalError("MLKR loss is not finite at initialisation");
    Matrix A = best_scale * A0;

    auto record = [&](std::size_t iter, double standardized_loss) {
        t.objective_trace.emplace_back(iter, standardized_loss * prob.label_scale2);
    };

    if (full_batch) {
        auto cur = prob.eval(A, true, {});
        record(0, cur.loss);
        double step = 0.1 * A.norm() / std::max(cur.gradient.norm(), 1e-300);
        Matrix m1 = Matrix::Zero(A.rows(), A.cols()), m2 = m1;
        double lr = config.adam_learning_rate;
        for (std::size_t it = 1; it <= config.max_iter; ++it) {
            if (max_abs(cur.gradient) <= config.grad_tol) break;
            if (config.optimizer == MlkrOptimizer::gradient_descent_backtracking) {
                const double g2 = cur.gradient.squaredNorm();
                bool accepted = false;
                for (int ls = 0; ls < 60; ++ls) {
                    const Matrix trial = A - step * cur.gradient;
                    const double L = prob.eval(trial, false, {}).loss;
                    if (std::isfinite(L) && L <= cur.loss - config.armijo_c * step * g2) {
                        A = trial;
                        accepted = true;
                        break;
                    }
                    step *= config.shrink;
                }
                if (!accepted) break;
                cur = prob.eval(A, true, {});
                step *= config.grow;
            } else {
                constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                m1 = b1 * m1 + (1 - b1) * cur.gradient;
                m2 = b2 * m2 + (1 - b2) * cur.gradient.cwiseAbs2();
                const double c1 = 1 - std::pow(b1, static_cast<double>(it));
                const double c2 = 1 - std::pow(b2, static_cast<double>(it));
                const Matrix update = ((m1 / c1).array() / ((m2 / c2).array().sqrt() + eps)).matrix();
                const Matrix trial = A - lr * update;
                auto next = prob.eval(trial, true, {});
                if (!std::isfinite(next.loss) || next.loss > cur.loss) {
                    lr *= config.shrink;  // reject, never accept an increase
                    if (lr < 1e-12) break;
                    continue;
                }
                A = trial;
                cur = std::move(next);
            }
            record(it, cur.loss);
        }
    } else {
        record(0, prob.eval(A, false, {}).loss);
        double step = -1.0;
        for (std::size_t it = 1; it <= config.max_iter; ++it) {
            const auto batch = draw_batch();
            const auto cur = prob.eval(A, true, batch);
            if (step < 0) step = 0.1 * A.norm() / std::max(cur.gradient.norm(), 1e-300);
            if (max_abs(cur.gradient) * static_cast<double>(n) / static_cast<double>(batch.size()) <= config.grad_tol) break;
            const double g2 = cur.gradient.squaredNorm();
            bool accepted = false;
            for (int ls = 0; ls < 60; ++ls) {
                const Matrix trial = A - step * cur.gradient;
                const double L = prob.eval(trial, false, batch).loss;
                if (std::isfinite(L) && L <= cur.loss - config.armijo_c * step * g2) {
                    A = trial;
                    accepted = true;
                    break;
                }
                step *= config.shrink;
            }
            if (!accepted) break;
            step *= config.grow;
            if (config.trace_every > 0 && it % config.trace_every == 0) record(it, prob.eval(A, false, {}).loss);
        }
    }

    t.A = std::move(A);
    return t;
}

RowMatrix transform(const MlkrTransform& t, const RowMatrix& X) {
    if (static_cast<std::size_t>(X.cols()) != t.p_in())
        throw ShapeError("transform: expected " + std::to_string(t.p_in()) + " columns, got " + std::to_string(X.cols()));
    const RowMatrix Xs = (X.rowwise() - t.mean.transpose()).array().rowwise() / t.scale.transpose().array();
    return Xs * t.A.transpose();
}

Vector kernel_regression_predict(const RowMatrix& train_z, const Vector& y, const RowMatrix& query_z) {
    if (train_z.cols() != query_z.cols()) throw ShapeError("kernel regression: dimension mismatch");
    if (train_z.rows() != y.size() || train_z.rows() == 0) throw ShapeError("kernel regression: bad training set");
    const Vector tn = train_z.rowwise().squaredNorm();
    Vector out(query_z.rows());
    constexpr Eigen::Index kChunk = 256;
    for (Eigen::Index q0 = 0; q0 < query_z.rows(); q0 += kChunk) {
        const Eigen::Index m = std::min(kChunk, query_z.rows() - q0);
        RowMatrix D = query_z.middleRows(q0, m) * train_z.transpose();
#pragma omp parallel for schedule(static)
        for (Eigen::Index r = 0; r < m; ++r) {
            const double qn = query_z.row(q0 + r).squaredNorm();
            auto row = D.row(r);
            double dmin = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < row.size(); ++j) {
                row[j] = std::max(0.0, qn + tn[j] - 2.0 * row[j]);
                dmin = std::min(dmin, row[j]);
            }
            row = (dmin - row.array()).exp().matrix();
            out[q0 + r] = row.dot(y) / row.sum();
        }
    }
    return out;
}

void put_transform(Archive& ar, const std::string& prefix, const MlkrTransform& t) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& [it, loss] : t.objective_trace) trace.push_back({it, loss});
    ar.meta[prefix] = {{"p_in", t.p_in()},
                       {"p_out", t.p_out()},
                       {"training_fingerprint", hex64(t.training_fingerprint)},
                       {"mean", std::vector<double>(t.mean.data(), t.mean.data() + t.mean.size())},
                       {"scale", std::vector<double>(t.scale.data(), t.scale.data() + t.scale.size())},
                       {"objective_trace", trace}};
    ar.arrays[prefix + ".A"] = t.A;
    ar.arrays[prefix + ".mean"] = as_column(t.mean);
    ar.arrays[prefix + ".scale"] = as_column(t.scale);
}

MlkrTransform get_transform(const Archive& ar, const std::string& prefix) {
    const auto& meta = ar.meta.at(prefix);
    MlkrTransform t;
    t.A = ar.array(prefix + ".A");
    t.mean = column_to_vector(ar.array(prefix + ".mean"));
    t.scale = column_to_vector(ar.array(prefix + ".scale"));
    t.training_fingerprint = std::stoull(meta.at("training_fingerprint").get<std::string>(), nullptr, 16);
    for (const auto& e : meta.at("objective_trace")) t.objective_trace.emplace_back(e[0].get<std::size_t>(), e[1].get<double>());
    if (t.p_in() != meta.at("p_in").get<std::size_t>() || t.p_out() != meta.at("p_out").get<std::size_t>() ||
        static_cast<std::size_t>(t.mean.size()) != t.p_in() || static_cast<std::size_t>(t.scale.size()) != t.p_in())
        throw ShapeError("stored transform has inconsistent shapes");
    return t;
}

void save_transform(const std::filesystem::path& path, const MlkrTransform& t) {
    Archive ar;
    ar.meta["model"] = "mlkr_transform";
    put_transform(ar, "transform", t);
    save_archive(path, ar);
}

MlkrTransform load_transform(const std::filesystem::path& path) {
    const auto ar = load_archive(path);
    if (ar.meta.value("model", std::string()) != "mlkr_transform") throw IOError(path.string() + " is not an MLKR transform");
    return get_transform(ar, "transform");
}

void write_trace_csv(const std::filesystem::path& path, const MlkrTransform& t) {
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << "iteration,loss\n" << std::setprecision(17);
    for (const auto& [it, loss] : t.objective_trace) out << it << ',' << loss << '\n';
}

}  // namespace mlknn
