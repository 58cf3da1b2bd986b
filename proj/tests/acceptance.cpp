#include "mlknn/error.hpp"
#include "mlknn/pipeline.hpp"
#include "support.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

using namespace mlknn;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
    Status status;
    std::string detail;
};

std::string format(const char* fmt, auto... args) {
    char buf[1024];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

double wall_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

double mae(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().mean(); }

// Extended-precision leave-one-out loss used as the finite-difference oracle.
long double loss_ld(const Matrix& A, const RowMatrix& X, const Vector& y) {
    const auto n = X.rows();
    long double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        long double num = 0, den = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            long double d2 = 0;
            for (Eigen::Index r = 0; r < A.rows(); ++r) {
                long double z = 0;
                for (Eigen::Index c = 0; c < A.cols(); ++c)
                    z += static_cast<long double>(A(r, c)) * (static_cast<long double>(X(i, c)) - X(j, c));
                d2 += z * z;
            }
            const long double k = std::exp(-d2);
            num += k * y[j];
            den += k;
        }
        const long double e = y[i] - num / den;
        total += e * e;
    }
    return total;
}

Outcome mlkr_gradient_check() {
    std::mt19937_64 rng(101);
    double worst = 0.0;
    const double h = 1e-4;
    for (int inst = 0; inst < 25; ++inst) {
        const auto X = testing::random_matrix(20, 5, rng);
        const Vector y = testing::random_vector(20, rng);
        const Matrix A = testing::random_matrix(3, 5, rng, 0.4);
        const Matrix g = mlkr_gradient(A, X, y);
        for (Eigen::Index r = 0; r < 3; ++r)
            for (Eigen::Index c = 0; c < 5; ++c) {
                auto at = [&](double step) {
                    Matrix B = A;
                    B(r, c) += step;
                    return loss_ld(B, X, y);
                };
                // fourth-order central stencil
                const long double fd = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0L * h);
                const double denom = std::max(std::abs(static_cast<double>(fd)), 1e-8);
                worst = std::max(worst, std::abs(g(r, c) - static_cast<double>(fd)) / denom);
            }
    }
    return {worst <= 1e-5 ? Status::pass : Status::fail,
            format("max elementwise relative error %.3g over 25 instances (limit 1e-5)", worst)};
}

Outcome tune_k_exactness() {
    std::mt19937_64 rng(202);
    const auto X = testing::random_matrix(200, 4, rng);
    std::vector<double> y(200);
    for (Eigen::Index i = 0; i < 200; ++i) y[static_cast<std::size_t>(i)] = std::sin(2 * X(i, 0)) + X(i, 1) * X(i, 3);
    std::size_t mismatches = 0;
    for (auto w : {Weighting::uniform, Weighting::reciprocal_distance, Weighting::reciprocal_squared_distance}) {
        const auto fast = tune_k(X, y, MetricSpec::euclidean(), 20, w);
        std::vector<double> slow(20, 0.0);
        for (std::size_t i = 0; i < 200; ++i) {
            std::vector<std::size_t> keep;
            for (std::size_t j = 0; j < 200; ++j)
                if (j != i) keep.push_back(j);
            std::vector<double> yk;
            for (auto j : keep) yk.push_back(y[j]);
            const auto model = fit_knn(select_rows(DescriptorBatch(X), keep), yk, MetricSpec::euclidean(), 20, w);
            const auto ns = model.index.query(X.row(static_cast<Eigen::Index>(i)).transpose(), 20);
            for (std::size_t k = 1; k <= 20; ++k) slow[k - 1] += std::abs(knn_predict(ns.prefix(k), w) - y[i]);
        }
        for (auto& s : slow) s /= 200.0;
        for (std::size_t k = 0; k < 20; ++k)
            if (fast.loo_mae[k] != slow[k]) ++mismatches;
    }
    return {mismatches == 0 ? Status::pass : Status::fail,
            format("%zu of 60 leave-one-out MAE values differ bitwise from explicit refits (3 weightings x k<=20)",
                   mismatches)};
}

Outcome tree_exactness() {
    std::mt19937_64 rng(303);
    const auto X = testing::random_matrix(1000, 10, rng);
    const auto Q = testing::random_matrix(40, 10, rng);
    const std::vector<double> y(1000, 0.0);
    MlkrTransform t;
    t.A = testing::random_matrix(6, 10, rng);
    t.mean = testing::random_vector(10, rng);
    t.scale = Vector::Constant(10, 1.3);
    KernelParams gk;
    gk.sigma = 3.0;

    DescriptorParams lmb;
    lmb.lmb.r_cut = 4.0;
    lmb.lmb.n_radial = 4;
    lmb.lmb.n_angular = 2;
    std::vector<LocalDescriptor> L, LQ;
    for (int i = 0; i < 1000; ++i) L.push_back(local_many_body(testing::random_structure(2 + i % 5, rng), lmb));
    for (int i = 0; i < 20; ++i) LQ.push_back(local_many_body(testing::random_structure(2 + i % 5, rng), lmb));
    KernelParams lk;
    lk.local_mode = true;
    lk.sigma = 1.0;

    struct Case {
        std::string name;
        DescriptorBatch points;
        DescriptorBatch queries;
        MetricSpec metric;
        std::vector<Backend> trees;
    };
    const std::vector<Case> cases = {
        {"euclidean", X, Q, MetricSpec::euclidean(), {Backend::kd_tree, Backend::ball_tree, Backend::vp_tree}},
        {"mahalanobis", X, Q, MetricSpec::mahalanobis(t), {Backend::kd_tree, Backend::ball_tree, Backend::vp_tree}},
        {"kernel-induced (global rbf)", X, Q, MetricSpec::kernel_induced(gk), {Backend::vp_tree}},
        {"kernel-induced (local sum)", L, LQ, MetricSpec::kernel_induced(lk), {Backend::vp_tree}},
    };
    std::size_t comparisons = 0, mismatches = 0;
    for (const auto& c : cases) {
        IndexOptions bo;
        bo.backend = Backend::brute;
        const auto brute = NeighborIndex::build(c.points, y, c.metric, bo);
        const auto reference = brute.query_batch(c.queries, 20);
        for (auto b : c.trees) {
            IndexOptions o;
            o.backend = b;
            o.seed = 9;
            const auto tree = NeighborIndex::build(c.points, y, c.metric, o);
            const auto got = tree.query_batch(c.queries, 20);
            for (std::size_t q = 0; q < got.size(); ++q)
                for (std::size_t k = 1; k <= 20; ++k) {
                    ++comparisons;
                    const auto a = got[q].prefix(k), r = reference[q].prefix(k);
                    if (a.indices != r.indices || a.distances != r.distances) ++mismatches;
                }
        }
    }
    // brute force itself against a direct Euclidean oracle
    IndexOptions bo;
    bo.backend = Backend::brute;
    const auto brute = NeighborIndex::build(X, y, MetricSpec::euclidean(), bo);
    for (Eigen::Index q = 0; q < Q.rows(); ++q) {
        std::vector<std::pair<double, std::size_t>> d;
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            double s = 0;
            for (Eigen::Index c = 0; c < X.cols(); ++c) s += (X(i, c) - Q(q, c)) * (X(i, c) - Q(q, c));
            d.emplace_back(std::sqrt(s), static_cast<std::size_t>(i));
        }
        std::sort(d.begin(), d.end());
        const auto ns = brute.query(Q.row(q).transpose(), 20);
        ++comparisons;
        for (std::size_t r = 0; r < 20; ++r)
            if (ns.indices[r] != d[r].second) {
                ++mismatches;
                break;
            }
    }
    return {mismatches == 0 ? Status::pass : Status::fail,
            format("%zu mismatching neighbour lists out of %zu (euclidean, mahalanobis, global and local "
                   "kernel-induced; k=1..20)",
                   mismatches, comparisons)};
}

Outcome pseudometric() {
    std::mt19937_64 rng(404);
    DescriptorParams p;
    p.lmb.r_cut = 5.0;
    p.lmb.n_radial = 8;
    p.lmb.n_angular = 4;
    std::vector<LocalDescriptor> S;
    for (int i = 0; i < 300; ++i) S.push_back(local_many_body(testing::random_structure(2 + i % 6, rng), p));
    KernelParams lk;
    lk.local_mode = true;
    lk.sigma = 2.0;
    double self_max = 0, asym_max = 0, violation = 0;
    for (const auto& s : S) self_max = std::max(self_max, kernel_induced_distance(s, s, lk));
    std::uniform_int_distribution<std::size_t> pick(0, S.size() - 1);
    for (int t = 0; t < 10000; ++t) {
        const auto a = pick(rng), b = pick(rng), c = pick(rng);
        const double ab = kernel_induced_distance(S[a], S[b], lk);
        const double ba = kernel_induced_distance(S[b], S[a], lk);
        const double bc = kernel_induced_distance(S[b], S[c], lk);
        const double ac = kernel_induced_distance(S[a], S[c], lk);
        asym_max = std::max(asym_max, std::abs(ab - ba));
        violation = std::max(violation, ac - (ab + bc));
    }
    const bool ok = self_max == 0.0 && asym_max <= 1e-12 && violation <= 1e-9;
    return {ok ? Status::pass : Status::fail,
            format("max d(a,a)=%.3g, max |d(a,b)-d(b,a)|=%.3g, worst triangle excess %.3g over 10000 triples", self_max,
                   asym_max, violation)};
}

Outcome krr_solver() {
    const auto data = make_smooth_1d(50, 505);
    KernelParams kp;
    kp.sigma = 0.01;
    const Matrix K = kernel_matrix(data.X, kp);
    double worst_residual = 0;
    for (double lambda : {1e-8, 1e-4, 1e-1}) {
        const auto s = krr_train(K, data.y, lambda);
        worst_residual = std::max(worst_residual, krr_residual(K, s.alpha, data.y, s.lambda));
    }
    const auto model = fit_krr(data.X, data.y, kp, 1e-12);
    const Vector fit = krr_predict(model, data.X);
    const double interp = (fit - data.y).cwiseAbs().maxCoeff() / data.y.cwiseAbs().maxCoeff();
    const bool ok = worst_residual <= 1e-8 && interp <= 1e-6;
    return {ok ? Status::pass : Status::fail,
            format("relative residual %.3g (limit 1e-8); training-label interpolation error %.3g at lambda=%g "
                   "(limit 1e-6)",
                   worst_residual, interp, model.lambda)};
}

struct MetricBenchmark {
    double euclid_mae = 0, mlkr_mae = 0;
    std::size_t k_euclid = 0, k_mlkr = 0;
    std::vector<double> mlkr_mae_by_k;  // k = 1..30
    double fit_s = 0;
};

const MetricBenchmark& metric_benchmark() {
    static const MetricBenchmark result = [] {
        MetricBenchmark b;
        const auto train = make_mahalanobis_regression(2000, 606, 1);
        const auto test = make_mahalanobis_regression(1000, 606, 2);
        const auto ytr = to_std(train.y);
        const auto t0 = std::chrono::steady_clock::now();
        MlkrConfig cfg;
        cfg.p_out = 50;
        cfg.max_iter = 200;
        cfg.seed = 7;
        const auto t = mlkr_fit(train.X, train.y, cfg);
        b.fit_s = wall_since(t0);

        const auto eu = tune_k(train.X, ytr, MetricSpec::euclidean(), 30);
        const auto ml = tune_k(train.X, ytr, MetricSpec::mahalanobis(t), 30);
        b.k_euclid = eu.k_best;
        b.k_mlkr = ml.k_best;
        b.euclid_mae = mae(knn_predict(fit_knn(train.X, ytr, MetricSpec::euclidean(), eu.k_best), test.X), test.y);
        const auto model = fit_knn(train.X, ytr, MetricSpec::mahalanobis(t), 30);
        const auto sets = knn_neighbors(model, test.X);
        for (std::size_t k = 1; k <= 30; ++k) {
            Vector pred(test.X.rows());
            for (std::size_t q = 0; q < sets.size(); ++q)
                pred[static_cast<Eigen::Index>(q)] = knn_predict(sets[q].prefix(k), model.weighting);
            b.mlkr_mae_by_k.push_back(mae(pred, test.y));
        }
        b.mlkr_mae = b.mlkr_mae_by_k[ml.k_best - 1];
        return b;
    }();
    return result;
}

Outcome metric_learning() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& b = metric_benchmark();
    const double elapsed = wall_since(t0);
    const double ratio = b.mlkr_mae / b.euclid_mae;
    const bool ok = ratio <= 0.5 && elapsed < 300.0;
    return {ok ? Status::pass : Status::fail,
            format("MLKR k-NN MAE %.4f (k=%zu) vs Euclidean k-NN MAE %.4f (k=%zu): ratio %.3f (limit 0.5); "
                   "%.1f s (limit 300 s)",
                   b.mlkr_mae, b.k_mlkr, b.euclid_mae, b.k_euclid, ratio, elapsed)};
}

Outcome calibration() {
    const auto train = make_heteroscedastic(10000, 707);
    const auto test = make_heteroscedastic(5000, 708);
    const std::vector<double> levels = {0.05, 0.25, 0.5, 0.75, 0.95};
    const auto model = fit_knn(train.X, to_std(train.y), MetricSpec::euclidean(), 100, Weighting::uniform);
    const auto curve = calibration_curve(knn_predict_quantiles(model, test.X, levels), to_std(test.y), levels);
    double worst = 0;
    std::string cells;
    for (const auto& c : curve) {
        worst = std::max(worst, std::abs(c.empirical - c.nominal));
        cells += format(" %.2f->%.4f", c.nominal, c.empirical);
    }
    return {worst <= 0.03 ? Status::pass : Status::fail,
            format("k=100 neighbour quantiles, nominal->empirical:%s; max deviation %.4f (limit 0.03)", cells.c_str(),
                   worst)};
}

Outcome scaling() {
    ClusterOptions opt;
    opt.per_composition = 334;
    DescriptorParams p;
    p.kind = DescriptorKind::LMB;
    const auto train_set = make_cluster_set(opt, 808);
    opt.per_composition = 42;
    const auto query_set = make_cluster_set(opt, 809);
    const auto train_all = featurize(train_set, p);
    const auto query_all = featurize(query_set, p);
    const RowMatrix X = train_all.global.topRows(8000);
    const RowMatrix Q = query_all.global.topRows(1000);
    const std::vector<double> y(train_all.labels.begin(), train_all.labels.begin() + 8000);
    const Vector yv = Eigen::Map<const Vector>(y.data(), 8000);

    // length scale from the median pairwise distance of a sample
    std::vector<double> d;
    for (Eigen::Index i = 0; i < 200; ++i)
        for (Eigen::Index j = i + 1; j < 200; ++j) d.push_back((X.row(i * 40) - X.row(j * 40)).norm());
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    KernelParams kp;
    kp.sigma = d[d.size() / 2];

    KrrModel krr;
    const double krr_fit = capture_timing([&] { krr = fit_krr(X, yv, kp, 1e-6); });
    Vector krr_pred;
    const double krr_predict_s = capture_timing([&] { krr_pred = krr_predict(krr, Q); });

    KnnModel knn;
    const double knn_fit = capture_timing([&] { knn = fit_knn(X, y, MetricSpec::euclidean(), 10); });
    Vector knn_pred;
    const double knn_predict_s = capture_timing([&] { knn_pred = knn_predict(knn, Q); });

    std::string backends;
    for (auto b : {Backend::brute, Backend::kd_tree, Backend::ball_tree, Backend::vp_tree}) {
        IndexOptions o;
        o.backend = b;
        KnnModel m;
        const double f = capture_timing([&] { m = fit_knn(X, y, MetricSpec::euclidean(), 10, Weighting::reciprocal_distance, o); });
        const double q = capture_timing([&] { knn_predict(m, Q); });
        backends += format(" %s %.3g/%.3g s;", to_string(b).c_str(), f, q);
    }

    const double fit_ratio = knn_fit / krr_fit, pred_ratio = knn_predict_s / krr_predict_s;
    const bool ok = fit_ratio <= 0.05 && pred_ratio <= 0.25;
    return {ok ? Status::pass : Status::fail,
            format("n=8000 pooled cluster descriptors (%td-d), 1000 queries: fit k-NN %.3g s vs KRR %.3g s "
                   "(ratio %.4f, limit 0.05); predict k-NN %.3g s (%s) vs KRR %.3g s (ratio %.3f, limit 0.25); "
                   "fit/predict by backend:%s",
                   X.cols(), knn_fit, krr_fit, fit_ratio, knn_predict_s, to_string(knn.index.backend()).c_str(),
                   krr_predict_s, pred_ratio, backends.c_str())};
}

Outcome qm9_subset() {
    const char* env = std::getenv("MLKNN_QM9_XYZ");
    if (!env || !std::filesystem::exists(env))
        return {Status::skip, "QM9 files not present; set MLKNN_QM9_XYZ to the extracted xyz directory to run"};
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(env)) {
        for (const auto& e : std::filesystem::directory_iterator(env))
            if (e.path().extension() == ".xyz") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(env);
    }
    ExperimentConfig cfg;
    cfg.dataset.format = XyzFormat::qm9_extended;
    cfg.dataset.property_index = 12;
    cfg.dataset.unit_factor = kHartreeToKcalPerMol;
    cfg.dataset.atom_reference = true;
    cfg.dataset.composition_regex.clear();
    if (files.size() > 15000) {
        std::vector<std::size_t> all(files.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        for (auto i : subsample(all, 15000, 909)) cfg.dataset.xyz.push_back(files[i]);
    } else {
        cfg.dataset.xyz = files;
    }
    cfg.models = {"krr", "knn_euclidean", "knn_mlkr"};
    const auto data = load_dataset(cfg);
    if (data.size() < 15000) return {Status::fail, format("only %zu labelled molecules found", data.size())};
    const auto perm = seeded_permutation(data.size(), 910);
    std::vector<std::size_t> train(perm.begin(), perm.begin() + 10000), test(perm.begin() + 10000, perm.begin() + 15000);
    JobAudit audit;
    const auto out = run_models(data, train, test, cfg, 911, CpuClock::process, audit);
    audit.verify();
    Vector truth(5000);
    for (std::size_t q = 0; q < 5000; ++q) truth[static_cast<Eigen::Index>(q)] = data.labels[test[q]];
    const double krr = mae(out[0].predictions, truth), eu = mae(out[1].predictions, truth),
                 ml = mae(out[2].predictions, truth);
    const bool ok = krr <= 2.0 && ml < eu;
    return {ok ? Status::pass : Status::fail,
            format("KRR MAE %.3f kcal/mol (limit 2.0); MLKR k-NN %.3f vs Euclidean k-NN %.3f", krr, ml, eu)};
}

Outcome k_plateau() {
    const auto& b = metric_benchmark();
    const double best = *std::min_element(b.mlkr_mae_by_k.begin(), b.mlkr_mae_by_k.end());
    const auto best_k = std::min_element(b.mlkr_mae_by_k.begin(), b.mlkr_mae_by_k.end()) - b.mlkr_mae_by_k.begin() + 1;
    const double at10 = b.mlkr_mae_by_k[9];
    return {at10 <= 1.1 * best ? Status::pass : Status::fail,
            format("MLKR k-NN MAE at k=10 is %.4f, best %.4f at k=%td (ratio %.3f, limit 1.10)", at10, best, best_k,
                   at10 / best)};
}

Outcome extrapolation() {
    ExperimentConfig cfg;
    cfg.dataset.synthetic = "clusters";
    cfg.models = {"krr", "knn_euclidean", "knn_kernel_induced", "knn_mlkr"};
    cfg.seed = 1111;
    const auto data = load_dataset(cfg);
    const auto hold = holdout_indices(data, "largest");
    const std::size_t pool = (data.size() - hold.size()) -
                             static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(data.size() - hold.size())));
    cfg.train_sizes = {pool};
    const auto r = run_extrapolation(data, cfg);

    const std::set<std::size_t> h(hold.begin(), hold.end());
    std::size_t leaks = 0, stages = 0;
    for (const auto& a : r.audits) {
        a.verify();
        for (const auto& [name, idx] : a.stages) {
            ++stages;
            for (auto i : idx) leaks += h.count(i);
        }
    }
    bool ordered = true;
    std::string cells;
    for (const auto& m : cfg.models) {
        double ex = -1, in = -1;
        for (const auto& rec : r.records)
            if (rec.model == m) (rec.experiment == "extrapolation" ? ex : in) = rec.mae;
        ordered = ordered && ex > in;
        cells += format(" %s %.2f/%.2f;", m.c_str(), ex, in);
    }
    const bool ok = ordered && leaks == 0 && stages > 0;
    return {ok ? Status::pass : Status::fail,
            format("holdout %s (%zu items), train %zu; holdout/interpolation MAE:%s %zu holdout items found in %zu "
                   "training-stage index sets",
                   data.compositions[hold.front()].c_str(), hold.size(), pool, cells.c_str(), leaks, stages)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"mlkr gradient vs finite differences", mlkr_gradient_check},
        {"fast k tuning equals explicit leave-one-out", tune_k_exactness},
        {"tree backends equal brute force", tree_exactness},
        {"kernel-induced distance is a pseudometric", pseudometric},
        {"krr solver residual and interpolation", krr_solver},
        {"metric learning beats euclidean k-NN", metric_learning},
        {"neighbour quantile calibration", calibration},
        {"k-NN vs KRR computational scaling", scaling},
        {"QM9 subset sanity", qm9_subset},
        {"insensitivity to k", k_plateau},
        {"extrapolation harness", extrapolation},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));
    int failures = 0;
    for (std::size_t c = 0; c < criteria.size(); ++c) {
        if (!selected.empty() && !selected.count(c + 1)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[c].second();
        } catch (const std::exception& e) {
            o = {Status::fail, std::string("exception: ") + e.what()};
        }
        const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
        if (o.status == Status::fail) ++failures;
        std::printf("%s [%zu] %s: %s (%.1f s)\n", tag, c + 1, criteria[c].first.c_str(), o.detail.c_str(),
                    wall_since(t0));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
