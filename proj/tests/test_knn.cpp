#include "mlknn/error.hpp"
#include "mlknn/knn.hpp"
#include "mlknn/synthetic.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

using namespace mlknn;

namespace {

NeighborSet make_set(std::vector<double> d, std::vector<double> y) {
    NeighborSet ns;
    ns.distances = std::move(d);
    ns.labels = std::move(y);
    ns.indices.resize(ns.labels.size());
    std::iota(ns.indices.begin(), ns.indices.end(), std::size_t{0});
    return ns;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

// Brute-force oracle: every distance, sorted by (distance, index).
std::vector<std::pair<double, std::size_t>> brute(const std::vector<double>& dists) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < dists.size(); ++i) all.emplace_back(dists[i], i);
    std::sort(all.begin(), all.end());
    return all;
}

double euclid(const RowMatrix& X, Eigen::Index i, const Vector& q) {
    double s = 0;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        const double d = X(i, c) - q[c];
        s += d * d;
    }
    return std::sqrt(s);
}

std::vector<LocalDescriptor> random_locals(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
    std::vector<LocalDescriptor> out;
    std::uniform_int_distribution<int> atoms(1, 4);
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = static_cast<std::size_t>(atoms(rng));
        LocalDescriptor d;
        d.rows = testing::random_matrix(a, dim, rng, 0.8);
        d.centers.assign(a, i % 2 ? Element::C : Element::H);
        d.centers[0] = Element::H;
        d.provenance = 3;
        out.push_back(std::move(d));
    }
    return out;
}

void check_same(const NeighborSet& a, const NeighborSet& b) {
    REQUIRE(a.size() == b.size());
    CHECK(a.indices == b.indices);
    CHECK(a.distances == b.distances);
    CHECK(a.labels == b.labels);
}

}  // namespace

TEST_CASE("a one-point index always returns that point") {
    RowMatrix X(1, 2);
    X << 3.0, 4.0;
    const auto idx = NeighborIndex::build(X, {9.0}, MetricSpec::euclidean());
    const auto ns = idx.query(Vector::Zero(2), 1);
    REQUIRE(ns.size() == 1);
    CHECK(ns.indices[0] == 0);
    CHECK(ns.distances[0] == 5.0);
    CHECK(ns.labels[0] == 9.0);
    CHECK(idx.query(Vector::Zero(2), 4).size() == 1);
}

TEST_CASE("tree backends return the brute-force neighbours for every k") {
    std::mt19937_64 rng(1);
    const auto X = testing::random_matrix(1000, 10, rng);
    const auto Q = testing::random_matrix(25, 10, rng);
    std::vector<double> y(1000);
    for (auto& v : y) v = std::normal_distribution<double>()(rng);
    for (auto backend : {Backend::kd_tree, Backend::ball_tree, Backend::vp_tree}) {
        IndexOptions opt;
        opt.backend = backend;
        opt.seed = 5;
        const auto tree = NeighborIndex::build(X, y, MetricSpec::euclidean(), opt);
        CHECK(tree.backend() == backend);
        for (Eigen::Index q = 0; q < Q.rows(); ++q) {
            const Vector qv = Q.row(q).transpose();
            std::vector<double> d(1000);
            for (Eigen::Index i = 0; i < 1000; ++i) d[static_cast<std::size_t>(i)] = euclid(X, i, qv);
            const auto oracle = brute(d);
            const auto full = tree.query(qv, 20);
            for (std::size_t k = 1; k <= 20; ++k) {
                const auto ns = tree.query(qv, k);
                REQUIRE(ns.size() == k);
                for (std::size_t r = 0; r < k; ++r) {
                    CHECK(ns.indices[r] == oracle[r].second);
                    CHECK(ns.distances[r] == oracle[r].first);
                }
                CHECK(ns.indices == full.prefix(k).indices);
            }
        }
    }
}

TEST_CASE("kernel-induced trees agree exactly with brute force") {
    std::mt19937_64 rng(2);
    KernelParams gk;
    gk.sigma = 2.0;
    const auto X = testing::random_matrix(600, 4, rng);
    const auto Q = testing::random_matrix(15, 4, rng);
    std::vector<double> y(600, 1.0);
    IndexOptions bo, vo;
    bo.backend = Backend::brute;
    vo.backend = Backend::vp_tree;
    const auto b = NeighborIndex::build(X, y, MetricSpec::kernel_induced(gk), bo);
    const auto v = NeighborIndex::build(X, y, MetricSpec::kernel_induced(gk), vo);
    for (Eigen::Index q = 0; q < Q.rows(); ++q) {
        const Vector qv = Q.row(q).transpose();
        const auto nb = b.query(qv, 15);
        check_same(nb, v.query(qv, 15));
        for (std::size_t r = 0; r < nb.size(); ++r)
            CHECK(nb.distances[r] ==
                  doctest::Approx(kernel_induced_distance(qv, X.row(static_cast<Eigen::Index>(nb.indices[r])).transpose(), gk))
                      .epsilon(1e-10));
    }

    KernelParams lk;
    lk.local_mode = true;
    lk.sigma = 1.5;
    const auto L = random_locals(300, 3, rng);
    const auto LQ = random_locals(10, 3, rng);
    std::vector<double> ly(300, 0.0);
    const auto lb = NeighborIndex::build(L, ly, MetricSpec::kernel_induced(lk), bo);
    const auto lv = NeighborIndex::build(L, ly, MetricSpec::kernel_induced(lk), vo);
    for (const auto& q : LQ) {
        std::vector<double> d(L.size());
        for (std::size_t i = 0; i < L.size(); ++i) d[i] = kernel_induced_distance(q, L[i], lk);
        const auto oracle = brute(d);
        const auto nb = lb.query(q, 12);
        check_same(nb, lv.query(q, 12));
        for (std::size_t r = 0; r < nb.size(); ++r) CHECK(nb.distances[r] == doctest::Approx(oracle[r].first).epsilon(1e-10));
    }
}

TEST_CASE("a Mahalanobis index matches a Euclidean index on transformed points") {
    std::mt19937_64 rng(3);
    const auto X = testing::random_matrix(700, 6, rng);
    const auto Q = testing::random_matrix(10, 6, rng);
    MlkrTransform t;
    t.A = testing::random_matrix(3, 6, rng);
    t.mean = testing::random_vector(6, rng);
    t.scale = Vector::Constant(6, 1.7);
    std::vector<double> y(700, 0.0);
    const auto maha = NeighborIndex::build(X, y, MetricSpec::mahalanobis(t));
    const auto eu = NeighborIndex::build(transform(t, X), y, MetricSpec::euclidean());
    CHECK(maha.dimension() == 3);
    for (Eigen::Index q = 0; q < Q.rows(); ++q) {
        const auto a = maha.query(Q.row(q).transpose(), 10);
        const auto b = eu.query(transform(t, Q.row(q)).row(0).transpose(), 10);
        CHECK(a.indices == b.indices);
        for (std::size_t r = 0; r < a.size(); ++r) CHECK(a.distances[r] == doctest::Approx(b.distances[r]).epsilon(1e-12));
    }
}

TEST_CASE("ties go to the lower training index and self queries return distance zero") {
    RowMatrix X(4, 1);
    X << 1.0, 0.0, 1.0, 0.0;
    for (auto backend : {Backend::brute, Backend::kd_tree, Backend::ball_tree, Backend::vp_tree}) {
        IndexOptions opt;
        opt.backend = backend;
        opt.leaf_size = 1;
        const auto idx = NeighborIndex::build(X, {1, 2, 3, 4}, MetricSpec::euclidean(), opt);
        const auto ns = idx.query(Vector::Zero(1), 4);
        CHECK(ns.indices == std::vector<std::size_t>{1, 3, 0, 2});
        const auto self = idx.query_stored(2, 1);
        CHECK(self.indices[0] == 0);
        CHECK(self.distances[0] == 0.0);
        const auto all = idx.query(Vector::Constant(1, 0.25), 4);
        CHECK(std::is_sorted(all.distances.begin(), all.distances.end()));
        CHECK(all.size() == 4);
    }
}

TEST_CASE("k larger than the index clamps to every point") {
    std::mt19937_64 rng(4);
    const auto X = testing::random_matrix(7, 2, rng);
    const auto idx = NeighborIndex::build(X, std::vector<double>(7, 0.0), MetricSpec::euclidean());
    CHECK(idx.query(Vector::Zero(2), 100).size() == 7);
    const auto batch = idx.query_batch(RowMatrix(testing::random_matrix(3, 2, rng)), 50);
    REQUIRE(batch.size() == 3);
    for (const auto& ns : batch) CHECK(ns.size() == 7);
    CHECK_THROWS_AS(idx.query(Vector::Zero(2), 0), ConfigError);
}

TEST_CASE("index construction errors") {
    std::mt19937_64 rng(5);
    const auto X = testing::random_matrix(5, 2, rng);
    CHECK_THROWS_AS(NeighborIndex::build(RowMatrix(0, 2), {}, MetricSpec::euclidean()), ConfigError);
    CHECK_THROWS_AS(NeighborIndex::build(X, {1.0, 2.0}, MetricSpec::euclidean()), ShapeError);
    MetricSpec bad;
    bad.kind = MetricKind::mahalanobis;
    CHECK_THROWS_AS(NeighborIndex::build(X, std::vector<double>(5, 0.0), bad), ConfigError);
    IndexOptions kd;
    kd.backend = Backend::kd_tree;
    CHECK_THROWS_AS(NeighborIndex::build(X, std::vector<double>(5, 0.0), MetricSpec::kernel_induced({}), kd),
                    ConfigError);
    CHECK_THROWS_AS(NeighborIndex::build(random_locals(3, 2, rng), std::vector<double>(3, 0.0), MetricSpec::euclidean()),
                    ConfigError);
    CHECK_THROWS_AS(parse_backend("octree"), ConfigError);
}

TEST_CASE("automatic backend selection") {
    CHECK(auto_backend(100, 5, MetricKind::euclidean) == Backend::brute);
    CHECK(auto_backend(5000, 5, MetricKind::euclidean) == Backend::kd_tree);
    CHECK(auto_backend(5000, 200, MetricKind::euclidean) == Backend::vp_tree);
    CHECK(auto_backend(5000, 5, MetricKind::kernel_induced) == Backend::vp_tree);
}

TEST_CASE("weighted predictions") {
    CHECK(knn_predict(make_set({1, 2, 3}, {1, 2, 3}), Weighting::uniform) == doctest::Approx(2.0));
    CHECK(knn_predict(make_set({0.0, 0.5, 1.0}, {7, 100, -3}), Weighting::reciprocal_distance) == 7.0);
    CHECK(knn_predict(make_set({0.0, 0.0, 1.0}, {6, 8, -3}), Weighting::reciprocal_squared_distance) == 7.0);
    CHECK(knn_predict(make_set({1, 3}, {0, 10}), Weighting::reciprocal_distance) == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(knn_predict(make_set({1, 2}, {1, 4}), Weighting::reciprocal_squared_distance) ==
          doctest::Approx(1.6).epsilon(1e-15));
    CHECK_THROWS_AS(knn_predict(NeighborSet{}, Weighting::uniform), ShapeError);
    CHECK(parse_weighting(to_string(Weighting::reciprocal_distance)) == Weighting::reciprocal_distance);
    CHECK_THROWS_AS(parse_weighting("gaussian"), ConfigError);
}

TEST_CASE("predictions stay within the neighbour label range") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1e-3);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> d(5), y(5);
        for (auto& x : d) x = u(rng);
        std::sort(d.begin(), d.end());
        for (auto& x : y) x = std::normal_distribution<double>(0.0, 1e6)(rng);
        const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
        for (auto w : {Weighting::uniform, Weighting::reciprocal_distance, Weighting::reciprocal_squared_distance}) {
            const double p = knn_predict(make_set(d, y), w);
            CHECK(p >= *lo);
            CHECK(p <= *hi);
        }
    }
}

TEST_CASE("tune_k on three collinear points matches hand enumeration") {
    RowMatrix X(3, 1);
    X << 0.0, 1.0, 2.0;
    const std::vector<double> y = {0.0, 1.0, 2.0};
    const auto u = tune_k(X, y, MetricSpec::euclidean(), 2, Weighting::uniform);
    REQUIRE(u.loo_mae.size() == 2);
    CHECK(u.loo_mae[0] == doctest::Approx(1.0));
    CHECK(u.loo_mae[1] == doctest::Approx(1.0));
    CHECK(u.k_best == 1);
    const auto r = tune_k(X, y, MetricSpec::euclidean(), 2, Weighting::reciprocal_distance);
    CHECK(r.loo_mae[0] == doctest::Approx(1.0));
    CHECK(r.loo_mae[1] == doctest::Approx(8.0 / 9.0));
    CHECK(r.k_best == 2);
}

TEST_CASE("tune_k equals explicit leave-one-out refits exactly") {
    std::mt19937_64 rng(7);
    const auto X = testing::random_matrix(200, 3, rng);
    std::vector<double> y(200);
    for (Eigen::Index i = 0; i < 200; ++i) y[static_cast<std::size_t>(i)] = std::sin(X(i, 0)) + X(i, 1) * X(i, 2);
    for (auto w : {Weighting::uniform, Weighting::reciprocal_distance}) {
        for (auto backend : {Backend::brute, Backend::kd_tree}) {
            IndexOptions opt;
            opt.backend = backend;
            const auto fast = tune_k(X, y, MetricSpec::euclidean(), 20, w, opt);
            std::vector<double> slow(20, 0.0);
            for (std::size_t i = 0; i < 200; ++i) {
                std::vector<std::size_t> keep;
                for (std::size_t j = 0; j < 200; ++j)
                    if (j != i) keep.push_back(j);
                const auto Xi = std::get<RowMatrix>(select_rows(DescriptorBatch(X), keep));
                std::vector<double> yi;
                for (auto j : keep) yi.push_back(y[j]);
                IndexOptions bo;
                bo.backend = Backend::brute;
                const auto idx = NeighborIndex::build(Xi, yi, MetricSpec::euclidean(), bo);
                const auto ns = idx.query(X.row(static_cast<Eigen::Index>(i)).transpose(), 20);
                for (std::size_t k = 1; k <= 20; ++k) slow[k - 1] += std::abs(knn_predict(ns.prefix(k), w) - y[i]);
            }
            for (auto& s : slow) s /= 200.0;
            CHECK(fast.loo_mae == slow);
            const auto best = std::min_element(slow.begin(), slow.end()) - slow.begin();
            CHECK(fast.k_best == static_cast<std::size_t>(best) + 1);
        }
    }
}

TEST_CASE("tune_k with constant labels picks k = 1") {
    std::mt19937_64 rng(8);
    const auto X = testing::random_matrix(30, 2, rng);
    const auto r = tune_k(X, std::vector<double>(30, 3.0), MetricSpec::euclidean(), 10);
    CHECK(r.k_best == 1);
    for (double m : r.loo_mae) CHECK(m == 0.0);
    CHECK_THROWS_AS(tune_k(X, std::vector<double>(30, 3.0), MetricSpec::euclidean(), 30), ConfigError);
    CHECK_THROWS_AS(tune_k(X, std::vector<double>(30, 3.0), MetricSpec::euclidean(), 0), ConfigError);
}

TEST_CASE("quantiles use linear interpolation between order statistics") {
    const auto ns = make_set({1, 2, 3, 4}, {4, 1, 3, 2});
    const std::vector<double> qs = {0.0, 0.5, 1.0, 0.25};
    const auto v = predict_quantiles(ns, qs);
    CHECK(v[0] == 1.0);
    CHECK(v[1] == doctest::Approx(2.5));
    CHECK(v[2] == 4.0);
    CHECK(v[3] == doctest::Approx(1.75));
    const auto one = predict_quantiles(make_set({1}, {6}), qs);
    for (double x : one) CHECK(x == 6.0);
    const std::vector<double> bad = {1.5};
    CHECK_THROWS_AS(predict_quantiles(ns, bad), ConfigError);
    const std::vector<double> nan = {std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(predict_quantiles(ns, nan), ConfigError);
}

TEST_CASE("quantiles are monotone in the level") {
    std::mt19937_64 rng(9);
    std::vector<double> y(37);
    for (auto& x : y) x = std::normal_distribution<double>()(rng);
    std::vector<double> qs;
    for (int i = 0; i <= 100; ++i) qs.push_back(i / 100.0);
    const auto v = predict_quantiles(make_set(std::vector<double>(37, 1.0), y), qs);
    CHECK(std::is_sorted(v.begin(), v.end()));
}

TEST_CASE("calibration of infinite quantiles is full coverage") {
    const std::vector<double> levels = {0.05, 0.5, 0.95};
    const Matrix Q = Matrix::Constant(4, 3, std::numeric_limits<double>::infinity());
    const std::vector<double> y = {1, 2, 3, 4};
    for (const auto& p : calibration_curve(Q, y, levels)) CHECK(p.empirical == 1.0);
    const Matrix exact = Eigen::Map<const Vector>(y.data(), 4).replicate(1, 3);
    for (const auto& p : calibration_curve(exact, y, levels)) CHECK(p.empirical == 0.0);
    CHECK_THROWS_AS(calibration_curve(Q, std::vector<double>{1, 2}, levels), ShapeError);
}

TEST_CASE("neighbour quantiles are calibrated on additive noise") {
    const auto train = make_additive_noise(10000, 1);
    const auto test = make_additive_noise(5000, 2);
    const auto model = fit_knn(train.X, to_std(train.y), MetricSpec::euclidean(), 100, Weighting::uniform);
    const std::vector<double> levels = {0.05, 0.25, 0.5, 0.75, 0.95};
    const Matrix Q = knn_predict_quantiles(model, test.X, levels);
    const auto curve = calibration_curve(Q, to_std(test.y), levels);
    for (const auto& p : curve) CHECK(std::abs(p.empirical - p.nominal) <= 0.03);
}

TEST_CASE("predictions do not depend on training order") {
    std::mt19937_64 rng(10);
    const auto X = testing::random_matrix(300, 3, rng);
    std::vector<double> y(300);
    for (auto& v : y) v = std::normal_distribution<double>()(rng);
    std::vector<std::size_t> perm(300);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto Xp = std::get<RowMatrix>(select_rows(DescriptorBatch(X), perm));
    std::vector<double> yp;
    for (auto i : perm) yp.push_back(y[i]);
    const auto Q = testing::random_matrix(20, 3, rng);
    const auto a = knn_predict(fit_knn(X, y, MetricSpec::euclidean(), 7), Q);
    const auto b = knn_predict(fit_knn(Xp, yp, MetricSpec::euclidean(), 7), Q);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("kernel-induced distances satisfy the triangle inequality") {
    std::mt19937_64 rng(11);
    KernelParams lk;
    lk.local_mode = true;
    const auto L = random_locals(40, 2, rng);
    const auto idx = NeighborIndex::build(L, std::vector<double>(40, 0.0), MetricSpec::kernel_induced(lk));
    for (std::size_t i = 0; i < 40; ++i) {
        const auto ns = idx.query_stored(i, 40);
        std::vector<double> di(40);
        for (std::size_t r = 0; r < ns.size(); ++r) di[ns.indices[r]] = ns.distances[r];
        for (std::size_t j = 0; j < 40; ++j) {
            const auto nj = idx.query_stored(j, 40);
            for (std::size_t r = 0; r < nj.size(); ++r) CHECK(di[nj.indices[r]] <= di[j] + nj.distances[r] + 1e-9);
        }
    }
}

TEST_CASE("explain reports neighbours and survives a JSON round trip") {
    auto ns = make_set({0.5, 1.0}, {2.0, 4.0});
    ns.indices = {3, 1};
    const std::vector<std::string> ids = {"a", "b", "c", "d"};
    const std::vector<std::string> comps = {"1SA", "2SA", "1SA1W", "3W"};
    const std::vector<double> levels = {0.25, 0.75};
    const auto r = explain(ns, ids, comps, Weighting::reciprocal_distance, levels, "q1");
    CHECK(r.query_id == "q1");
    REQUIRE(r.neighbors.size() == 2);
    CHECK(r.neighbors[0].id == "d");
    CHECK(r.neighbors[0].composition == "3W");
    CHECK(r.neighbors[1].id == "b");
    CHECK(r.prediction == doctest::Approx((2.0 / 0.5 + 4.0) / 3.0));
    CHECK(r.quantiles == std::vector<double>{2.5, 3.5});
    CHECK(NeighborReport::from_json(r.to_json()) == r);
}

TEST_CASE("saved models reload with identical predictions for every metric") {
    std::mt19937_64 rng(12);
    const auto X = testing::random_matrix(80, 4, rng);
    const auto Q = testing::random_matrix(10, 4, rng);
    std::vector<double> y(80);
    for (auto& v : y) v = std::normal_distribution<double>()(rng);
    MlkrTransform t;
    t.A = testing::random_matrix(2, 4, rng);
    t.mean = testing::random_vector(4, rng);
    t.scale = Vector::Constant(4, 0.5);
    KernelParams gk;
    gk.sigma = 3.0;
    testing::TempDir dir("knn");
    int n = 0;
    for (const auto& metric : {MetricSpec::euclidean(), MetricSpec::mahalanobis(t), MetricSpec::kernel_induced(gk)}) {
        const auto model = fit_knn(X, y, metric, 5, Weighting::reciprocal_distance);
        const auto path = dir.path() / ("m" + std::to_string(n++) + ".bin");
        save_knn_model(path, model);
        const auto back = load_knn_model(path);
        CHECK(back.k == 5);
        CHECK(back.index.backend() == model.index.backend());
        CHECK((knn_predict(back, Q).array() == knn_predict(model, Q).array()).all());
    }
    KernelParams lk;
    lk.local_mode = true;
    const auto L = random_locals(30, 3, rng);
    const auto model = fit_knn(L, std::vector<double>(y.begin(), y.begin() + 30), MetricSpec::kernel_induced(lk), 3);
    save_knn_model(dir.path() / "local.bin", model);
    const auto back = load_knn_model(dir.path() / "local.bin");
    const auto LQ = random_locals(5, 3, rng);
    CHECK((knn_predict(back, LQ).array() == knn_predict(model, LQ).array()).all());
}
