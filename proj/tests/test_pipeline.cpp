#include "mlknn/error.hpp"
#include "mlknn/pipeline.hpp"
#include "support.hpp"

#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

using namespace mlknn;

namespace {

ExperimentConfig quick_config(std::vector<std::string> models) {
    ExperimentConfig c;
    c.models = std::move(models);
    c.hyper.sigma_grid = {0.5, 2.0};
    c.hyper.lambda_grid = {1e-6, 1e-3};
    c.hyper.mlkr.p_out = 2;
    c.hyper.mlkr.max_iter = 15;
    c.hyper.k_max = 10;
    c.seed = 17;
    return c;
}

FeaturizedDataset smooth(std::size_t n, std::uint64_t seed) {
    const auto s = make_smooth_1d(n, seed);
    return dataset_from_matrix(s.X, s.y);
}

// Items in size classes 1..5 with an extensive label of ten per atom.
FeaturizedDataset size_classes(std::size_t per_class, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.05);
    const std::size_t n = 5 * per_class;
    RowMatrix X(static_cast<Eigen::Index>(n), 2);
    Vector y(static_cast<Eigen::Index>(n));
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = 1 + i % 5;
        X(static_cast<Eigen::Index>(i), 0) = static_cast<double>(a) + g(rng);
        X(static_cast<Eigen::Index>(i), 1) = g(rng);
        y[static_cast<Eigen::Index>(i)] = 10.0 * static_cast<double>(a);
        counts.push_back(a);
    }
    auto d = dataset_from_matrix(X, y);
    d.atom_counts = counts;
    for (std::size_t i = 0; i < n; ++i) d.compositions[i] = std::to_string(counts[i]) + "W";
    return d;
}

std::vector<ExperimentRecord> without_timing(std::vector<ExperimentRecord> r) {
    for (auto& x : r) x.train_cpu_s = x.predict_cpu_s = x.tune_cpu_s = 0.0;
    return r;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct EnvGuard {
    explicit EnvGuard(const char* value) {
        if (value) setenv("MLKNN_WORKERS", value, 1);
        else unsetenv("MLKNN_WORKERS");
    }
    ~EnvGuard() { unsetenv("MLKNN_WORKERS"); }
};

}  // namespace

TEST_CASE("cross-validation yields one record per fold") {
    const auto data = smooth(500, 1);
    auto cfg = quick_config({"knn_euclidean"});
    const auto r = run_cv_learning_curve(data, cfg);
    REQUIRE(r.records.size() == 5);
    std::set<std::size_t> folds;
    for (const auto& rec : r.records) {
        folds.insert(rec.fold);
        CHECK(rec.experiment == "cv");
        CHECK(rec.train_size == 100);
        CHECK(rec.n_test == 100);
        CHECK(rec.mae >= 0.0);
        CHECK(rec.train_cpu_s >= 0.0);
        CHECK(rec.hyperparameters.find("k=") != std::string::npos);
    }
    CHECK(folds.size() == 5);
    CHECK(r.audits.size() == 5);
    CHECK_FALSE(r.calibration.empty());
    CHECK_FALSE(r.reports.empty());
}

TEST_CASE("every model reproduces constant labels") {
    std::mt19937_64 rng(2);
    const auto X = testing::random_matrix(100, 3, rng);
    auto cfg = quick_config({"knn_euclidean", "knn_kernel_induced", "knn_mlkr", "kernel_regression_mlkr"});
    cfg.train_sizes = {40};
    for (const auto& rec : run_cv_learning_curve(dataset_from_matrix(X, Vector::Constant(100, 3.5)), cfg).records)
        CHECK(rec.mae <= 1e-12);
    cfg.models = {"krr"};
    for (const auto& rec : run_cv_learning_curve(dataset_from_matrix(X, Vector::Zero(100)), cfg).records)
        CHECK(rec.mae == 0.0);
}

TEST_CASE("learning curves are reproducible and independent of the worker count") {
    const auto data = smooth(300, 3);
    auto cfg = quick_config({"krr", "knn_euclidean", "knn_mlkr"});
    cfg.train_sizes = {50, 120};
    std::vector<ExperimentRecord> a, b, c;
    {
        EnvGuard env("1");
        a = run_cv_learning_curve(data, cfg).records;
        b = run_cv_learning_curve(data, cfg).records;
    }
    {
        EnvGuard env("3");
        c = run_cv_learning_curve(data, cfg).records;
    }
    CHECK(without_timing(a) == without_timing(b));
    CHECK(without_timing(a) == without_timing(c));

    testing::TempDir dir("repro");
    write_results_csv(dir.path() / "a.csv", without_timing(a));
    write_results_csv(dir.path() / "b.csv", without_timing(b));
    CHECK(read_file(dir.path() / "a.csv") == read_file(dir.path() / "b.csv"));
}

TEST_CASE("training subsets are nested across sizes and test folds stay fixed") {
    const auto data = smooth(250, 4);
    auto cfg = quick_config({"knn_euclidean"});
    cfg.train_sizes = {30, 90};
    const auto r = run_cv_learning_curve(data, cfg);
    for (std::size_t f = 0; f < 5; ++f) {
        const JobAudit* small = nullptr;
        const JobAudit* large = nullptr;
        for (const auto& a : r.audits)
            if (a.fold == f) (a.train_size == 30 ? small : large) = &a;
        REQUIRE(small);
        REQUIRE(large);
        CHECK(small->test == large->test);
        const auto& s = small->stages.front().second;
        const std::set<std::size_t> l(large->stages.front().second.begin(), large->stages.front().second.end());
        for (auto i : s) CHECK(l.count(i) == 1);
    }
}

TEST_CASE("no training stage touches the test fold") {
    const auto data = smooth(200, 5);
    auto cfg = quick_config({"krr", "knn_kernel_induced", "knn_mlkr"});
    cfg.train_sizes = {80};
    for (const auto& a : run_cv_learning_curve(data, cfg).audits) {
        const std::set<std::size_t> test(a.test.begin(), a.test.end());
        std::set<std::string> names;
        for (const auto& [name, idx] : a.stages) {
            names.insert(name);
            for (auto i : idx) CHECK(test.count(i) == 0);
        }
        CHECK(names.count("krr_grid_search") == 1);
        CHECK(names.count("mlkr_fit") == 1);
        CHECK(names.count("k_tuning") >= 1);
    }
    JobAudit leaky;
    leaky.test = {1, 2, 3};
    leaky.stages = {{"train", {4, 5}}, {"k_tuning", {5, 3}}};
    try {
        leaky.verify();
        FAIL("leak not detected");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("k_tuning") != std::string::npos);
    }
}

TEST_CASE("infeasible train sizes name the largest feasible size") {
    const auto data = smooth(500, 6);
    auto cfg = quick_config({"knn_euclidean"});
    cfg.train_sizes = {401};
    try {
        run_cv_learning_curve(data, cfg);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("400") != std::string::npos);
    }
}

TEST_CASE("extrapolation rejects empty and total holdouts") {
    const auto data = size_classes(20, 7);
    auto cfg = quick_config({"knn_euclidean"});
    cfg.train_sizes = {20};
    cfg.holdout = "9SA";
    CHECK_THROWS_AS(run_extrapolation(data, cfg), ConfigError);
    auto one = data;
    for (auto& c : one.atom_counts) c = 3;
    cfg.holdout = "largest";
    CHECK_THROWS_AS(run_extrapolation(one, cfg), ConfigError);
}

TEST_CASE("extrapolation trains outside the holdout and tests on all of it") {
    const auto data = size_classes(30, 8);
    auto cfg = quick_config({"knn_euclidean", "krr"});
    cfg.train_sizes = {60, 90};
    const auto hold = holdout_indices(data, "largest");
    CHECK(hold.size() == 30);
    CHECK(holdout_indices(data, "2W").size() == 30);
    const auto r = run_extrapolation(data, cfg);
    const std::set<std::size_t> h(hold.begin(), hold.end());
    for (const auto& a : r.audits)
        for (const auto& [name, idx] : a.stages)
            for (auto i : idx) CHECK(h.count(i) == 0);
    for (const auto& rec : r.records) {
        if (rec.experiment == "extrapolation") CHECK(rec.n_test == 30);
        if (rec.experiment == "interpolation") CHECK(rec.n_test == 24);
    }
    for (const auto& size : cfg.train_sizes) {
        double ex = -1, in = -1;
        for (const auto& rec : r.records)
            if (rec.model == "knn_euclidean" && rec.train_size == size)
                (rec.experiment == "extrapolation" ? ex : in) = rec.mae;
        CHECK(ex > in);
    }
}

TEST_CASE("k sweep shapes") {
    const auto data = smooth(600, 9);
    auto cfg = quick_config({"knn_euclidean"});
    cfg.hyper.weighting = Weighting::uniform;
    const std::size_t one_k[] = {1}, one_size[] = {100};
    CHECK(run_k_sweep(data, cfg, one_k, one_size).k_sweep.size() == 1);

    std::vector<std::size_t> ks;
    for (std::size_t k = 1; k <= 30; ++k) ks.push_back(k);
    const std::size_t size[] = {400};
    const auto r = run_k_sweep(data, cfg, ks, size);
    REQUIRE(r.k_sweep.size() == 30);
    std::size_t best = 0;
    for (std::size_t i = 1; i < 30; ++i)
        if (r.k_sweep[i].mae < r.k_sweep[best].mae) best = i;
    CHECK(r.k_sweep[best].k > 1);
    CHECK(r.k_sweep[best].k < 30);

    std::mt19937_64 rng(10);
    const auto flat = dataset_from_matrix(testing::random_matrix(200, 2, rng), Vector::Constant(200, -2.0));
    const std::size_t few[] = {1, 5, 9}, sz[] = {50, 100};
    for (const auto& row : run_k_sweep(flat, cfg, few, sz).k_sweep) CHECK(row.mae == 0.0);
}

TEST_CASE("timing measures CPU rather than wall time") {
    CHECK(capture_timing([] {}) < 1e-3);
    CHECK(cpu_clock_resolution() > 0.0);
    const double sleeping = capture_timing([] { std::this_thread::sleep_for(std::chrono::milliseconds(200)); });
    CHECK(sleeping < 0.05);
    std::mt19937_64 rng(11);
    auto factor = [&](Eigen::Index n) {
        const RowMatrix X = testing::random_matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(n), rng);
        const Matrix A = X * X.transpose() + Matrix::Identity(n, n) * static_cast<double>(n);
        double best = 1e300;
        for (int rep = 0; rep < 3; ++rep)
            best = std::min(best, capture_timing([&] {
                                Eigen::LLT<Matrix> llt(A);
                                CHECK(llt.info() == Eigen::Success);
                            }));
        return best;
    };
    const double t1 = factor(400), t2 = factor(800);
    CHECK(t2 / t1 > 4.0);
    CHECK(capture_timing([] {}, CpuClock::thread) >= 0.0);
}

TEST_CASE("results round trip through CSV and summaries use the sample deviation") {
    std::vector<ExperimentRecord> recs;
    for (int f = 0; f < 5; ++f)
        recs.push_back({"cv", "knn_mlkr", 100, static_cast<std::size_t>(f), 20, 1.0 + f + 1.0 / 3.0, 0.1 * f, 1e-300,
                        std::nextafter(2.0, 3.0), "p_out=2;k=5;weighting=reciprocal_distance;backend=brute"});
    testing::TempDir dir("csv");
    write_results_csv(dir.path() / "r.csv", recs);
    CHECK(load_results_csv(dir.path() / "r.csv") == recs);
    const auto s = summarize(recs);
    REQUIRE(s.size() == 1);
    CHECK(s[0]["n_folds"] == 5);
    CHECK(s[0]["mae_mean"].get<double>() == doctest::Approx(3.0 + 1.0 / 3.0));
    CHECK(s[0]["mae_std"].get<double>() == doctest::Approx(std::sqrt(2.5)));
}

TEST_CASE("emitting results writes every plot file and rejects unwritable paths") {
    RunResult r;
    r.records.push_back({"cv", "knn_euclidean", 50, 0, 10, 0.25, 0.01, 0.02, 0.03, "k=3"});
    testing::TempDir dir("emit");
    emit_results(r, dir.path());
    const auto csv = read_file(dir.path() / "results.csv");
    std::istringstream lines(csv);
    std::string header, row, extra;
    std::getline(lines, header);
    std::getline(lines, row);
    CHECK_FALSE(std::getline(lines, extra));
    CHECK(header == "experiment,model,train_size,fold,n_test,mae,train_cpu_s,predict_cpu_s,tune_cpu_s,hyperparameters");
    CHECK(std::count(row.begin(), row.end(), ',') == 9);
    CHECK(std::filesystem::exists(dir.path() / "summary.json"));
    CHECK(std::filesystem::exists(dir.path() / "plotdata" / "learning_curve.csv"));
    CHECK(std::filesystem::exists(dir.path() / "plotdata" / "timing.csv"));

    std::ofstream(dir.path() / "blocker") << "x";
    CHECK_THROWS_AS(emit_results(r, dir.path() / "blocker" / "out"), IOError);
    CHECK_THROWS_AS(emit_results(RunResult{}, dir.path()), ConfigError);
}

TEST_CASE("experiment configs round trip and reject unknown keys") {
    auto cfg = quick_config({"krr", "knn_mlkr"});
    cfg.train_sizes = {10, 20};
    cfg.hyper.sigma = 2.0;
    cfg.dataset.synthetic = "clusters";
    const auto back = ExperimentConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());

    auto j = cfg.to_json();
    j["hyper"]["k_maximum"] = 3;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    j = cfg.to_json();
    j["models"] = {"svm"};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);

    testing::TempDir dir("cfg");
    std::ofstream(dir.path() / "bad.json") << "{ not json";
    CHECK_THROWS_AS(ExperimentConfig::load(dir.path() / "bad.json"), ConfigError);
    std::ofstream(dir.path() / "good.json") << cfg.to_json().dump();
    CHECK(ExperimentConfig::load(dir.path() / "good.json").to_json() == cfg.to_json());

    ExperimentConfig empty;
    empty.models.clear();
    CHECK_THROWS_AS(empty.validate(), ConfigError);
}

TEST_CASE("worker count comes from the environment") {
    {
        EnvGuard env(nullptr);
        CHECK(worker_count() == 1);
    }
    {
        EnvGuard env("4");
        CHECK(worker_count() == 4);
    }
    {
        EnvGuard env("many");
        CHECK_THROWS_AS(worker_count(), ConfigError);
    }
}

TEST_CASE("synthetic cluster datasets support delta learning") {
    ExperimentConfig cfg;
    cfg.dataset.synthetic = "clusters";
    cfg.dataset.clusters.max_acid = 2;
    cfg.dataset.clusters.max_water = 1;
    cfg.dataset.clusters.per_composition = 3;
    cfg.descriptor.lmb.n_radial = 4;
    cfg.descriptor.lmb.n_angular = 2;
    cfg.delta_learning = true;
    const auto d = load_dataset(cfg);
    CHECK(d.size() == 12);
    REQUIRE(d.low_level_labels.has_value());
    CHECK(d.has_local());
    cfg.delta_learning = false;
    const auto direct = load_dataset(cfg);
    CHECK_FALSE(direct.low_level_labels.has_value());
    for (std::size_t i = 0; i < d.size(); ++i)
        CHECK(d.labels[i] + (*d.low_level_labels)[i] == doctest::Approx(direct.labels[i]));
    CHECK(holdout_indices(d, "2SA1W").size() == 3);
}

TEST_CASE("saved models predict and explain like the in-memory pipeline") {
    const auto data = smooth(120, 12);
    auto cfg = quick_config({"krr", "knn_euclidean", "knn_mlkr", "kernel_regression_mlkr"});
    cfg.hyper.tune_k = false;
    cfg.hyper.k_default = 4;
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < data.size(); ++i) (i < 100 ? train : test).push_back(i);
    testing::TempDir dir("models");
    const auto sidecars = train_models(data, train, cfg, dir.path());
    CHECK(sidecars.size() == 4);
    JobAudit audit;
    const auto outcomes = run_models(data, train, test, cfg, 0, CpuClock::process, audit);
    const auto sub = data.select(test);
    const auto knn = predict_with_model(dir.path() / "knn_euclidean.model", sub);
    CHECK((knn - outcomes[1].predictions).cwiseAbs().maxCoeff() <= 1e-12);
    for (const auto& m : cfg.models)
        CHECK(predict_with_model(dir.path() / (m + ".model"), sub).size() == static_cast<Eigen::Index>(test.size()));

    const std::vector<double> levels = {0.5};
    const auto rep = explain_with_model(dir.path() / "knn_euclidean.model", sub, 0, levels);
    CHECK(rep.neighbors.size() == 4);
    const auto side = nlohmann::json::parse(read_file(dir.path() / "knn_euclidean.json"));
    const auto ids = side.at("train_ids").get<std::vector<std::string>>();
    for (const auto& n : rep.neighbors) CHECK(std::find(ids.begin(), ids.end(), n.id) != ids.end());
    CHECK(rep.prediction == doctest::Approx(knn[0]));
    CHECK_THROWS_AS(explain_with_model(dir.path() / "knn_euclidean.model", sub, 999, levels), ConfigError);
}

TEST_CASE("k tuning per model stays on a capped subsample") {
    const auto data = smooth(300, 13);
    auto cfg = quick_config({"krr", "knn_euclidean", "knn_mlkr"});
    cfg.hyper.k_tune_cap = 100;
    const auto rows = tune_k_models(data, cfg);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].model == "knn_euclidean");
    CHECK(rows[0].result.loo_mae.size() == 10);
    cfg.models = {"krr"};
    CHECK_THROWS_AS(tune_k_models(data, cfg), ConfigError);
}
