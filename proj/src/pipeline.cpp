#include "mlknn/pipeline.hpp"

#include "mlknn/archive.hpp"
#include "mlknn/error.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace mlknn {

namespace {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool is_knn_model(const std::string& name) {
    return name == "knn_euclidean" || name == "knn_kernel_induced" || name == "knn_mlkr";
}

RowMatrix global_rows(const FeaturizedDataset& data, std::span<const std::size_t> idx) {
    RowMatrix out(static_cast<Eigen::Index>(idx.size()), data.global.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        out.row(static_cast<Eigen::Index>(r)) = data.global.row(static_cast<Eigen::Index>(idx[r]));
    return out;
}

DescriptorBatch kernel_batch(const FeaturizedDataset& data, std::span<const std::size_t> idx, bool local) {
    if (!local) return global_rows(data, idx);
    std::vector<LocalDescriptor> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(data.local[i]);
    return out;
}

std::vector<std::size_t> pick(std::span<const std::size_t> idx, std::span<const std::size_t> positions) {
    std::vector<std::size_t> out;
    out.reserve(positions.size());
    for (auto p : positions) out.push_back(idx[p]);
    return out;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

double target(const FeaturizedDataset& data, std::size_t i) {
    return data.labels[i] + (data.low_level_labels ? (*data.low_level_labels)[i] : 0.0);
}

double mean_absolute_error(const FeaturizedDataset& data, std::span<const std::size_t> test, const Vector& pred,
                           std::size_t offset = 0) {
    double sum = 0.0;
    for (std::size_t q = 0; q < test.size(); ++q)
        sum += std::abs(pred[static_cast<Eigen::Index>(offset + q)] - target(data, test[q]));
    return sum / static_cast<double>(test.size());
}

// Runs count jobs on MLKNN_WORKERS threads. With several workers each job is
// single-threaded and timed on its own thread clock.
template <class Job>
void run_parallel(std::size_t count, Job&& job) {
    const std::size_t workers = std::min(worker_count(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i, CpuClock::process);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            omp_set_num_threads(1);
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    job(i, CpuClock::thread);
                } catch (...) {
                    std::lock_guard lock(mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

json cluster_options_json(const ClusterOptions& c) {
    return {{"max_acid", c.max_acid}, {"max_water", c.max_water}, {"per_composition", c.per_composition}, {"noise", c.noise}};
}

ClusterOptions cluster_options_from(const json& j) {
    ClusterOptions c;
    c.max_acid = j.value("max_acid", c.max_acid);
    c.max_water = j.value("max_water", c.max_water);
    c.per_composition = j.value("per_composition", c.per_composition);
    c.noise = j.value("noise", c.noise);
    return c;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

// Lazily fitted pieces shared by the models of one job.
class JobContext {
public:
    JobContext(const FeaturizedDataset& data, std::span<const std::size_t> train, std::span<const std::size_t> test,
               const ExperimentConfig& config, std::uint64_t seed, CpuClock clock, JobAudit& audit)
        : data_(data), train_(train), test_(test), hp_(config.hyper), seed_(seed), clock_(clock),
          audit_(audit), use_local_(config.hyper.local_kernel && data.has_local()) {
        y_train_.resize(train.size());
        for (std::size_t r = 0; r < train.size(); ++r) y_train_[r] = data.labels[train[r]];
        options_.backend = hp_.backend;
        options_.seed = mix_seed(seed, 11);
    }

    struct KnnSetup {
        DescriptorBatch points;
        DescriptorBatch queries;
        MetricSpec metric;
        double train_cpu_s = 0.0;
        double tune_cpu_s = 0.0;
        std::string hyperparameters;
    };

    const std::vector<double>& y_train() const { return y_train_; }
    IndexOptions index_options() const { return options_; }
    CpuClock clock() const { return clock_; }

    const GridSearchResult& grid(double& tune_cpu_s) {
        if (!grid_) {
            grid_time_ = capture_timing([&] { grid_ = search_grid(); }, clock_);
        }
        tune_cpu_s += grid_time_;
        return *grid_;
    }

    const MlkrTransform& mlkr(double& train_cpu_s) {
        if (!transform_) {
            mlkr_time_ = capture_timing(
                [&] {
                    const std::size_t cap = hp_.mlkr.max_train_points;
                    const auto sub = train_.size() > cap ? subsample(train_, cap, mix_seed(seed_, 2))
                                                         : std::vector<std::size_t>(train_.begin(), train_.end());
                    audit_.stages.emplace_back("mlkr_fit", sub);
                    MlkrConfig mc = hp_.mlkr;
                    mc.seed = mix_seed(seed_, 3);
                    mc.p_out = std::min<std::size_t>(mc.p_out, static_cast<std::size_t>(data_.global.cols()));
                    Vector y(static_cast<Eigen::Index>(sub.size()));
                    for (std::size_t r = 0; r < sub.size(); ++r) y[static_cast<Eigen::Index>(r)] = data_.labels[sub[r]];
                    transform_ = mlkr_fit(global_rows(data_, sub), y, mc);
                },
                clock_);
        }
        train_cpu_s += mlkr_time_;
        return *transform_;
    }

    DescriptorBatch kernel_train() const { return kernel_batch(data_, train_, use_local_); }
    DescriptorBatch kernel_test() const { return kernel_batch(data_, test_, use_local_); }

    KernelParams kernel_params(double sigma) const {
        KernelParams kp;
        kp.sigma = sigma;
        kp.local_mode = use_local_;
        kp.normalize = hp_.normalize_kernel;
        return kp;
    }

    KnnSetup knn_setup(const std::string& name) {
        KnnSetup s;
        if (name == "knn_euclidean") {
            s.points = global_rows(data_, train_);
            s.queries = global_rows(data_, test_);
            s.metric = MetricSpec::euclidean();
        } else if (name == "knn_kernel_induced") {
            const auto& g = grid(s.tune_cpu_s);
            s.points = kernel_train();
            s.queries = kernel_test();
            s.metric = MetricSpec::kernel_induced(kernel_params(g.sigma));
            s.hyperparameters = "sigma=" + fmt(g.sigma) + ";";
        } else if (name == "knn_mlkr") {
            const auto& t = mlkr(s.train_cpu_s);
            s.points = global_rows(data_, train_);
            s.queries = global_rows(data_, test_);
            s.metric = MetricSpec::mahalanobis(t);
            s.hyperparameters = "p_out=" + std::to_string(t.p_out()) + ";";
        } else {
            throw ConfigError("'" + name + "' is not a k-NN model");
        }
        return s;
    }

    std::size_t choose_k(const KnnSetup& s, double& tune_cpu_s) {
        if (!hp_.tune_k) return hp_.k_default;
        std::size_t k = 1;
        tune_cpu_s += capture_timing(
            [&] {
                if (const auto r = loo_tuning(s)) k = r->k_best;
            },
            clock_);
        return k;
    }

    std::optional<TuneKResult> loo_tuning(const KnnSetup& s) {
        const auto all = iota_vec(train_.size());
        const auto positions = train_.size() > hp_.k_tune_cap ? subsample(all, hp_.k_tune_cap, mix_seed(seed_, 4)) : all;
        audit_.stages.emplace_back("k_tuning", pick(train_, positions));
        const std::size_t k_max = std::min(hp_.k_max, positions.size() - 1);
        if (k_max == 0) return std::nullopt;
        std::vector<double> y;
        for (auto p : positions) y.push_back(y_train_[p]);
        return tune_k(select_rows(s.points, positions), y, s.metric, k_max, hp_.weighting, options_);
    }

private:
    GridSearchResult search_grid() {
        if (hp_.sigma && hp_.lambda) return {*hp_.sigma, *hp_.lambda, 0.0, {}};
        const std::size_t n = train_.size();
        if (n < 2) throw ConfigError("KRR grid search needs at least 2 training items");
        std::size_t n_tr, n_val;
        if (n >= hp_.krr_grid_train + hp_.krr_grid_val) {
            n_tr = hp_.krr_grid_train;
            n_val = hp_.krr_grid_val;
        } else {
            n_val = std::max<std::size_t>(1, n / 5);
            n_tr = n - n_val;
        }
        const auto perm = seeded_permutation(n, mix_seed(seed_, 1));
        std::vector<std::size_t> tr, val;
        for (std::size_t r = 0; r < n_tr; ++r) tr.push_back(train_[perm[r]]);
        for (std::size_t r = n_tr; r < n_tr + n_val; ++r) val.push_back(train_[perm[r]]);
        std::vector<std::size_t> both = tr;
        both.insert(both.end(), val.begin(), val.end());
        audit_.stages.emplace_back("krr_grid_search", both);
        Vector ytr(static_cast<Eigen::Index>(tr.size())), yval(static_cast<Eigen::Index>(val.size()));
        for (std::size_t r = 0; r < tr.size(); ++r) ytr[static_cast<Eigen::Index>(r)] = data_.labels[tr[r]];
        for (std::size_t r = 0; r < val.size(); ++r) yval[static_cast<Eigen::Index>(r)] = data_.labels[val[r]];
        const auto sigmas = hp_.sigma ? std::vector<double>{*hp_.sigma}
                                      : (hp_.sigma_grid.empty() ? default_sigma_grid(use_local_) : hp_.sigma_grid);
        const auto lambdas = hp_.lambda ? std::vector<double>{*hp_.lambda}
                                        : (hp_.lambda_grid.empty() ? default_lambda_grid() : hp_.lambda_grid);
        return krr_grid_search(kernel_batch(data_, tr, use_local_), ytr, kernel_batch(data_, val, use_local_), yval,
                               sigmas, lambdas, kernel_params(1.0));
    }

    const FeaturizedDataset& data_;
    std::span<const std::size_t> train_;
    std::span<const std::size_t> test_;
    const HyperConfig& hp_;
    std::uint64_t seed_;
    CpuClock clock_;
    JobAudit& audit_;
    bool use_local_;
    std::vector<double> y_train_;
    IndexOptions options_;
    std::optional<GridSearchResult> grid_;
    double grid_time_ = 0.0;
    std::optional<MlkrTransform> transform_;
    double mlkr_time_ = 0.0;
};

Vector add_low_level(const FeaturizedDataset& data, std::span<const std::size_t> test, Vector pred) {
    if (data.low_level_labels)
        for (std::size_t q = 0; q < test.size(); ++q) pred[static_cast<Eigen::Index>(q)] += (*data.low_level_labels)[test[q]];
    return pred;
}

void finalize_labels(LabeledSet& set, bool delta) {
    if (delta) {
        if (set.kind == LabelKind::delta) return;
        if (!set.low_level_labels) throw ConfigError("delta learning needs low-level labels");
        set.labels = make_delta_labels(set.labels, *set.low_level_labels);
        set.kind = LabelKind::delta;
    } else {
        if (set.kind == LabelKind::delta) throw ConfigError("dataset holds delta labels but delta learning is off");
        set.low_level_labels.reset();
    }
}

FeaturizedDataset featurize_set(const LabeledSet& set, DescriptorParams params) {
    if (params.kind != DescriptorKind::LMB && params.max_atoms_per_element.empty())
        params.max_atoms_per_element = padding_for(set.structures);
    return featurize(set, params);
}

NeighborSet to_dataset_indices(const NeighborSet& ns, std::span<const std::size_t> train) {
    NeighborSet out = ns;
    for (auto& i : out.indices) i = train[i];
    return out;
}

}  // namespace

json HyperConfig::to_json() const {
    json j = {{"krr_grid_train", krr_grid_train},
              {"krr_grid_val", krr_grid_val},
              {"sigma_grid", sigma_grid},
              {"lambda_grid", lambda_grid},
              {"local_kernel", local_kernel},
              {"normalize_kernel", normalize_kernel},
              {"tune_k", tune_k},
              {"k_default", k_default},
              {"k_max", k_max},
              {"k_tune_cap", k_tune_cap},
              {"weighting", mlknn::to_string(weighting)},
              {"backend", mlknn::to_string(backend)},
              {"mlkr", mlkr.to_json()},
              {"quantile_levels", quantile_levels},
              {"n_reports", n_reports}};
    if (sigma) j["sigma"] = *sigma;
    if (lambda) j["lambda"] = *lambda;
    return j;
}

HyperConfig HyperConfig::from_json(const json& j) {
    check_keys(j,
               {"krr_grid_train", "krr_grid_val", "sigma_grid", "lambda_grid", "sigma", "lambda", "local_kernel",
                "normalize_kernel", "tune_k", "k_default", "k_max", "k_tune_cap", "weighting", "backend", "mlkr",
                "quantile_levels", "n_reports"},
               "hyper");
    HyperConfig h;
    h.krr_grid_train = j.value("krr_grid_train", h.krr_grid_train);
    h.krr_grid_val = j.value("krr_grid_val", h.krr_grid_val);
    h.sigma_grid = j.value("sigma_grid", h.sigma_grid);
    h.lambda_grid = j.value("lambda_grid", h.lambda_grid);
    if (j.contains("sigma")) h.sigma = j.at("sigma").get<double>();
    if (j.contains("lambda")) h.lambda = j.at("lambda").get<double>();
    h.local_kernel = j.value("local_kernel", h.local_kernel);
    h.normalize_kernel = j.value("normalize_kernel", h.normalize_kernel);
    h.tune_k = j.value("tune_k", h.tune_k);
    h.k_default = j.value("k_default", h.k_default);
    h.k_max = j.value("k_max", h.k_max);
    h.k_tune_cap = j.value("k_tune_cap", h.k_tune_cap);
    if (j.contains("weighting")) h.weighting = parse_weighting(j.at("weighting").get<std::string>());
    if (j.contains("backend")) h.backend = parse_backend(j.at("backend").get<std::string>());
    if (j.contains("mlkr")) h.mlkr = MlkrConfig::from_json(j.at("mlkr"));
    h.quantile_levels = j.value("quantile_levels", h.quantile_levels);
    h.n_reports = j.value("n_reports", h.n_reports);
    return h;
}

void ExperimentConfig::validate() const {
    if (models.empty()) throw ConfigError("at least one model is required");
    for (const auto& m : models)
        if (std::find(kModelNames.begin(), kModelNames.end(), m) == kModelNames.end())
            throw ConfigError("unknown model '" + m + "'");
    if (train_sizes.empty()) throw ConfigError("at least one train size is required");
    for (auto s : train_sizes)
        if (s < 2) throw ConfigError("train sizes must be at least 2");
    if (k_cv < 2) throw ConfigError("k_cv must be at least 2");
    if (!(interpolation_fraction >= 0.0 && interpolation_fraction < 1.0))
        throw ConfigError("interpolation_fraction must lie in [0, 1)");
    for (auto k : k_values)
        if (k == 0) throw ConfigError("k values must be at least 1");
    if (!is_knn_model(k_sweep_model)) throw ConfigError("k_sweep_model must be a k-NN model");
    if (hyper.k_default == 0 || hyper.k_max == 0) throw ConfigError("k_default and k_max must be at least 1");
    if (hyper.k_tune_cap < 2) throw ConfigError("k_tune_cap must be at least 2");
    for (double q : hyper.quantile_levels)
        if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile levels must lie in [0, 1]");
    if (hyper.sigma && !(*hyper.sigma > 0)) throw ConfigError("sigma must be positive");
    if (hyper.lambda && !(*hyper.lambda >= 0)) throw ConfigError("lambda must be nonnegative");
    hyper.mlkr.validate();
    descriptor.validate();
}

json ExperimentConfig::to_json() const {
    json ds = {{"format", dataset.format == XyzFormat::plain ? "plain" : "qm9_extended"},
               {"unit_factor", dataset.unit_factor},
               {"atom_reference", dataset.atom_reference},
               {"composition_regex", dataset.composition_regex},
               {"synthetic", dataset.synthetic},
               {"synthetic_n", dataset.synthetic_n},
               {"clusters", cluster_options_json(dataset.clusters)}};
    std::vector<std::string> xyz;
    for (const auto& p : dataset.xyz) xyz.push_back(p.string());
    ds["xyz"] = xyz;
    if (dataset.property_index) ds["property_index"] = *dataset.property_index;
    if (!dataset.labels_csv.empty()) ds["labels_csv"] = dataset.labels_csv.string();
    if (!dataset.featurized.empty()) ds["featurized"] = dataset.featurized.string();
    return {{"dataset", ds},
            {"descriptor", descriptor.to_json()},
            {"models", models},
            {"train_sizes", train_sizes},
            {"k_cv", k_cv},
            {"seed", seed},
            {"delta_learning", delta_learning},
            {"holdout", holdout},
            {"interpolation_fraction", interpolation_fraction},
            {"k_values", k_values},
            {"k_sweep_model", k_sweep_model},
            {"output_dir", output_dir.string()},
            {"hyper", hyper.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    check_keys(j,
               {"dataset", "descriptor", "models", "train_sizes", "k_cv", "seed", "delta_learning", "holdout",
                "interpolation_fraction", "k_values", "k_sweep_model", "output_dir", "hyper"},
               "config");
    ExperimentConfig c;
    try {
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            check_keys(d,
                       {"xyz", "format", "property_index", "unit_factor", "atom_reference", "composition_regex",
                        "labels_csv", "featurized", "synthetic", "synthetic_n", "clusters"},
                       "dataset");
            if (d.contains("xyz")) {
                if (d.at("xyz").is_string()) c.dataset.xyz = {d.at("xyz").get<std::string>()};
                else
                    for (const auto& p : d.at("xyz")) c.dataset.xyz.emplace_back(p.get<std::string>());
            }
            const auto format = d.value("format", std::string("plain"));
            if (format == "plain") c.dataset.format = XyzFormat::plain;
            else if (format == "qm9_extended") c.dataset.format = XyzFormat::qm9_extended;
            else throw ConfigError("unknown XYZ format '" + format + "'");
            if (d.contains("property_index")) c.dataset.property_index = d.at("property_index").get<std::size_t>();
            c.dataset.unit_factor = d.value("unit_factor", c.dataset.unit_factor);
            c.dataset.atom_reference = d.value("atom_reference", c.dataset.atom_reference);
            c.dataset.composition_regex = d.value("composition_regex", c.dataset.composition_regex);
            c.dataset.labels_csv = d.value("labels_csv", std::string());
            c.dataset.featurized = d.value("featurized", std::string());
            c.dataset.synthetic = d.value("synthetic", std::string());
            c.dataset.synthetic_n = d.value("synthetic_n", c.dataset.synthetic_n);
            if (d.contains("clusters")) c.dataset.clusters = cluster_options_from(d.at("clusters"));
        }
        if (j.contains("descriptor")) c.descriptor = DescriptorParams::from_json(j.at("descriptor"));
        c.models = j.value("models", c.models);
        c.train_sizes = j.value("train_sizes", c.train_sizes);
        c.k_cv = j.value("k_cv", c.k_cv);
        c.seed = j.value("seed", c.seed);
        c.delta_learning = j.value("delta_learning", c.delta_learning);
        c.holdout = j.value("holdout", c.holdout);
        c.interpolation_fraction = j.value("interpolation_fraction", c.interpolation_fraction);
        c.k_values = j.value("k_values", c.k_values);
        c.k_sweep_model = j.value("k_sweep_model", c.k_sweep_model);
        c.output_dir = j.value("output_dir", c.output_dir.string());
        if (j.contains("hyper")) c.hyper = HyperConfig::from_json(j.at("hyper"));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

void JobAudit::verify() const {
    const std::set<std::size_t> held(test.begin(), test.end());
    for (const auto& [stage, indices] : stages)
        for (auto i : indices)
            if (held.count(i))
                throw Error("leakage: test item " + std::to_string(i) + " used in stage '" + stage + "' (" + experiment +
                            ", fold " + std::to_string(fold) + ", size " + std::to_string(train_size) + ")");
}

FeaturizedDataset dataset_from_matrix(const RowMatrix& X, const Vector& y) {
    if (X.rows() != y.size()) throw ShapeError("feature rows differ from label count");
    FeaturizedDataset d;
    d.global = X;
    d.labels.assign(y.data(), y.data() + y.size());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        d.ids.push_back("item_" + std::to_string(i));
        d.compositions.emplace_back();
        d.atom_counts.push_back(0);
    }
    return d;
}

FeaturizedDataset load_dataset(const ExperimentConfig& config) {
    const auto& d = config.dataset;
    if (!d.featurized.empty()) {
        auto data = load_featurized(d.featurized);
        if (config.delta_learning != data.low_level_labels.has_value())
            throw ConfigError(config.delta_learning ? "featurized dataset has no low-level labels for delta learning"
                                                    : "featurized dataset holds delta labels but delta learning is off");
        return data;
    }
    if (d.synthetic == "clusters") {
        auto set = make_cluster_set(d.clusters, config.seed);
        finalize_labels(set, config.delta_learning);
        return featurize_set(set, config.descriptor);
    }
    if (!d.synthetic.empty()) {
        if (config.delta_learning) throw ConfigError("synthetic '" + d.synthetic + "' data has no low-level labels");
        SyntheticRegression s;
        if (d.synthetic == "mahalanobis") s = make_mahalanobis_regression(d.synthetic_n, config.seed, mix_seed(config.seed, 1));
        else if (d.synthetic == "heteroscedastic") s = make_heteroscedastic(d.synthetic_n, config.seed);
        else if (d.synthetic == "smooth_1d") s = make_smooth_1d(d.synthetic_n, config.seed);
        else throw ConfigError("unknown synthetic dataset '" + d.synthetic + "'");
        return dataset_from_matrix(s.X, s.y);
    }
    if (d.xyz.empty()) throw ConfigError("no dataset configured (xyz, featurized or synthetic)");
    XyzOptions opts;
    opts.format = d.format;
    opts.property_index = d.property_index;
    opts.unit_factor = d.labels_csv.empty() ? d.unit_factor : 1.0;
    if (d.atom_reference) opts.atom_reference = qm9_atom_references();
    opts.composition_regex = d.composition_regex;
    std::vector<Structure> structures;
    std::vector<double> labels;
    bool all_labeled = true;
    for (const auto& path : d.xyz) {
        for (auto& frame : parse_xyz(path, opts)) {
            if (frame.label) labels.push_back(*frame.label);
            else all_labeled = false;
            structures.push_back(std::move(frame.structure));
        }
    }
    LabeledSet set;
    if (!d.labels_csv.empty()) {
        const auto rows = load_label_csv(d.labels_csv);
        set = attach_labels(std::move(structures), rows, config.delta_learning, d.unit_factor);
    } else {
        if (!all_labeled) throw ConfigError("XYZ frames carry no labels; set property_index or labels_csv");
        if (config.delta_learning) throw ConfigError("delta learning needs labels_csv with low- and high-level labels");
        set.structures = std::move(structures);
        set.labels = std::move(labels);
    }
    return featurize_set(set, config.descriptor);
}

std::size_t worker_count() {
    const char* env = std::getenv("MLKNN_WORKERS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("MLKNN_WORKERS must be a positive integer");
    return static_cast<std::size_t>(v);
}

std::vector<ModelOutcome> run_models(const FeaturizedDataset& data, std::span<const std::size_t> train,
                                     std::span<const std::size_t> test, const ExperimentConfig& config,
                                     std::uint64_t seed, CpuClock clock, JobAudit& audit) {
    if (train.empty() || test.empty()) throw ConfigError("training and test sets must be nonempty");
    audit.test.assign(test.begin(), test.end());
    audit.stages.emplace_back("train", std::vector<std::size_t>(train.begin(), train.end()));
    JobContext ctx(data, train, test, config, seed, clock, audit);
    const auto& hp = config.hyper;
    const Vector y_train = Eigen::Map<const Vector>(ctx.y_train().data(), static_cast<Eigen::Index>(train.size()));
    std::vector<ModelOutcome> outcomes;
    for (const auto& name : config.models) {
        ModelOutcome out;
        if (name == "krr") {
            const auto& g = ctx.grid(out.tune_cpu_s);
            KrrModel model;
            out.train_cpu_s = capture_timing([&] { model = fit_krr(ctx.kernel_train(), y_train, ctx.kernel_params(g.sigma), g.lambda); }, clock);
            const auto queries = ctx.kernel_test();
            out.predict_cpu_s = capture_timing([&] { out.predictions = krr_predict(model, queries); }, clock);
            out.hyperparameters = "sigma=" + fmt(g.sigma) + ";lambda=" + fmt(model.lambda);
        } else if (name == "kernel_regression_mlkr") {
            const auto& t = ctx.mlkr(out.train_cpu_s);
            const RowMatrix Xtr = global_rows(data, train), Xte = global_rows(data, test);
            RowMatrix Z;
            out.train_cpu_s += capture_timing([&] { Z = transform(t, Xtr); }, clock);
            out.predict_cpu_s = capture_timing([&] { out.predictions = kernel_regression_predict(Z, y_train, transform(t, Xte)); }, clock);
            out.hyperparameters = "p_out=" + std::to_string(t.p_out());
        } else {
            auto setup = ctx.knn_setup(name);
            out.train_cpu_s = setup.train_cpu_s;
            out.tune_cpu_s = setup.tune_cpu_s;
            const std::size_t k = ctx.choose_k(setup, out.tune_cpu_s);
            KnnModel model;
            out.train_cpu_s += capture_timing(
                [&] { model = fit_knn(setup.points, ctx.y_train(), setup.metric, k, hp.weighting, ctx.index_options()); }, clock);
            out.predict_cpu_s = capture_timing(
                [&] {
                    out.neighbors = knn_neighbors(model, setup.queries);
                    out.predictions.resize(static_cast<Eigen::Index>(test.size()));
                    for (std::size_t q = 0; q < test.size(); ++q)
                        out.predictions[static_cast<Eigen::Index>(q)] = knn_predict(out.neighbors[q], hp.weighting);
                },
                clock);
            out.quantiles.resize(static_cast<Eigen::Index>(test.size()), static_cast<Eigen::Index>(hp.quantile_levels.size()));
            for (std::size_t q = 0; q < test.size(); ++q) {
                const auto v = predict_quantiles(out.neighbors[q], hp.quantile_levels);
                const double low = data.low_level_labels ? (*data.low_level_labels)[test[q]] : 0.0;
                for (std::size_t c = 0; c < v.size(); ++c)
                    out.quantiles(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(c)) = v[c] + low;
            }
            out.hyperparameters = setup.hyperparameters + "k=" + std::to_string(k) + ";weighting=" + to_string(hp.weighting) +
                                  ";backend=" + to_string(model.index.backend());
        }
        out.predictions = add_low_level(data, test, std::move(out.predictions));
        outcomes.push_back(std::move(out));
    }
    return outcomes;
}

namespace {

struct JobResult {
    std::vector<ExperimentRecord> records;
    JobAudit audit;
    std::vector<CalibrationRow> calibration;
    json reports = json::array();
};

void collect_job(const FeaturizedDataset& data, const ExperimentConfig& config, const std::string& experiment,
                 std::size_t train_size, std::size_t fold, std::span<const std::size_t> train,
                 std::span<const std::size_t> test, const std::vector<ModelOutcome>& outcomes, bool with_reports,
                 JobResult& job) {
    const auto& hp = config.hyper;
    for (std::size_t m = 0; m < config.models.size(); ++m) {
        const auto& out = outcomes[m];
        const auto& name = config.models[m];
        job.records.push_back({experiment, name, train_size, fold, test.size(), mean_absolute_error(data, test, out.predictions),
                               out.train_cpu_s, out.predict_cpu_s, out.tune_cpu_s, out.hyperparameters});
        if (!is_knn_model(name)) continue;
        std::vector<double> truth;
        for (auto i : test) truth.push_back(target(data, i));
        for (const auto& c : calibration_curve(out.quantiles, truth, hp.quantile_levels))
            job.calibration.push_back({name, train_size, fold, c.nominal, c.empirical});
        if (!with_reports) continue;
        for (std::size_t q = 0; q < std::min(hp.n_reports, test.size()); ++q) {
            auto report = explain(to_dataset_indices(out.neighbors[q], train), data.ids, data.compositions, hp.weighting,
                                  hp.quantile_levels, data.ids[test[q]]);
            json r = report.to_json();
            r["model"] = name;
            r["train_size"] = train_size;
            r["fold"] = fold;
            r["true_label"] = target(data, test[q]);
            r["prediction_target_scale"] = out.predictions[static_cast<Eigen::Index>(q)];
            job.reports.push_back(std::move(r));
        }
    }
}

RunResult merge(std::vector<JobResult>& jobs) {
    RunResult result;
    for (auto& j : jobs) {
        result.records.insert(result.records.end(), j.records.begin(), j.records.end());
        result.calibration.insert(result.calibration.end(), j.calibration.begin(), j.calibration.end());
        result.audits.push_back(std::move(j.audit));
        for (auto& r : j.reports) result.reports.push_back(std::move(r));
    }
    return result;
}

}  // namespace

RunResult run_cv_learning_curve(const FeaturizedDataset& data, const ExperimentConfig& config) {
    config.validate();
    const auto folds = make_folds(data.size(), config.k_cv, config.seed);
    std::size_t feasible = data.size();
    for (std::size_t f = 0; f < config.k_cv; ++f) feasible = std::min(feasible, data.size() - folds.fold_sizes()[f]);
    for (auto m : config.train_sizes)
        if (m > feasible)
            throw ConfigError("train size " + std::to_string(m) + " exceeds the maximum feasible size " +
                              std::to_string(feasible));
    const std::size_t largest = *std::max_element(config.train_sizes.begin(), config.train_sizes.end());
    const std::size_t n_sizes = config.train_sizes.size();
    std::vector<JobResult> jobs(config.k_cv * n_sizes);
    run_parallel(jobs.size(), [&](std::size_t j, CpuClock clock) {
        const std::size_t fold = j / n_sizes;
        const std::size_t size = config.train_sizes[j % n_sizes];
        const auto test = folds.test_indices(fold);
        const auto pool = folds.train_indices(fold);
        const auto train = subsample(pool, size, mix_seed(config.seed, 100 + fold));
        auto& job = jobs[j];
        job.audit.experiment = "cv";
        job.audit.train_size = size;
        job.audit.fold = fold;
        const auto outcomes = run_models(data, train, test, config, mix_seed(config.seed, fold, size), clock, job.audit);
        job.audit.verify();
        collect_job(data, config, "cv", size, fold, train, test, outcomes, fold == 0 && size == largest, job);
    });
    return merge(jobs);
}

std::vector<std::size_t> holdout_indices(const FeaturizedDataset& data, const std::string& filter) {
    std::vector<std::size_t> out;
    if (filter == "largest") {
        if (data.atom_counts.empty()) return out;
        const auto largest = *std::max_element(data.atom_counts.begin(), data.atom_counts.end());
        if (largest == 0) return out;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.atom_counts[i] == largest) out.push_back(i);
    } else {
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.compositions[i] == filter) out.push_back(i);
    }
    return out;
}

RunResult run_extrapolation(const FeaturizedDataset& data, const ExperimentConfig& config) {
    config.validate();
    const auto hold = holdout_indices(data, config.holdout);
    if (hold.empty()) throw ConfigError("holdout filter '" + config.holdout + "' matches no structure");
    if (hold.size() == data.size()) throw ConfigError("holdout filter '" + config.holdout + "' leaves no training data");
    std::vector<std::size_t> remainder;
    {
        std::size_t h = 0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (h < hold.size() && hold[h] == i) ++h;
            else remainder.push_back(i);
        }
    }
    std::vector<std::size_t> interp, pool;
    {
        const auto perm = seeded_permutation(remainder.size(), mix_seed(config.seed, 7));
        auto n_int = static_cast<std::size_t>(std::llround(config.interpolation_fraction * static_cast<double>(remainder.size())));
        if (config.interpolation_fraction > 0.0) n_int = std::max<std::size_t>(n_int, 1);
        if (n_int >= remainder.size()) throw ConfigError("interpolation test set leaves no training data");
        for (std::size_t r = 0; r < remainder.size(); ++r) (r < n_int ? interp : pool).push_back(remainder[perm[r]]);
        std::sort(interp.begin(), interp.end());
        std::sort(pool.begin(), pool.end());
    }
    for (auto m : config.train_sizes)
        if (m > pool.size())
            throw ConfigError("train size " + std::to_string(m) + " exceeds the maximum feasible size " +
                              std::to_string(pool.size()));
    std::vector<std::size_t> test = hold;
    test.insert(test.end(), interp.begin(), interp.end());
    const std::size_t largest = *std::max_element(config.train_sizes.begin(), config.train_sizes.end());

    std::vector<JobResult> jobs(config.train_sizes.size());
    run_parallel(jobs.size(), [&](std::size_t j, CpuClock clock) {
        const std::size_t size = config.train_sizes[j];
        const auto train = subsample(pool, size, mix_seed(config.seed, 8));
        auto& job = jobs[j];
        job.audit.experiment = "extrapolation";
        job.audit.train_size = size;
        const auto outcomes = run_models(data, train, test, config, mix_seed(config.seed, 9, size), clock, job.audit);
        job.audit.verify();
        for (std::size_t m = 0; m < config.models.size(); ++m) {
            const auto& out = outcomes[m];
            job.records.push_back({"extrapolation", config.models[m], size, 0, hold.size(),
                                   mean_absolute_error(data, hold, out.predictions), out.train_cpu_s, out.predict_cpu_s,
                                   out.tune_cpu_s, out.hyperparameters});
            if (!interp.empty())
                job.records.push_back({"interpolation", config.models[m], size, 0, interp.size(),
                                       mean_absolute_error(data, interp, out.predictions, hold.size()), out.train_cpu_s,
                                       out.predict_cpu_s, out.tune_cpu_s, out.hyperparameters});
            if (size != largest || !is_knn_model(config.models[m])) continue;
            for (std::size_t q = 0; q < std::min(config.hyper.n_reports, hold.size()); ++q) {
                auto report = explain(to_dataset_indices(out.neighbors[q], train), data.ids, data.compositions,
                                      config.hyper.weighting, config.hyper.quantile_levels, data.ids[hold[q]]);
                json r = report.to_json();
                r["model"] = config.models[m];
                r["train_size"] = size;
                r["experiment"] = "extrapolation";
                r["true_label"] = target(data, hold[q]);
                r["prediction_target_scale"] = out.predictions[static_cast<Eigen::Index>(q)];
                job.reports.push_back(std::move(r));
            }
        }
    });
    return merge(jobs);
}

RunResult run_k_sweep(const FeaturizedDataset& data, const ExperimentConfig& config, std::span<const std::size_t> k_values,
                      std::span<const std::size_t> train_sizes) {
    config.validate();
    if (k_values.empty() || train_sizes.empty()) throw ConfigError("k sweep needs k values and train sizes");
    for (auto k : k_values)
        if (k == 0) throw ConfigError("k values must be at least 1");
    const auto folds = make_folds(data.size(), config.k_cv, config.seed);
    const auto test = folds.test_indices(0);
    const auto pool = folds.train_indices(0);
    for (auto m : train_sizes)
        if (m > pool.size() || m < 1)
            throw ConfigError("train size " + std::to_string(m) + " exceeds the maximum feasible size " +
                              std::to_string(pool.size()));
    const std::size_t k_top = *std::max_element(k_values.begin(), k_values.end());
    std::vector<JobResult> jobs(train_sizes.size());
    std::vector<std::vector<KSweepRow>> rows(train_sizes.size());
    run_parallel(jobs.size(), [&](std::size_t j, CpuClock clock) {
        const std::size_t size = train_sizes[j];
        const auto train = subsample(pool, size, mix_seed(config.seed, 100));
        auto& job = jobs[j];
        job.audit.experiment = "k_sweep";
        job.audit.train_size = size;
        job.audit.test.assign(test.begin(), test.end());
        job.audit.stages.emplace_back("train", train);
        JobContext ctx(data, train, test, config, mix_seed(config.seed, 0, size), clock, job.audit);
        auto setup = ctx.knn_setup(config.k_sweep_model);
        const auto index = NeighborIndex::build(setup.points, ctx.y_train(), setup.metric, ctx.index_options());
        const auto sets = index.query_batch(setup.queries, std::min(k_top, size));
        for (auto k : k_values) {
            Vector pred(static_cast<Eigen::Index>(test.size()));
            for (std::size_t q = 0; q < test.size(); ++q)
                pred[static_cast<Eigen::Index>(q)] = knn_predict(sets[q].prefix(k), config.hyper.weighting);
            pred = add_low_level(data, test, std::move(pred));
            rows[j].push_back({config.k_sweep_model, k, size, mean_absolute_error(data, test, pred)});
        }
        job.audit.verify();
    });
    RunResult result = merge(jobs);
    for (auto& r : rows) result.k_sweep.insert(result.k_sweep.end(), r.begin(), r.end());
    return result;
}

nlohmann::json train_models(const FeaturizedDataset& data, std::span<const std::size_t> train,
                            const ExperimentConfig& config, const std::filesystem::path& outdir) {
    config.validate();
    if (train.size() < 2) throw ConfigError("training needs at least 2 items");
    std::error_code ec;
    std::filesystem::create_directories(outdir, ec);
    if (ec) throw IOError("cannot create " + outdir.string() + ": " + ec.message());
    JobAudit audit;
    JobContext ctx(data, train, {}, config, mix_seed(config.seed, 12), CpuClock::process, audit);
    const auto& hp = config.hyper;
    const Vector y_train = Eigen::Map<const Vector>(ctx.y_train().data(), static_cast<Eigen::Index>(train.size()));
    std::vector<std::string> ids, comps;
    for (auto i : train) {
        ids.push_back(data.ids[i]);
        comps.push_back(data.compositions[i]);
    }
    json sidecars = json::array();
    for (const auto& name : config.models) {
        double tune = 0.0, fit = 0.0;
        json hyper;
        const auto path = outdir / (name + ".model");
        if (name == "krr") {
            const auto& g = ctx.grid(tune);
            KrrModel model;
            fit = capture_timing([&] { model = fit_krr(ctx.kernel_train(), y_train, ctx.kernel_params(g.sigma), g.lambda); });
            save_krr_model(path, model);
            hyper = {{"sigma", g.sigma}, {"lambda", model.lambda}};
        } else if (name == "kernel_regression_mlkr") {
            const auto& t = ctx.mlkr(fit);
            Archive ar;
            ar.meta["model"] = "kernel_regression_mlkr";
            put_transform(ar, "transform", t);
            fit += capture_timing([&] { ar.arrays["train_z"] = transform(t, global_rows(data, train)); });
            ar.arrays["labels"] = as_column(y_train);
            save_archive(path, ar);
            hyper = {{"p_out", t.p_out()}};
        } else {
            auto setup = ctx.knn_setup(name);
            fit = setup.train_cpu_s;
            tune = setup.tune_cpu_s;
            const std::size_t k = ctx.choose_k(setup, tune);
            KnnModel model;
            fit += capture_timing([&] { model = fit_knn(setup.points, ctx.y_train(), setup.metric, k, hp.weighting, ctx.index_options()); });
            save_knn_model(path, model);
            hyper = {{"k", k}, {"weighting", to_string(hp.weighting)}, {"backend", to_string(model.index.backend())}};
            if (setup.metric.kind == MetricKind::kernel_induced) hyper["sigma"] = setup.metric.kernel.sigma;
        }
        json side = {{"model", name},
                     {"path", path.string()},
                     {"hyperparameters", hyper},
                     {"train_cpu_s", fit},
                     {"tune_cpu_s", tune},
                     {"delta_learning", data.low_level_labels.has_value()},
                     {"descriptor", data.params.to_json()},
                     {"train_ids", ids},
                     {"train_compositions", comps}};
        std::ofstream out(outdir / (name + ".json"));
        if (!out) throw IOError("cannot write sidecar for " + name);
        out << side.dump(2) << '\n';
        sidecars.push_back(std::move(side));
    }
    return sidecars;
}

namespace {

DescriptorBatch queries_like(const DescriptorBatch& stored, const FeaturizedDataset& data) {
    if (std::holds_alternative<RowMatrix>(stored)) return data.global;
    if (!data.has_local()) throw ConfigError("model expects local descriptors; featurize with LMB");
    return data.local;
}

}  // namespace

Vector predict_with_model(const std::filesystem::path& model, const FeaturizedDataset& data) {
    const Archive ar = load_archive(model);
    const auto kind = ar.meta.value("model", std::string());
    Vector pred;
    if (kind == "krr") {
        const auto m = load_krr_model(model);
        pred = krr_predict(m, queries_like(m.train_descriptors, data));
    } else if (kind == "knn") {
        const auto m = load_knn_model(model);
        DescriptorBatch q = queries_like(m.index.points(), data);
        pred = knn_predict(m, q);
    } else if (kind == "kernel_regression_mlkr") {
        const auto t = get_transform(ar, "transform");
        pred = kernel_regression_predict(ar.array("train_z"), column_to_vector(ar.array("labels")), transform(t, data.global));
    } else {
        throw IOError(model.string() + " is not a saved model");
    }
    if (data.low_level_labels)
        for (std::size_t i = 0; i < data.size(); ++i) pred[static_cast<Eigen::Index>(i)] += (*data.low_level_labels)[i];
    return pred;
}

NeighborReport explain_with_model(const std::filesystem::path& model, const FeaturizedDataset& data, std::size_t item,
                                  std::span<const double> quantile_levels) {
    if (item >= data.size()) throw ConfigError("item " + std::to_string(item) + " outside the dataset");
    const auto m = load_knn_model(model);
    auto sidecar_path = model;
    sidecar_path.replace_extension(".json");
    std::ifstream in(sidecar_path);
    if (!in) throw IOError("missing sidecar " + sidecar_path.string());
    json side;
    in >> side;
    const auto ids = side.at("train_ids").get<std::vector<std::string>>();
    const auto comps = side.at("train_compositions").get<std::vector<std::string>>();
    if (ids.size() != m.index.size()) throw IOError("sidecar does not match model " + model.string());
    const std::vector<std::size_t> one{item};
    const auto q = select_rows(queries_like(m.index.points(), data), one);
    const auto sets = m.index.query_batch(q, m.k);
    return explain(sets.front(), ids, comps, m.weighting, quantile_levels, data.ids[item]);
}

std::vector<KTuningRow> tune_k_models(const FeaturizedDataset& data, const ExperimentConfig& config) {
    config.validate();
    const auto all = iota_vec(data.size());
    JobAudit audit;
    JobContext ctx(data, all, {}, config, mix_seed(config.seed, 13), CpuClock::process, audit);
    std::vector<KTuningRow> out;
    for (const auto& name : config.models) {
        if (!is_knn_model(name)) continue;
        const auto setup = ctx.knn_setup(name);
        const auto r = ctx.loo_tuning(setup);
        if (!r) throw ConfigError("k tuning needs at least 2 items");
        out.push_back({name, *r});
    }
    if (out.empty()) throw ConfigError("no k-NN model selected for k tuning");
    return out;
}

void write_results_csv(const std::filesystem::path& path, std::span<const ExperimentRecord> records) {
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << "experiment,model,train_size,fold,n_test,mae,train_cpu_s,predict_cpu_s,tune_cpu_s,hyperparameters\n";
    for (const auto& r : records)
        out << r.experiment << ',' << r.model << ',' << r.train_size << ',' << r.fold << ',' << r.n_test << ',' << fmt(r.mae)
            << ',' << fmt(r.train_cpu_s) << ',' << fmt(r.predict_cpu_s) << ',' << fmt(r.tune_cpu_s) << ','
            << r.hyperparameters << '\n';
    if (!out) throw IOError("failed writing " + path.string());
}

std::vector<ExperimentRecord> load_results_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "experiment,model,train_size,fold,n_test,mae,train_cpu_s,predict_cpu_s,tune_cpu_s,hyperparameters")
        throw ParseError(path.string() + ": unexpected results header", 1);
    std::vector<ExperimentRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 10) throw ParseError(path.string() + ": expected 10 fields", lineno);
        try {
            out.push_back({f[0], f[1], std::stoull(f[2]), std::stoull(f[3]), std::stoull(f[4]), std::stod(f[5]),
                           std::stod(f[6]), std::stod(f[7]), std::stod(f[8]), f[9]});
        } catch (const std::logic_error&) {
            throw ParseError(path.string() + ": malformed number", lineno);
        }
    }
    return out;
}

json summarize(std::span<const ExperimentRecord> records) {
    struct Acc {
        std::vector<double> mae, train, predict, tune;
    };
    std::map<std::tuple<std::string, std::string, std::size_t>, Acc> groups;
    for (const auto& r : records) {
        auto& a = groups[{r.experiment, r.model, r.train_size}];
        a.mae.push_back(r.mae);
        a.train.push_back(r.train_cpu_s);
        a.predict.push_back(r.predict_cpu_s);
        a.tune.push_back(r.tune_cpu_s);
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    auto stdev = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double m = mean(v);
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    json out = json::array();
    for (const auto& [key, a] : groups)
        out.push_back({{"experiment", std::get<0>(key)},
                       {"model", std::get<1>(key)},
                       {"train_size", std::get<2>(key)},
                       {"n_folds", a.mae.size()},
                       {"mae_mean", mean(a.mae)},
                       {"mae_std", stdev(a.mae)},
                       {"train_cpu_s_mean", mean(a.train)},
                       {"predict_cpu_s_mean", mean(a.predict)},
                       {"tune_cpu_s_mean", mean(a.tune)}});
    return out;
}

void emit_results(const RunResult& result, const std::filesystem::path& outdir) {
    if (result.records.empty() && result.k_sweep.empty()) throw ConfigError("no results to emit");
    const auto plot = outdir / "plotdata";
    std::error_code ec;
    std::filesystem::create_directories(plot, ec);
    if (ec) throw IOError("cannot create " + plot.string() + ": " + ec.message());
    auto open = [](const std::filesystem::path& p) {
        std::ofstream out(p);
        if (!out) throw IOError("cannot write " + p.string());
        return out;
    };
    if (!result.records.empty()) {
        write_results_csv(outdir / "results.csv", result.records);
        const json summary = summarize(result.records);
        open(outdir / "summary.json") << summary.dump(2) << '\n';

        auto lc = open(plot / "learning_curve.csv");
        lc << "experiment,model,train_size,n_folds,mae_mean,mae_std\n";
        auto tm = open(plot / "timing.csv");
        tm << "experiment,model,train_size,train_cpu_s_mean,predict_cpu_s_mean,tune_cpu_s_mean\n";
        for (const auto& s : summary) {
            lc << s["experiment"].get<std::string>() << ',' << s["model"].get<std::string>() << ','
               << s["train_size"].get<std::size_t>() << ',' << s["n_folds"].get<std::size_t>() << ','
               << fmt(s["mae_mean"].get<double>()) << ',' << fmt(s["mae_std"].get<double>()) << '\n';
            tm << s["experiment"].get<std::string>() << ',' << s["model"].get<std::string>() << ','
               << s["train_size"].get<std::size_t>() << ',' << fmt(s["train_cpu_s_mean"].get<double>()) << ','
               << fmt(s["predict_cpu_s_mean"].get<double>()) << ',' << fmt(s["tune_cpu_s_mean"].get<double>()) << '\n';
        }
        std::map<std::pair<std::string, std::size_t>, std::pair<double, double>> extra;
        bool any = false;
        for (const auto& r : result.records) {
            if (r.experiment == "extrapolation") {
                extra[{r.model, r.train_size}].first = r.mae;
                any = true;
            } else if (r.experiment == "interpolation") {
                extra[{r.model, r.train_size}].second = r.mae;
            }
        }
        if (any) {
            auto ex = open(plot / "extrapolation.csv");
            ex << "model,train_size,extrapolation_mae,interpolation_mae\n";
            for (const auto& [key, v] : extra)
                ex << key.first << ',' << key.second << ',' << fmt(v.first) << ',' << fmt(v.second) << '\n';
        }
    }
    if (!result.calibration.empty()) {
        auto cal = open(plot / "calibration.csv");
        cal << "model,train_size,fold,nominal,empirical\n";
        for (const auto& c : result.calibration)
            cal << c.model << ',' << c.train_size << ',' << c.fold << ',' << fmt(c.nominal) << ',' << fmt(c.empirical) << '\n';
    }
    if (!result.k_sweep.empty()) {
        auto ks = open(plot / "k_sweep.csv");
        ks << "model,k,train_size,mae\n";
        for (const auto& r : result.k_sweep) ks << r.model << ',' << r.k << ',' << r.train_size << ',' << fmt(r.mae) << '\n';
    }
    if (!result.reports.empty()) open(plot / "neighbor_reports.json") << result.reports.dump(2) << '\n';
}

}  // namespace mlknn
