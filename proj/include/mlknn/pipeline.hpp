#pragma once

#include "mlknn/dataset.hpp"
#include "mlknn/descriptors.hpp"
#include "mlknn/knn.hpp"
#include "mlknn/krr.hpp"
#include "mlknn/mlkr.hpp"
#include "mlknn/synthetic.hpp"
#include "mlknn/timing.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mlknn {

/// Model names accepted in ExperimentConfig::models.
inline const std::vector<std::string> kModelNames = {"krr", "knn_euclidean", "knn_kernel_induced", "knn_mlkr",
                                                     "kernel_regression_mlkr"};

struct DatasetConfig {
    std::vector<std::filesystem::path> xyz;       // one or more XYZ files
    XyzFormat format = XyzFormat::plain;
    std::optional<std::size_t> property_index;    // label token in the comment line
    double unit_factor = 1.0;                     // applied to labels from XYZ or CSV
    bool atom_reference = false;                  // subtract QM9 atomic reference energies
    std::string composition_regex = R"((\d+)(SA|W))";
    std::filesystem::path labels_csv;             // id,label_low,label_high
    std::filesystem::path featurized;             // stem written by `featurize`; skips parsing
    /// "", "clusters", "mahalanobis", "heteroscedastic" or "smooth_1d".
    std::string synthetic;
    std::size_t synthetic_n = 1000;
    ClusterOptions clusters;
};

struct HyperConfig {
    std::size_t krr_grid_train = 4000;
    std::size_t krr_grid_val = 1000;
    std::vector<double> sigma_grid;   // empty: default grid for the kernel kind
    std::vector<double> lambda_grid;  // empty: default grid
    std::optional<double> sigma;      // fixed values skip the grid search
    std::optional<double> lambda;
    bool local_kernel = true;         // sum of atomic kernels when local descriptors exist
    bool normalize_kernel = false;

    bool tune_k = true;
    std::size_t k_default = 10;
    std::size_t k_max = 30;
    std::size_t k_tune_cap = 5000;
    Weighting weighting = Weighting::reciprocal_distance;
    Backend backend = Backend::automatic;

    MlkrConfig mlkr;

    std::vector<double> quantile_levels = {0.05, 0.25, 0.5, 0.75, 0.95};
    std::size_t n_reports = 5;

    nlohmann::json to_json() const;
    static HyperConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
    DatasetConfig dataset;
    DescriptorParams descriptor;
    std::vector<std::string> models = {"krr", "knn_euclidean"};
    std::vector<std::size_t> train_sizes = {100};
    std::size_t k_cv = 5;
    std::uint64_t seed = 0;
    bool delta_learning = false;
    /// Extrapolation holdout: "largest" (structures with the most atoms) or a composition tag.
    std::string holdout = "largest";
    double interpolation_fraction = 0.2;  // share of the remainder held out as an interpolation test
    std::vector<std::size_t> k_values = {1, 2, 3, 5, 8, 10, 12, 15, 20, 30};
    std::string k_sweep_model = "knn_euclidean";
    std::filesystem::path output_dir = "results";
    HyperConfig hyper;

    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);
};

struct ExperimentRecord {
    std::string experiment;  // cv, extrapolation or interpolation
    std::string model;
    std::size_t train_size = 0;
    std::size_t fold = 0;
    std::size_t n_test = 0;
    double mae = 0.0;        // kcal/mol, on the reconstructed target under delta learning
    double train_cpu_s = 0.0;
    double predict_cpu_s = 0.0;
    double tune_cpu_s = 0.0;
    std::string hyperparameters;  // "key=value;..."

    bool operator==(const ExperimentRecord&) const = default;
};

/// Training-side index sets of one job, checked against its test indices.
struct JobAudit {
    std::string experiment;
    std::size_t train_size = 0;
    std::size_t fold = 0;
    std::vector<std::size_t> test;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> stages;  // (stage name, dataset indices)

    /// Throws Error naming the stage that shares an index with the test set.
    void verify() const;
};

struct CalibrationRow {
    std::string model;
    std::size_t train_size = 0;
    std::size_t fold = 0;
    double nominal = 0.0;
    double empirical = 0.0;
};

struct KSweepRow {
    std::string model;
    std::size_t k = 0;
    std::size_t train_size = 0;
    double mae = 0.0;
};

struct RunResult {
    std::vector<ExperimentRecord> records;
    std::vector<JobAudit> audits;
    std::vector<CalibrationRow> calibration;
    std::vector<KSweepRow> k_sweep;
    nlohmann::json reports = nlohmann::json::array();  // neighbour reports of k-NN models
};

/// Loads or generates the configured dataset and featurizes it. Under delta
/// learning the labels become residuals and the low-level labels are kept.
FeaturizedDataset load_dataset(const ExperimentConfig& config);

/// Wraps a plain feature matrix as a dataset with ids "item_<i>".
FeaturizedDataset dataset_from_matrix(const RowMatrix& X, const Vector& y);

/// Worker count from MLKNN_WORKERS (default 1).
std::size_t worker_count();

struct ModelOutcome {
    Vector predictions;      // on the target scale (low-level value added back under delta learning)
    Matrix quantiles;        // k-NN models only; row per test item
    std::vector<NeighborSet> neighbors;  // k-NN models only
    double train_cpu_s = 0.0;
    double predict_cpu_s = 0.0;
    double tune_cpu_s = 0.0;
    std::string hyperparameters;
};

/// Trains every configured model on `train` and predicts `test`, recording
/// each training-side index set in `audit`.
std::vector<ModelOutcome> run_models(const FeaturizedDataset& data, std::span<const std::size_t> train,
                                     std::span<const std::size_t> test, const ExperimentConfig& config,
                                     std::uint64_t seed, CpuClock clock, JobAudit& audit);

/// k_cv folds x train sizes x models. Test folds stay fixed across sizes and
/// training subsets are nested across sizes.
RunResult run_cv_learning_curve(const FeaturizedDataset& data, const ExperimentConfig& config);

/// Trains on structures outside the holdout and tests on the holdout
/// ("extrapolation") and on a held-back share of the remainder ("interpolation").
RunResult run_extrapolation(const FeaturizedDataset& data, const ExperimentConfig& config);

/// Holdout MAE on the first CV fold for every (k, train size).
RunResult run_k_sweep(const FeaturizedDataset& data, const ExperimentConfig& config, std::span<const std::size_t> k_values,
                      std::span<const std::size_t> train_sizes);

/// Indices selected by a holdout filter ("largest" or a composition tag).
std::vector<std::size_t> holdout_indices(const FeaturizedDataset& data, const std::string& filter);

/// Fits every configured model on `train` with the usual hyperparameter
/// protocol and writes <outdir>/<model>.model plus a <model>.json sidecar
/// (training ids and compositions, hyperparameters). Returns the sidecars.
nlohmann::json train_models(const FeaturizedDataset& data, std::span<const std::size_t> train,
                            const ExperimentConfig& config, const std::filesystem::path& outdir);

/// Predictions for every item of `data` on the target scale (low-level labels
/// added back when the dataset carries them).
Vector predict_with_model(const std::filesystem::path& model, const FeaturizedDataset& data);

/// Neighbour report of item `item` of `data` under a saved k-NN model.
NeighborReport explain_with_model(const std::filesystem::path& model, const FeaturizedDataset& data, std::size_t item,
                                  std::span<const double> quantile_levels);

struct KTuningRow {
    std::string model;
    TuneKResult result;
};

/// Leave-one-out k tuning of every configured k-NN model on a seeded subsample
/// of at most hyper.k_tune_cap items.
std::vector<KTuningRow> tune_k_models(const FeaturizedDataset& data, const ExperimentConfig& config);

/// Writes results.csv, summary.json and plotdata/*.csv under `outdir`.
void emit_results(const RunResult& result, const std::filesystem::path& outdir);

void write_results_csv(const std::filesystem::path& path, std::span<const ExperimentRecord> records);
std::vector<ExperimentRecord> load_results_csv(const std::filesystem::path& path);

/// Mean and sample standard deviation of MAE per (experiment, model, train size).
nlohmann::json summarize(std::span<const ExperimentRecord> records);

}  // namespace mlknn
