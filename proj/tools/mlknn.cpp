#include "mlknn/error.hpp"
#include "mlknn/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <numeric>
#include <iostream>
#include <sstream>

namespace {

using namespace mlknn;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string models;
    std::string sizes;
    std::string out;
};

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& s : split_list(text)) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            out.push_back(v);
        } catch (const std::logic_error&) {
            throw ConfigError("'" + s + "' is not a size");
        }
    }
    return out;
}

ExperimentConfig load_config(const CommonFlags& f) {
    if (f.config.empty()) throw ConfigError("--config is required");
    auto j = nlohmann::json::object();
    {
        std::ifstream in(f.config);
        if (!in) throw IOError("cannot open config " + f.config);
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + f.config + " is not valid JSON: " + e.what());
        }
    }
    if (f.seed) j["seed"] = *f.seed;
    if (!f.models.empty()) j["models"] = split_list(f.models);
    if (!f.sizes.empty()) j["train_sizes"] = parse_sizes(f.sizes);
    if (!f.out.empty()) j["output_dir"] = f.out;
    return ExperimentConfig::from_json(j);
}

void add_common(CLI::App* cmd, CommonFlags& f, bool with_models, bool with_sizes) {
    cmd->add_option("--config", f.config, "Experiment config (JSON)");
    cmd->add_option("--seed", f.seed, "Override the config seed");
    if (with_models) cmd->add_option("--models", f.models, "Comma-separated model list");
    if (with_sizes) cmd->add_option("--sizes", f.sizes, "Comma-separated train sizes");
    cmd->add_option("--out", f.out, "Output location");
}

void save_config_snapshot(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.output_dir);
    std::ofstream out(config.output_dir / "config.json");
    if (!out) throw IOError("cannot write to " + config.output_dir.string());
    out << config.to_json().dump(2) << '\n';
}

void print_summary(const RunResult& result) {
    for (const auto& s : summarize(result.records))
        std::cout << s["experiment"].get<std::string>() << '\t' << s["model"].get<std::string>() << "\tn="
                  << s["train_size"].get<std::size_t>() << "\tMAE=" << s["mae_mean"].get<double>() << " +- "
                  << s["mae_std"].get<double>() << '\n';
}

FeaturizedDataset data_for(const std::string& stem, const CommonFlags& f) {
    if (!stem.empty()) return load_featurized(stem);
    return load_dataset(load_config(f));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"k-nearest-neighbour and kernel models for molecular property regression"};
    app.require_subcommand(1);

    CommonFlags feat_f, train_f, pred_f, cv_f, lc_f, tune_f, sweep_f, ext_f, expl_f;

    auto* featurize_cmd = app.add_subcommand("featurize", "Parse and featurize the configured dataset");
    add_common(featurize_cmd, feat_f, false, false);

    auto* train_cmd = app.add_subcommand("train", "Fit models on a seeded subsample and save them");
    add_common(train_cmd, train_f, true, true);

    std::string pred_model, pred_data;
    auto* predict_cmd = app.add_subcommand("predict", "Predict with a saved model");
    add_common(predict_cmd, pred_f, false, false);
    predict_cmd->add_option("--model", pred_model, "Saved model file")->required();
    predict_cmd->add_option("--data", pred_data, "Featurized dataset stem (else the config's dataset)");

    auto* cv_cmd = app.add_subcommand("cv", "Cross-validated evaluation (largest feasible size unless --sizes)");
    add_common(cv_cmd, cv_f, true, true);

    auto* lc_cmd = app.add_subcommand("learning-curve", "Cross-validated learning curves over the train sizes");
    add_common(lc_cmd, lc_f, true, true);

    auto* tune_cmd = app.add_subcommand("tune-k", "Leave-one-out k tuning for the k-NN models");
    add_common(tune_cmd, tune_f, true, false);

    std::string sweep_ks;
    auto* sweep_cmd = app.add_subcommand("k-sweep", "Holdout MAE over k values and train sizes");
    add_common(sweep_cmd, sweep_f, false, true);
    sweep_cmd->add_option("--ks", sweep_ks, "Comma-separated k values (default: config k_values)");

    std::string holdout;
    auto* ext_cmd = app.add_subcommand("extrapolate", "Train without a holdout class, test on it");
    add_common(ext_cmd, ext_f, true, true);
    ext_cmd->add_option("--holdout", holdout, "\"largest\" or a composition tag");

    std::string expl_model, expl_data;
    std::size_t expl_item = 0;
    auto* explain_cmd = app.add_subcommand("explain", "Neighbour report for one item under a saved k-NN model");
    add_common(explain_cmd, expl_f, false, false);
    explain_cmd->add_option("--model", expl_model, "Saved k-NN model file")->required();
    explain_cmd->add_option("--data", expl_data, "Featurized dataset stem (else the config's dataset)");
    explain_cmd->add_option("--item", expl_item, "Row of the query item")->required();

    std::string synth_kind = "clusters", synth_out;
    std::size_t synth_n = 1000;
    std::uint64_t synth_seed = 0;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset (XYZ + labels CSV, or feature CSV)");
    synth_cmd->add_option("--kind", synth_kind, "clusters, mahalanobis, heteroscedastic or smooth_1d");
    synth_cmd->add_option("--n", synth_n, "Items (matrix kinds)");
    synth_cmd->add_option("--seed", synth_seed, "Seed");
    synth_cmd->add_option("--out", synth_out, "Output stem")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (featurize_cmd->parsed()) {
            auto f = feat_f;
            const std::string stem_override = f.out;
            f.out.clear();
            const auto config = load_config(f);
            const auto data = load_dataset(config);
            const std::filesystem::path stem = stem_override.empty() ? config.output_dir / "features" : std::filesystem::path(stem_override);
            if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
            save_featurized(stem, data);
            std::cout << "featurized " << data.size() << " items, " << data.global.cols() << " columns -> " << stem.string()
                      << ".{bin,json}\n";
        } else if (train_cmd->parsed()) {
            const auto config = load_config(train_f);
            const auto data = load_dataset(config);
            std::vector<std::size_t> all(data.size());
            std::iota(all.begin(), all.end(), std::size_t{0});
            const std::size_t m = train_f.sizes.empty() ? data.size() : config.train_sizes.front();
            if (m > data.size()) throw ConfigError("train size exceeds the dataset size " + std::to_string(data.size()));
            const auto train = subsample(all, m, config.seed);
            const auto sidecars = train_models(data, train, config, config.output_dir);
            for (const auto& s : sidecars)
                std::cout << s["model"].get<std::string>() << " -> " << s["path"].get<std::string>() << '\t'
                          << s["hyperparameters"].dump() << '\n';
        } else if (predict_cmd->parsed()) {
            const auto data = data_for(pred_data, pred_f);
            const auto pred = predict_with_model(pred_model, data);
            std::ofstream file;
            if (!pred_f.out.empty()) {
                file.open(pred_f.out);
                if (!file) throw IOError("cannot write " + pred_f.out);
            }
            std::ostream& out = pred_f.out.empty() ? std::cout : file;
            out << "id,prediction,label\n";
            out.precision(17);
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double label = data.labels[i] + (data.low_level_labels ? (*data.low_level_labels)[i] : 0.0);
                out << data.ids[i] << ',' << pred[static_cast<Eigen::Index>(i)] << ',' << label << '\n';
            }
        } else if (cv_cmd->parsed() || lc_cmd->parsed()) {
            const bool cv = cv_cmd->parsed();
            auto f = cv ? cv_f : lc_f;
            auto config = load_config(f);
            const auto data = load_dataset(config);
            if (cv && f.sizes.empty()) {
                const auto folds = make_folds(data.size(), config.k_cv, config.seed);
                const auto sizes = folds.fold_sizes();
                config.train_sizes = {data.size() - *std::max_element(sizes.begin(), sizes.end())};
            }
            const auto result = run_cv_learning_curve(data, config);
            save_config_snapshot(config);
            emit_results(result, config.output_dir);
            print_summary(result);
        } else if (tune_cmd->parsed()) {
            const auto config = load_config(tune_f);
            const auto data = load_dataset(config);
            const auto rows = tune_k_models(data, config);
            std::filesystem::create_directories(config.output_dir);
            std::ofstream out(config.output_dir / "k_tuning.csv");
            if (!out) throw IOError("cannot write to " + config.output_dir.string());
            out << "model,k,loo_mae\n";
            out.precision(17);
            for (const auto& r : rows) {
                for (std::size_t k = 1; k <= r.result.loo_mae.size(); ++k)
                    out << r.model << ',' << k << ',' << r.result.loo_mae[k - 1] << '\n';
                std::cout << r.model << "\tk_best=" << r.result.k_best
                          << "\tloo_mae=" << r.result.loo_mae[r.result.k_best - 1] << '\n';
            }
        } else if (sweep_cmd->parsed()) {
            const auto config = load_config(sweep_f);
            const auto data = load_dataset(config);
            const auto ks = sweep_ks.empty() ? config.k_values : parse_sizes(sweep_ks);
            const auto result = run_k_sweep(data, config, ks, config.train_sizes);
            save_config_snapshot(config);
            emit_results(result, config.output_dir);
            for (const auto& r : result.k_sweep)
                std::cout << r.model << "\tk=" << r.k << "\tn=" << r.train_size << "\tMAE=" << r.mae << '\n';
        } else if (ext_cmd->parsed()) {
            auto config = load_config(ext_f);
            if (!holdout.empty()) config.holdout = holdout;
            const auto data = load_dataset(config);
            const auto result = run_extrapolation(data, config);
            save_config_snapshot(config);
            emit_results(result, config.output_dir);
            print_summary(result);
        } else if (explain_cmd->parsed()) {
            const auto data = data_for(expl_data, expl_f);
            const std::vector<double> levels = {0.05, 0.25, 0.5, 0.75, 0.95};
            const auto report = explain_with_model(expl_model, data, expl_item, levels);
            const auto text = report.to_json().dump(2);
            if (expl_f.out.empty()) {
                std::cout << text << '\n';
            } else {
                std::ofstream out(expl_f.out);
                if (!out) throw IOError("cannot write " + expl_f.out);
                out << text << '\n';
            }
        } else if (synth_cmd->parsed()) {
            if (synth_kind == "clusters") {
                const auto set = make_cluster_set({}, synth_seed);
                std::ofstream xyz(synth_out + ".xyz");
                std::ofstream csv(synth_out + "_labels.csv");
                if (!xyz || !csv) throw IOError("cannot write " + synth_out);
                write_xyz(xyz, set.structures, set.labels);
                csv << "id,label_low,label_high\n";
                csv.precision(17);
                const auto stem = std::filesystem::path(synth_out).filename().string();
                for (std::size_t i = 0; i < set.structures.size(); ++i)
                    csv << stem << ':' << i << ',' << (*set.low_level_labels)[i] << ',' << set.labels[i] << '\n';
                std::cout << "wrote " << set.structures.size() << " clusters to " << synth_out << ".xyz\n";
            } else {
                SyntheticRegression s;
                if (synth_kind == "mahalanobis") s = make_mahalanobis_regression(synth_n, synth_seed, synth_seed + 1);
                else if (synth_kind == "heteroscedastic") s = make_heteroscedastic(synth_n, synth_seed);
                else if (synth_kind == "smooth_1d") s = make_smooth_1d(synth_n, synth_seed);
                else throw ConfigError("unknown synthetic kind '" + synth_kind + "'");
                std::ofstream csv(synth_out + ".csv");
                if (!csv) throw IOError("cannot write " + synth_out);
                csv.precision(17);
                for (Eigen::Index j = 0; j < s.X.cols(); ++j) csv << 'x' << j << ',';
                csv << "y\n";
                for (Eigen::Index i = 0; i < s.X.rows(); ++i) {
                    for (Eigen::Index j = 0; j < s.X.cols(); ++j) csv << s.X(i, j) << ',';
                    csv << s.y[i] << '\n';
                }
                std::cout << "wrote " << s.X.rows() << " rows to " << synth_out << ".csv\n";
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
