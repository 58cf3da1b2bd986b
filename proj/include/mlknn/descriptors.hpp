#pragma once

#include "mlknn/common.hpp"
#include "mlknn/dataset.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mlknn {

enum class DescriptorKind { CM, BoB, LMB };

std::string to_string(DescriptorKind kind);
DescriptorKind parse_descriptor_kind(std::string_view name);

/// Local many-body descriptor settings. Radial basis centres sit at
/// r_cut * (m + 1) / n_radial, angular centres at pi * (m + 0.5) / n_angular.
struct LmbParams {
    double r_cut = 8.0;          // Angstrom
    std::size_t n_radial = 24;
    double radial_width = 0.25;  // Angstrom
    std::size_t n_angular = 8;
    double angular_width = 0.4;  // radians
    bool use_three_body = true;
};

struct DescriptorParams {
    DescriptorKind kind = DescriptorKind::LMB;
    /// Padding for CM and BoB. CM pads to the sum of the counts.
    std::map<Element, int> max_atoms_per_element;
    LmbParams lmb;

    void validate() const;
    nlohmann::json to_json() const;
    static DescriptorParams from_json(const nlohmann::json& j);
    std::uint64_t fingerprint() const;
};

/// Smallest per-element padding covering every structure.
std::map<Element, int> padding_for(std::span<const Structure> structures);

struct GlobalDescriptor {
    Vector values;
};

struct LocalDescriptor {
    RowMatrix rows;                 // one row per atom
    std::vector<Element> centers;   // element of each row
    std::uint64_t provenance = 0;   // DescriptorParams fingerprint

    std::size_t atoms() const { return centers.size(); }
};

/// Upper triangle (row-major, diagonal included) of the row-norm sorted,
/// zero-padded Coulomb matrix in atomic units.
GlobalDescriptor coulomb_matrix(const Structure& s, const DescriptorParams& params);

GlobalDescriptor bag_of_bonds(const Structure& s, const DescriptorParams& params);

/// Gaussian-smeared radial histograms per neighbour element and, optionally,
/// angular histograms per unordered neighbour-element pair, all weighted by a
/// cosine cutoff.
LocalDescriptor local_many_body(const Structure& s, const DescriptorParams& params);

GlobalDescriptor global_pool(const LocalDescriptor& d);

std::size_t descriptor_dimension(const DescriptorParams& params);
std::vector<std::string> column_layout(const DescriptorParams& params);

/// Index of the unordered element pair (a, b) among the kElementCount*(kElementCount+1)/2 pairs.
std::size_t element_pair_slot(std::size_t a, std::size_t b);

struct FeaturizedDataset {
    DescriptorParams params;
    std::vector<std::string> ids;
    std::vector<std::string> compositions;
    std::vector<std::size_t> atom_counts;
    std::vector<double> labels;
    std::optional<std::vector<double>> low_level_labels;
    RowMatrix global;                    // one row per structure
    std::vector<LocalDescriptor> local;  // LMB only

    std::size_t size() const { return ids.size(); }
    bool has_local() const { return !local.empty(); }
    FeaturizedDataset select(std::span<const std::size_t> rows) const;
};

/// Featurizes every structure in parallel. For LMB the global rows are the pooled local descriptors.
FeaturizedDataset featurize(const LabeledSet& set, const DescriptorParams& params);

/// Writes `<stem>.bin` (descriptor matrices and labels) and `<stem>.json`
/// (params, column layout, ids, compositions). Reload is bit-exact.
void save_featurized(const std::filesystem::path& stem, const FeaturizedDataset& data);
FeaturizedDataset load_featurized(const std::filesystem::path& stem);

}  // namespace mlknn
