#pragma once

#include "mlknn/common.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mlknn {

/// Supported chemical elements; the underlying value is the nuclear charge.
enum class Element : int { H = 1, C = 6, N = 7, O = 8, F = 9, S = 16 };

inline constexpr std::array<Element, 6> kElements = {Element::H, Element::C, Element::N,
                                                     Element::O, Element::F, Element::S};
inline constexpr std::size_t kElementCount = kElements.size();

/// Position of `e` in `kElements`, i.e. its channel number in descriptors.
std::size_t element_slot(Element e);
int atomic_number(Element e);
std::string_view element_symbol(Element e);
/// Throws UnsupportedElement for anything outside {H, C, N, O, F, S}.
Element parse_element(std::string_view symbol);

using Vec3 = std::array<double, 3>;

/// Ordered monomer counts, e.g. "3SA2W" -> {{"SA",3},{"W",2}}.
struct Composition {
    std::vector<std::pair<std::string, int>> parts;

    bool empty() const { return parts.empty(); }
    int total() const;
    std::string tag() const;
    bool operator==(const Composition&) const = default;
};

struct Structure {
    std::string id;
    std::vector<Element> elements;
    std::vector<Vec3> coords;  // Angstrom
    Composition composition;

    std::size_t size() const { return elements.size(); }
    /// Checks the element/coordinate invariants; throws ShapeError or NumericalError.
    void validate() const;
};

enum class LabelKind { direct, delta };

struct LabeledSet {
    std::vector<Structure> structures;
    std::vector<double> labels;  // kcal/mol; residuals when kind == delta
    LabelKind kind = LabelKind::direct;
    std::optional<std::vector<double>> low_level_labels;

    void validate() const;
};

/// One hartree in kcal/mol.
inline constexpr double kHartreeToKcalPerMol = 627.509474;

enum class XyzFormat { plain, qm9_extended };

struct XyzOptions {
    XyzFormat format = XyzFormat::plain;
    /// Whitespace-separated token of the comment line holding the label.
    /// QM9's internal energy at 0 K sits at token 12 ("gdb", id, A, B, C, mu, ...).
    std::optional<std::size_t> property_index;
    /// Multiplies every parsed label (1 for kcal/mol input, kHartreeToKcalPerMol for hartree).
    double unit_factor = 1.0;
    /// Subtract per-atom reference energies (hartree, before unit conversion); QM9 atomization energies.
    std::optional<std::map<Element, double>> atom_reference;
    /// ECMAScript regex with (count)(tag) groups, matched against the comment line
    /// and then the file name. Empty disables composition parsing.
    std::string composition_regex = R"((\d+)(SA|W))";
};

/// Reference U0 energies (hartree) of isolated atoms from the QM9 distribution.
std::map<Element, double> qm9_atom_references();

struct ParsedFrame {
    Structure structure;
    std::optional<double> label;
};

std::vector<ParsedFrame> parse_xyz(const std::filesystem::path& path, const XyzOptions& options = {});
std::vector<ParsedFrame> parse_xyz_text(std::string_view text, std::string_view source_name,
                                        const XyzOptions& options = {});
Composition parse_composition(std::string_view text, const std::string& regex);

/// Frames written with 17 significant digits so a reload is bit-exact.
void write_xyz(std::ostream& out, std::span<const Structure> structures,
               std::span<const double> labels = {});

std::vector<double> make_delta_labels(std::span<const double> high, std::span<const double> low);

struct FoldPlan {
    std::size_t n = 0;
    std::size_t k_cv = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> assignments;  // fold index per item

    std::vector<std::size_t> test_indices(std::size_t fold) const;
    std::vector<std::size_t> train_indices(std::size_t fold) const;
    std::vector<std::size_t> fold_sizes() const;
};

/// Seeded permutation split into k_cv folds; position p of the permutation goes to fold p % k_cv.
FoldPlan make_folds(std::size_t n, std::size_t k_cv, std::uint64_t seed);

/// Uniform draw without replacement, returned in ascending order. For a fixed
/// (pool, seed) the draws for increasing m are nested.
std::vector<std::size_t> subsample(std::span<const std::size_t> pool, std::size_t m, std::uint64_t seed);

/// Seeded Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

struct LabelRow {
    std::string id;
    double low = 0.0;
    double high = 0.0;
};

/// CSV with header `id,label_low,label_high`.
std::vector<LabelRow> load_label_csv(const std::filesystem::path& path);

/// Attaches CSV labels to structures by id. With `delta`, labels become high - low
/// and the low-level values are kept for reconstruction.
LabeledSet attach_labels(std::vector<Structure> structures, std::span<const LabelRow> rows, bool delta,
                         double unit_factor = 1.0);

nlohmann::json dataset_manifest(const LabeledSet& set, std::uint64_t seed);

}  // namespace mlknn
