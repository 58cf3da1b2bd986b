#include "mlknn/dataset.hpp"

#include "mlknn/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>
#include <unordered_map>

namespace mlknn {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

// Accepts Mathematica-style exponents ("1.5*^-6") found in some QM9 files.
std::optional<double> to_double(std::string_view tok) {
    std::string buf(tok);
    if (auto pos = buf.find("*^"); pos != std::string::npos) buf.replace(pos, 2, "e");
    double v = 0.0;
    const char* first = buf.data();
    const char* last = buf.data() + buf.size();
    if (!buf.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) return std::nullopt;
    return v;
}

std::optional<std::size_t> to_count(std::string_view tok) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) return std::nullopt;
    return v;
}

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

std::size_t element_slot(Element e) {
    for (std::size_t i = 0; i < kElements.size(); ++i)
        if (kElements[i] == e) return i;
    throw UnsupportedElement("element outside the supported set");
}

int atomic_number(Element e) { return static_cast<int>(e); }

std::string_view element_symbol(Element e) {
    switch (e) {
        case Element::H: return "H";
        case Element::C: return "C";
        case Element::N: return "N";
        case Element::O: return "O";
        case Element::F: return "F";
        case Element::S: return "S";
    }
    return "?";
}

Element parse_element(std::string_view symbol) {
    for (Element e : kElements)
        if (element_symbol(e) == symbol) return e;
    throw UnsupportedElement("unsupported element '" + std::string(symbol) + "'");
}

int Composition::total() const {
    int t = 0;
    for (const auto& [tag, count] : parts) t += count;
    return t;
}

std::string Composition::tag() const {
    std::string out;
    for (const auto& [tag, count] : parts) out += std::to_string(count) + tag;
    return out;
}

void Structure::validate() const {
    if (elements.empty()) throw ShapeError("structure '" + id + "' has no atoms");
    if (elements.size() != coords.size())
        throw ShapeError("structure '" + id + "': element and coordinate counts differ");
    for (const auto& c : coords)
        for (double x : c)
            if (!std::isfinite(x)) throw NumericalError("structure '" + id + "' has non-finite coordinates");
}

void LabeledSet::validate() const {
    if (labels.size() != structures.size()) throw ShapeError("label count differs from structure count");
    if (kind == LabelKind::delta) {
        if (!low_level_labels || low_level_labels->size() != labels.size())
            throw ShapeError("delta labels require low-level labels of matching length");
    }
}

std::map<Element, double> qm9_atom_references() {
    return {{Element::H, -0.500273},
            {Element::C, -37.846772},
            {Element::N, -54.583861},
            {Element::O, -75.064579},
            {Element::F, -99.718730}};
}

Composition parse_composition(std::string_view text, const std::string& regex) {
    Composition comp;
    if (regex.empty()) return comp;
    const std::regex re(regex);
    const std::string s(text);
    for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        if (m.size() < 3) throw ConfigError("composition regex needs (count)(tag) groups");
        comp.parts.emplace_back(m[2].str(), std::stoi(m[1].str()));
    }
    return comp;
}

std::vector<ParsedFrame> parse_xyz_text(std::string_view text, std::string_view source_name,
                                        const XyzOptions& options) {
    std::vector<std::string_view> lines;
    for (std::size_t start = 0; start <= text.size();) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        lines.push_back(line);
        start = end + 1;
    }

    std::vector<ParsedFrame> frames;
    std::size_t li = 0;
    const std::string stem = std::filesystem::path(std::string(source_name)).stem().string();
    while (true) {
        while (li < lines.size() && trim(lines[li]).empty()) ++li;
        if (li >= lines.size()) break;

        const std::size_t count_line = li + 1;
        const auto count = to_count(trim(lines[li]));
        if (!count || *count == 0) throw ParseError("malformed atom count line", count_line);
        ++li;
        if (li >= lines.size()) throw ParseError("missing comment line", count_line + 1);
        const std::string_view comment = lines[li++];
        const auto comment_tokens = split_ws(comment);

        ParsedFrame frame;
        Structure& s = frame.structure;
        s.elements.reserve(*count);
        s.coords.reserve(*count);
        for (std::size_t a = 0; a < *count; ++a, ++li) {
            if (li >= lines.size())
                throw ParseError("frame declares " + std::to_string(*count) + " atoms but input ended after " +
                                     std::to_string(a),
                                 li + 1);
            const auto tokens = split_ws(lines[li]);
            if (tokens.size() < 4)
                throw ParseError("frame declares " + std::to_string(*count) + " atoms but only " +
                                     std::to_string(a) + " coordinate lines follow",
                                 li + 1);
            Element e;
            try {
                e = parse_element(tokens[0]);
            } catch (const UnsupportedElement& ex) {
                throw UnsupportedElement(std::string(ex.what()) + " (line " + std::to_string(li + 1) + ")");
            }
            Vec3 r{};
            for (int d = 0; d < 3; ++d) {
                const auto v = to_double(tokens[1 + d]);
                if (!v) throw ParseError("malformed coordinate '" + std::string(tokens[1 + d]) + "'", li + 1);
                r[d] = *v;
            }
            s.elements.push_back(e);
            s.coords.push_back(r);
        }

        if (options.format == XyzFormat::qm9_extended) {
            // frequencies, SMILES and InChI lines
            for (int extra = 0; extra < 3 && li < lines.size(); ++extra) {
                if (to_count(trim(lines[li]))) break;
                ++li;
            }
        }

        if (options.format == XyzFormat::qm9_extended && comment_tokens.size() >= 2 &&
            comment_tokens[0] == "gdb") {
            s.id = "gdb_" + std::string(comment_tokens[1]);
        } else {
            s.id = stem + ":" + std::to_string(frames.size());
        }

        if (options.property_index) {
            const std::size_t pi = *options.property_index;
            if (pi >= comment_tokens.size())
                throw ParseError("property index " + std::to_string(pi) + " out of range for comment line with " +
                                     std::to_string(comment_tokens.size()) + " tokens",
                                 count_line + 1);
            const auto v = to_double(comment_tokens[pi]);
            if (!v) throw ParseError("property token is not a number", count_line + 1);
            double value = *v;
            if (options.atom_reference) {
                for (Element e : s.elements) {
                    const auto it = options.atom_reference->find(e);
                    if (it == options.atom_reference->end())
                        throw ConfigError("no atom reference energy for " + std::string(element_symbol(e)));
                    value -= it->second;
                }
            }
            frame.label = value * options.unit_factor;
        }

        s.composition = parse_composition(comment, options.composition_regex);
        if (s.composition.empty()) s.composition = parse_composition(stem, options.composition_regex);
        s.validate();
        frames.push_back(std::move(frame));
    }
    return frames;
}

std::vector<ParsedFrame> parse_xyz(const std::filesystem::path& path, const XyzOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_xyz_text(buf.str(), path.string(), options);
}

void write_xyz(std::ostream& out, std::span<const Structure> structures, std::span<const double> labels) {
    if (!labels.empty() && labels.size() != structures.size())
        throw ShapeError("label count differs from structure count");
    for (std::size_t i = 0; i < structures.size(); ++i) {
        const auto& s = structures[i];
        out << s.size() << '\n';
        out << s.id;
        if (!labels.empty()) out << ' ' << format_double(labels[i]);
        if (!s.composition.empty()) out << ' ' << s.composition.tag();
        out << '\n';
        for (std::size_t a = 0; a < s.size(); ++a) {
            out << element_symbol(s.elements[a]);
            for (double x : s.coords[a]) out << ' ' << format_double(x);
            out << '\n';
        }
    }
}

std::vector<double> make_delta_labels(std::span<const double> high, std::span<const double> low) {
    if (high.size() != low.size())
        throw ShapeError("delta labels: length mismatch (" + std::to_string(high.size()) + " vs " +
                         std::to_string(low.size()) + ")");
    std::vector<double> out(high.size());
    for (std::size_t i = 0; i < high.size(); ++i) {
        if (!std::isfinite(high[i]) || !std::isfinite(low[i])) throw NumericalError("delta labels: non-finite input");
        out[i] = high[i] - low[i];
    }
    return out;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_below(rng, i));
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

FoldPlan make_folds(std::size_t n, std::size_t k_cv, std::uint64_t seed) {
    if (k_cv < 2) throw ConfigError("fold count must be at least 2");
    if (n < k_cv)
        throw ConfigError("cannot split " + std::to_string(n) + " items into " + std::to_string(k_cv) + " folds");
    FoldPlan plan{n, k_cv, seed, std::vector<std::size_t>(n)};
    const auto perm = seeded_permutation(n, seed);
    for (std::size_t p = 0; p < n; ++p) plan.assignments[perm[p]] = p % k_cv;
    return plan;
}

std::vector<std::size_t> FoldPlan::test_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i)
        if (assignments[i] == fold) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i)
        if (assignments[i] != fold) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldPlan::fold_sizes() const {
    std::vector<std::size_t> sizes(k_cv, 0);
    for (auto f : assignments) ++sizes[f];
    return sizes;
}

std::vector<std::size_t> subsample(std::span<const std::size_t> pool, std::size_t m, std::uint64_t seed) {
    if (m > pool.size())
        throw ConfigError("subsample of " + std::to_string(m) + " requested from a pool of " +
                          std::to_string(pool.size()));
    const auto perm = seeded_permutation(pool.size(), seed);
    std::vector<std::size_t> out;
    out.reserve(m);
    for (std::size_t i = 0; i < m; ++i) out.push_back(pool[perm[i]]);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<LabelRow> load_label_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open " + path.string());
    std::vector<LabelRow> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.emplace_back(trim(cell));
        if (lineno == 1 && !cells.empty() && cells[0] == "id") continue;
        if (cells.size() != 3) throw ParseError("expected id,label_low,label_high", lineno);
        const auto low = to_double(cells[1]);
        const auto high = to_double(cells[2]);
        if (!low || !high) throw ParseError("malformed label value", lineno);
        rows.push_back({cells[0], *low, *high});
    }
    return rows;
}

LabeledSet attach_labels(std::vector<Structure> structures, std::span<const LabelRow> rows, bool delta,
                         double unit_factor) {
    std::unordered_map<std::string, const LabelRow*> by_id;
    for (const auto& r : rows) by_id[r.id] = &r;
    LabeledSet set;
    set.kind = delta ? LabelKind::delta : LabelKind::direct;
    std::vector<double> high, low;
    for (const auto& s : structures) {
        const auto it = by_id.find(s.id);
        if (it == by_id.end()) throw ConfigError("no label row for structure '" + s.id + "'");
        high.push_back(it->second->high * unit_factor);
        low.push_back(it->second->low * unit_factor);
    }
    set.structures = std::move(structures);
    if (delta) {
        set.labels = make_delta_labels(high, low);
        set.low_level_labels = std::move(low);
    } else {
        set.labels = std::move(high);
    }
    set.validate();
    return set;
}

nlohmann::json dataset_manifest(const LabeledSet& set, std::uint64_t seed) {
    nlohmann::json j;
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> element_counts;
    std::map<std::string, std::size_t> compositions;
    std::size_t atoms = 0;
    for (const auto& s : set.structures) {
        ids.push_back(s.id);
        atoms += s.size();
        for (Element e : s.elements) ++element_counts[std::string(element_symbol(e))];
        if (!s.composition.empty()) ++compositions[s.composition.tag()];
    }
    j["ids"] = ids;
    j["counts"] = {{"structures", set.structures.size()},
                   {"atoms", atoms},
                   {"elements", element_counts},
                   {"compositions", compositions}};
    nlohmann::json stats;
    if (!set.labels.empty()) {
        const auto n = static_cast<double>(set.labels.size());
        const double mean = std::accumulate(set.labels.begin(), set.labels.end(), 0.0) / n;
        double ss = 0.0;
        for (double y : set.labels) ss += (y - mean) * (y - mean);
        stats = {{"mean", mean},
                 {"std", std::sqrt(ss / n)},
                 {"min", *std::min_element(set.labels.begin(), set.labels.end())},
                 {"max", *std::max_element(set.labels.begin(), set.labels.end())}};
    }
    j["labels"] = stats;
    j["label_kind"] = set.kind == LabelKind::delta ? "delta" : "direct";
    j["unit"] = "kcal/mol";
    j["seed"] = seed;
    return j;
}

}  // namespace mlknn
