#include "mlknn/descriptors.hpp"

#include "mlknn/archive.hpp"
#include "mlknn/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace mlknn {

namespace {

constexpr double kBohrInAngstrom = 0.52917721092;
constexpr double kMinSeparation = 1e-8;  // Angstrom
constexpr std::size_t kPairCount = kElementCount * (kElementCount + 1) / 2;

double distance(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double pair_term(const Structure& s, std::size_t i, std::size_t j) {
    const double r = distance(s.coords[i], s.coords[j]);
    if (r < kMinSeparation)
        throw DegenerateGeometry("atoms " + std::to_string(i) + " and " + std::to_string(j) + " of '" + s.id +
                                 "' coincide");
    return atomic_number(s.elements[i]) * atomic_number(s.elements[j]) / (r / kBohrInAngstrom);
}

int padded_size(const DescriptorParams& params) {
    int n = 0;
    for (const auto& [e, c] : params.max_atoms_per_element) n += c;
    return n;
}

int padding_of(const DescriptorParams& params, Element e) {
    const auto it = params.max_atoms_per_element.find(e);
    return it == params.max_atoms_per_element.end() ? 0 : it->second;
}

struct Bag {
    std::size_t a, b;  // element slots, a <= b
    std::size_t length;
};

std::vector<Bag> bag_layout(const DescriptorParams& params) {
    std::vector<Bag> bags;
    for (std::size_t a = 0; a < kElementCount; ++a) {
        const auto ca = static_cast<std::size_t>(padding_of(params, kElements[a]));
        if (ca == 0) continue;
        for (std::size_t b = a; b < kElementCount; ++b) {
            const auto cb = static_cast<std::size_t>(padding_of(params, kElements[b]));
            if (cb == 0) continue;
            const std::size_t len = a == b ? ca * (ca - 1) / 2 : ca * cb;
            if (len > 0) bags.push_back({a, b, len});
        }
    }
    return bags;
}

double cutoff(double r, double r_cut) {
    return r < r_cut ? 0.5 * (std::cos(std::numbers::pi * r / r_cut) + 1.0) : 0.0;
}

}  // namespace

std::string to_string(DescriptorKind kind) {
    switch (kind) {
        case DescriptorKind::CM: return "CM";
        case DescriptorKind::BoB: return "BoB";
        case DescriptorKind::LMB: return "LMB";
    }
    return "?";
}

DescriptorKind parse_descriptor_kind(std::string_view name) {
    if (name == "CM") return DescriptorKind::CM;
    if (name == "BoB") return DescriptorKind::BoB;
    if (name == "LMB") return DescriptorKind::LMB;
    throw ConfigError("unknown descriptor kind '" + std::string(name) + "'");
}

void DescriptorParams::validate() const {
    if (kind == DescriptorKind::LMB) {
        if (!(lmb.r_cut > 0)) throw ConfigError("r_cut must be positive");
        if (lmb.n_radial < 1) throw ConfigError("n_radial must be at least 1");
        if (!(lmb.radial_width > 0)) throw ConfigError("radial_width must be positive");
        if (lmb.use_three_body) {
            if (lmb.n_angular < 1) throw ConfigError("n_angular must be at least 1");
            if (!(lmb.angular_width > 0)) throw ConfigError("angular_width must be positive");
        }
    } else {
        if (padded_size(*this) < 1) throw ConfigError("CM/BoB need max_atoms_per_element padding");
        for (const auto& [e, c] : max_atoms_per_element)
            if (c < 0) throw ConfigError("negative padding count");
    }
}

nlohmann::json DescriptorParams::to_json() const {
    nlohmann::json j;
    j["kind"] = to_string(kind);
    nlohmann::json pad = nlohmann::json::object();
    for (const auto& [e, c] : max_atoms_per_element) pad[std::string(element_symbol(e))] = c;
    j["max_atoms_per_element"] = pad;
    j["lmb"] = {{"r_cut", lmb.r_cut},
                {"n_radial", lmb.n_radial},
                {"radial_width", lmb.radial_width},
                {"n_angular", lmb.n_angular},
                {"angular_width", lmb.angular_width},
                {"use_three_body", lmb.use_three_body}};
    return j;
}

DescriptorParams DescriptorParams::from_json(const nlohmann::json& j) {
    DescriptorParams p;
    p.kind = parse_descriptor_kind(j.value("kind", std::string("LMB")));
    if (j.contains("max_atoms_per_element"))
        for (const auto& [sym, c] : j["max_atoms_per_element"].items()) p.max_atoms_per_element[parse_element(sym)] = c;
    if (j.contains("lmb")) {
        const auto& l = j["lmb"];
        p.lmb.r_cut = l.value("r_cut", p.lmb.r_cut);
        p.lmb.n_radial = l.value("n_radial", p.lmb.n_radial);
        p.lmb.radial_width = l.value("radial_width", p.lmb.radial_width);
        p.lmb.n_angular = l.value("n_angular", p.lmb.n_angular);
        p.lmb.angular_width = l.value("angular_width", p.lmb.angular_width);
        p.lmb.use_three_body = l.value("use_three_body", p.lmb.use_three_body);
    }
    p.validate();
    return p;
}

std::uint64_t DescriptorParams::fingerprint() const { return fnv1a64(to_json().dump()); }

std::map<Element, int> padding_for(std::span<const Structure> structures) {
    std::map<Element, int> pad;
    for (const auto& s : structures) {
        std::map<Element, int> counts;
        for (Element e : s.elements) ++counts[e];
        for (const auto& [e, c] : counts) pad[e] = std::max(pad[e], c);
    }
    return pad;
}

GlobalDescriptor coulomb_matrix(const Structure& s, const DescriptorParams& params) {
    s.validate();
    const int size = padded_size(params);
    const auto n = s.size();
    if (static_cast<int>(n) > size)
        throw ConfigError("structure '" + s.id + "' has " + std::to_string(n) + " atoms; CM padding is " +
                          std::to_string(size));

    Matrix cm(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        cm(i, i) = 0.5 * std::pow(atomic_number(s.elements[i]), 2.4);
        for (std::size_t j = i + 1; j < n; ++j) cm(i, j) = cm(j, i) = pair_term(s, i, j);
    }

    // Order by descending row norm; ties by the descending-sorted row contents.
    std::vector<std::vector<double>> keys(n);
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = cm.row(i).norm();
        for (std::size_t j = 0; j < n; ++j) keys[i].push_back(cm(i, j));
        std::sort(keys[i].begin(), keys[i].end(), std::greater<>());
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (norms[a] != norms[b]) return norms[a] > norms[b];
        return keys[a] > keys[b];
    });

    const auto N = static_cast<std::size_t>(size);
    GlobalDescriptor out{Vector::Zero(static_cast<Eigen::Index>(N * (N + 1) / 2))};
    std::size_t k = 0;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i; j < N; ++j, ++k)
            if (i < n && j < n) out.values[static_cast<Eigen::Index>(k)] = cm(order[i], order[j]);
    return out;
}

GlobalDescriptor bag_of_bonds(const Structure& s, const DescriptorParams& params) {
    s.validate();
    const auto bags = bag_layout(params);
    std::vector<std::vector<double>> contents(bags.size());
    auto bag_index = [&](std::size_t a, std::size_t b) -> std::size_t {
        if (a > b) std::swap(a, b);
        for (std::size_t i = 0; i < bags.size(); ++i)
            if (bags[i].a == a && bags[i].b == b) return i;
        throw ConfigError("structure '" + s.id + "' has an element pair without a bag; padding too small");
    };
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = i + 1; j < s.size(); ++j)
            contents[bag_index(element_slot(s.elements[i]), element_slot(s.elements[j]))].push_back(pair_term(s, i, j));

    std::size_t total = 0;
    for (const auto& b : bags) total += b.length;
    GlobalDescriptor out{Vector::Zero(static_cast<Eigen::Index>(total))};
    std::size_t offset = 0;
    for (std::size_t b = 0; b < bags.size(); ++b) {
        auto& c = contents[b];
        if (c.size() > bags[b].length)
            throw ConfigError("bag " + std::string(element_symbol(kElements[bags[b].a])) + "-" +
                              std::string(element_symbol(kElements[bags[b].b])) + " overflows its padding");
        std::sort(c.begin(), c.end(), std::greater<>());
        for (std::size_t i = 0; i < c.size(); ++i) out.values[static_cast<Eigen::Index>(offset + i)] = c[i];
        offset += bags[b].length;
    }
    return out;
}

std::size_t element_pair_slot(std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    // pairs enumerated row by row: (0,0),(0,1),...,(0,E-1),(1,1),...
    return a * kElementCount - a * (a - 1) / 2 + (b - a);
}

std::size_t descriptor_dimension(const DescriptorParams& params) {
    switch (params.kind) {
        case DescriptorKind::CM: {
            const auto n = static_cast<std::size_t>(padded_size(params));
            return n * (n + 1) / 2;
        }
        case DescriptorKind::BoB: {
            std::size_t total = 0;
            for (const auto& b : bag_layout(params)) total += b.length;
            return total;
        }
        case DescriptorKind::LMB:
            return kElementCount * params.lmb.n_radial + (params.lmb.use_three_body ? kPairCount * params.lmb.n_angular : 0);
    }
    return 0;
}

std::vector<std::string> column_layout(const DescriptorParams& params) {
    std::vector<std::string> cols;
    switch (params.kind) {
        case DescriptorKind::CM: {
            const auto n = static_cast<std::size_t>(padded_size(params));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i; j < n; ++j) cols.push_back("cm[" + std::to_string(i) + "," + std::to_string(j) + "]");
            break;
        }
        case DescriptorKind::BoB:
            for (const auto& b : bag_layout(params))
                for (std::size_t i = 0; i < b.length; ++i)
                    cols.push_back("bag[" + std::string(element_symbol(kElements[b.a])) + "-" +
                                   std::string(element_symbol(kElements[b.b])) + "][" + std::to_string(i) + "]");
            break;
        case DescriptorKind::LMB: {
            for (std::size_t e = 0; e < kElementCount; ++e)
                for (std::size_t m = 0; m < params.lmb.n_radial; ++m)
                    cols.push_back("rad[" + std::string(element_symbol(kElements[e])) + "][" + std::to_string(m) + "]");
            if (params.lmb.use_three_body) {
                std::vector<std::string> pair_names(kPairCount);
                for (std::size_t a = 0; a < kElementCount; ++a)
                    for (std::size_t b = a; b < kElementCount; ++b)
                        pair_names[element_pair_slot(a, b)] =
                            std::string(element_symbol(kElements[a])) + "-" + std::string(element_symbol(kElements[b]));
                for (std::size_t p = 0; p < kPairCount; ++p)
                    for (std::size_t m = 0; m < params.lmb.n_angular; ++m)
                        cols.push_back("ang[" + pair_names[p] + "][" + std::to_string(m) + "]");
            }
            break;
        }
    }
    return cols;
}

LocalDescriptor local_many_body(const Structure& s, const DescriptorParams& params) {
    s.validate();
    const auto& lp = params.lmb;
    if (!(lp.r_cut > 0) || lp.n_radial < 1 || !(lp.radial_width > 0) ||
        (lp.use_three_body && (lp.n_angular < 1 || !(lp.angular_width > 0))))
        throw ConfigError("invalid local many-body parameters");

    const auto n = s.size();
    const std::size_t radial_dim = kElementCount * lp.n_radial;
    const std::size_t dim = radial_dim + (lp.use_three_body ? kPairCount * lp.n_angular : 0);
    LocalDescriptor out{RowMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim)), s.elements,
                        params.fingerprint()};

    const double inv_2w2 = 1.0 / (2.0 * lp.radial_width * lp.radial_width);
    const double inv_2a2 = lp.use_three_body ? 1.0 / (2.0 * lp.angular_width * lp.angular_width) : 0.0;

    struct Neighbor {
        std::size_t j;
        double r, fc;
        Vec3 u;  // unit vector towards j
    };
    std::vector<Neighbor> nbrs;
    for (std::size_t i = 0; i < n; ++i) {
        nbrs.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double r = distance(s.coords[i], s.coords[j]);
            if (r >= lp.r_cut) continue;
            if (r < kMinSeparation) throw DegenerateGeometry("coincident atoms in '" + s.id + "'");
            Vec3 u{};
            for (int d = 0; d < 3; ++d) u[d] = (s.coords[j][d] - s.coords[i][d]) / r;
            nbrs.push_back({j, r, cutoff(r, lp.r_cut), u});
        }
        auto row = out.rows.row(static_cast<Eigen::Index>(i));
        for (const auto& nb : nbrs) {
            const std::size_t base = element_slot(s.elements[nb.j]) * lp.n_radial;
            for (std::size_t m = 0; m < lp.n_radial; ++m) {
                const double mu = lp.r_cut * static_cast<double>(m + 1) / static_cast<double>(lp.n_radial);
                const double dr = nb.r - mu;
                row[static_cast<Eigen::Index>(base + m)] += std::exp(-dr * dr * inv_2w2) * nb.fc;
            }
        }
        if (!lp.use_three_body) continue;
        for (std::size_t p = 0; p < nbrs.size(); ++p) {
            for (std::size_t q = p + 1; q < nbrs.size(); ++q) {
                const auto& a = nbrs[p];
                const auto& b = nbrs[q];
                const double dot = a.u[0] * b.u[0] + a.u[1] * b.u[1] + a.u[2] * b.u[2];
                const double cx = a.u[1] * b.u[2] - a.u[2] * b.u[1];
                const double cy = a.u[2] * b.u[0] - a.u[0] * b.u[2];
                const double cz = a.u[0] * b.u[1] - a.u[1] * b.u[0];
                const double theta = std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot);
                const double w = a.fc * b.fc;
                const std::size_t base =
                    radial_dim +
                    element_pair_slot(element_slot(s.elements[a.j]), element_slot(s.elements[b.j])) * lp.n_angular;
                for (std::size_t m = 0; m < lp.n_angular; ++m) {
                    const double mu = std::numbers::pi * (static_cast<double>(m) + 0.5) / static_cast<double>(lp.n_angular);
                    const double dt = theta - mu;
                    row[static_cast<Eigen::Index>(base + m)] += std::exp(-dt * dt * inv_2a2) * w;
                }
            }
        }
    }
    return out;
}

GlobalDescriptor global_pool(const LocalDescriptor& d) {
    if (d.rows.rows() == 0) throw ShapeError("cannot pool an empty local descriptor");
    return {d.rows.colwise().sum().transpose()};
}

FeaturizedDataset FeaturizedDataset::select(std::span<const std::size_t> rows) const {
    FeaturizedDataset out;
    out.params = params;
    out.global.resize(static_cast<Eigen::Index>(rows.size()), global.cols());
    if (low_level_labels) out.low_level_labels.emplace();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = rows[r];
        if (i >= size()) throw ShapeError("row index out of range");
        out.ids.push_back(ids[i]);
        out.compositions.push_back(compositions[i]);
        out.atom_counts.push_back(atom_counts[i]);
        out.labels.push_back(labels[i]);
        if (low_level_labels) out.low_level_labels->push_back((*low_level_labels)[i]);
        out.global.row(static_cast<Eigen::Index>(r)) = global.row(static_cast<Eigen::Index>(i));
        if (has_local()) out.local.push_back(local[i]);
    }
    return out;
}

FeaturizedDataset featurize(const LabeledSet& set, const DescriptorParams& params) {
    set.validate();
    params.validate();
    const auto n = set.structures.size();
    FeaturizedDataset out;
    out.params = params;
    out.labels = set.labels;
    out.low_level_labels = set.low_level_labels;
    for (const auto& s : set.structures) {
        out.ids.push_back(s.id);
        out.compositions.push_back(s.composition.tag());
        out.atom_counts.push_back(s.size());
    }
    const auto dim = static_cast<Eigen::Index>(descriptor_dimension(params));
    out.global.resize(static_cast<Eigen::Index>(n), dim);
    if (params.kind == DescriptorKind::LMB) out.local.resize(n);

    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        try {
            const auto& s = set.structures[static_cast<std::size_t>(i)];
            switch (params.kind) {
                case DescriptorKind::CM: out.global.row(i) = coulomb_matrix(s, params).values.transpose(); break;
                case DescriptorKind::BoB: out.global.row(i) = bag_of_bonds(s, params).values.transpose(); break;
                case DescriptorKind::LMB: {
                    auto local = local_many_body(s, params);
                    out.global.row(i) = global_pool(local).values.transpose();
                    out.local[static_cast<std::size_t>(i)] = std::move(local);
                    break;
                }
            }
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

void save_featurized(const std::filesystem::path& stem, const FeaturizedDataset& data) {
    Archive ar;
    ar.arrays["global"] = data.global;
    ar.arrays["labels"] = as_column(Eigen::Map<const Vector>(data.labels.data(), static_cast<Eigen::Index>(data.labels.size())));
    if (data.low_level_labels)
        ar.arrays["low_level_labels"] = as_column(
            Eigen::Map<const Vector>(data.low_level_labels->data(), static_cast<Eigen::Index>(data.low_level_labels->size())));
    nlohmann::json sidecar;
    sidecar["params"] = data.params.to_json();
    sidecar["fingerprint"] = hex64(data.params.fingerprint());
    sidecar["columns"] = column_layout(data.params);
    sidecar["ids"] = data.ids;
    sidecar["compositions"] = data.compositions;
    sidecar["atom_counts"] = data.atom_counts;
    if (data.has_local()) {
        std::size_t total = 0;
        std::vector<std::string> centers;
        for (const auto& d : data.local) {
            total += d.atoms();
            std::string row;
            for (Element e : d.centers) row += std::string(element_symbol(e)) + " ";
            if (!row.empty()) row.pop_back();
            centers.push_back(row);
        }
        RowMatrix stacked(static_cast<Eigen::Index>(total), data.global.cols());
        Eigen::Index r = 0;
        for (const auto& d : data.local) {
            stacked.middleRows(r, d.rows.rows()) = d.rows;
            r += d.rows.rows();
        }
        ar.arrays["local_rows"] = std::move(stacked);
        sidecar["local_centers"] = centers;
    }
    auto bin = stem;
    bin += ".bin";
    auto js = stem;
    js += ".json";
    save_archive(bin, ar);
    std::ofstream out(js);
    if (!out) throw IOError("cannot write " + js.string());
    out << sidecar.dump(1) << '\n';
}

FeaturizedDataset load_featurized(const std::filesystem::path& stem) {
    auto bin = stem;
    bin += ".bin";
    auto js = stem;
    js += ".json";
    std::ifstream in(js);
    if (!in) throw IOError("cannot open " + js.string());
    const auto sidecar = nlohmann::json::parse(in);
    const auto ar = load_archive(bin);

    FeaturizedDataset d;
    d.params = DescriptorParams::from_json(sidecar.at("params"));
    if (sidecar.at("fingerprint").get<std::string>() != hex64(d.params.fingerprint()))
        throw ConfigError("descriptor fingerprint mismatch in " + js.string());
    d.ids = sidecar.at("ids").get<std::vector<std::string>>();
    d.compositions = sidecar.at("compositions").get<std::vector<std::string>>();
    d.atom_counts = sidecar.at("atom_counts").get<std::vector<std::size_t>>();
    d.global = ar.array("global");
    const auto labels = column_to_vector(ar.array("labels"));
    d.labels.assign(labels.data(), labels.data() + labels.size());
    if (ar.arrays.count("low_level_labels")) {
        const auto low = column_to_vector(ar.array("low_level_labels"));
        d.low_level_labels = std::vector<double>(low.data(), low.data() + low.size());
    }
    if (sidecar.contains("local_centers")) {
        const auto& stacked = ar.array("local_rows");
        const auto fp = d.params.fingerprint();
        Eigen::Index r = 0;
        for (const auto& row : sidecar["local_centers"]) {
            LocalDescriptor ld;
            std::string text = row.get<std::string>();
            std::size_t start = 0;
            while (start < text.size()) {
                auto end = text.find(' ', start);
                if (end == std::string::npos) end = text.size();
                ld.centers.push_back(parse_element(std::string_view(text).substr(start, end - start)));
                start = end + 1;
            }
            const auto atoms = static_cast<Eigen::Index>(ld.centers.size());
            ld.rows = stacked.middleRows(r, atoms);
            ld.provenance = fp;
            r += atoms;
            d.local.push_back(std::move(ld));
        }
    }
    if (d.global.rows() != static_cast<Eigen::Index>(d.ids.size()) || d.labels.size() != d.ids.size())
        throw ShapeError("featurized dataset row counts disagree");
    return d;
}

}  // namespace mlknn
