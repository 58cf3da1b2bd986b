#include "mlknn/synthetic.hpp"

#include "mlknn/error.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace mlknn {

namespace {

double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

double gaussian(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

struct Atom {
    Element element;
    Vec3 position;
};

std::vector<Atom> water_template() {
    return {{Element::O, {0.0, 0.0, 0.0}}, {Element::H, {0.9572, 0.0, 0.0}}, {Element::H, {-0.2400, 0.9266, 0.0}}};
}

std::vector<Atom> acid_template() {
    const double a = 1.45 / std::sqrt(3.0);
    const double h = (1.45 + 0.97) / std::sqrt(3.0);
    return {{Element::S, {0.0, 0.0, 0.0}},  {Element::O, {a, a, a}},    {Element::O, {-a, -a, a}},
            {Element::O, {-a, a, -a}},      {Element::O, {a, -a, -a}},  {Element::H, {h, h, h}},
            {Element::H, {-h, -h, h}}};
}

// Uniform random rotation from a normalized Gaussian quaternion.
std::array<std::array<double, 3>, 3> random_rotation(std::mt19937_64& rng) {
    double q[4];
    double norm = 0.0;
    for (double& v : q) {
        v = gaussian(rng);
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : q) v /= norm;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    return {{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
             {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
             {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

}  // namespace

SyntheticRegression make_mahalanobis_regression(std::size_t n, std::uint64_t function_seed, std::uint64_t sample_seed,
                                                std::size_t informative, std::size_t distractors, double noise) {
    if (informative == 0) throw ConfigError("at least one informative dimension is required");
    std::mt19937_64 frng(function_seed);
    Matrix L(static_cast<Eigen::Index>(informative), static_cast<Eigen::Index>(informative));
    for (Eigen::Index i = 0; i < L.rows(); ++i)
        for (Eigen::Index j = 0; j < L.cols(); ++j) L(i, j) = gaussian(frng) / std::sqrt(static_cast<double>(informative));
    L *= 1.5;

    std::mt19937_64 rng(sample_seed);
    const std::size_t p = informative + distractors;
    SyntheticRegression out{RowMatrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p)),
                            Vector(static_cast<Eigen::Index>(n))};
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(p); ++j) out.X(i, j) = gaussian(rng);
        const Vector u = L * out.X.row(i).head(static_cast<Eigen::Index>(informative)).transpose();
        double y = 0.0;
        for (Eigen::Index j = 0; j < u.size(); ++j) y += std::sin(u[j]);
        out.y[i] = y + noise * gaussian(rng);
    }
    return out;
}

SyntheticRegression make_heteroscedastic(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SyntheticRegression out{RowMatrix(static_cast<Eigen::Index>(n), 1), Vector(static_cast<Eigen::Index>(n))};
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        const double x = uniform01(rng);
        out.X(i, 0) = x;
        out.y[i] = std::sin(2.0 * std::numbers::pi * x) + (0.1 + 0.5 * x) * gaussian(rng);
    }
    return out;
}

SyntheticRegression make_smooth_1d(std::size_t n, std::uint64_t seed, double noise) {
    std::mt19937_64 rng(seed);
    SyntheticRegression out{RowMatrix(static_cast<Eigen::Index>(n), 1), Vector(static_cast<Eigen::Index>(n))};
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        const double x = uniform01(rng);
        out.X(i, 0) = x;
        out.y[i] = std::sin(2.0 * std::numbers::pi * x) + noise * gaussian(rng);
    }
    return out;
}

SyntheticRegression make_additive_noise(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SyntheticRegression out{RowMatrix(static_cast<Eigen::Index>(n), 1), Vector(static_cast<Eigen::Index>(n))};
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        const double x = uniform01(rng);
        out.X(i, 0) = x;
        out.y[i] = x + gaussian(rng);
    }
    return out;
}

LabeledSet make_cluster_set(const ClusterOptions& options, std::uint64_t seed) {
    if (options.max_acid < 1 || options.max_water < 0 || options.per_composition == 0)
        throw ConfigError("cluster generator needs max_acid >= 1, max_water >= 0, per_composition >= 1");
    std::mt19937_64 rng(seed);
    LabeledSet set;
    std::vector<double> low;
    std::size_t serial = 0;
    for (int na = 1; na <= options.max_acid; ++na) {
        for (int nw = 0; nw <= options.max_water; ++nw) {
            for (std::size_t c = 0; c < options.per_composition; ++c) {
                Structure s;
                s.id = "cluster_" + std::to_string(serial++);
                s.composition.parts = {{"SA", na}};
                if (nw > 0) s.composition.parts.push_back({"W", nw});
                const int molecules = na + nw;
                const double radius = 2.2 * std::cbrt(static_cast<double>(molecules));
                std::vector<Vec3> centres;
                for (int m = 0; m < molecules; ++m) {
                    const auto tmpl = m < na ? acid_template() : water_template();
                    for (int attempt = 0;; ++attempt) {
                        if (attempt > 10000) throw NumericalError("cluster generator could not place a molecule");
                        const double grow = 1.0 + 0.01 * attempt;
                        Vec3 centre;
                        do {
                            for (double& v : centre) v = (2.0 * uniform01(rng) - 1.0) * radius * grow;
                        } while (centre[0] * centre[0] + centre[1] * centre[1] + centre[2] * centre[2] >
                                 radius * radius * grow * grow);
                        const auto R = random_rotation(rng);
                        std::vector<Vec3> placed;
                        for (const auto& atom : tmpl) {
                            Vec3 p{};
                            for (int r = 0; r < 3; ++r)
                                p[r] = centre[r] + R[r][0] * atom.position[0] + R[r][1] * atom.position[1] +
                                       R[r][2] * atom.position[2];
                            placed.push_back(p);
                        }
                        bool clash = false;
                        for (const auto& p : placed) {
                            for (const auto& q : s.coords) {
                                const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
                                if (dx * dx + dy * dy + dz * dz < 1.6 * 1.6) clash = true;
                            }
                        }
                        if (clash) continue;
                        for (std::size_t a = 0; a < tmpl.size(); ++a) {
                            s.elements.push_back(tmpl[a].element);
                            s.coords.push_back(placed[a]);
                        }
                        centres.push_back(centre);
                        break;
                    }
                }
                double y = -10.0 * na - 4.0 * nw;
                for (std::size_t a = 0; a < centres.size(); ++a)
                    for (std::size_t b = a + 1; b < centres.size(); ++b) {
                        const double dx = centres[a][0] - centres[b][0], dy = centres[a][1] - centres[b][1],
                                     dz = centres[a][2] - centres[b][2];
                        y -= 2.0 * std::exp(-(dx * dx + dy * dy + dz * dz) / 16.0);
                    }
                y += options.noise * gaussian(rng);
                set.structures.push_back(std::move(s));
                set.labels.push_back(y);
                low.push_back(0.9 * y + 0.5 + 0.1 * gaussian(rng));
            }
        }
    }
    set.low_level_labels = std::move(low);
    return set;
}

}  // namespace mlknn
