#pragma once

#include "mlknn/common.hpp"
#include "mlknn/dataset.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace testing {

inline mlknn::RowMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    mlknn::RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = g(rng);
    return m;
}

inline mlknn::Vector random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    mlknn::Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = g(rng);
    return v;
}

// Random small molecule-like structure with atoms at least min_sep apart.
inline mlknn::Structure random_structure(std::size_t atoms, std::mt19937_64& rng, double box = 3.0,
                                         double min_sep = 0.8) {
    using mlknn::Element;
    static const Element pool[] = {Element::H, Element::C, Element::N, Element::O};
    std::uniform_real_distribution<double> u(-box, box);
    std::uniform_int_distribution<int> pick(0, 3);
    mlknn::Structure s;
    s.id = "rand";
    while (s.size() < atoms) {
        mlknn::Vec3 p{u(rng), u(rng), u(rng)};
        bool ok = true;
        for (const auto& q : s.coords) {
            const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
            if (dx * dx + dy * dy + dz * dz < min_sep * min_sep) ok = false;
        }
        if (!ok) continue;
        s.elements.push_back(pool[pick(rng)]);
        s.coords.push_back(p);
    }
    return s;
}

// Applies x -> R x + t with a random proper rotation.
inline mlknn::Structure rigid_motion(const mlknn::Structure& s, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::Matrix3d m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = g(rng);
    Eigen::HouseholderQR<Eigen::Matrix3d> qr(m);
    Eigen::Matrix3d R = qr.householderQ();
    if (R.determinant() < 0) R.col(0) *= -1.0;
    const Eigen::Vector3d t(g(rng) * 5, g(rng) * 5, g(rng) * 5);
    mlknn::Structure out = s;
    for (auto& c : out.coords) {
        const Eigen::Vector3d p = R * Eigen::Vector3d(c[0], c[1], c[2]) + t;
        c = {p[0], p[1], p[2]};
    }
    return out;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("mlknn_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
