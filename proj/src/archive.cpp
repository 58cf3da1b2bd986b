#include "mlknn/archive.hpp"

#include "mlknn/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mlknn {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'K', 'N', 'N', 'A', 'R', '1'};

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

}  // namespace

const RowMatrix& Archive::array(const std::string& name) const {
    const auto it = arrays.find(name);
    if (it == arrays.end()) throw IOError("archive has no array '" + name + "'");
    return it->second;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
    nlohmann::json header;
    header["meta"] = archive.meta;
    std::uint64_t offset = 0;
    for (const auto& [name, m] : archive.arrays) {
        header["arrays"][name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}};
        offset += static_cast<std::uint64_t>(m.size());
    }
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : archive.arrays)
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!out) throw IOError("failed writing " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IOError(path.string() + " is not an mlknn archive");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IOError("truncated archive header in " + path.string());

    const auto header = nlohmann::json::parse(text);
    Archive archive;
    archive.meta = header.value("meta", nlohmann::json::object());
    const auto data_start = in.tellg();
    if (header.contains("arrays")) {
        for (const auto& [name, info] : header["arrays"].items()) {
            const auto rows = info["rows"].get<Eigen::Index>();
            const auto cols = info["cols"].get<Eigen::Index>();
            const auto off = info["offset"].get<std::uint64_t>();
            RowMatrix m(rows, cols);
            in.seekg(data_start + static_cast<std::streamoff>(off * sizeof(double)));
            in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
            if (!in) throw IOError("truncated array '" + name + "' in " + path.string());
            archive.arrays.emplace(name, std::move(m));
        }
    }
    return archive;
}

RowMatrix as_column(const Vector& v) {
    RowMatrix m(v.size(), 1);
    m.col(0) = v;
    return m;
}

Vector column_to_vector(const RowMatrix& m) {
    if (m.cols() != 1) throw ShapeError("expected a single-column array");
    return m.col(0);
}

}  // namespace mlknn
