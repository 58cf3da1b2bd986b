#pragma once

#include "mlknn/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace mlknn {

/// A JSON header plus named double matrices, stored as
/// "MLKNNAR1" | u64 header length | header JSON | raw little-endian doubles.
struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, RowMatrix> arrays;

    const RowMatrix& array(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

RowMatrix as_column(const Vector& v);
Vector column_to_vector(const RowMatrix& m);

}  // namespace mlknn
