#include "mlknn/common.hpp"

#include <cstdio>
#include <iostream>
#include <mutex>

namespace mlknn {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void log_warning(std::string_view message) {
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::cerr << "[mlknn] warning: " << message << '\n';
}

}  // namespace mlknn
