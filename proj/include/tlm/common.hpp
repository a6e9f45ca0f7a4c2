#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace tlm {

// Dense storage is row-major float32; all reductions and training math run in
// float64 and are rounded back to storage on write.
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecF = Eigen::VectorXf;
using VecD = Eigen::VectorXd;

enum class ErrorKind {
    validation, // bad arguments, malformed inputs           (CLI exit 1)
    io,         // unreadable/unwritable paths               (CLI exit 2)
    numeric,    // NaN divergence and friends                (CLI exit 3)
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// SplitMix64: the single PRNG behind every seeded operation in the toolkit.
struct SplitMix64 {
    uint64_t state;

    explicit constexpr SplitMix64(uint64_t seed) : state(seed) {}

    constexpr uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // (0, 1), safe under log()
    double uniform_pos() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }

    uint64_t below(uint64_t n) { return n == 0 ? 0 : next() % n; }
};

// Box-Muller over SplitMix64. Portable draw sequence: the same seed yields the
// same weights on every platform, up to libm ulp differences.
struct GaussianRng {
    SplitMix64 rng;
    bool has_spare = false;
    double spare = 0.0;

    explicit GaussianRng(uint64_t seed) : rng(seed) {}

    double next() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = rng.uniform_pos();
        double u2 = rng.uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }
};

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex_u64(uint64_t v);

// %.9g — the pinned number precision for reports
std::string format_g9(double v);

} // namespace tlm
