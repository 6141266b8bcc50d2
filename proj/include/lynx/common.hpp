#pragma once

// Shared plumbing: error types, deterministic RNG, content hashing.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "serialized formats assume a little-endian host");

namespace lynx {

enum class ErrorKind {
    config,   // bad configuration / validation failure
    runtime,  // failure while doing the work
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline Error config_error(const std::string& msg) { return Error(ErrorKind::config, msg); }
inline Error runtime_error(const std::string& msg) { return Error(ErrorKind::runtime, msg); }

// FNV-1a, used for stable ids and content hashes.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a_str(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Deterministic RNG. mt19937_64 has a standard-fixed sequence; the uniform and
// normal transforms are hand-rolled because the std distributions are
// implementation-defined and would break cross-platform reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Derive an independent stream from (seed, tag, index). Stateless per
    // (tag, index), so resumed runs see identical draws.
    static Rng derive(uint64_t seed, const std::string& tag, uint64_t index) {
        uint64_t h = fnv1a(&seed, sizeof(seed));
        h = fnv1a_str(tag, h);
        h = fnv1a(&index, sizeof(index), h);
        return Rng(h);
    }

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // index in [0, n)
    uint64_t below(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

    // standard normal via Box-Muller (deterministic; no cached spare)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace lynx
