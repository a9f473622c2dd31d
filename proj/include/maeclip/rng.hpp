#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "maeclip/errors.hpp"

namespace maeclip {

/// Deterministic random source. Wraps std::mt19937_64 but derives all
/// variates from raw engine words, so the sequence is bit-reproducible
/// across standard library implementations and the full state can be
/// serialized (needed for exact training resume).
class Rng {
public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    uint64_t uniform_index(uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    /// Standard normal via Box-Muller. Consumes exactly two engine words
    /// per call and caches nothing, keeping serialization exact.
    double normal() {
        const double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

    /// Engine state as packed 64-bit words (for checkpointing).
    std::vector<uint64_t> serialize() const {
        std::ostringstream os;
        os << engine_;
        std::vector<uint64_t> words;
        std::istringstream is(os.str());
        uint64_t w = 0;
        while (is >> w) words.push_back(w);
        return words;
    }

    static Rng deserialize(const std::vector<uint64_t>& words) {
        std::ostringstream os;
        for (size_t i = 0; i < words.size(); ++i) {
            if (i) os << ' ';
            os << words[i];
        }
        Rng r;
        std::istringstream is(os.str());
        is >> r.engine_;
        if (is.fail()) throw FormatError("rng state: cannot restore engine from serialized words");
        return r;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace maeclip
