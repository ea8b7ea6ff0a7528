#pragma once

#include <cstdint>
#include <random>

namespace ck {

/// Explicitly seeded generator owned by a training session. Every stochastic
/// draw (initialization, gate noise, Rademacher probes, data) goes through one.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform on the open interval (0, 1).
    double uniform() {
        double u;
        do {
            u = std::generate_canonical<double, 53>(engine_);
        } while (u <= 0.0);
        return u;
    }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    /// +1 or -1 with equal probability.
    double rademacher() { return (engine_() & 1u) ? 1.0 : -1.0; }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace ck
