#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace stella {

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Combines seed components into one well-mixed 64-bit seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// Deterministic random stream. All distributions are computed here from raw
/// engine output so the whole state is the engine state (serializable).
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    /// Standard normal (Box-Muller, no cached second value).
    double normal();
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    bool bernoulli(double p);
    /// Uniformly random permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

    std::string state() const;
    void set_state(const std::string& state);

   private:
    std::mt19937_64 engine_;
};

}  // namespace stella
