#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace exitnet {

// Deterministic counter-based generator (splitmix64). Streams are cheap to
// fork; parameter initialisation derives one stream per parameter from
// (global seed, parameter path), so results never depend on construction
// order or on how many values other parameters consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);      // [lo, hi)
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
  double normal();                           // standard normal, Box-Muller
  double normal(double mean, double stddev);
  // Resamples until |z| <= bound (in sigma units), then scales by stddev.
  double truncated_normal(double stddev, double bound = 2.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t fnv1a64(const std::string& s);

// Stream for one named parameter under a global seed.
Rng param_rng(std::uint64_t seed, const std::string& path);

// Derived sub-seed for a named purpose (epoch shuffles, per-class jitter, ...).
std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag);

}  // namespace exitnet
