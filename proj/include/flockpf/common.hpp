#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace flockpf {

/// Bad configuration: invalid scenario parameters, mismatched shapes in
/// user-provided setups, missing files. Maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure at runtime: singular covariances, degenerate weight
/// sets, NaN losses. Maps to CLI exit code 3.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic random stream. Sub-streams are derived from (base, tag)
/// so parallel and serial consumers draw identical values. The raw engine
/// is mt19937_64 (exactly specified by the standard); uniform and normal
/// transforms are hand-rolled so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_(seed), gen_(splitmix64(seed)) {}

  /// Independent sub-stream keyed by tag. derive(a).derive(b) and
  /// derive(b).derive(a) differ; tags act as a path.
  Rng derive(uint64_t tag) const { return Rng(splitmix64(base_ ^ splitmix64(tag + 0x9e3779b97f4a7c15ULL))); }

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in [a, b).
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  /// Standard normal via Box-Muller. Two engine draws per call, no cached
  /// spare, so the stream position is independent of call interleaving.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return gen_() % n; }

  uint64_t base() const { return base_; }

 private:
  uint64_t base_;
  std::mt19937_64 gen_;
};

}  // namespace flockpf
