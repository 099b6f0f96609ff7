#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "cfcredit/errors.hpp"

namespace cfcredit {

/// Seeded random stream. All sampling in the library goes through this
/// wrapper so that runs are reproducible bit-for-bit from a single seed.
/// Draw functions avoid std::*_distribution, whose output is not pinned
/// by the standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    require_usage(n > 0, "uniform_int: n must be positive, got ", n);
    return static_cast<int>(uniform() * n) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Categorical draw from a probability vector. The vector must be
  /// normalized to within 1e-6.
  int categorical(const Eigen::VectorXd& probs) {
    require_usage(probs.size() > 0, "categorical: empty probability vector");
    const double total = probs.sum();
    require_usage(std::abs(total - 1.0) <= 1e-6,
                  "categorical: probabilities sum to ", total, ", not 1");
    const double u = uniform() * total;
    double acc = 0.0;
    for (int i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return static_cast<int>(probs.size()) - 1;
  }

  /// 64-bit value suitable for seeding an independent stream.
  std::uint64_t next_seed() { return engine_(); }

  /// Independent child stream.
  Rng fork() { return Rng(next_seed()); }

  std::string state() const {
    std::ostringstream oss;
    oss << engine_;
    return oss.str();
  }

  void restore(const std::string& s) {
    std::istringstream iss(s);
    iss >> engine_;
    if (!iss) throw IoError("Rng::restore: malformed state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cfcredit
