#pragma once

#include <cstdint>
#include <random>

#include "embolite/tensor.hpp"

namespace embolite {

// Seeded generator shared by phantom synthesis, shuffling and weight init.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Inclusive range.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::uint64_t next() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

Tensor random_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);
Tensor random_normal(Shape shape, Rng& rng, double stddev = 1.0);

}  // namespace embolite
