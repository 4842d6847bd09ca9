#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace eve {

// Counter-based generator built on the SplitMix64 finalizer. Every draw is a
// pure function of (key, counter), so streams can be derived by name or index
// without sharing state. Independent streams for data order, masking and init
// mean changing one knob never perturbs the others' draws.
class Rng {
 public:
  explicit Rng(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  static Rng from_seed(std::uint64_t seed);

  // Derived generators start with counter 0.
  [[nodiscard]] Rng stream(std::string_view name) const;
  [[nodiscard]] Rng derive(std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                    // [0, 1)
  double normal();                     // standard normal, Box-Muller
  double trunc_normal(double sigma);   // resamples until |z| <= 2
  int uniform_int(int n);              // [0, n)
  int uniform_int(int lo, int hi);     // [lo, hi] inclusive

  std::vector<int> permutation(int n);
  // k distinct values from [0, n), returned sorted ascending.
  std::vector<int> sample_without_replacement(int n, int k);

  [[nodiscard]] std::uint64_t key() const { return key_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace eve
