#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace msr {

/// Seeded random source shared by initialization, augmentation, shuffling and
/// noise injection.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard (the 10000th draw of a default-seeded engine is
/// 9981545732273789042). All conversions to real or bounded-integer values are
/// done here instead of through <random> distributions, whose algorithms are
/// implementation-defined. That keeps every stream bit-identical across
/// standard libraries and platforms.
class Prng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/53bit-uniform/v1";

  explicit Prng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) from the top 53 bits of one draw.
  double next_unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi). Throws when lo >= hi.
  double uniform(double lo, double hi) {
    if (!(lo < hi)) {
      throw std::invalid_argument("Prng::uniform requires lo < hi, got lo=" + std::to_string(lo) +
                                  " hi=" + std::to_string(hi));
    }
    double v = lo + (hi - lo) * next_unit();
    // lo + (hi-lo)*u can round up to hi for u close to 1.
    if (v >= hi) v = std::nextafter(hi, lo);
    return v;
  }

  /// Uniform integer in [0, n) by rejection, so there is no modulo bias.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Prng::uniform_index requires n > 0");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return next_unit() < p; }

  /// Standard normal via Box-Muller. Consumes exactly two draws per call.
  double normal() {
    const double u1 = 1.0 - next_unit();  // (0, 1]
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Engine state as text; restore() brings back the exact stream position.
  std::string state() const {
    std::ostringstream os;
    os << seed_ << ' ' << engine_;
    return os.str();
  }

  void restore(const std::string& text) {
    std::istringstream is(text);
    std::uint64_t seed = 0;
    std::mt19937_64 engine;
    is >> seed >> engine;
    if (!is) throw std::runtime_error("Prng::restore: malformed state string");
    seed_ = seed;
    engine_ = engine;
  }

  friend bool operator==(const Prng& a, const Prng& b) {
    return a.seed_ == b.seed_ && a.engine_ == b.engine_;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace msr
