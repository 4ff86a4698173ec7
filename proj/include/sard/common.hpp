#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sard {

// Error taxonomy. Every throwing path uses one of these so callers can
// distinguish precondition violations from numerical failures.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DuplicateLocation : Error { using Error::Error; };
struct NonpositiveArea : Error { using Error::Error; };
struct CoordinateOutOfRange : Error { using Error::Error; };
struct TooFewLocations : Error { using Error::Error; };
struct OutOfRange : Error { using Error::Error; };
struct SingularStar : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct RankDeficient : Error { using Error::Error; };
struct NonFiniteField : Error { using Error::Error; };
struct StabilityViolation : Error { using Error::Error; };
struct DegenerateAggregate : Error { using Error::Error; };
struct ZeroPhiTilde : Error { using Error::Error; };
struct EmptyBand : Error { using Error::Error; };
struct LambdaOutOfRange : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct NegativeForecast : Error { using Error::Error; };

// Deterministic random source. The standard distributions are
// implementation-defined, so uniform and normal draws are generated from the
// raw mt19937_64 bit stream to keep outputs byte-identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // uniform on [0, 1) with 53-bit resolution
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; draws are consumed in pairs
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // uniform integer on [0, n)
  std::uint64_t index(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sard
