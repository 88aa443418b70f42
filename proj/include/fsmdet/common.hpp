#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fsmdet {

// Error hierarchy. Each kind is a distinct type so callers can catch what
// they can handle; everything derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FSMDET_DEFINE_ERROR(Name)                 \
  class Name : public Error {                     \
   public:                                        \
    explicit Name(const std::string& what)        \
        : Error(std::string(#Name ": ") + what) {} \
  }

FSMDET_DEFINE_ERROR(InvalidArgument);
FSMDET_DEFINE_ERROR(InvalidCamera);
FSMDET_DEFINE_ERROR(DegenerateInput);
FSMDET_DEFINE_ERROR(InvalidDelta);
FSMDET_DEFINE_ERROR(NotWatertight);
FSMDET_DEFINE_ERROR(EmptyInput);
FSMDET_DEFINE_ERROR(IndivisibleDims);
FSMDET_DEFINE_ERROR(PlacementFailure);
FSMDET_DEFINE_ERROR(NotVisible);
FSMDET_DEFINE_ERROR(DimensionMismatch);
FSMDET_DEFINE_ERROR(LabelOutOfRange);
FSMDET_DEFINE_ERROR(DegenerateCell);
FSMDET_DEFINE_ERROR(ConflictingToggles);
FSMDET_DEFINE_ERROR(ConfigError);
FSMDET_DEFINE_ERROR(FormatError);

#undef FSMDET_DEFINE_ERROR

/// Integer voxel index (x, y, z). Ordered lexicographically.
struct Index3 {
  int x = 0, y = 0, z = 0;
  auto operator<=>(const Index3&) const = default;
  Index3 operator+(const Index3& o) const { return {x + o.x, y + o.y, z + o.z}; }
};

/// Integer BEV cell index (x, y).
struct Index2 {
  int x = 0, y = 0;
  auto operator<=>(const Index2&) const = default;
  Index2 operator+(const Index2& o) const { return {x + o.x, y + o.y}; }
};

// Deterministic random source. The engine is std::mt19937_64; the
// real/integer mappings are written out here so streams do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ULL) {
    engine_.seed(splitmix(state_));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  std::mt19937_64 engine_;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must
/// write only to their own slot; the result is then independent of the
/// thread count.
inline void parallel_for(std::size_t n, unsigned threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// 64-bit FNV-1a, used for scene fingerprints.
class Fnv1a {
 public:
  void bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001B3ULL;
    }
  }
  template <typename T>
  void value(const T& v) {
    bytes(&v, sizeof(T));
  }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

}  // namespace fsmdet
