#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlkd {

// Error taxonomy. ConfigError maps to CLI exit code 1, NumericError to 2.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic per-purpose seed derivation: (seed, tag) -> stream seed.
inline uint64_t derive_seed(uint64_t seed, const std::string& tag) {
  uint64_t s = seed ^ fnv1a64(tag);
  return splitmix64(s);
}

// Counter-based RNG with hand-rolled samplers. std::mt19937 engines are
// portable but the <random> distributions are not; every draw here is
// pinned so generated datasets and initializations replay bit-exact.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // decorrelate nearby seeds
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform double in [0, 1).
  double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  bool bernoulli(double p) { return u01() < p; }

  /// Uniform index in [0, n).
  int64_t index(int64_t n) {
    return static_cast<int64_t>(u01() * static_cast<double>(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = u01();
    double u2 = u01();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  template <typename V>
  void shuffle(V& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Fixed 64-byte alignment for numeric buffers. Eigen's vectorized kernels
// pick peel/tail splits from pointer alignment; pinning the alignment keeps
// repeated runs bit-identical regardless of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(alignment));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(alignment));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const noexcept { return false; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline int64_t product(const std::vector<int64_t>& dims) {
  int64_t n = 1;
  for (int64_t d : dims) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int64_t>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace mlkd
