#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dentlab {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape rule violations in tensor ops (message names the op and both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values / contract violations.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Configuration problems; carries the offending field path for CLI exit 2.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& msg)
      : Error("config: " + field + ": " + msg), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Missing file that the run depends on (checkpoints map to CLI exit 3).
class FileMissingError : public IoError {
 public:
  using IoError::IoError;
};

// Non-finite values where finite ones are required (aborted training etc.).
class NumericError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic RNG with a documented splitting scheme.
//
// All randomness in the project flows from a single run seed. Child streams
// are derived as child_seed = splitmix64(parent_seed ^ splitmix64(tag)), so
// attack restarts, batch composition and defense init are reproducible and
// independent of each other.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t seed() const { return seed_; }

  Rng split(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag))); }

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; two fresh uniforms per draw keeps the stream stateless.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // [0, n)
  int64_t randint(int64_t n) {
    if (n <= 0) throw ValueError("Rng::randint: n must be positive");
    int64_t v = int64_t(uniform() * double(n));
    return v >= n ? n - 1 : v;
  }

  int sign() { return uniform() < 0.5 ? -1 : 1; }

  // Fisher-Yates over indices 0..n-1.
  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(n);
    for (int64_t i = 0; i < n; ++i) p[i] = i;
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = randint(i + 1);
      std::swap(p[i], p[j]);
    }
    return p;
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

// FNV-1a over raw bytes; used for backbone-invariance checks.
inline uint64_t fnv1a64(const void* data, size_t nbytes, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < nbytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
uint64_t checksum(const std::vector<T>& v, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(v.data(), v.size() * sizeof(T), h);
}

}  // namespace dentlab
