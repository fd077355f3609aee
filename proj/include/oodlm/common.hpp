#pragma once

// Error taxonomy and the deterministic random source shared by every module.
//
// All randomness in the library flows through Rng so that a (seed, purpose)
// pair fully determines corpora, weight init, batch order and dropout masks.
// std::<distribution> types are implementation-defined, so the gaussian /
// uniform / shuffle primitives are spelled out here by hand.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace oodlm {

// ---------------------------------------------------------------------------
// Errors.  Every failure the library raises carries a stable machine-readable
// code; the CLI prints them as "error: <CODE>: <message>" and exits nonzero.

class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

private:
  std::string code_;
};

// Misuse of an API: bad arguments, empty inputs, out-of-range ids.
struct UsageError : Error {
  explicit UsageError(const std::string& m) : Error("USAGE_ERROR", m) {}
};

// Incompatible tensor shapes.
struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("SHAPE_ERROR", m) {}
};

// Non-finite values where finite ones are required (diverged loss, bad input).
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("NUMERIC_ERROR", m) {}
};

// Malformed textual input (JSONL, config files); message carries line numbers.
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("PARSE_ERROR", m) {}
};

// Filesystem trouble: missing files, short reads, failed writes.
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("IO_ERROR", m) {}
};

// Inconsistent or unknown configuration keys / values.
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("CONFIG_ERROR", m) {}
};

// Checkpoint files that do not match the expected format.
struct LoadError : Error {
  explicit LoadError(const std::string& m) : Error("LOAD_ERROR", m) {}
};

// ---------------------------------------------------------------------------
// Seed mixing.  splitmix64 is the standard finalizer; mix64 derives stream
// seeds such as (run seed, epoch) -> shuffle seed.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// ---------------------------------------------------------------------------
// Deterministic random source: mt19937_64 plus hand-rolled transforms whose
// output is identical across platforms and standard library versions.

class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the second sample of each pair is cached.
  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).  The modulo bias is ~n / 2^64: irrelevant for
  // the corpus sizes used here, and the result is fully deterministic.
  std::size_t below(std::size_t n) {
    if (n == 0) throw UsageError("Rng::below: n must be positive");
    return static_cast<std::size_t>(next_u64() % n);
  }

  // Fisher-Yates; std::shuffle's draw pattern is implementation-defined.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace oodlm
