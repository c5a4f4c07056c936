#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dte {

// Bad or inconsistent configuration, dataset manifests, scripts, templates.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// HTTP backend failure after retries; carries the last status and attempt count.
struct TransportError : std::runtime_error {
  int status = 0;
  int attempts = 0;
  TransportError(const std::string& msg, int status_, int attempts_)
      : std::runtime_error(msg), status(status_), attempts(attempts_) {}
};

// Optimization produced a non-finite update or an external trainer failed.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive seed derivation; every random draw in the library traces back
// to one of these so thread scheduling never changes results.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

// Uniform double in [0, 1). std:: distributions are implementation-defined, so
// draws are derived from raw engine output to keep artifacts bit-reproducible.
inline double u01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Unbiased uniform index in [0, n).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  const std::uint64_t bound = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v = rng();
  while (v >= bound) v = rng();
  return static_cast<std::size_t>(v % n);
}

}  // namespace dte
