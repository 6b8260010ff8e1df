#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace stressprompt {

using json = nlohmann::ordered_json;

// Error kinds map onto CLI exit codes: validation-type errors exit 1,
// everything that fails at runtime exits 2.
enum class ErrorKind {
  Parse,
  Validation,
  Config,
  Capability,
  Adapter,
  Length,
  Degenerate,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Parse: return "parse error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Capability: return "capability error";
    case ErrorKind::Adapter: return "adapter error";
    case ErrorKind::Length: return "length error";
    case ErrorKind::Degenerate: return "degenerate input";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  bool is_validation() const noexcept {
    return kind_ == ErrorKind::Parse || kind_ == ErrorKind::Validation ||
           kind_ == ErrorKind::Config;
  }

 private:
  ErrorKind kind_;
};

// 64-bit FNV-1a; used for config digests and the toy model's token hashing.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

// splitmix64 finalizer, for turning hashes into well-mixed seeds.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seeded standard normal sampler (Box-Muller over raw mt19937_64 output).
/// std::normal_distribution is implementation-defined; this one produces the
/// same stream on every platform, which the committed fixtures rely on.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  double operator()() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace stressprompt
