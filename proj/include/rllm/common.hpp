#pragma once

#include <complex>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rllm {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// File-format problems carry a structured reason so callers (and tests)
// can distinguish bad magic / bad version / truncation.
struct FormatError : std::runtime_error {
  enum class Reason { bad_magic, bad_version, truncated, malformed };
  Reason reason;
  FormatError(Reason r, const std::string& what) : std::runtime_error(what), reason(r) {}
};

struct ArtifactMismatch : std::runtime_error {
  explicit ArtifactMismatch(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr double kPi = 3.141592653589793238462643383279502884;

using cdouble = std::complex<double>;

// FNV-1a, used for config hashes, artifact hashes and frozen-weight hashes.
// Chosen over a cryptographic hash because the hashes here only chain
// pipeline stages and detect accidental mixing, and FNV is platform-stable.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

static_assert(sizeof(double) == 8, "IEEE-754 binary64 layout required");

}  // namespace rllm
