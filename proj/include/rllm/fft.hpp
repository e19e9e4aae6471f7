#pragma once

#include <complex>
#include <vector>

#include "rllm/common.hpp"

namespace rllm {

namespace fftdetail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, in place. n must be a power of two.
inline void fft_pow2(std::vector<cdouble>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const cdouble wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cdouble w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const cdouble u = a[i + j];
        const cdouble v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv;
  }
}

}  // namespace fftdetail

// Forward DFT of arbitrary length: X[k] = sum_n x[n] exp(-j 2 pi k n / N).
// Power-of-two sizes go through radix-2; everything else through the
// Bluestein chirp-z transform so odd window lengths are first-class.
inline std::vector<cdouble> dft(const std::vector<cdouble>& x) {
  const std::size_t n = x.size();
  if (n == 0) throw ValidationError("dft: empty input");
  if (n == 1) return x;
  if (fftdetail::is_pow2(n)) {
    std::vector<cdouble> a = x;
    fftdetail::fft_pow2(a, false);
    return a;
  }
  // Bluestein: X[k] = conj(c[k]) * (a (*) b)[k], with chirp c[m] = exp(-j pi m^2 / N).
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  std::vector<cdouble> a(m, cdouble(0.0, 0.0)), b(m, cdouble(0.0, 0.0));
  std::vector<cdouble> chirp(n);
  for (std::size_t i = 0; i < n; ++i) {
    // i*i mod 2N keeps the angle argument small for large N.
    const double ang = kPi * static_cast<double>((i * i) % (2 * n)) / static_cast<double>(n);
    chirp[i] = cdouble(std::cos(ang), -std::sin(ang));
    a[i] = x[i] * chirp[i];
  }
  b[0] = cdouble(1.0, 0.0);
  for (std::size_t i = 1; i < n; ++i) b[i] = b[m - i] = std::conj(chirp[i]);
  fftdetail::fft_pow2(a, false);
  fftdetail::fft_pow2(b, false);
  for (std::size_t i = 0; i < m; ++i) a[i] *= b[i];
  fftdetail::fft_pow2(a, true);
  std::vector<cdouble> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * chirp[i];
  return out;
}

}  // namespace rllm
