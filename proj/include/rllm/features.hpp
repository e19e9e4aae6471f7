#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "rllm/common.hpp"
#include "rllm/echo.hpp"
#include "rllm/fft.hpp"

namespace rllm {

inline constexpr int kNumFeatures = 5;
inline constexpr std::array<const char*, kNumFeatures> kFeatureNames = {"IP", "DSE", "SMS", "Amp",
                                                                        "DP"};

// Five per-window sequence features, each of length N (SMS length Omega = N).
struct FeatureSet {
  std::vector<double> ip;   // radians, (-pi, pi]
  std::vector<double> dse;  // nats per bin
  std::vector<double> sms;  // dB
  std::vector<double> amp;  // linear amplitude
  std::vector<double> dp;   // radians, (-pi, pi]

  const std::vector<double>& channel(int f) const {
    switch (f) {
      case 0: return ip;
      case 1: return dse;
      case 2: return sms;
      case 3: return amp;
      default: return dp;
    }
  }
  std::vector<double>& channel(int f) {
    return const_cast<std::vector<double>&>(static_cast<const FeatureSet*>(this)->channel(f));
  }
};

enum class WindowKind : std::uint8_t { hamming = 0, rectangular = 1 };

struct FeatureConfig {
  std::uint32_t stft_window_len = 64;
  std::uint32_t stft_hop = 16;
  WindowKind stft_window = WindowKind::hamming;
};

inline std::vector<double> make_window(WindowKind kind, std::uint32_t w) {
  std::vector<double> out(w, 1.0);
  if (kind == WindowKind::hamming && w > 1) {
    for (std::uint32_t j = 0; j < w; ++j)
      out[j] = 0.54 - 0.46 * std::cos(2.0 * kPi * j / static_cast<double>(w - 1));
  }
  return out;
}

namespace featdetail {

inline double wrap_phase(double phi) {
  // atan2 lands in [-pi, pi]; fold the closed lower end onto +pi.
  return phi <= -kPi ? kPi : phi;
}

inline double arg_or_zero(const cdouble& z) {
  if (z.real() == 0.0 && z.imag() == 0.0) return 0.0;
  return wrap_phase(std::atan2(z.imag(), z.real()));
}

// fftshift index map: output bin o (ascending frequency, most negative
// first) <- DFT bin (o + N - floor(N/2)) mod N.
inline std::size_t shifted_source_bin(std::size_t o, std::size_t n) {
  return (o + n - n / 2) % n;
}

}  // namespace featdetail

// phi(n) = arg x(n), with arg(0) := 0. Total function.
inline std::vector<double> instantaneous_phase(const std::vector<cdouble>& x) {
  if (x.empty()) throw ValidationError("instantaneous_phase: empty input");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = featdetail::arg_or_zero(x[i]);
  return out;
}

// F(f_d) = (1/sqrt(N)) |sum_n x(n) exp(-j 2 pi f_d n T_s)| at the N DFT
// bins, reordered from most negative to most positive frequency.
inline std::vector<double> doppler_amplitude_spectrum(const std::vector<cdouble>& x) {
  if (x.empty()) throw ValidationError("doppler_amplitude_spectrum: empty input");
  const std::size_t n = x.size();
  const auto spec = dft(x);
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o)
    out[o] = norm * std::abs(spec[featdetail::shifted_source_bin(o, n)]);
  return out;
}

// Output index of Doppler frequency f for an N-bin spectrum at the given PRF.
inline std::size_t doppler_bin_of(double f_hz, std::size_t n, double prf_hz) {
  const auto k = static_cast<std::ptrdiff_t>(std::lround(f_hz / prf_hz * static_cast<double>(n)));
  return static_cast<std::size_t>(k + static_cast<std::ptrdiff_t>(n / 2));
}

// Per-bin entropy of the normalized Doppler spectrum: -F~ ln F~, 0 ln 0 := 0.
inline std::vector<double> doppler_spectrum_entropy(const std::vector<double>& f) {
  if (f.empty()) throw ValidationError("doppler_spectrum_entropy: empty input");
  double total = 0.0;
  for (double v : f) {
    if (v < 0.0) throw ValidationError("doppler_spectrum_entropy: negative spectrum value");
    total += v;
  }
  if (!(total > 0.0)) throw ValidationError("doppler_spectrum_entropy: all-zero spectrum");
  std::vector<double> out(f.size(), 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double p = f[i] / total;
    if (p > 0.0) out[i] = -p * std::log(p);
  }
  return out;
}

// Column-major complex STFT matrix, Omega rows (frequency) by n_frames cols.
struct StftMatrix {
  std::size_t n_bins = 0;
  std::size_t n_frames = 0;
  std::vector<cdouble> data;  // data[k + m * n_bins]

  cdouble& at(std::size_t k, std::size_t m) { return data[k + m * n_bins]; }
  const cdouble& at(std::size_t k, std::size_t m) const { return data[k + m * n_bins]; }
};

// S(k,m) = sum_n x(n) w(n - m*hop) exp(-j 2 pi k n / Omega). The DFT runs
// over the absolute sample index n, so each frame's transform is rotated by
// the frame-offset twiddle.
inline StftMatrix stft(const std::vector<cdouble>& x, const std::vector<double>& window,
                       std::uint32_t hop, std::uint32_t omega) {
  const std::size_t n = x.size();
  const std::size_t w = window.size();
  if (w < 1 || w > n) throw ValidationError("stft: window length must satisfy 1 <= W <= N");
  if (hop < 1) throw ValidationError("stft: hop must be >= 1");
  if (omega < w) throw ValidationError("stft: Omega must be >= window length");
  StftMatrix s;
  s.n_bins = omega;
  s.n_frames = (n - w) / hop + 1;
  s.data.resize(s.n_bins * s.n_frames);
  std::vector<cdouble> frame(omega);
  for (std::size_t m = 0; m < s.n_frames; ++m) {
    const std::size_t off = m * hop;
    std::fill(frame.begin(), frame.end(), cdouble(0.0, 0.0));
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t idx = off + j;
      if (idx < n) frame[j] = x[idx] * window[j];  // zero-extend past the edge
    }
    auto spec = dft(frame);
    for (std::size_t k = 0; k < omega; ++k) {
      const double ang = -2.0 * kPi * static_cast<double>(k) * static_cast<double>(off) /
                         static_cast<double>(omega);
      s.at(k, m) = spec[k] * cdouble(std::cos(ang), std::sin(ang));
    }
  }
  return s;
}

inline constexpr double kSmsFloor = 1e-12;  // -120 dB

// SMS(k) = 10 log10(max(sum_m |S(k,m)|, 1e-12)).
inline std::vector<double> sms(const StftMatrix& s) {
  if (s.n_frames == 0) throw ValidationError("sms: need at least one frame");
  std::vector<double> out(s.n_bins);
  for (std::size_t k = 0; k < s.n_bins; ++k) {
    double acc = 0.0;
    for (std::size_t m = 0; m < s.n_frames; ++m) acc += std::abs(s.at(k, m));
    out[k] = 10.0 * std::log10(std::max(acc, kSmsFloor));
  }
  return out;
}

inline std::vector<double> amplitude(const std::vector<cdouble>& x) {
  if (x.empty()) throw ValidationError("amplitude: empty input");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::abs(x[i]);
  return out;
}

// DP(f_d) = arg of the Doppler transform at the same bins and ordering as
// doppler_amplitude_spectrum; arg(0) := 0.
inline std::vector<double> doppler_phase(const std::vector<cdouble>& x) {
  if (x.empty()) throw ValidationError("doppler_phase: empty input");
  const std::size_t n = x.size();
  const auto spec = dft(x);
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o)
    out[o] = featdetail::arg_or_zero(spec[featdetail::shifted_source_bin(o, n)]);
  return out;
}

// All five features with Omega = N so every channel has length N.
// A degenerate (all-zero) Doppler spectrum yields a zero DSE channel and
// bumps *warn_count instead of failing the batch.
inline FeatureSet extract_all(const ObservationVector& v, const FeatureConfig& cfg,
                              std::size_t* warn_count = nullptr) {
  const std::size_t n = v.values.size();
  if (n == 0) throw ValidationError("extract_all: empty observation vector");
  FeatureSet fs;
  fs.ip = instantaneous_phase(v.values);
  const auto spectrum = doppler_amplitude_spectrum(v.values);
  try {
    fs.dse = doppler_spectrum_entropy(spectrum);
  } catch (const ValidationError&) {
    fs.dse.assign(n, 0.0);
    if (warn_count) {
      ++*warn_count;
    } else {
      std::fprintf(stderr, "warning: sample %llu has an all-zero Doppler spectrum; DSE set to 0\n",
                   static_cast<unsigned long long>(v.sample_id));
    }
  }
  const auto window = make_window(cfg.stft_window, cfg.stft_window_len);
  fs.sms = sms(stft(v.values, window, cfg.stft_hop, static_cast<std::uint32_t>(n)));
  fs.amp = amplitude(v.values);
  fs.dp = doppler_phase(v.values);
  return fs;
}

// Per-channel z-score statistics, fit on the training split only.
struct FeatureNormalizer {
  std::array<double, kNumFeatures> mean{};
  std::array<double, kNumFeatures> stdev{};

  static FeatureNormalizer fit(const std::vector<FeatureSet>& train) {
    if (train.empty()) throw ValidationError("FeatureNormalizer::fit: empty training set");
    FeatureNormalizer z;
    for (int f = 0; f < kNumFeatures; ++f) {
      double s = 0.0, s2 = 0.0;
      std::size_t count = 0;
      for (const auto& fs : train)
        for (double v : fs.channel(f)) {
          s += v;
          s2 += v * v;
          ++count;
        }
      const double m = s / static_cast<double>(count);
      const double var = std::max(s2 / static_cast<double>(count) - m * m, 0.0);
      z.mean[f] = m;
      z.stdev[f] = std::max(std::sqrt(var), 1e-12);
    }
    return z;
  }

  void apply(FeatureSet& fs) const {
    for (int f = 0; f < kNumFeatures; ++f)
      for (double& v : fs.channel(f)) v = (v - mean[f]) / stdev[f];
  }
};

// Long-format feature dump for external plotting.
inline void write_feature_csv(std::ostream& os, std::uint64_t sample_id, const FeatureSet& fs) {
  char buf[48];
  for (int f = 0; f < kNumFeatures; ++f) {
    const auto& ch = fs.channel(f);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", ch[i]);
      os << sample_id << ',' << kFeatureNames[f] << ',' << i << ',' << buf << "\n";
    }
  }
}

}  // namespace rllm
