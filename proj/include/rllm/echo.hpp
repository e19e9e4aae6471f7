#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <utility>
#include <vector>

#include "rllm/common.hpp"
#include "rllm/rng.hpp"

namespace rllm {

enum class CellKind : std::uint8_t { target = 0, clutter = 1 };
enum class EchoSource : std::uint8_t { synthetic = 0, ingested = 1 };

// Coherent pulse returns from one range resolution cell.
struct EchoSeries {
  std::vector<cdouble> samples;
  double prf_hz = 0.0;
  CellKind cell_kind = CellKind::clutter;
  std::uint64_t cell_id = 0;
  EchoSource source = EchoSource::synthetic;
};

// One fixed-length window cut from a cell's echo sequence.
struct ObservationVector {
  std::vector<cdouble> values;
  CellKind label = CellKind::clutter;
  std::uint64_t sample_id = 0;
  std::uint32_t time_index = 0;  // 1-based window index i
};

struct Dataset {
  std::vector<ObservationVector> vectors;
  std::uint32_t window_len = 0;
  double prf_hz = 0.0;
};

struct SceneParams {
  std::uint32_t n_pulses = 16384;
  double prf_hz = 1000.0;
  double clutter_shape_nu = 0.5;   // K-distribution shape
  double clutter_power = 1.0;      // mean clutter intensity
  double target_amplitude = 1.0;
  double target_doppler_hz = 120.0;
  double doppler_jitter_hz = 10.0;
  double scr_db = std::nan("");    // NaN = unset, use target_amplitude
  std::uint64_t seed = 0;
  // Texture (slow sea modulation) is held constant over this many pulses.
  std::uint32_t texture_coherence = 64;
  // Target Doppler/phase are redrawn once per this many pulses.
  std::uint32_t doppler_block = 512;

  bool scr_set() const { return std::isfinite(scr_db); }
};

// Cut x into windows x_i = [x(M*(i-1)+m)], m = 1..N, keeping only windows
// that lie fully inside the series. Vector count = floor((len-N)/M) + 1.
inline std::vector<ObservationVector> segment_echoes(const EchoSeries& series, std::uint32_t n,
                                                     std::uint32_t m,
                                                     std::uint64_t first_sample_id = 0) {
  if (n < 1 || m < 1) throw ValidationError("segment_echoes: N and M must be >= 1");
  const std::size_t len = series.samples.size();
  if (len < n) throw ValidationError("segment_echoes: series shorter than window length");
  const std::size_t count = (len - n) / m + 1;
  std::vector<ObservationVector> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ObservationVector v;
    v.values.assign(series.samples.begin() + static_cast<std::ptrdiff_t>(i * m),
                    series.samples.begin() + static_cast<std::ptrdiff_t>(i * m + n));
    v.label = series.cell_kind;
    v.sample_id = first_sample_id + i;
    v.time_index = static_cast<std::uint32_t>(i + 1);
    out.push_back(std::move(v));
  }
  return out;
}

namespace scenedetail {

inline void validate(const SceneParams& p) {
  const double finite_fields[] = {p.prf_hz,           p.clutter_shape_nu, p.clutter_power,
                                  p.target_amplitude, p.target_doppler_hz, p.doppler_jitter_hz};
  for (double f : finite_fields)
    if (!std::isfinite(f)) throw ValidationError("synthesize_scene: non-finite parameter");
  if (p.prf_hz <= 0.0) throw ValidationError("synthesize_scene: prf_hz must be > 0");
  if (p.clutter_shape_nu <= 0.0) throw ValidationError("synthesize_scene: clutter_shape_nu must be > 0");
  if (p.clutter_power < 0.0) throw ValidationError("synthesize_scene: clutter_power must be >= 0");
  if (p.target_amplitude < 0.0) throw ValidationError("synthesize_scene: target_amplitude must be >= 0");
  if (p.doppler_jitter_hz < 0.0) throw ValidationError("synthesize_scene: doppler_jitter_hz must be >= 0");
  if (!(std::abs(p.target_doppler_hz) < p.prf_hz / 2.0))
    throw ValidationError("synthesize_scene: |target_doppler_hz| must be < prf/2");
  if (p.scr_set() && p.clutter_power <= 0.0)
    throw ValidationError("synthesize_scene: scr_db requires clutter_power > 0");
  if (p.n_pulses == 0) throw ValidationError("synthesize_scene: n_pulses must be > 0");
  if (p.texture_coherence == 0 || p.doppler_block == 0)
    throw ValidationError("synthesize_scene: block lengths must be > 0");
}

// Compound-Gaussian sea clutter: Gamma texture (shape nu, mean P), constant
// over coherence blocks, times unit-power circular Gaussian speckle.
inline std::vector<cdouble> make_clutter(const SceneParams& p, Rng& rng) {
  std::vector<cdouble> c(p.n_pulses, cdouble(0.0, 0.0));
  if (p.clutter_power <= 0.0) return c;
  const double scale = p.clutter_power / p.clutter_shape_nu;  // Gamma mean = nu * scale
  double tau = 0.0;
  for (std::uint32_t i = 0; i < p.n_pulses; ++i) {
    if (i % p.texture_coherence == 0) tau = rng.gamma(p.clutter_shape_nu, scale);
    const double amp = std::sqrt(tau / 2.0);
    c[i] = cdouble(amp * rng.normal(), amp * rng.normal());
  }
  return c;
}

}  // namespace scenedetail

// Build one target cell and one clutter cell with independent clutter
// realizations. Deterministic given params.seed.
inline std::pair<EchoSeries, EchoSeries> synthesize_scene(const SceneParams& params) {
  scenedetail::validate(params);
  Rng root(params.seed);
  Rng rng_target_clutter = root.fork(1);
  Rng rng_clutter_cell = root.fork(2);
  Rng rng_target_sig = root.fork(3);

  EchoSeries target_cell;
  target_cell.prf_hz = params.prf_hz;
  target_cell.cell_kind = CellKind::target;
  target_cell.cell_id = 0;
  target_cell.samples = scenedetail::make_clutter(params, rng_target_clutter);

  // Amplitude either given directly or solved from the requested SCR against
  // the realized clutter intensity in the target cell.
  double amp = params.target_amplitude;
  if (params.scr_set()) {
    double mean_ci = 0.0;
    for (const auto& c : target_cell.samples) mean_ci += std::norm(c);
    mean_ci /= static_cast<double>(params.n_pulses);
    amp = std::sqrt(std::pow(10.0, params.scr_db / 10.0) * mean_ci);
  }

  const double ts = 1.0 / params.prf_hz;
  double fd = params.target_doppler_hz;
  double phi0 = 0.0;
  for (std::uint32_t n = 0; n < params.n_pulses; ++n) {
    if (n % params.doppler_block == 0) {
      fd = params.target_doppler_hz + params.doppler_jitter_hz * rng_target_sig.normal();
      phi0 = rng_target_sig.uniform(0.0, 2.0 * kPi);
    }
    const double ph = 2.0 * kPi * fd * static_cast<double>(n) * ts + phi0;
    target_cell.samples[n] += cdouble(amp * std::cos(ph), amp * std::sin(ph));
  }

  EchoSeries clutter_cell;
  clutter_cell.prf_hz = params.prf_hz;
  clutter_cell.cell_kind = CellKind::clutter;
  clutter_cell.cell_id = 1;
  clutter_cell.samples = scenedetail::make_clutter(params, rng_clutter_cell);

  return {std::move(target_cell), std::move(clutter_cell)};
}

struct DatasetSplit {
  std::vector<ObservationVector> train, val, test;
};

// Chronological split by time_index, computed separately for each label
// group so no cell's later windows ever precede its earlier ones.
inline DatasetSplit split_dataset(const std::vector<ObservationVector>& vectors, double train_frac,
                                  double val_frac) {
  if (vectors.empty()) throw ValidationError("split_dataset: empty input");
  if (!(train_frac > 0.0) || !(val_frac > 0.0) || !(train_frac + val_frac < 1.0))
    throw ValidationError("split_dataset: need 0 < train_frac, val_frac and train+val < 1");
  std::uint32_t tmax[2] = {0, 0};
  for (const auto& v : vectors) {
    auto& t = tmax[static_cast<int>(v.label)];
    if (v.time_index > t) t = v.time_index;
  }
  DatasetSplit out;
  for (const auto& v : vectors) {
    const double t = static_cast<double>(tmax[static_cast<int>(v.label)]);
    const double x = static_cast<double>(v.time_index);
    if (x <= train_frac * t)
      out.train.push_back(v);
    else if (x <= (train_frac + val_frac) * t)
      out.val.push_back(v);
    else
      out.test.push_back(v);
  }
  return out;
}

}  // namespace rllm
