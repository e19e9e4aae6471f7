#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rllm/common.hpp"
#include "rllm/echo.hpp"

namespace rllm {

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts are unsupported");

namespace iodetail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(FormatError::Reason::truncated, "unexpected end of file");
  return v;
}

}  // namespace iodetail

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::uint16_t kEchoVersion = 1;

// Observation-vector dataset.
// Layout: magic "RLLM", version u16, N u32, count u32, prf f64, then per
// vector: sample_id u64, label u8 (0=target, 1=clutter), time_index u32,
// N interleaved (I,Q) f64 pairs. An optional trailing "RLLF" + u64 footer
// carries the config hash for stage chaining; readers tolerate its absence.
inline void write_dataset(const std::string& path, const Dataset& d, std::uint64_t config_hash = 0) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("write_dataset: cannot open " + path);
  os.write("RLLM", 4);
  iodetail::put<std::uint16_t>(os, kDatasetVersion);
  iodetail::put<std::uint32_t>(os, d.window_len);
  iodetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.vectors.size()));
  iodetail::put<double>(os, d.prf_hz);
  for (const auto& v : d.vectors) {
    if (v.values.size() != d.window_len)
      throw ValidationError("write_dataset: vector length differs from dataset window length");
    iodetail::put<std::uint64_t>(os, v.sample_id);
    iodetail::put<std::uint8_t>(os, static_cast<std::uint8_t>(v.label));
    iodetail::put<std::uint32_t>(os, v.time_index);
    for (const auto& c : v.values) {
      iodetail::put<double>(os, c.real());
      iodetail::put<double>(os, c.imag());
    }
  }
  if (config_hash != 0) {
    os.write("RLLF", 4);
    iodetail::put<std::uint64_t>(os, config_hash);
  }
  if (!os) throw ValidationError("write_dataset: write failed for " + path);
}

struct DatasetFile {
  Dataset data;
  std::uint64_t config_hash = 0;  // 0 when the footer is absent
};

inline DatasetFile read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("read_dataset: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "RLLM")
    throw FormatError(FormatError::Reason::bad_magic, path + ": not a dataset file (bad magic)");
  const auto version = iodetail::get<std::uint16_t>(is);
  if (version != kDatasetVersion)
    throw FormatError(FormatError::Reason::bad_version,
                      path + ": unsupported dataset version " + std::to_string(version));
  DatasetFile out;
  out.data.window_len = iodetail::get<std::uint32_t>(is);
  const auto count = iodetail::get<std::uint32_t>(is);
  out.data.prf_hz = iodetail::get<double>(is);
  out.data.vectors.resize(count);
  for (auto& v : out.data.vectors) {
    v.sample_id = iodetail::get<std::uint64_t>(is);
    const auto label = iodetail::get<std::uint8_t>(is);
    if (label > 1) throw FormatError(FormatError::Reason::malformed, path + ": label out of range");
    v.label = static_cast<CellKind>(label);
    v.time_index = iodetail::get<std::uint32_t>(is);
    v.values.resize(out.data.window_len);
    for (auto& c : v.values) {
      const double re = iodetail::get<double>(is);
      const double im = iodetail::get<double>(is);
      c = cdouble(re, im);
    }
  }
  char foot[4];
  is.read(foot, 4);
  if (is && std::string_view(foot, 4) == "RLLF") out.config_hash = iodetail::get<std::uint64_t>(is);
  return out;
}

// Echo-series collection (pre-segmentation artifact of `synth`/`ingest`).
// Same conventions as the dataset file under its own magic.
inline void write_echoes(const std::string& path, const std::vector<EchoSeries>& cells,
                         std::uint64_t config_hash = 0) {
  if (cells.empty()) throw ValidationError("write_echoes: empty collection");
  const std::size_t n = cells.front().samples.size();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("write_echoes: cannot open " + path);
  os.write("RLLE", 4);
  iodetail::put<std::uint16_t>(os, kEchoVersion);
  iodetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(n));
  iodetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cells.size()));
  iodetail::put<double>(os, cells.front().prf_hz);
  for (const auto& cell : cells) {
    if (cell.samples.size() != n)
      throw ValidationError("write_echoes: all cells must share one length");
    iodetail::put<std::uint64_t>(os, cell.cell_id);
    iodetail::put<std::uint8_t>(os, static_cast<std::uint8_t>(cell.cell_kind));
    for (const auto& c : cell.samples) {
      iodetail::put<double>(os, c.real());
      iodetail::put<double>(os, c.imag());
    }
  }
  if (config_hash != 0) {
    os.write("RLLF", 4);
    iodetail::put<std::uint64_t>(os, config_hash);
  }
  if (!os) throw ValidationError("write_echoes: write failed for " + path);
}

struct EchoFile {
  std::vector<EchoSeries> cells;
  std::uint64_t config_hash = 0;
};

inline EchoFile read_echoes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("read_echoes: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "RLLE")
    throw FormatError(FormatError::Reason::bad_magic, path + ": not an echo file (bad magic)");
  const auto version = iodetail::get<std::uint16_t>(is);
  if (version != kEchoVersion)
    throw FormatError(FormatError::Reason::bad_version,
                      path + ": unsupported echo version " + std::to_string(version));
  const auto n = iodetail::get<std::uint32_t>(is);
  const auto count = iodetail::get<std::uint32_t>(is);
  const double prf = iodetail::get<double>(is);
  EchoFile out;
  out.cells.resize(count);
  for (auto& cell : out.cells) {
    cell.prf_hz = prf;
    cell.source = EchoSource::ingested;
    cell.cell_id = iodetail::get<std::uint64_t>(is);
    const auto kind = iodetail::get<std::uint8_t>(is);
    if (kind > 1) throw FormatError(FormatError::Reason::malformed, path + ": cell kind out of range");
    cell.cell_kind = static_cast<CellKind>(kind);
    cell.samples.resize(n);
    for (auto& c : cell.samples) {
      const double re = iodetail::get<double>(is);
      const double im = iodetail::get<double>(is);
      c = cdouble(re, im);
    }
  }
  char foot[4];
  is.read(foot, 4);
  if (is && std::string_view(foot, 4) == "RLLF") out.config_hash = iodetail::get<std::uint64_t>(is);
  return out;
}

// Debug CSV: one row per vector, id,label,time_index,re_0,im_0,...
inline void write_dataset_csv(const std::string& path, const Dataset& d) {
  std::ofstream os(path);
  if (!os) throw ValidationError("write_dataset_csv: cannot open " + path);
  os << "id,label,time_index";
  for (std::uint32_t i = 0; i < d.window_len; ++i) os << ",re_" << i << ",im_" << i;
  os << "\n";
  char buf[64];
  for (const auto& v : d.vectors) {
    os << v.sample_id << ',' << static_cast<int>(v.label) << ',' << v.time_index;
    for (const auto& c : v.values) {
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", c.real(), c.imag());
      os << buf;
    }
    os << "\n";
  }
}

// Generic echo CSV ingestion: header "cell_id,cell_kind,re,im", one sample
// per row, rows of one cell contiguous and in time order.
inline std::vector<EchoSeries> read_echo_csv(const std::string& path, double prf_hz) {
  std::ifstream is(path);
  if (!is) throw ValidationError("read_echo_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("cell_id,cell_kind,re,im", 0) != 0)
    throw FormatError(FormatError::Reason::bad_magic, path + ": missing echo CSV header");
  std::vector<EchoSeries> cells;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f0, f1, f2, f3;
    if (!std::getline(ss, f0, ',') || !std::getline(ss, f1, ',') || !std::getline(ss, f2, ',') ||
        !std::getline(ss, f3))
      throw FormatError(FormatError::Reason::malformed,
                        path + ": bad row at line " + std::to_string(lineno));
    const std::uint64_t cell_id = std::stoull(f0);
    const int kind = std::stoi(f1);
    if (kind < 0 || kind > 1)
      throw FormatError(FormatError::Reason::malformed,
                        path + ": cell_kind out of range at line " + std::to_string(lineno));
    if (cells.empty() || cells.back().cell_id != cell_id) {
      EchoSeries s;
      s.cell_id = cell_id;
      s.cell_kind = static_cast<CellKind>(kind);
      s.prf_hz = prf_hz;
      s.source = EchoSource::ingested;
      cells.push_back(std::move(s));
    }
    cells.back().samples.emplace_back(std::stod(f2), std::stod(f3));
  }
  if (cells.empty()) throw ValidationError("read_echo_csv: no samples in " + path);
  return cells;
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("hash_file: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return h;
}

}  // namespace rllm
