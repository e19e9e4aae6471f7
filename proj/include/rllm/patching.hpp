#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rllm/common.hpp"
#include "rllm/features.hpp"

namespace rllm {

// Where a token came from: feature channel index and patch index within it.
struct TokenOrigin {
  int feature = 0;
  std::uint32_t patch = 0;
  const char* feature_name() const { return kFeatureNames[feature]; }
};

inline std::uint32_t patches_per_feature(std::uint32_t n, std::uint32_t l) {
  return (n + l - 1) / l;  // ceil(N/L)
}

inline std::uint32_t token_count(std::uint32_t n, std::uint32_t l) {
  return kNumFeatures * patches_per_feature(n, l);
}

inline std::vector<TokenOrigin> token_origins(std::uint32_t n, std::uint32_t l) {
  const std::uint32_t p = patches_per_feature(n, l);
  std::vector<TokenOrigin> out;
  out.reserve(kNumFeatures * p);
  for (int f = 0; f < kNumFeatures; ++f)
    for (std::uint32_t i = 0; i < p; ++i) out.push_back({f, i});
  return out;
}

// Batched token tensor [B, K, L] plus per-sample metadata. T is the storage
// scalar: float for the pipeline, double for exactness-sensitive tests.
template <class T>
struct TokenBatch {
  std::uint32_t n = 0;  // feature length each channel was cut from
  std::uint32_t k = 0;  // tokens per sample, 5 * ceil(N/L)
  std::uint32_t l = 0;  // patch length
  std::vector<T> tokens;                // size B*K*L
  std::vector<std::uint8_t> labels;     // 0 = target, 1 = clutter
  std::vector<std::uint64_t> sample_ids;
  std::vector<std::uint32_t> time_index;
  std::vector<std::uint8_t> split;      // 0 train, 1 val, 2 test

  std::size_t size() const { return labels.size(); }
  T* sample(std::size_t b) { return tokens.data() + b * k * l; }
  const T* sample(std::size_t b) const { return tokens.data() + b * k * l; }

  TokenBatch<T> subset(const std::vector<std::size_t>& idx) const {
    TokenBatch<T> out;
    out.n = n;
    out.k = k;
    out.l = l;
    out.tokens.reserve(idx.size() * k * l);
    for (std::size_t b : idx) {
      out.tokens.insert(out.tokens.end(), sample(b), sample(b) + k * l);
      out.labels.push_back(labels[b]);
      out.sample_ids.push_back(sample_ids[b]);
      out.time_index.push_back(time_index[b]);
      out.split.push_back(split.empty() ? 0 : split[b]);
    }
    return out;
  }

  TokenBatch<T> split_subset(std::uint8_t which) const {
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < size(); ++b)
      if (split[b] == which) idx.push_back(b);
    return subset(idx);
  }
};

// Cut each feature channel into ceil(N/L) patches of length L, zero-padding
// the final patch, concatenated feature by feature: K = 5 * ceil(N/L).
template <class T>
std::vector<T> patch_features(const FeatureSet& fs, std::uint32_t l) {
  if (l < 1) throw ValidationError("patch_features: L must be >= 1");
  const auto n = static_cast<std::uint32_t>(fs.ip.size());
  const std::uint32_t p = patches_per_feature(n, l);
  std::vector<T> out(static_cast<std::size_t>(kNumFeatures) * p * l, T(0));
  for (int f = 0; f < kNumFeatures; ++f) {
    const auto& ch = fs.channel(f);
    if (ch.size() != n) throw ValidationError("patch_features: feature channels must share length N");
    T* dst = out.data() + static_cast<std::size_t>(f) * p * l;
    for (std::uint32_t i = 0; i < n; ++i) dst[i] = static_cast<T>(ch[i]);
  }
  return out;
}

// Inverse of patch_features for one sample; drops the zero padding.
template <class T>
FeatureSet unpatch_features(const T* tokens, std::uint32_t n, std::uint32_t l) {
  const std::uint32_t p = patches_per_feature(n, l);
  FeatureSet fs;
  for (int f = 0; f < kNumFeatures; ++f) {
    auto& ch = fs.channel(f);
    ch.resize(n);
    const T* src = tokens + static_cast<std::size_t>(f) * p * l;
    for (std::uint32_t i = 0; i < n; ++i) ch[i] = static_cast<double>(src[i]);
  }
  return fs;
}

template <class T>
TokenBatch<T> make_token_batch(const std::vector<FeatureSet>& features,
                               const std::vector<std::uint8_t>& labels,
                               const std::vector<std::uint64_t>& sample_ids,
                               const std::vector<std::uint32_t>& time_index,
                               const std::vector<std::uint8_t>& split, std::uint32_t l) {
  if (features.empty()) throw ValidationError("make_token_batch: empty feature list");
  if (features.size() != labels.size() || labels.size() != sample_ids.size())
    throw ValidationError("make_token_batch: metadata length mismatch");
  TokenBatch<T> out;
  out.n = static_cast<std::uint32_t>(features.front().ip.size());
  out.l = l;
  out.k = token_count(out.n, l);
  out.labels = labels;
  out.sample_ids = sample_ids;
  out.time_index = time_index.empty() ? std::vector<std::uint32_t>(labels.size(), 0) : time_index;
  out.split = split.empty() ? std::vector<std::uint8_t>(labels.size(), 0) : split;
  out.tokens.reserve(features.size() * out.k * out.l);
  for (const auto& fs : features) {
    auto t = patch_features<T>(fs, l);
    out.tokens.insert(out.tokens.end(), t.begin(), t.end());
  }
  return out;
}

}  // namespace rllm
