#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rllm/common.hpp"
#include "rllm/tensor.hpp"

namespace rllm {

struct ScoredSample {
  std::uint64_t sample_id = 0;
  std::uint8_t label = 0;  // 0 = target, 1 = clutter
  double score = 0.0;      // target probability in [0, 1]
};

// Per-token softmax followed by averaging of the target-class (index 0)
// probability over the K tokens.
template <class T>
std::vector<double> aggregate_token_outputs(const nn::Tensor<T>& logits) {
  const auto& sh = logits.shape;
  if (sh.size() != 3 || sh[2] != 2)
    throw ValidationError("aggregate_token_outputs: expected [B,K,2] logits");
  const std::int64_t b_count = sh[0], k_count = sh[1];
  std::vector<double> out(static_cast<std::size_t>(b_count));
  for (std::int64_t b = 0; b < b_count; ++b) {
    double acc = 0.0;
    for (std::int64_t k = 0; k < k_count; ++k) {
      const double z0 = static_cast<double>(logits.data[static_cast<std::size_t>((b * k_count + k) * 2)]);
      const double z1 =
          static_cast<double>(logits.data[static_cast<std::size_t>((b * k_count + k) * 2 + 1)]);
      const double m = std::max(z0, z1);
      const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
      acc += e0 / (e0 + e1);
    }
    out[static_cast<std::size_t>(b)] = acc / static_cast<double>(k_count);
  }
  return out;
}

// eta = x-th largest clutter score with x = ceil(P_fa^d * N_clutter).
// The detection rule downstream is strictly score > eta, which keeps the
// achieved false alarm rate at or below the requested one.
inline double select_threshold(std::vector<double> clutter_scores, double p_fa_d) {
  if (clutter_scores.empty()) throw ValidationError("select_threshold: empty clutter set");
  if (!(p_fa_d > 0.0) || p_fa_d > 1.0)
    throw ValidationError("select_threshold: P_fa must be in (0, 1]");
  std::sort(clutter_scores.begin(), clutter_scores.end(), std::greater<double>());
  const auto n = clutter_scores.size();
  std::size_t x = static_cast<std::size_t>(
      std::ceil(p_fa_d * static_cast<double>(n) - 1e-12));
  if (x < 1) x = 1;
  if (x > n) x = n;
  return clutter_scores[x - 1];
}

struct RocPoint {
  double far = 0.0;
  double dr = 0.0;
};

// Threshold sweep over all unique score values, descending, plus the all-
// pass endpoint (1,1). FAR and DR are both nondecreasing along the result.
inline std::vector<RocPoint> roc_curve(const std::vector<ScoredSample>& samples) {
  std::size_t n_target = 0, n_clutter = 0;
  for (const auto& s : samples) (s.label == 0 ? n_target : n_clutter)++;
  if (n_target == 0 || n_clutter == 0)
    throw ValidationError("roc_curve: both classes must be present");
  std::vector<double> thresholds;
  thresholds.reserve(samples.size());
  for (const auto& s : samples) thresholds.push_back(s.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<RocPoint> out;
  out.reserve(thresholds.size() + 1);
  for (double th : thresholds) {
    std::size_t fa = 0, det = 0;
    for (const auto& s : samples) {
      if (s.score > th) (s.label == 0 ? det : fa)++;
    }
    out.push_back({static_cast<double>(fa) / static_cast<double>(n_clutter),
                   static_cast<double>(det) / static_cast<double>(n_target)});
  }
  if (out.empty() || out.back().far != 1.0 || out.back().dr != 1.0) out.push_back({1.0, 1.0});
  return out;
}

struct DetectionReport {
  std::vector<ScoredSample> samples;
  double p_fa_requested = 0.0;
  double threshold = 0.0;
  double achieved_far = 0.0;
  double detection_rate = 0.0;
  std::size_t n_target = 0;
  std::size_t n_clutter = 0;
  std::vector<RocPoint> roc;
  std::string config_hash;
};

inline DetectionReport evaluate(std::vector<ScoredSample> samples, double p_fa_d,
                                std::string config_hash = "") {
  std::vector<double> clutter;
  std::size_t n_target = 0;
  for (const auto& s : samples) {
    if (s.label == 1)
      clutter.push_back(s.score);
    else
      ++n_target;
  }
  if (n_target == 0 || clutter.empty())
    throw ValidationError("evaluate: both classes must be present");
  // Reproducible sample order in the report regardless of input order.
  std::sort(samples.begin(), samples.end(), [](const ScoredSample& a, const ScoredSample& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.sample_id < b.sample_id;
  });
  DetectionReport r;
  r.p_fa_requested = p_fa_d;
  r.threshold = select_threshold(clutter, p_fa_d);
  std::size_t fa = 0, det = 0;
  for (const auto& s : samples) {
    if (s.score > r.threshold) (s.label == 0 ? det : fa)++;
  }
  r.n_target = n_target;
  r.n_clutter = clutter.size();
  r.achieved_far = static_cast<double>(fa) / static_cast<double>(r.n_clutter);
  r.detection_rate = static_cast<double>(det) / static_cast<double>(r.n_target);
  r.roc = roc_curve(samples);
  r.config_hash = std::move(config_hash);
  r.samples = std::move(samples);
  return r;
}

inline nlohmann::json to_json(const DetectionReport& r) {
  nlohmann::json j;
  j["config_hash"] = r.config_hash;
  j["p_fa_requested"] = r.p_fa_requested;
  j["threshold"] = r.threshold;
  j["achieved_far"] = r.achieved_far;
  j["detection_rate"] = r.detection_rate;
  j["n_target"] = r.n_target;
  j["n_clutter"] = r.n_clutter;
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : r.roc) roc.push_back({p.far, p.dr});
  j["roc"] = std::move(roc);
  nlohmann::json ss = nlohmann::json::array();
  for (const auto& s : r.samples)
    ss.push_back({{"id", s.sample_id}, {"label", s.label}, {"score", s.score}});
  j["samples"] = std::move(ss);
  return j;
}

inline DetectionReport report_from_json(const nlohmann::json& j) {
  DetectionReport r;
  r.config_hash = j.value("config_hash", "");
  r.p_fa_requested = j.at("p_fa_requested");
  r.threshold = j.at("threshold");
  r.achieved_far = j.at("achieved_far");
  r.detection_rate = j.at("detection_rate");
  r.n_target = j.at("n_target");
  r.n_clutter = j.at("n_clutter");
  for (const auto& p : j.at("roc")) r.roc.push_back({p.at(0), p.at(1)});
  for (const auto& s : j.at("samples"))
    r.samples.push_back({s.at("id"), s.at("label"), s.at("score")});
  return r;
}

inline void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc) {
  std::ofstream os(path);
  if (!os) throw ValidationError("write_roc_csv: cannot open " + path);
  os << "far,dr\n";
  char buf[80];
  for (const auto& p : roc) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", p.far, p.dr);
    os << buf;
  }
}

}  // namespace rllm
