#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rllm/adam.hpp"
#include "rllm/checkpoint.hpp"
#include "rllm/dataset_io.hpp"
#include "rllm/detect.hpp"
#include "rllm/models.hpp"
#include "rllm/patching.hpp"

namespace rllm {

// ---- batching helpers ----

template <class T>
nn::Tensor<T> gather_tokens(const TokenBatch<T>& tb, const std::vector<std::size_t>& idx) {
  nn::Tensor<T> out({static_cast<std::int64_t>(idx.size()), tb.k, tb.l});
  const std::size_t row = static_cast<std::size_t>(tb.k) * tb.l;
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(tb.sample(idx[i]), tb.sample(idx[i]) + row, out.data.begin() + i * row);
  return out;
}

// Each token inherits its sample's label.
template <class T>
std::vector<int> token_labels(const TokenBatch<T>& tb, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size() * tb.k);
  for (std::size_t b : idx)
    out.insert(out.end(), static_cast<std::size_t>(tb.k), static_cast<int>(tb.labels[b]));
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// Seeded epoch permutation; with balancing on, the two classes are
// interleaved at their global ratio so every batch sees both.
template <class T>
std::vector<std::size_t> epoch_order(const TokenBatch<T>& data, Rng& rng, bool balanced) {
  auto idx = all_indices(data.size());
  if (!balanced) {
    rng.shuffle(idx);
    return idx;
  }
  std::vector<std::size_t> pos, neg;
  for (auto i : idx) (data.labels[i] == 0 ? pos : neg).push_back(i);
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  std::size_t ip = 0, in = 0;
  while (ip < pos.size() || in < neg.size()) {
    const double want_pos = static_cast<double>(pos.size()) *
                            static_cast<double>(out.size() + 1) /
                            static_cast<double>(idx.size());
    if (ip < pos.size() && (in >= neg.size() || static_cast<double>(ip) < want_pos))
      out.push_back(pos[ip++]);
    else
      out.push_back(neg[in++]);
  }
  return out;
}

// ---- token score table (Stage 2 output) ----

struct TokenScoreTable {
  std::uint32_t k = 0;
  double alpha = 0.9;                 // recorded for traceability; applied in Stage 3
  std::uint64_t ref_checkpoint_id = 0;
  std::map<std::uint64_t, std::vector<float>> entries;  // sample_id -> K reference losses

  const std::vector<float>& lookup(std::uint64_t sample_id) const {
    auto it = entries.find(sample_id);
    if (it == entries.end())
      throw ArtifactMismatch("TokenScoreTable: no entry for sample " + std::to_string(sample_id));
    return it->second;
  }

  template <class T>
  void require_covers(const TokenBatch<T>& tb) const {
    std::string missing;
    std::size_t n_missing = 0;
    for (auto id : tb.sample_ids)
      if (!entries.count(id)) {
        if (n_missing < 8) missing += (n_missing ? "," : "") + std::to_string(id);
        ++n_missing;
      }
    if (n_missing)
      throw ArtifactMismatch("TokenScoreTable: missing " + std::to_string(n_missing) +
                             " sample(s): " + missing + (n_missing > 8 ? ",..." : ""));
  }

  void save(const std::string& path, std::uint64_t config_hash) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("TokenScoreTable: cannot open " + path);
    os.write("RLLS", 4);
    iodetail::put<std::uint16_t>(os, 1);
    iodetail::put<std::uint64_t>(os, config_hash);
    iodetail::put<std::uint64_t>(os, ref_checkpoint_id);
    iodetail::put<double>(os, alpha);
    iodetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    iodetail::put<std::uint32_t>(os, k);
    for (const auto& [id, losses] : entries) {
      iodetail::put<std::uint64_t>(os, id);
      os.write(reinterpret_cast<const char*>(losses.data()),
               static_cast<std::streamsize>(losses.size() * sizeof(float)));
    }
    if (!os) throw ValidationError("TokenScoreTable: write failed for " + path);
  }

  static TokenScoreTable load(const std::string& path, std::uint64_t* config_hash = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("TokenScoreTable: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string_view(magic, 4) != "RLLS")
      throw FormatError(FormatError::Reason::bad_magic, path + ": not a score table (bad magic)");
    const auto ver = iodetail::get<std::uint16_t>(is);
    if (ver != 1)
      throw FormatError(FormatError::Reason::bad_version, path + ": unsupported score table version");
    const auto ch = iodetail::get<std::uint64_t>(is);
    if (config_hash) *config_hash = ch;
    TokenScoreTable t;
    t.ref_checkpoint_id = iodetail::get<std::uint64_t>(is);
    t.alpha = iodetail::get<double>(is);
    const auto count = iodetail::get<std::uint32_t>(is);
    t.k = iodetail::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto id = iodetail::get<std::uint64_t>(is);
      std::vector<float> losses(t.k);
      is.read(reinterpret_cast<char*>(losses.data()),
              static_cast<std::streamsize>(losses.size() * sizeof(float)));
      if (!is) throw FormatError(FormatError::Reason::truncated, path + ": truncated score table");
      t.entries.emplace(id, std::move(losses));
    }
    return t;
  }
};

// ---- Stage 3 loss pieces ----

// s = ReLU(L_t - alpha * L_r), used as a constant weight: no gradient flows
// through the importance score.
template <class T>
nn::Tensor<T> token_importance(const nn::Tensor<T>& l_target, const nn::Tensor<T>& l_reference,
                               double alpha) {
  if (l_target.shape != l_reference.shape)
    throw ValidationError("token_importance: shape mismatch");
  nn::Tensor<T> s(l_target.shape);
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    const double lt = static_cast<double>(l_target.data[i]);
    const double lr = static_cast<double>(l_reference.data[i]);
    if (!std::isfinite(lt) || !std::isfinite(lr))
      throw NumericError("token_importance: non-finite loss input");
    const double v = lt - alpha * lr;
    s.data[i] = v > 0.0 ? static_cast<T>(v) : T(0);
  }
  return s;
}

// L_final = (1 / (B*K)) * sum_{b,k} s(b,k) * L_t(b,k). The denominator is
// B*K regardless of how many scores are zero.
template <class T>
nn::Var<T> preference_loss(const nn::Var<T>& token_losses, const nn::Tensor<T>& importance) {
  if (token_losses->value.shape != importance.shape)
    throw ValidationError("preference_loss: shape mismatch");
  auto weighted = nn::mul(token_losses, nn::constant(importance));
  return nn::scale(nn::sum_all(weighted), 1.0 / static_cast<double>(importance.numel()));
}

// ---- Stage 2: reference training and token scoring ----

struct TrainStageConfig {
  int epochs = 100;
  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t eval_batch = 400;
  std::uint64_t seed = 0;
};

// Train the reference model on the given samples (per protocol these are
// the validation split) with plain per-token cross-entropy. Returns the
// final mean token CE over the same samples in eval mode.
template <class T>
double train_reference(nn::ReferenceModel<T>& model, const TokenBatch<T>& data,
                       const TrainStageConfig& cfg, nn::Adam<T>* external_opt = nullptr) {
  if (data.size() == 0) throw ValidationError("train_reference: empty training data");
  std::optional<nn::Adam<T>> local;
  nn::Adam<T>& opt =
      external_opt ? *external_opt : local.emplace(model.store().trainable(), cfg.lr);
  Rng rng(cfg.seed);
  auto idx = all_indices(data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(idx);
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch) {
      const std::size_t stop = std::min(idx.size(), start + cfg.batch);
      std::vector<std::size_t> bidx(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                    idx.begin() + static_cast<std::ptrdiff_t>(stop));
      if (bidx.size() < 2 && idx.size() >= 2) continue;  // batch norm needs B >= 2
      auto x = gather_tokens(data, bidx);
      auto logits = model.forward(x, /*training=*/true);
      auto loss = nn::mean_all(nn::cross_entropy(logits, token_labels(data, bidx)));
      const double lv = static_cast<double>(loss->value.data[0]);
      if (!std::isfinite(lv))
        throw NumericError("train_reference: diverged (non-finite loss) at epoch " +
                           std::to_string(epoch));
      nn::backward(loss);
      opt.step();
      opt.zero_grad();
    }
  }
  // Final eval-mode CE.
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < data.size(); start += cfg.eval_batch) {
    const std::size_t stop = std::min(data.size(), start + cfg.eval_batch);
    std::vector<std::size_t> bidx(stop - start);
    std::iota(bidx.begin(), bidx.end(), start);
    auto logits = model.forward(gather_tokens(data, bidx), /*training=*/false);
    auto ce = nn::cross_entropy(logits, token_labels(data, bidx));
    for (auto v : ce->value.data) total += static_cast<double>(v);
    count += ce->value.data.size();
  }
  return total / static_cast<double>(count);
}

// Eval-mode per-token reference losses over the training set, computed once
// and cached; Stage 3 never refreshes them.
template <class T>
TokenScoreTable score_tokens(nn::ReferenceModel<T>& model, const TokenBatch<T>& training_set,
                             std::size_t eval_batch = 400, double alpha = 0.9,
                             std::uint64_t ref_checkpoint_id = 0) {
  if (training_set.size() == 0) throw ValidationError("score_tokens: empty training set");
  TokenScoreTable table;
  table.k = training_set.k;
  table.alpha = alpha;
  table.ref_checkpoint_id = ref_checkpoint_id;
  for (std::size_t start = 0; start < training_set.size(); start += eval_batch) {
    const std::size_t stop = std::min(training_set.size(), start + eval_batch);
    std::vector<std::size_t> bidx(stop - start);
    std::iota(bidx.begin(), bidx.end(), start);
    auto logits = model.forward(gather_tokens(training_set, bidx), /*training=*/false);
    auto ce = nn::cross_entropy(logits, token_labels(training_set, bidx));
    for (std::size_t i = 0; i < bidx.size(); ++i) {
      std::vector<float> losses(training_set.k);
      for (std::uint32_t kk = 0; kk < training_set.k; ++kk)
        losses[kk] = static_cast<float>(ce->value.data[i * training_set.k + kk]);
      table.entries.emplace(training_set.sample_ids[bidx[i]], std::move(losses));
    }
  }
  return table;
}

// ---- eval helpers shared by Stage 3 logging and the CLI ----

template <class T>
std::vector<ScoredSample> backbone_scores(nn::BackboneModel<T>& model, const TokenBatch<T>& data,
                                          std::size_t eval_batch = 400) {
  std::vector<ScoredSample> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += eval_batch) {
    const std::size_t stop = std::min(data.size(), start + eval_batch);
    std::vector<std::size_t> bidx(stop - start);
    std::iota(bidx.begin(), bidx.end(), start);
    auto res = model.forward(gather_tokens(data, bidx));
    auto scores = aggregate_token_outputs(res.logits->value);
    for (std::size_t i = 0; i < bidx.size(); ++i)
      out.push_back({data.sample_ids[bidx[i]], data.labels[bidx[i]], scores[i]});
  }
  return out;
}

template <class T>
std::vector<ScoredSample> head_scores(nn::BackboneModel<T>& backbone, nn::AutoencoderHead<T>& head,
                                      const TokenBatch<T>& data, std::size_t eval_batch = 400) {
  std::vector<ScoredSample> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += eval_batch) {
    const std::size_t stop = std::min(data.size(), start + eval_batch);
    std::vector<std::size_t> bidx(stop - start);
    std::iota(bidx.begin(), bidx.end(), start);
    auto res = backbone.forward(gather_tokens(data, bidx));
    auto ae = head.forward(nn::constant(res.hidden->value));
    const auto& z = ae.class_logits->value;
    for (std::size_t i = 0; i < bidx.size(); ++i) {
      const double z0 = static_cast<double>(z.data[i * 2]);
      const double z1 = static_cast<double>(z.data[i * 2 + 1]);
      const double m = std::max(z0, z1);
      const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
      out.push_back({data.sample_ids[bidx[i]], data.labels[bidx[i]], e0 / (e0 + e1)});
    }
  }
  return out;
}

// ---- Stage 3: preference-aware fine-tuning ----

enum class LossMode { preference, plain_ce, weighted_ce_sample };

inline const char* loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::preference: return "preference";
    case LossMode::plain_ce: return "plain_ce";
    default: return "weighted_ce_sample";
  }
}

inline LossMode loss_mode_from(const std::string& s) {
  if (s == "preference") return LossMode::preference;
  if (s == "plain_ce") return LossMode::plain_ce;
  if (s == "weighted_ce_sample") return LossMode::weighted_ce_sample;
  throw ValidationError("unknown loss_mode: " + s);
}

struct FinetuneConfig {
  double alpha = 0.9;
  LossMode mode = LossMode::preference;
  int epochs = 50;
  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t eval_batch = 400;
  std::uint64_t seed = 0;
  double p_fa = 0.005;       // operating point for the per-epoch DR log
  bool early_stop = false;   // optional stop on validation DR (off by default)
  int early_stop_patience = 10;
  bool balanced = false;     // class-balanced epoch interleaving
};

struct EpochRecord {
  int epoch = 0;
  double mean_target_loss = 0.0;
  double mean_importance = 0.0;
  double frac_zero_importance = 0.0;
  double val_dr = std::nan("");  // NaN when no eval set was supplied
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  // Long-format per-token mean weights: (epoch, token, feature, mean s).
  struct TokenWeightRow {
    int epoch;
    std::uint32_t token;
    std::string feature;
    double mean_weight;
  };
  std::vector<TokenWeightRow> token_weights;

  void write_epoch_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ValidationError("TrainLog: cannot open " + path);
    os << "epoch,mean_target_loss,mean_importance,frac_zero_importance,val_dr\n";
    char buf[160];
    for (const auto& r : epochs) {
      std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.mean_target_loss,
                    r.mean_importance, r.frac_zero_importance, r.val_dr);
      os << buf;
    }
  }

  void write_token_weight_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ValidationError("TrainLog: cannot open " + path);
    os << "epoch,token_index,feature_name,mean_weight\n";
    char buf[120];
    for (const auto& r : token_weights) {
      std::snprintf(buf, sizeof(buf), "%d,%u,%s,%.9g\n", r.epoch, r.token, r.feature.c_str(),
                    r.mean_weight);
      os << buf;
    }
  }
};

// Fine-tune the backbone's trainable set under the selected loss mode.
// preference: s = ReLU(L_t - alpha L_r) per token (detached);
// plain_ce:   s = 1 everywhere (uniform optimization baseline);
// weighted_ce_sample: one weight per sample, ReLU(mean_k L_t - alpha mean_k L_r).
template <class T>
TrainLog finetune_backbone(nn::BackboneModel<T>& model, const TokenBatch<T>& train,
                           const TokenScoreTable& scores, const FinetuneConfig& cfg,
                           const TokenBatch<T>* eval_set = nullptr,
                           nn::Adam<T>* external_opt = nullptr) {
  if (train.size() == 0) throw ValidationError("finetune_backbone: empty training set");
  if (cfg.mode != LossMode::plain_ce) scores.require_covers(train);
  const std::uint64_t frozen_before = model.frozen_hash();
  std::optional<nn::Adam<T>> local;
  nn::Adam<T>& opt =
      external_opt ? *external_opt : local.emplace(model.store().trainable(), cfg.lr);
  Rng rng(cfg.seed);
  const std::uint32_t K = train.k;
  const auto origins = token_origins(train.n, train.l);

  TrainLog log;
  double best_val_dr = -1.0;
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto idx = epoch_order(train, rng, cfg.balanced);
    double sum_lt = 0.0, sum_s = 0.0;
    std::size_t n_tokens = 0, n_zero = 0;
    std::vector<double> token_weight_sum(K, 0.0);
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch) {
      const std::size_t stop = std::min(idx.size(), start + cfg.batch);
      std::vector<std::size_t> bidx(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                    idx.begin() + static_cast<std::ptrdiff_t>(stop));
      const std::size_t B = bidx.size();
      auto res = model.forward(gather_tokens(train, bidx));
      auto lt = nn::cross_entropy(res.logits, token_labels(train, bidx));  // [B,K]

      nn::Tensor<T> s(lt->value.shape, T(1));
      if (cfg.mode != LossMode::plain_ce) {
        nn::Tensor<T> lr_vals(lt->value.shape);
        for (std::size_t i = 0; i < B; ++i) {
          const auto& row = scores.lookup(train.sample_ids[bidx[i]]);
          if (row.size() != K)
            throw ArtifactMismatch("finetune_backbone: score table K mismatch");
          for (std::uint32_t kk = 0; kk < K; ++kk)
            lr_vals.data[i * K + kk] = static_cast<T>(row[kk]);
        }
        if (cfg.mode == LossMode::preference) {
          s = token_importance(lt->value, lr_vals, cfg.alpha);
        } else {  // whole-sample reweighting baseline
          for (std::size_t i = 0; i < B; ++i) {
            double mlt = 0.0, mlr = 0.0;
            for (std::uint32_t kk = 0; kk < K; ++kk) {
              mlt += static_cast<double>(lt->value.data[i * K + kk]);
              mlr += static_cast<double>(lr_vals.data[i * K + kk]);
            }
            const double w = std::max(0.0, (mlt - cfg.alpha * mlr) / static_cast<double>(K));
            for (std::uint32_t kk = 0; kk < K; ++kk) s.data[i * K + kk] = static_cast<T>(w);
          }
        }
      }

      auto loss = preference_loss(lt, s);
      const double lv = static_cast<double>(loss->value.data[0]);
      if (!std::isfinite(lv))
        throw NumericError("finetune_backbone: diverged (non-finite loss) at epoch " +
                           std::to_string(epoch));
      nn::backward(loss);
      opt.step();
      opt.zero_grad();

      for (std::size_t i = 0; i < B; ++i)
        for (std::uint32_t kk = 0; kk < K; ++kk) {
          const double sv = static_cast<double>(s.data[i * K + kk]);
          sum_lt += static_cast<double>(lt->value.data[i * K + kk]);
          sum_s += sv;
          token_weight_sum[kk] += sv;
          if (sv == 0.0) ++n_zero;
          ++n_tokens;
        }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_target_loss = sum_lt / static_cast<double>(n_tokens);
    rec.mean_importance = sum_s / static_cast<double>(n_tokens);
    rec.frac_zero_importance = static_cast<double>(n_zero) / static_cast<double>(n_tokens);
    if (eval_set && eval_set->size() > 0) {
      auto scored = backbone_scores(model, *eval_set, cfg.eval_batch);
      bool both = false, seen_t = false, seen_c = false;
      for (const auto& sc : scored) {
        (sc.label == 0 ? seen_t : seen_c) = true;
        both = seen_t && seen_c;
        if (both) break;
      }
      if (both) rec.val_dr = evaluate(scored, cfg.p_fa).detection_rate;
    }
    log.epochs.push_back(rec);
    const double denom = static_cast<double>(train.size());
    for (std::uint32_t kk = 0; kk < K; ++kk)
      log.token_weights.push_back(
          {epoch, kk, origins[kk].feature_name(), token_weight_sum[kk] / denom});

    if (cfg.early_stop && !std::isnan(rec.val_dr)) {
      if (rec.val_dr > best_val_dr) {
        best_val_dr = rec.val_dr;
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        break;
      }
    }
  }

  if (model.frozen_hash() != frozen_before)
    throw std::logic_error("finetune_backbone: frozen base weights were mutated");
  return log;
}

// ---- Stage 4: autoencoder head retraining ----

struct HeadTrainConfig {
  int epochs = 50;
  double lr = 1e-5;
  std::size_t batch = 64;
  std::size_t eval_batch = 400;
  std::uint64_t seed = 0;
};

// Uncertainty-weighted total loss on autograd scalars:
// 0.5 exp(-2 rho_r) L_recon + exp(-2 rho_c) L_ce + rho_r + rho_c,
// with rho = log sigma. Equals Eq-form 1/(2 sigma_r^2) L_recon +
// 1/sigma_ce^2 L_ce + log(sigma_r sigma_ce).
template <class T>
nn::Var<T> uncertainty_total_loss(const nn::Var<T>& recon_loss, const nn::Var<T>& ce_loss,
                                  const nn::Var<T>& log_sigma_recon,
                                  const nn::Var<T>& log_sigma_ce) {
  auto wr = nn::vexp(nn::scale(log_sigma_recon, -2.0));
  auto wc = nn::vexp(nn::scale(log_sigma_ce, -2.0));
  auto total = nn::add(nn::scale(nn::mul(recon_loss, wr), 0.5), nn::mul(ce_loss, wc));
  return nn::add(total, nn::add(log_sigma_recon, log_sigma_ce));
}

// Mean-squared reconstruction error over all elements.
template <class T>
nn::Var<T> reconstruction_loss(const nn::Var<T>& recon, const nn::Var<T>& target) {
  return nn::mean_all(nn::square(nn::sub(recon, target)));
}

// Backbone hidden states are computed once (the backbone is entirely frozen
// in this stage) and the head trains against the cached tensors.
template <class T>
std::vector<double> train_head(nn::BackboneModel<T>& backbone, nn::AutoencoderHead<T>& head,
                               const TokenBatch<T>& train, const HeadTrainConfig& cfg,
                               nn::Adam<T>* external_opt = nullptr) {
  if (train.size() == 0) throw ValidationError("train_head: empty training set");
  const std::uint64_t frozen_before = backbone.store().frozen_hash();

  const std::int64_t K = backbone.config().k, D = backbone.config().dim;
  nn::Tensor<T> hidden_all({static_cast<std::int64_t>(train.size()), K, D});
  for (std::size_t start = 0; start < train.size(); start += cfg.eval_batch) {
    const std::size_t stop = std::min(train.size(), start + cfg.eval_batch);
    std::vector<std::size_t> bidx(stop - start);
    std::iota(bidx.begin(), bidx.end(), start);
    auto res = backbone.forward(gather_tokens(train, bidx));
    std::copy(res.hidden->value.data.begin(), res.hidden->value.data.end(),
              hidden_all.data.begin() + static_cast<std::ptrdiff_t>(start * K * D));
  }

  std::optional<nn::Adam<T>> local;
  nn::Adam<T>& opt =
      external_opt ? *external_opt : local.emplace(head.store().trainable(), cfg.lr);
  Rng rng(cfg.seed);
  auto idx = all_indices(train.size());
  std::vector<double> epoch_losses;
  const std::size_t row = static_cast<std::size_t>(K * D);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(idx);
    double epoch_total = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch) {
      const std::size_t stop = std::min(idx.size(), start + cfg.batch);
      const std::size_t B = stop - start;
      nn::Tensor<T> h({static_cast<std::int64_t>(B), K, D});
      std::vector<int> labels(B);
      for (std::size_t i = 0; i < B; ++i) {
        const std::size_t b = idx[start + i];
        std::copy(hidden_all.data.begin() + static_cast<std::ptrdiff_t>(b * row),
                  hidden_all.data.begin() + static_cast<std::ptrdiff_t>((b + 1) * row),
                  h.data.begin() + static_cast<std::ptrdiff_t>(i * row));
        labels[i] = static_cast<int>(train.labels[b]);
      }
      auto hv = nn::constant(h);
      auto out = head.forward(hv);
      auto l_recon = reconstruction_loss(out.reconstruction, hv);
      auto l_ce = nn::mean_all(nn::cross_entropy(out.class_logits, labels));
      auto total =
          uncertainty_total_loss(l_recon, l_ce, head.log_sigma_recon(), head.log_sigma_ce());
      const double lv = static_cast<double>(total->value.data[0]);
      if (!std::isfinite(lv))
        throw NumericError("train_head: diverged (non-finite loss) at epoch " +
                           std::to_string(epoch));
      nn::backward(total);
      opt.step();
      opt.zero_grad();
      const double sr = static_cast<double>(head.log_sigma_recon()->value.data[0]);
      const double sc = static_cast<double>(head.log_sigma_ce()->value.data[0]);
      if (!std::isfinite(sr) || !std::isfinite(sc))
        throw NumericError("train_head: non-finite sigma update at epoch " + std::to_string(epoch));
      epoch_total += lv;
      ++n_batches;
    }
    epoch_losses.push_back(epoch_total / static_cast<double>(n_batches));
  }

  if (backbone.store().frozen_hash() != frozen_before)
    throw std::logic_error("train_head: backbone frozen weights were mutated");
  return epoch_losses;
}

// ---- learning-value brute-force oracle ----

inline double spearman_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ValidationError("spearman_correlation: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> ord(n);
    std::iota(ord.begin(), ord.end(), std::size_t{0});
    std::sort(ord.begin(), ord.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[ord[j + 1]] == v[ord[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[ord[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;  // a constant series carries no ranking signal
  return cov / std::sqrt(va * vb);
}

struct LearningValueConfig {
  nn::RefModelConfig probe;  // tiny trainable model (width <= 16)
  int base_steps = 60;       // full-batch steps to form the fixed checkpoint
  int probe_steps = 30;      // steps from the checkpoint with/without the candidate
  int ref_steps = 0;         // reference training steps; 0 = 2 * base_steps
  double lr = 5e-3;
  double alpha = 0.9;
  std::uint64_t seed = 0;
};

struct LearningValueResult {
  double spearman = 0.0;
  std::vector<double> importance;  // Eq-(20)-style score per candidate
  std::vector<double> measured;    // brute-force test-loss reduction per candidate
};

namespace lvdetail {

template <class T>
struct ModelSnapshot {
  std::vector<std::vector<T>> params;
  std::vector<std::vector<T>> bn_mean, bn_var;

  static ModelSnapshot take(nn::ReferenceModel<T>& m) {
    ModelSnapshot s;
    for (const auto& p : m.store().all()) s.params.push_back(p->value.data);
    for (auto* bn : m.batch_norms()) {
      s.bn_mean.push_back(bn->running_mean);
      s.bn_var.push_back(bn->running_var);
    }
    return s;
  }

  void restore(nn::ReferenceModel<T>& m) const {
    std::size_t i = 0;
    for (const auto& p : m.store().all()) p->value.data = params[i++];
    i = 0;
    for (auto* bn : m.batch_norms()) {
      bn->running_mean = bn_mean[i];
      bn->running_var = bn_var[i];
      ++i;
    }
  }
};

// Full-batch weighted-CE training steps; a zero weight removes a token from
// the objective entirely.
template <class T>
void train_masked(nn::ReferenceModel<T>& model, const nn::Tensor<T>& x,
                  const std::vector<int>& labels, const nn::Tensor<T>& weights, int steps,
                  double lr) {
  nn::Adam<T> opt(model.store().trainable(), lr);
  double wsum = 0.0;
  for (auto w : weights.data) wsum += static_cast<double>(w);
  for (int s = 0; s < steps; ++s) {
    auto logits = model.forward(x, /*training=*/true);
    auto ce = nn::cross_entropy(logits, labels);
    auto loss = nn::scale(nn::sum_all(nn::mul(ce, nn::constant(weights))), 1.0 / wsum);
    nn::backward(loss);
    opt.step();
    opt.zero_grad();
  }
}

template <class T>
double mean_token_ce(nn::ReferenceModel<T>& model, const TokenBatch<T>& data) {
  auto idx = all_indices(data.size());
  auto logits = model.forward(gather_tokens(data, idx), /*training=*/false);
  auto ce = nn::cross_entropy(logits, token_labels(data, idx));
  double total = 0.0;
  for (auto v : ce->value.data) total += static_cast<double>(v);
  return total / static_cast<double>(ce->value.data.size());
}

}  // namespace lvdetail

// Brute-force realization of the patch-selection objective: for each
// candidate patch, retrain a tiny model from a fixed checkpoint with the
// patch included vs excluded and measure the test-loss change. Importance
// scores use a reference model trained on the held-out set (the quantity
// the validation-trained reference approximates in the full pipeline).
// Returns the Spearman rank correlation between the two series.
template <class T>
LearningValueResult learning_value_oracle(const TokenBatch<T>& tiny_train,
                                          const TokenBatch<T>& tiny_test,
                                          const TokenBatch<T>& candidates,
                                          const std::vector<std::uint32_t>& candidate_token,
                                          const LearningValueConfig& cfg) {
  if (candidates.size() < 5)
    throw ValidationError("learning_value_oracle: need at least 5 candidate patches");
  if (candidate_token.size() != candidates.size())
    throw ValidationError("learning_value_oracle: token index per candidate required");
  if (tiny_train.size() == 0 || tiny_test.size() == 0)
    throw ValidationError("learning_value_oracle: empty train or test set");

  const std::uint32_t K = tiny_train.k;
  auto train_idx = all_indices(tiny_train.size());
  auto x_train = gather_tokens(tiny_train, train_idx);
  auto y_train = token_labels(tiny_train, train_idx);

  // Target probe model trained on the base set -> fixed checkpoint.
  nn::RefModelConfig probe_cfg = cfg.probe;
  probe_cfg.seed = cfg.seed + 11;
  nn::ReferenceModel<T> target(probe_cfg);
  lvdetail::train_masked(target, x_train, y_train,
                         nn::Tensor<T>({static_cast<std::int64_t>(tiny_train.size()), K}, T(1)),
                         cfg.base_steps, cfg.lr);
  const auto checkpoint = lvdetail::ModelSnapshot<T>::take(target);

  // Reference model trained to convergence on the held-out set.
  nn::RefModelConfig ref_cfg = cfg.probe;
  ref_cfg.seed = cfg.seed + 23;
  nn::ReferenceModel<T> reference(ref_cfg);
  auto test_idx = all_indices(tiny_test.size());
  const int ref_steps = cfg.ref_steps > 0 ? cfg.ref_steps : 2 * cfg.base_steps;
  lvdetail::train_masked(reference, gather_tokens(tiny_test, test_idx),
                         token_labels(tiny_test, test_idx),
                         nn::Tensor<T>({static_cast<std::int64_t>(tiny_test.size()), K}, T(1)),
                         ref_steps, cfg.lr);

  // Importance scores for every candidate at the fixed checkpoint.
  auto cand_idx = all_indices(candidates.size());
  auto x_cand = gather_tokens(candidates, cand_idx);
  auto y_cand = token_labels(candidates, cand_idx);
  auto lt_logits = target.forward(x_cand, /*training=*/false);
  auto lt = nn::cross_entropy(lt_logits, y_cand);
  auto lr_logits = reference.forward(x_cand, /*training=*/false);
  auto lr = nn::cross_entropy(lr_logits, y_cand);

  LearningValueResult result;
  result.importance.resize(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const std::size_t at = c * K + candidate_token[c];
    const double v = static_cast<double>(lt->value.data[at]) -
                     cfg.alpha * static_cast<double>(lr->value.data[at]);
    result.importance[c] = std::max(0.0, v);
  }

  // Baseline: retrain from the checkpoint on the base set alone.
  checkpoint.restore(target);
  lvdetail::train_masked(target, x_train, y_train,
                         nn::Tensor<T>({static_cast<std::int64_t>(tiny_train.size()), K}, T(1)),
                         cfg.probe_steps, cfg.lr);
  const double base_test = lvdetail::mean_token_ce(target, tiny_test);

  // Per candidate: same retraining with the candidate patch appended.
  const std::size_t row = static_cast<std::size_t>(K) * tiny_train.l;
  result.measured.resize(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    nn::Tensor<T> x({static_cast<std::int64_t>(tiny_train.size() + 1), K, tiny_train.l});
    std::copy(x_train.data.begin(), x_train.data.end(), x.data.begin());
    std::copy(candidates.sample(c), candidates.sample(c) + row,
              x.data.begin() + static_cast<std::ptrdiff_t>(tiny_train.size() * row));
    std::vector<int> y = y_train;
    y.insert(y.end(), static_cast<std::size_t>(K), static_cast<int>(candidates.labels[c]));
    nn::Tensor<T> w({static_cast<std::int64_t>(tiny_train.size() + 1), K}, T(0));
    std::fill(w.data.begin(), w.data.begin() + static_cast<std::ptrdiff_t>(tiny_train.size() * K),
              T(1));
    w.data[tiny_train.size() * K + candidate_token[c]] = T(1);
    checkpoint.restore(target);
    lvdetail::train_masked(target, x, y, w, cfg.probe_steps, cfg.lr);
    result.measured[c] = base_test - lvdetail::mean_token_ce(target, tiny_test);
  }

  result.spearman = spearman_correlation(result.importance, result.measured);
  return result;
}

}  // namespace rllm
