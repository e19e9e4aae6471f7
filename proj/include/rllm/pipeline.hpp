#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "rllm/config.hpp"
#include "rllm/dataset_io.hpp"
#include "rllm/detect.hpp"
#include "rllm/features.hpp"
#include "rllm/patching.hpp"
#include "rllm/training.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rllm {

// ---- token batch artifact ("RLLT") ----

inline constexpr std::uint16_t kTokenFileVersion = 1;

template <class T>
void write_tokens(const std::string& path, const TokenBatch<T>& tb, const FeatureNormalizer& norm,
                  std::uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("write_tokens: cannot open " + path);
  os.write("RLLT", 4);
  iodetail::put<std::uint16_t>(os, kTokenFileVersion);
  iodetail::put<std::uint64_t>(os, config_hash);
  iodetail::put<std::uint32_t>(os, tb.n);
  iodetail::put<std::uint32_t>(os, tb.k);
  iodetail::put<std::uint32_t>(os, tb.l);
  iodetail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tb.size()));
  for (int f = 0; f < kNumFeatures; ++f) {
    iodetail::put<double>(os, norm.mean[f]);
    iodetail::put<double>(os, norm.stdev[f]);
  }
  const std::size_t row = static_cast<std::size_t>(tb.k) * tb.l;
  for (std::size_t b = 0; b < tb.size(); ++b) {
    iodetail::put<std::uint64_t>(os, tb.sample_ids[b]);
    iodetail::put<std::uint8_t>(os, tb.labels[b]);
    iodetail::put<std::uint8_t>(os, tb.split[b]);
    iodetail::put<std::uint32_t>(os, tb.time_index[b]);
    for (std::size_t i = 0; i < row; ++i)
      iodetail::put<float>(os, static_cast<float>(tb.sample(b)[i]));
  }
  if (!os) throw ValidationError("write_tokens: write failed for " + path);
}

template <class T>
TokenBatch<T> read_tokens(const std::string& path, FeatureNormalizer* norm = nullptr,
                          std::uint64_t* config_hash = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("read_tokens: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "RLLT")
    throw FormatError(FormatError::Reason::bad_magic, path + ": not a token file (bad magic)");
  const auto ver = iodetail::get<std::uint16_t>(is);
  if (ver != kTokenFileVersion)
    throw FormatError(FormatError::Reason::bad_version, path + ": unsupported token file version");
  const auto ch = iodetail::get<std::uint64_t>(is);
  if (config_hash) *config_hash = ch;
  TokenBatch<T> tb;
  tb.n = iodetail::get<std::uint32_t>(is);
  tb.k = iodetail::get<std::uint32_t>(is);
  tb.l = iodetail::get<std::uint32_t>(is);
  const auto count = iodetail::get<std::uint32_t>(is);
  FeatureNormalizer nz;
  for (int f = 0; f < kNumFeatures; ++f) {
    nz.mean[f] = iodetail::get<double>(is);
    nz.stdev[f] = iodetail::get<double>(is);
  }
  if (norm) *norm = nz;
  const std::size_t row = static_cast<std::size_t>(tb.k) * tb.l;
  tb.tokens.resize(row * count);
  for (std::uint32_t b = 0; b < count; ++b) {
    tb.sample_ids.push_back(iodetail::get<std::uint64_t>(is));
    tb.labels.push_back(iodetail::get<std::uint8_t>(is));
    tb.split.push_back(iodetail::get<std::uint8_t>(is));
    tb.time_index.push_back(iodetail::get<std::uint32_t>(is));
    for (std::size_t i = 0; i < row; ++i)
      tb.tokens[static_cast<std::size_t>(b) * row + i] = static_cast<T>(iodetail::get<float>(is));
  }
  return tb;
}

// ---- stage 0: scene synthesis and segmentation ----

// One target cell plus n_clutter_cells independent clutter cells, each from
// its own seeded stream; only the first scene's target cell is kept so the
// class mix resembles one primary cell against many clutter-only cells.
inline std::vector<EchoSeries> synth_cells(const RunConfig& cfg) {
  std::vector<EchoSeries> cells;
  SceneParams base = scene_params(cfg);
  for (std::uint32_t i = 0; i < cfg.n_clutter_cells; ++i) {
    SceneParams p = base;
    p.seed = base.seed + i;
    auto [target, clutter] = synthesize_scene(p);
    if (i == 0) {
      target.cell_id = 0;
      cells.push_back(std::move(target));
    }
    clutter.cell_id = i + 1;
    cells.push_back(std::move(clutter));
  }
  return cells;
}

// Segment every cell with the kind-specific stride; sample ids are assigned
// densely in cell order (the join key for the token score table).
inline Dataset segment_cells(const RunConfig& cfg, const std::vector<EchoSeries>& cells) {
  Dataset d;
  d.window_len = cfg.window_len;
  d.prf_hz = cfg.prf_hz;
  std::uint64_t next_id = 0;
  for (const auto& cell : cells) {
    const std::uint32_t step =
        cell.cell_kind == CellKind::target ? cfg.step_target : cfg.step_clutter;
    auto vecs = segment_echoes(cell, cfg.window_len, step, next_id);
    next_id += vecs.size();
    d.vectors.insert(d.vectors.end(), std::make_move_iterator(vecs.begin()),
                     std::make_move_iterator(vecs.end()));
  }
  return d;
}

// ---- stage 1: features, normalization, patching ----

struct TokenizeResult {
  TokenBatch<float> tokens;
  FeatureNormalizer normalizer;
  std::size_t degenerate_spectra = 0;
};

inline TokenizeResult tokenize_dataset(const RunConfig& cfg, const Dataset& d) {
  if (d.vectors.empty()) throw ValidationError("tokenize_dataset: empty dataset");
  const auto split = split_dataset(d.vectors, cfg.train_frac, cfg.val_frac);
  // Recover each vector's split tag by sample id.
  std::map<std::uint64_t, std::uint8_t> split_of;
  for (const auto& v : split.train) split_of[v.sample_id] = 0;
  for (const auto& v : split.val) split_of[v.sample_id] = 1;
  for (const auto& v : split.test) split_of[v.sample_id] = 2;

  const FeatureConfig fcfg = feature_config(cfg);
  std::vector<FeatureSet> features(d.vectors.size());
  std::vector<std::size_t> warn_counts(d.vectors.size(), 0);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(d.vectors.size()); ++i)
    features[static_cast<std::size_t>(i)] =
        extract_all(d.vectors[static_cast<std::size_t>(i)], fcfg,
                    &warn_counts[static_cast<std::size_t>(i)]);

  TokenizeResult out;
  out.degenerate_spectra = std::accumulate(warn_counts.begin(), warn_counts.end(), std::size_t{0});

  std::vector<FeatureSet> train_features;
  for (std::size_t i = 0; i < d.vectors.size(); ++i)
    if (split_of.at(d.vectors[i].sample_id) == 0) train_features.push_back(features[i]);
  if (train_features.empty()) throw ValidationError("tokenize_dataset: empty training split");
  out.normalizer = FeatureNormalizer::fit(train_features);
  for (auto& fs : features) out.normalizer.apply(fs);

  std::vector<std::uint8_t> labels, split_tags;
  std::vector<std::uint64_t> ids;
  std::vector<std::uint32_t> tix;
  for (const auto& v : d.vectors) {
    labels.push_back(static_cast<std::uint8_t>(v.label));
    ids.push_back(v.sample_id);
    tix.push_back(v.time_index);
    split_tags.push_back(split_of.at(v.sample_id));
  }
  out.tokens = make_token_batch<float>(features, labels, ids, tix, split_tags, cfg.patch_len);
  return out;
}

// ---- checkpoint plumbing shared by stages 2-4 ----

inline nlohmann::json normalizer_json(const FeatureNormalizer& n) {
  return {{"mean", n.mean}, {"stdev", n.stdev}};
}

inline FeatureNormalizer normalizer_from_json(const nlohmann::json& j) {
  FeatureNormalizer n;
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("stdev").get<std::vector<double>>();
  for (int f = 0; f < kNumFeatures; ++f) {
    n.mean[f] = m.at(f);
    n.stdev[f] = s.at(f);
  }
  return n;
}

template <class T>
void add_adam_state(nn::CheckpointWriter& w, const nn::Adam<T>& opt) {
  for (const auto& e : opt.state()) {
    w.add("opt.m." + e.name, {static_cast<std::int64_t>(e.m->size())}, *e.m);
    w.add("opt.v." + e.name, {static_cast<std::int64_t>(e.v->size())}, *e.v);
  }
}

template <class T>
void add_batchnorm_state(nn::CheckpointWriter& w, nn::ReferenceModel<T>& model) {
  int i = 0;
  for (auto* bn : model.batch_norms()) {
    const std::string prefix = "ref.bnstate" + std::to_string(i++);
    w.add(prefix + ".mean", {static_cast<std::int64_t>(bn->running_mean.size())},
          std::vector<double>(bn->running_mean.begin(), bn->running_mean.end()));
    w.add(prefix + ".var", {static_cast<std::int64_t>(bn->running_var.size())},
          std::vector<double>(bn->running_var.begin(), bn->running_var.end()));
  }
}

template <class T>
void restore_batchnorm_state(nn::ReferenceModel<T>& model, const nn::Checkpoint& ckpt) {
  int i = 0;
  for (auto* bn : model.batch_norms()) {
    const std::string prefix = "ref.bnstate" + std::to_string(i++);
    const auto& m = ckpt.tensor(prefix + ".mean");
    const auto& v = ckpt.tensor(prefix + ".var");
    for (std::size_t j = 0; j < bn->running_mean.size(); ++j) {
      bn->running_mean[j] = static_cast<T>(m.data[j]);
      bn->running_var[j] = static_cast<T>(v.data[j]);
    }
  }
}

inline void require_config_hash(std::uint64_t artifact_hash, std::uint64_t expected,
                                const std::string& what) {
  if (artifact_hash != expected)
    throw ArtifactMismatch(what + ": config hash " + hash_hex(artifact_hash) +
                           " does not match the active config " + hash_hex(expected) +
                           " (refusing to mix runs)");
}

inline void require_config_hash(const std::string& artifact_hex, std::uint64_t expected,
                                const std::string& what) {
  if (artifact_hex != hash_hex(expected))
    throw ArtifactMismatch(what + ": config hash " + artifact_hex +
                           " does not match the active config " + hash_hex(expected) +
                           " (refusing to mix runs)");
}

// ---- stage wrappers used by both the CLI and the acceptance suite ----

struct PipelinePaths {
  std::filesystem::path out;
  std::string echoes() const { return (out / "echoes.rlle").string(); }
  std::string dataset() const { return (out / "dataset.rllm").string(); }
  std::string tokens() const { return (out / "tokens.rllt").string(); }
  std::string ref_ckpt() const { return (out / "ckpt_ref").string(); }
  std::string scores() const { return (out / "scores.rlls").string(); }
  std::string backbone_ckpt() const { return (out / "ckpt_backbone").string(); }
  std::string head_ckpt() const { return (out / "ckpt_head").string(); }
  std::string report() const { return (out / "report.json").string(); }
  std::string roc() const { return (out / "roc.csv").string(); }
  std::string train_log() const { return (out / "train_log.csv").string(); }
  std::string token_weights() const { return (out / "token_weights.csv").string(); }
  std::string manifest() const { return (out / "manifest.jsonl").string(); }
};

inline void run_synth(const RunConfig& cfg, const PipelinePaths& paths) {
  std::filesystem::create_directories(paths.out);
  const auto cells = synth_cells(cfg);
  const auto hash = config_hash(cfg);
  write_echoes(paths.echoes(), cells, hash);
  write_dataset(paths.dataset(), segment_cells(cfg, cells), hash);
}

inline void run_ingest(const RunConfig& cfg, const PipelinePaths& paths,
                       const std::string& input_path) {
  std::filesystem::create_directories(paths.out);
  std::vector<EchoSeries> cells;
  if (input_path.size() > 4 && input_path.substr(input_path.size() - 4) == ".csv")
    cells = read_echo_csv(input_path, cfg.prf_hz);
  else
    cells = read_echoes(input_path).cells;
  write_dataset(paths.dataset(), segment_cells(cfg, cells), config_hash(cfg));
}

inline std::size_t run_features(const RunConfig& cfg, const PipelinePaths& paths) {
  const auto file = read_dataset(paths.dataset());
  if (file.config_hash != 0) require_config_hash(file.config_hash, config_hash(cfg), "dataset");
  auto result = tokenize_dataset(cfg, file.data);
  write_tokens(paths.tokens(), result.tokens, result.normalizer, config_hash(cfg));
  return result.degenerate_spectra;
}

inline double run_train_ref(const RunConfig& cfg, const PipelinePaths& paths) {
  FeatureNormalizer norm;
  std::uint64_t tok_hash = 0;
  auto tokens = read_tokens<float>(paths.tokens(), &norm, &tok_hash);
  require_config_hash(tok_hash, config_hash(cfg), "token file");
  auto val = tokens.split_subset(1);
  if (val.size() == 0) throw ValidationError("train-ref: validation split is empty");
  nn::ReferenceModel<float> model(ref_model_config(cfg));
  TrainStageConfig tc;
  tc.epochs = cfg.epochs_ref;
  tc.lr = cfg.lr_ref;
  tc.batch = cfg.batch_size;
  tc.eval_batch = cfg.eval_batch;
  tc.seed = stage_seed(cfg, "ref_train");
  nn::Adam<float> opt(model.store().trainable(), tc.lr);
  const double final_ce = train_reference(model, val, tc, &opt);
  nn::CheckpointWriter w("reference", nn::to_json(model.config()), config_hash(cfg));
  w.add_store(model.store());
  add_batchnorm_state(w, model);
  add_adam_state(w, opt);
  w.set_extra("opt_step", opt.step_count());
  w.set_extra("normalizer", normalizer_json(norm));
  w.set_extra("final_val_token_ce", final_ce);
  w.write(paths.ref_ckpt());
  return final_ce;
}

inline std::size_t run_score(const RunConfig& cfg, const PipelinePaths& paths) {
  std::uint64_t tok_hash = 0;
  auto tokens = read_tokens<float>(paths.tokens(), nullptr, &tok_hash);
  require_config_hash(tok_hash, config_hash(cfg), "token file");
  auto ckpt = nn::load_checkpoint(paths.ref_ckpt());
  require_config_hash(ckpt.config_hash_hex(), config_hash(cfg), "reference checkpoint");
  nn::ReferenceModel<float> model(nn::ref_config_from_json(ckpt.manifest.at("model")));
  nn::restore_params(model.store(), ckpt);
  restore_batchnorm_state(model, ckpt);
  auto train = tokens.split_subset(0);
  if (train.size() == 0) throw ValidationError("score: training split is empty");
  auto table = score_tokens(model, train, cfg.eval_batch, cfg.alpha, ckpt.blob_hash);
  table.save(paths.scores(), config_hash(cfg));
  return table.entries.size();
}

inline TrainLog run_finetune(const RunConfig& cfg, const PipelinePaths& paths) {
  std::uint64_t tok_hash = 0;
  auto tokens = read_tokens<float>(paths.tokens(), nullptr, &tok_hash);
  require_config_hash(tok_hash, config_hash(cfg), "token file");
  auto train = tokens.split_subset(0);
  auto val = tokens.split_subset(1);
  if (train.size() == 0) throw ValidationError("finetune: training split is empty");

  FinetuneConfig fc;
  fc.alpha = cfg.alpha;
  fc.mode = loss_mode_from(cfg.loss_mode);
  fc.epochs = cfg.epochs_finetune;
  fc.lr = cfg.lr_finetune;
  fc.batch = cfg.batch_size;
  fc.eval_batch = cfg.eval_batch;
  fc.seed = stage_seed(cfg, "finetune");
  fc.p_fa = cfg.p_fa;
  fc.early_stop = cfg.early_stop;
  fc.balanced = cfg.balanced_sampling;

  TokenScoreTable table;
  if (fc.mode != LossMode::plain_ce) {
    std::uint64_t score_hash = 0;
    table = TokenScoreTable::load(paths.scores(), &score_hash);
    require_config_hash(score_hash, config_hash(cfg), "score table");
  }

  nn::BackboneModel<float> model(backbone_config(cfg));
  nn::Adam<float> opt(model.store().trainable(), fc.lr);
  auto log = finetune_backbone(model, train, table, fc, val.size() ? &val : nullptr, &opt);

  nn::CheckpointWriter w("backbone", nn::to_json(model.config()), config_hash(cfg));
  w.add_store(model.store());
  add_adam_state(w, opt);
  w.set_extra("opt_step", opt.step_count());
  w.set_extra("loss_mode", cfg.loss_mode);
  w.set_extra("frozen_hash", hash_hex(model.frozen_hash()));
  w.write(paths.backbone_ckpt());
  log.write_epoch_csv(paths.train_log());
  log.write_token_weight_csv(paths.token_weights());
  return log;
}

inline double run_train_head(const RunConfig& cfg, const PipelinePaths& paths) {
  std::uint64_t tok_hash = 0;
  auto tokens = read_tokens<float>(paths.tokens(), nullptr, &tok_hash);
  require_config_hash(tok_hash, config_hash(cfg), "token file");
  auto train = tokens.split_subset(0);
  auto ckpt = nn::load_checkpoint(paths.backbone_ckpt());
  require_config_hash(ckpt.config_hash_hex(), config_hash(cfg), "backbone checkpoint");
  nn::BackboneModel<float> backbone(nn::backbone_config_from_json(ckpt.manifest.at("model")));
  nn::restore_params(backbone.store(), ckpt);
  nn::AutoencoderHead<float> head(ae_config(cfg));
  HeadTrainConfig hc;
  hc.epochs = cfg.epochs_head;
  hc.lr = cfg.lr_head;
  hc.batch = cfg.batch_size;
  hc.eval_batch = cfg.eval_batch;
  hc.seed = stage_seed(cfg, "head_train");
  nn::Adam<float> opt(head.store().trainable(), hc.lr);
  auto losses = train_head(backbone, head, train, hc, &opt);
  nn::CheckpointWriter w("ae_head", nn::to_json(head.config()), config_hash(cfg));
  w.add_store(head.store());
  add_adam_state(w, opt);
  w.set_extra("opt_step", opt.step_count());
  w.set_extra("final_total_loss", losses.back());
  w.write(paths.head_ckpt());
  return losses.back();
}

// Scores the test split; before Stage 4 (no head checkpoint yet) callers can
// request the token-output aggregation path explicitly.
inline DetectionReport run_eval(const RunConfig& cfg, const PipelinePaths& paths,
                                bool use_aggregation = false) {
  std::uint64_t tok_hash = 0;
  auto tokens = read_tokens<float>(paths.tokens(), nullptr, &tok_hash);
  require_config_hash(tok_hash, config_hash(cfg), "token file");
  auto test = tokens.split_subset(2);
  if (test.size() == 0) throw ValidationError("eval: test split is empty");

  auto bb_ckpt = nn::load_checkpoint(paths.backbone_ckpt());
  require_config_hash(bb_ckpt.config_hash_hex(), config_hash(cfg), "backbone checkpoint");
  nn::BackboneModel<float> backbone(nn::backbone_config_from_json(bb_ckpt.manifest.at("model")));
  nn::restore_params(backbone.store(), bb_ckpt);

  std::vector<ScoredSample> scored;
  if (use_aggregation) {
    scored = backbone_scores(backbone, test, cfg.eval_batch);
  } else {
    auto head_ckpt = nn::load_checkpoint(paths.head_ckpt());
    require_config_hash(head_ckpt.config_hash_hex(), config_hash(cfg), "head checkpoint");
    nn::AutoencoderHead<float> head(nn::ae_config_from_json(head_ckpt.manifest.at("model")));
    nn::restore_params(head.store(), head_ckpt);
    scored = head_scores(backbone, head, test, cfg.eval_batch);
  }
  auto report = evaluate(std::move(scored), cfg.p_fa, hash_hex(config_hash(cfg)));
  std::ofstream os(paths.report());
  if (!os) throw ValidationError("eval: cannot write " + paths.report());
  os << to_json(report).dump(2) << "\n";
  write_roc_csv(paths.roc(), report.roc);
  return report;
}

}  // namespace rllm
