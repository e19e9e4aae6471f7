#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rllm/common.hpp"
#include "rllm/echo.hpp"
#include "rllm/features.hpp"
#include "rllm/models.hpp"
#include "rllm/training.hpp"

namespace rllm {

// One flat run configuration covering every stage. Serialized form is a
// plain-text key = value file; unknown keys are rejected. The canonical
// string (sorted keys, pinned float formatting) feeds the config hash that
// every artifact embeds.
struct RunConfig {
  std::string profile = "desk";  // desk | full
  std::uint64_t seed = 42;

  // scene synthesis
  std::uint32_t n_pulses = 16384;
  double prf_hz = 1000.0;
  double clutter_nu = 0.5;
  double clutter_power = 1.0;
  double target_amplitude = 1.0;
  double target_doppler_hz = 120.0;
  double doppler_jitter_hz = 10.0;
  double scr_db = std::nan("");  // "none" in files
  std::uint32_t n_clutter_cells = 3;
  std::uint32_t texture_coherence = 64;
  std::uint32_t doppler_block = 512;

  // segmentation and split
  std::uint32_t window_len = 512;  // N
  std::uint32_t step_target = 32;  // M for target cells
  std::uint32_t step_clutter = 128;
  double train_frac = 0.2;
  double val_frac = 0.15;

  // features and patching
  std::uint32_t patch_len = 48;  // L
  std::uint32_t omega = 0;       // 0 = N (the only supported value when nonzero)
  std::uint32_t stft_window_len = 64;
  std::uint32_t stft_hop = 16;
  std::string stft_window = "hamming";

  // reference model
  std::uint32_t ref_dim = 64;
  std::uint32_t ref_heads = 4;
  std::uint32_t ref_blocks = 2;
  std::uint32_t ref_ffn = 128;

  // backbone
  std::uint32_t bb_dim = 128;
  std::uint32_t bb_heads = 4;
  std::uint32_t bb_layers = 4;
  std::uint32_t bb_ffn = 256;
  std::uint32_t lora_rank = 8;
  double lora_scale = 2.0;
  std::uint32_t head_hidden = 64;
  bool bb_causal = false;
  bool bb_trainable_pos = false;

  // autoencoder head
  std::uint32_t ae_fc_hidden = 64;
  std::uint32_t ae_latent = 20;

  // training
  double alpha = 0.9;
  std::string loss_mode = "preference";
  int epochs_ref = 30;
  int epochs_finetune = 50;
  int epochs_head = 50;
  double lr_ref = 1e-4;
  double lr_finetune = 1e-4;
  double lr_head = 1e-5;
  std::uint32_t batch_size = 64;
  std::uint32_t eval_batch = 400;
  bool early_stop = false;
  bool balanced_sampling = false;

  // detection
  double p_fa = 0.005;

  bool scr_set() const { return std::isfinite(scr_db); }
};

namespace cfgdetail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "none";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  if (v == "none" || v == "nan") return std::nan("");
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError("config: bad numeric value for " + key + ": '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto u = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return u;
  } catch (const std::exception&) {
    throw ValidationError("config: bad integer value for " + key + ": '" + v + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int i = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ValidationError("config: bad integer value for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ValidationError("config: bad boolean value for " + key + ": '" + v + "'");
}

}  // namespace cfgdetail

// Key list in one place: serialization, parsing and hashing all walk it.
template <class Visit>
void visit_config(RunConfig& c, Visit&& visit) {
  visit("profile", c.profile);
  visit("seed", c.seed);
  visit("n_pulses", c.n_pulses);
  visit("prf_hz", c.prf_hz);
  visit("clutter_nu", c.clutter_nu);
  visit("clutter_power", c.clutter_power);
  visit("target_amplitude", c.target_amplitude);
  visit("target_doppler_hz", c.target_doppler_hz);
  visit("doppler_jitter_hz", c.doppler_jitter_hz);
  visit("scr_db", c.scr_db);
  visit("n_clutter_cells", c.n_clutter_cells);
  visit("texture_coherence", c.texture_coherence);
  visit("doppler_block", c.doppler_block);
  visit("window_len", c.window_len);
  visit("step_target", c.step_target);
  visit("step_clutter", c.step_clutter);
  visit("train_frac", c.train_frac);
  visit("val_frac", c.val_frac);
  visit("patch_len", c.patch_len);
  visit("omega", c.omega);
  visit("stft_window_len", c.stft_window_len);
  visit("stft_hop", c.stft_hop);
  visit("stft_window", c.stft_window);
  visit("ref_dim", c.ref_dim);
  visit("ref_heads", c.ref_heads);
  visit("ref_blocks", c.ref_blocks);
  visit("ref_ffn", c.ref_ffn);
  visit("bb_dim", c.bb_dim);
  visit("bb_heads", c.bb_heads);
  visit("bb_layers", c.bb_layers);
  visit("bb_ffn", c.bb_ffn);
  visit("lora_rank", c.lora_rank);
  visit("lora_scale", c.lora_scale);
  visit("head_hidden", c.head_hidden);
  visit("bb_causal", c.bb_causal);
  visit("bb_trainable_pos", c.bb_trainable_pos);
  visit("ae_fc_hidden", c.ae_fc_hidden);
  visit("ae_latent", c.ae_latent);
  visit("alpha", c.alpha);
  visit("loss_mode", c.loss_mode);
  visit("epochs_ref", c.epochs_ref);
  visit("epochs_finetune", c.epochs_finetune);
  visit("epochs_head", c.epochs_head);
  visit("lr_ref", c.lr_ref);
  visit("lr_finetune", c.lr_finetune);
  visit("lr_head", c.lr_head);
  visit("batch_size", c.batch_size);
  visit("eval_batch", c.eval_batch);
  visit("early_stop", c.early_stop);
  visit("balanced_sampling", c.balanced_sampling);
  visit("p_fa", c.p_fa);
}

namespace cfgdetail {

struct Setter {
  const std::string& key;
  const std::string& value;
  bool done = false;

  void operator()(const char* k, std::string& f) {
    if (key == k) {
      f = value;
      done = true;
    }
  }
  void operator()(const char* k, double& f) {
    if (key == k) {
      f = parse_double(key, value);
      done = true;
    }
  }
  void operator()(const char* k, std::uint64_t& f) {
    if (key == k) {
      f = parse_u64(key, value);
      done = true;
    }
  }
  void operator()(const char* k, std::uint32_t& f) {
    if (key == k) {
      f = static_cast<std::uint32_t>(parse_u64(key, value));
      done = true;
    }
  }
  void operator()(const char* k, int& f) {
    if (key == k) {
      f = parse_int(key, value);
      done = true;
    }
  }
  void operator()(const char* k, bool& f) {
    if (key == k) {
      f = parse_bool(key, value);
      done = true;
    }
  }
};

struct Emitter {
  std::map<std::string, std::string>& out;

  void operator()(const char* k, const std::string& f) { out[k] = f; }
  void operator()(const char* k, const double& f) { out[k] = fmt_double(f); }
  void operator()(const char* k, const std::uint64_t& f) { out[k] = std::to_string(f); }
  void operator()(const char* k, const std::uint32_t& f) { out[k] = std::to_string(f); }
  void operator()(const char* k, const int& f) { out[k] = std::to_string(f); }
  void operator()(const char* k, const bool& f) { out[k] = f ? "1" : "0"; }
};

}  // namespace cfgdetail

// Profile presets fix the model scale; everything else keeps its default
// and remains overridable. "full" reproduces the published network shapes.
inline void apply_profile(RunConfig& c, const std::string& profile) {
  if (profile == "desk") {
    c.bb_dim = 128;
    c.bb_heads = 4;
    c.bb_ffn = 256;
    c.epochs_ref = 30;
    c.epochs_finetune = 50;
    c.epochs_head = 50;
  } else if (profile == "full") {
    c.bb_dim = 768;
    c.bb_heads = 12;
    c.bb_ffn = 3072;
    c.epochs_ref = 100;
    c.epochs_finetune = 500;
    c.epochs_head = 300;
  } else {
    throw ValidationError("config: unknown profile '" + profile + "'");
  }
  c.profile = profile;
}

inline void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "profile") {
    apply_profile(c, value);
    return;
  }
  cfgdetail::Setter s{key, value};
  visit_config(c, s);
  if (!s.done) throw ValidationError("config: unknown key '" + key + "'");
}

inline void validate_config(const RunConfig& c) {
  if (c.profile != "desk" && c.profile != "full")
    throw ValidationError("config: unknown profile '" + c.profile + "'");
  if (c.prf_hz <= 0) throw ValidationError("config: prf_hz must be > 0");
  if (c.clutter_nu <= 0) throw ValidationError("config: clutter_nu must be > 0");
  if (c.clutter_power < 0) throw ValidationError("config: clutter_power must be >= 0");
  if (!(std::abs(c.target_doppler_hz) < c.prf_hz / 2))
    throw ValidationError("config: |target_doppler_hz| must be < prf_hz/2");
  if (c.window_len < 1 || c.step_target < 1 || c.step_clutter < 1 || c.patch_len < 1)
    throw ValidationError("config: window/step/patch lengths must be >= 1");
  if (c.omega != 0 && c.omega != c.window_len)
    throw ValidationError("config: omega must be 0 (auto) or equal to window_len");
  if (!(c.train_frac > 0) || !(c.val_frac > 0) || !(c.train_frac + c.val_frac < 1))
    throw ValidationError("config: need 0 < train_frac, val_frac and train_frac+val_frac < 1");
  if (c.stft_window_len < 1 || c.stft_window_len > c.window_len)
    throw ValidationError("config: stft_window_len must be in [1, window_len]");
  if (c.stft_hop < 1) throw ValidationError("config: stft_hop must be >= 1");
  if (c.stft_window != "hamming" && c.stft_window != "rectangular")
    throw ValidationError("config: stft_window must be hamming or rectangular");
  if (c.ref_dim == 0 || c.ref_heads == 0 || c.ref_dim % c.ref_heads != 0)
    throw ValidationError("config: ref_dim must be a positive multiple of ref_heads");
  if (c.bb_dim == 0 || c.bb_heads == 0 || c.bb_dim % c.bb_heads != 0)
    throw ValidationError("config: bb_dim must be a positive multiple of bb_heads");
  if (c.bb_dim % 2 != 0)
    throw ValidationError("config: bb_dim must be even (sinusoidal positional encoding)");
  if (c.lora_rank < 1) throw ValidationError("config: lora_rank must be >= 1");
  if (c.alpha < 0) throw ValidationError("config: alpha must be >= 0");
  loss_mode_from(c.loss_mode);  // throws on bad value
  if (c.epochs_ref < 1 || c.epochs_finetune < 1 || c.epochs_head < 1)
    throw ValidationError("config: epoch budgets must be >= 1");
  if (c.lr_ref <= 0 || c.lr_finetune <= 0 || c.lr_head <= 0)
    throw ValidationError("config: learning rates must be > 0");
  if (c.batch_size < 2) throw ValidationError("config: batch_size must be >= 2");
  if (c.eval_batch < 1) throw ValidationError("config: eval_batch must be >= 1");
  if (!(c.p_fa > 0) || c.p_fa > 1) throw ValidationError("config: p_fa must be in (0, 1]");
  if (c.ae_latent < 1 || c.ae_fc_hidden < 1)
    throw ValidationError("config: autoencoder dims must be >= 1");
  if (c.n_clutter_cells < 1) throw ValidationError("config: n_clutter_cells must be >= 1");
}

inline std::string canonical_config(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  cfgdetail::Emitter e{kv};
  visit_config(const_cast<RunConfig&>(c), e);
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a64(canonical_config(c)); }

// Plain-text key = value file; '#' starts a comment; blank lines ignored.
// The profile key is applied first so later keys can override its presets.
inline RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("config: cannot open " + path);
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.erase(hash_pos);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config: missing '=' at " + path + ":" + std::to_string(lineno));
    pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  RunConfig c;
  for (const auto& [k, v] : pairs)
    if (k == "profile") apply_profile(c, v);
  for (const auto& [k, v] : pairs)
    if (k != "profile") set_config_key(c, k, v);
  validate_config(c);
  return c;
}

inline void save_config_file(const std::string& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw ValidationError("config: cannot write " + path);
  os << canonical_config(c);
}

// Deterministic per-stage seed derivation.
inline std::uint64_t stage_seed(const RunConfig& c, std::string_view stage) {
  return fnv1a64(stage, c.seed ^ 0x5851f42d4c957f2dull);
}

inline SceneParams scene_params(const RunConfig& c) {
  SceneParams p;
  p.n_pulses = c.n_pulses;
  p.prf_hz = c.prf_hz;
  p.clutter_shape_nu = c.clutter_nu;
  p.clutter_power = c.clutter_power;
  p.target_amplitude = c.target_amplitude;
  p.target_doppler_hz = c.target_doppler_hz;
  p.doppler_jitter_hz = c.doppler_jitter_hz;
  p.scr_db = c.scr_db;
  p.texture_coherence = c.texture_coherence;
  p.doppler_block = c.doppler_block;
  p.seed = stage_seed(c, "synth");
  return p;
}

inline FeatureConfig feature_config(const RunConfig& c) {
  FeatureConfig f;
  f.stft_window_len = c.stft_window_len;
  f.stft_hop = c.stft_hop;
  f.stft_window = c.stft_window == "hamming" ? WindowKind::hamming : WindowKind::rectangular;
  return f;
}

inline nn::RefModelConfig ref_model_config(const RunConfig& c) {
  nn::RefModelConfig m;
  m.k = token_count(c.window_len, c.patch_len);
  m.l = c.patch_len;
  m.dim = c.ref_dim;
  m.heads = c.ref_heads;
  m.blocks = c.ref_blocks;
  m.ffn_hidden = c.ref_ffn;
  m.head_hidden = c.head_hidden;
  m.seed = stage_seed(c, "ref_init");
  return m;
}

inline nn::BackboneConfig backbone_config(const RunConfig& c) {
  nn::BackboneConfig m;
  m.k = token_count(c.window_len, c.patch_len);
  m.l = c.patch_len;
  m.dim = c.bb_dim;
  m.heads = c.bb_heads;
  m.layers = c.bb_layers;
  m.ffn_hidden = c.bb_ffn;
  m.lora_rank = c.lora_rank;
  m.lora_scale = c.lora_scale;
  m.head_hidden = c.head_hidden;
  m.causal = c.bb_causal;
  m.trainable_pos = c.bb_trainable_pos;
  m.seed = stage_seed(c, "bb_init");
  return m;
}

inline nn::AeConfig ae_config(const RunConfig& c) {
  nn::AeConfig m;
  m.k = token_count(c.window_len, c.patch_len);
  m.dim = c.bb_dim;
  m.ladder = nn::ae_ladder_for_dim(c.bb_dim);
  m.fc_hidden = c.ae_fc_hidden;
  m.latent = c.ae_latent;
  m.seed = stage_seed(c, "ae_init");
  return m;
}

}  // namespace rllm
