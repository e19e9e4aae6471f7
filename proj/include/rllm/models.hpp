#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rllm/adam.hpp"
#include "rllm/layers.hpp"

namespace rllm::nn {

// ---- lightweight reference encoder ----

struct RefModelConfig {
  std::int64_t k = 55;   // tokens per sample
  std::int64_t l = 48;   // patch length
  std::int64_t dim = 64;
  std::int64_t heads = 4;
  std::int64_t blocks = 2;
  std::int64_t ffn_hidden = 128;
  std::int64_t head_hidden = 64;
  std::uint64_t seed = 1;
};

// Patch projection + learnable positional embedding + post-norm encoder
// blocks (MHA / BatchNorm / FFN with residuals), final LayerNorm, two FC
// layers to 2 logits per token.
template <class T>
class ReferenceModel {
 public:
  explicit ReferenceModel(const RefModelConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.seed);
    proj_ = Linear<T>(store_, "ref.proj", cfg.l, cfg.dim, rng, true);
    pos_ = store_.add("ref.pos", Tensor<T>::randn({cfg.k, cfg.dim}, rng, T(0.02)), true);
    for (std::int64_t e = 0; e < cfg.blocks; ++e) {
      const std::string p = "ref.block" + std::to_string(e);
      blocks_.push_back(Block{
          MultiHeadAttention<T>(store_, p + ".attn", cfg.dim, cfg.heads, rng, true),
          BatchNorm<T>(store_, p + ".bn1", cfg.dim, true),
          FeedForward<T>(store_, p + ".ffn", cfg.dim, cfg.ffn_hidden, rng, true),
          BatchNorm<T>(store_, p + ".bn2", cfg.dim, true),
      });
    }
    ln_f_ = LayerNorm<T>(store_, "ref.ln_f", cfg.dim, rng, true);
    head1_ = Linear<T>(store_, "ref.head1", cfg.dim, cfg.head_hidden, rng, true);
    head2_ = Linear<T>(store_, "ref.head2", cfg.head_hidden, 2, rng, true);
  }

  // tokens [B, K, L] -> logits [B, K, 2]
  Var<T> forward(const Tensor<T>& tokens, bool training) {
    check_input(tokens);
    auto h = add(proj_.forward(constant(tokens)), pos_);
    for (auto& blk : blocks_) {
      h = blk.bn1.forward(add(h, blk.attn.forward(h)), training);
      h = blk.bn2.forward(add(h, blk.ffn.forward(h)), training);
    }
    h = ln_f_.forward(h);
    return head2_.forward(gelu(head1_.forward(h)));
  }

  ParamStore<T>& store() { return store_; }
  const RefModelConfig& config() const { return cfg_; }

  std::vector<BatchNorm<T>*> batch_norms() {
    std::vector<BatchNorm<T>*> out;
    for (auto& b : blocks_) {
      out.push_back(&b.bn1);
      out.push_back(&b.bn2);
    }
    return out;
  }

 private:
  struct Block {
    MultiHeadAttention<T> attn;
    BatchNorm<T> bn1;
    FeedForward<T> ffn;
    BatchNorm<T> bn2;
  };

  void check_input(const Tensor<T>& tokens) const {
    if (tokens.rank() != 3 || tokens.shape[1] != cfg_.k || tokens.shape[2] != cfg_.l)
      throw ValidationError("ReferenceModel: input must be [B," + std::to_string(cfg_.k) + "," +
                            std::to_string(cfg_.l) + "], got " + shape_str(tokens.shape));
  }

  RefModelConfig cfg_;
  ParamStore<T> store_;
  Linear<T> proj_;
  Var<T> pos_;
  std::vector<Block> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head1_, head2_;
};

// ---- LoRA-adapted transformer backbone ----

struct BackboneConfig {
  std::int64_t k = 55;
  std::int64_t l = 48;
  std::int64_t dim = 128;        // L' (768 in the full profile)
  std::int64_t heads = 4;        // 12 in the full profile
  std::int64_t layers = 4;
  std::int64_t ffn_hidden = 256;  // 3072 in the full profile
  std::int64_t lora_rank = 8;
  double lora_scale = 2.0;
  std::int64_t head_hidden = 64;
  bool causal = false;         // decoder-style masking, off for radar tokens
  bool trainable_pos = false;  // learnable additive positional table instead of sinusoids
  std::uint64_t seed = 2;
};

template <class T>
struct BackboneOutput {
  Var<T> logits;  // [B, K, 2]
  Var<T> hidden;  // [B, K, L'], post final LayerNorm
};

// Pre-norm encoder stack with frozen base weights. Trainable set: patch
// embedding FC, LoRA adapters on the query/value projections, every
// LayerNorm, and the two output FC layers. The sinusoidal positional table
// is parameter-free. Base weights are seeded random unless a checkpoint
// import overwrites them (import hook; see checkpoint loading).
template <class T>
class BackboneModel {
 public:
  explicit BackboneModel(const BackboneConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.seed);
    embed_ = Linear<T>(store_, "bb.embed", cfg.l, cfg.dim, rng, true);
    if (cfg.trainable_pos)
      pos_ = store_.add("bb.pos", sinusoidal_positional_encoding<T>(cfg.k, cfg.dim), true);
    else
      pos_ = constant(sinusoidal_positional_encoding<T>(cfg.k, cfg.dim));
    for (std::int64_t e = 0; e < cfg.layers; ++e) {
      const std::string p = "bb.layer" + std::to_string(e);
      layers_.push_back(Layer{
          LayerNorm<T>(store_, p + ".ln1", cfg.dim, rng, true),
          MultiHeadAttention<T>(store_, p + ".attn", cfg.dim, cfg.heads, rng, false,
                                cfg.lora_rank, cfg.lora_scale, cfg.causal),
          LayerNorm<T>(store_, p + ".ln2", cfg.dim, rng, true),
          FeedForward<T>(store_, p + ".ffn", cfg.dim, cfg.ffn_hidden, rng, false),
      });
    }
    ln_f_ = LayerNorm<T>(store_, "bb.ln_f", cfg.dim, rng, true);
    head1_ = Linear<T>(store_, "bb.head1", cfg.dim, cfg.head_hidden, rng, true);
    head2_ = Linear<T>(store_, "bb.head2", cfg.head_hidden, 2, rng, true);
  }

  BackboneOutput<T> forward(const Tensor<T>& tokens) {
    check_input(tokens);
    auto h = add(embed_.forward(constant(tokens)), pos_);
    for (auto& layer : layers_) {
      h = add(h, layer.attn.forward(layer.ln1.forward(h)));
      h = add(h, layer.ffn.forward(layer.ln2.forward(h)));
    }
    auto hidden = ln_f_.forward(h);
    auto logits = head2_.forward(gelu(head1_.forward(hidden)));
    return {logits, hidden};
  }

  ParamStore<T>& store() { return store_; }
  const BackboneConfig& config() const { return cfg_; }
  std::uint64_t frozen_hash() const { return store_.frozen_hash(); }

  std::vector<const LoraLinear<T>*> lora_layers() const {
    std::vector<const LoraLinear<T>*> out;
    for (const auto& l : layers_) {
      out.push_back(l.attn.q_lora.get());
      out.push_back(l.attn.v_lora.get());
    }
    return out;
  }

 private:
  struct Layer {
    LayerNorm<T> ln1;
    MultiHeadAttention<T> attn;
    LayerNorm<T> ln2;
    FeedForward<T> ffn;
  };

  void check_input(const Tensor<T>& tokens) const {
    if (tokens.rank() != 3 || tokens.shape[1] != cfg_.k || tokens.shape[2] != cfg_.l)
      throw ValidationError("BackboneModel: input must be [B," + std::to_string(cfg_.k) + "," +
                            std::to_string(cfg_.l) + "], got " + shape_str(tokens.shape));
  }

  BackboneConfig cfg_;
  ParamStore<T> store_;
  Linear<T> embed_;
  Var<T> pos_;
  std::vector<Layer> layers_;
  LayerNorm<T> ln_f_;
  Linear<T> head1_, head2_;
};

// Extension point: import externally converted pretrained backbone weights
// into a compatible model (the architecture accepts GPT2-shaped tensors at
// the full profile). Signature reserved; intentionally not defined here.
template <class T>
void import_pretrained_backbone(BackboneModel<T>& model, const std::string& path);

// ---- autoencoder classification head ----

struct AeConfig {
  std::int64_t k = 55;
  std::int64_t dim = 128;                           // must equal backbone dim
  std::vector<std::int64_t> ladder = {128, 64, 32, 16, 8};  // channel-mixing stack
  std::int64_t fc_hidden = 64;
  std::int64_t latent = 20;
  std::uint64_t seed = 3;
};

inline std::vector<std::int64_t> ae_ladder_for_dim(std::int64_t dim) {
  if (dim == 768) return {768, 512, 256, 128, 64, 32, 16};
  std::vector<std::int64_t> ladder{dim};
  while (ladder.back() > 8 && ladder.size() < 7) ladder.push_back(ladder.back() / 2);
  return ladder;
}

template <class T>
struct AeOutput {
  Var<T> reconstruction;  // [B, K, L']
  Var<T> class_logits;    // [B, 2]
  Var<T> latent;          // [B, latent]
};

// 1x1 channel-mixing conv stack (a shared per-token linear layer) down to a
// narrow channel count, flatten, two FC layers into the latent; mirrored
// decoder with ReLU throughout; classifier = GELU + LayerNorm + FC on the
// latent. Uncertainty weights are carried as log-sigma parameters.
template <class T>
class AutoencoderHead {
 public:
  explicit AutoencoderHead(const AeConfig& cfg) : cfg_(cfg) {
    if (cfg.ladder.size() < 2 || cfg.ladder.front() != cfg.dim)
      throw ValidationError("AutoencoderHead: ladder must start at the hidden dim");
    Rng rng(cfg.seed);
    for (std::size_t i = 0; i + 1 < cfg.ladder.size(); ++i)
      enc_convs_.emplace_back(store_, "ae.enc.conv" + std::to_string(i), cfg.ladder[i],
                              cfg.ladder[i + 1], rng, true);
    const std::int64_t flat = cfg.k * cfg.ladder.back();
    enc_fc1_ = Linear<T>(store_, "ae.enc.fc1", flat, cfg.fc_hidden, rng, true);
    enc_fc2_ = Linear<T>(store_, "ae.enc.fc2", cfg.fc_hidden, cfg.latent, rng, true);
    dec_fc_ = Linear<T>(store_, "ae.dec.fc", cfg.latent, flat, rng, true);
    for (std::size_t i = cfg.ladder.size() - 1; i > 0; --i)
      dec_convs_.emplace_back(store_, "ae.dec.conv" + std::to_string(cfg.ladder.size() - 1 - i),
                              cfg.ladder[i], cfg.ladder[i - 1], rng, true);
    cls_ln_ = LayerNorm<T>(store_, "ae.cls.ln", cfg.latent, rng, true, 1);
    cls_fc_ = Linear<T>(store_, "ae.cls.fc", cfg.latent, 2, rng, true);
    log_sigma_recon_ = store_.add("ae.log_sigma_recon", Tensor<T>::zeros({1}), true);
    log_sigma_ce_ = store_.add("ae.log_sigma_ce", Tensor<T>::zeros({1}), true);
  }

  AeOutput<T> forward(const Var<T>& hidden) {
    const auto& sh = hidden->value.shape;
    if (sh.size() != 3 || sh[1] != cfg_.k || sh[2] != cfg_.dim)
      throw ValidationError("AutoencoderHead: input must be [B," + std::to_string(cfg_.k) + "," +
                            std::to_string(cfg_.dim) + "], got " + shape_str(sh));
    const std::int64_t b = sh[0];
    auto h = hidden;
    for (auto& conv : enc_convs_) h = relu(conv.forward(h));
    auto flat = reshape(h, {b, cfg_.k * cfg_.ladder.back()});
    auto latent = enc_fc2_.forward(enc_fc1_.forward(flat));
    auto d = reshape(dec_fc_.forward(latent), {b, cfg_.k, cfg_.ladder.back()});
    for (auto& conv : dec_convs_) d = relu(conv.forward(d));
    auto logits = cls_fc_.forward(cls_ln_.forward(gelu(latent)));
    return {d, logits, latent};
  }

  Var<T> log_sigma_recon() const { return log_sigma_recon_; }
  Var<T> log_sigma_ce() const { return log_sigma_ce_; }
  ParamStore<T>& store() { return store_; }
  const AeConfig& config() const { return cfg_; }

 private:
  AeConfig cfg_;
  ParamStore<T> store_;
  std::vector<Linear<T>> enc_convs_, dec_convs_;
  Linear<T> enc_fc1_, enc_fc2_, dec_fc_;
  LayerNorm<T> cls_ln_;
  Linear<T> cls_fc_;
  Var<T> log_sigma_recon_, log_sigma_ce_;
};

}  // namespace rllm::nn
