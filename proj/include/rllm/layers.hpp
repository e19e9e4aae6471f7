#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rllm/autograd.hpp"

namespace rllm::nn {

// Owns the parameter leaves of one model in registration order; the order
// fixes optimizer iteration and checkpoint layout.
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init, bool trainable) {
    for (const auto& p : params_)
      if (p->name == name) throw ValidationError("ParamStore: duplicate parameter " + name);
    auto v = parameter(std::move(init), name);
    v->requires_grad = trainable;
    trainable_flags_.push_back(trainable);
    params_.push_back(v);
    return v;
  }

  const std::vector<Var<T>>& all() const { return params_; }

  std::vector<Var<T>> trainable() const {
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (trainable_flags_[i]) out.push_back(params_[i]);
    return out;
  }

  std::vector<Var<T>> frozen() const {
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (!trainable_flags_[i]) out.push_back(params_[i]);
    return out;
  }

  bool is_trainable(std::size_t i) const { return trainable_flags_[i]; }

  Var<T> find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p;
    throw ValidationError("ParamStore: unknown parameter " + name);
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::uint64_t frozen_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (trainable_flags_[i]) continue;
      const auto& d = params_[i]->value.data;
      h = fnv1a64(d.data(), d.size() * sizeof(T), h);
    }
    return h;
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<bool> trainable_flags_;
};

struct ParamCount {
  std::string name;
  std::int64_t count = 0;
  bool trainable = false;
};

template <class T>
std::vector<ParamCount> parameter_report(const ParamStore<T>& store) {
  std::vector<ParamCount> out;
  std::size_t i = 0;
  for (const auto& p : store.all()) {
    out.push_back({p->name, p->value.numel(), store.is_trainable(i)});
    ++i;
  }
  return out;
}

// y = x W + b, weight shape [d_in, d_out].
template <class T>
struct Linear {
  Var<T> w, b;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, std::int64_t d_in, std::int64_t d_out,
         Rng& rng, bool trainable, T init_std = T(0.02)) {
    w = store.add(prefix + ".w", Tensor<T>::randn({d_in, d_out}, rng, init_std), trainable);
    b = store.add(prefix + ".b", Tensor<T>::zeros({d_out}), trainable);
  }

  Var<T> forward(const Var<T>& x) const { return add(matmul(x, w), b); }
};

// Low-rank adapter on a frozen weight: y = x (W + s A B) + b. Only A and B
// train; A starts Gaussian(0, 0.02), B starts at zero so the adapted layer
// is exactly the frozen layer at initialization.
template <class T>
struct LoraLinear {
  Var<T> w, b, a, bm;
  double lora_scale = 1.0;

  LoraLinear() = default;
  LoraLinear(ParamStore<T>& store, const std::string& prefix, std::int64_t d_in, std::int64_t d_out,
             std::int64_t rank, double scale, Rng& rng, T init_std = T(0.02)) {
    if (rank < 1) throw ValidationError("LoraLinear: rank must be >= 1");
    lora_scale = scale;
    w = store.add(prefix + ".w", Tensor<T>::randn({d_in, d_out}, rng, init_std), false);
    b = store.add(prefix + ".b", Tensor<T>::zeros({d_out}), false);
    a = store.add(prefix + ".lora_a", Tensor<T>::randn({d_in, rank}, rng, T(0.02)), true);
    bm = store.add(prefix + ".lora_b", Tensor<T>::zeros({rank, d_out}), true);
  }

  Var<T> forward(const Var<T>& x) const {
    auto w_eff = add(w, scale(matmul(a, bm), lora_scale));
    return add(matmul(x, w_eff), b);
  }

  // W + s A B as a plain tensor (merge oracle / deployment path).
  Tensor<T> merged_weight() const {
    const std::int64_t d_in = w->value.shape[0], d_out = w->value.shape[1];
    const std::int64_t r = a->value.shape[1];
    Tensor<T> m = w->value;
    for (std::int64_t i = 0; i < d_in; ++i)
      for (std::int64_t p = 0; p < r; ++p) {
        const T aip = a->value.data[static_cast<std::size_t>(i * r + p)];
        for (std::int64_t j = 0; j < d_out; ++j)
          m.data[static_cast<std::size_t>(i * d_out + j)] +=
              static_cast<T>(lora_scale) * aip * bm->value.data[static_cast<std::size_t>(p * d_out + j)];
      }
    return m;
  }

  std::int64_t trainable_count() const { return a->value.numel() + bm->value.numel(); }
};

// Additive mask that zeroes attention to future positions.
template <class T>
Var<T> apply_causal_mask(const Var<T>& scores) {
  const auto& sh = scores->value.shape;
  const std::int64_t k = sh[sh.size() - 1];
  Tensor<T> mask({k, k});
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = i + 1; j < k; ++j)
      mask.data[static_cast<std::size_t>(i * k + j)] = T(-1e9);
  return add(scores, constant(mask));
}

// Multi-head attention, bidirectional by default (radar feature tokens carry
// no autoregressive order); an optional causal mask restores decoder-style
// attention. Q/V projections can carry LoRA adapters.
template <class T>
struct MultiHeadAttention {
  std::int64_t heads = 1;
  bool causal = false;
  // Exactly one of (q_lin, q_lora) is populated, same for v.
  std::unique_ptr<Linear<T>> q_lin, v_lin;
  std::unique_ptr<LoraLinear<T>> q_lora, v_lora;
  Linear<T> k_lin, o_lin;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& prefix, std::int64_t d,
                     std::int64_t h, Rng& rng, bool trainable, std::int64_t lora_rank = 0,
                     double lora_scale = 1.0, bool causal_mask = false) {
    if (d % h != 0) throw ValidationError("MultiHeadAttention: D must be divisible by H");
    heads = h;
    causal = causal_mask;
    if (lora_rank > 0) {
      q_lora = std::make_unique<LoraLinear<T>>(store, prefix + ".wq", d, d, lora_rank, lora_scale, rng);
      v_lora = std::make_unique<LoraLinear<T>>(store, prefix + ".wv", d, d, lora_rank, lora_scale, rng);
    } else {
      q_lin = std::make_unique<Linear<T>>(store, prefix + ".wq", d, d, rng, trainable);
      v_lin = std::make_unique<Linear<T>>(store, prefix + ".wv", d, d, rng, trainable);
    }
    k_lin = Linear<T>(store, prefix + ".wk", d, d, rng, trainable && lora_rank == 0);
    o_lin = Linear<T>(store, prefix + ".wo", d, d, rng, trainable && lora_rank == 0);
  }

  Var<T> forward(const Var<T>& x) const {
    const std::int64_t d = x->value.shape[2];
    const std::int64_t dh = d / heads;
    auto q = split_heads(q_lora ? q_lora->forward(x) : q_lin->forward(x), heads);
    auto k = split_heads(k_lin.forward(x), heads);
    auto v = split_heads(v_lora ? v_lora->forward(x) : v_lin->forward(x), heads);
    auto scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = apply_causal_mask(scores);
    auto att = softmax_lastdim(scores);
    auto ctx = merge_heads(matmul(att, v));
    return o_lin.forward(ctx);
  }
};

template <class T>
struct FeedForward {
  Linear<T> fc1, fc2;
  bool use_gelu = true;

  FeedForward() = default;
  FeedForward(ParamStore<T>& store, const std::string& prefix, std::int64_t d, std::int64_t hidden,
              Rng& rng, bool trainable, bool gelu_act = true)
      : fc1(store, prefix + ".fc1", d, hidden, rng, trainable),
        fc2(store, prefix + ".fc2", hidden, d, rng, trainable),
        use_gelu(gelu_act) {}

  Var<T> forward(const Var<T>& x) const {
    auto h = fc1.forward(x);
    return fc2.forward(use_gelu ? gelu(h) : relu(h));
  }
};

template <class T>
struct LayerNorm {
  Var<T> gamma, beta;
  double eps = 1e-5;
  std::size_t axis = 1;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& prefix, std::int64_t dim, Rng&,
            bool trainable, std::size_t norm_axis = 1)
      : axis(norm_axis) {
    gamma = store.add(prefix + ".gamma", Tensor<T>::full({dim}, T(1)), trainable);
    beta = store.add(prefix + ".beta", Tensor<T>::zeros({dim}), trainable);
  }

  Var<T> forward(const Var<T>& x) const { return layer_norm_axis(x, gamma, beta, eps, axis); }
};

template <class T>
struct BatchNorm {
  Var<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& prefix, std::int64_t d, bool trainable) {
    gamma = store.add(prefix + ".gamma", Tensor<T>::full({d}, T(1)), trainable);
    beta = store.add(prefix + ".beta", Tensor<T>::zeros({d}), trainable);
    running_mean.assign(static_cast<std::size_t>(d), T(0));
    running_var.assign(static_cast<std::size_t>(d), T(1));
  }

  Var<T> forward(const Var<T>& x, bool training) {
    return batch_norm(x, gamma, beta, &running_mean, &running_var, momentum, eps, training);
  }
};

// E[k,2l] = sin(k / 10000^(2l/L')), E[k,2l+1] = cos(k / 10000^(2l/L')).
template <class T>
Tensor<T> sinusoidal_positional_encoding(std::int64_t k_tokens, std::int64_t dim) {
  if (dim % 2 != 0) throw ValidationError("sinusoidal_positional_encoding: dimension must be even");
  if (k_tokens < 1 || dim < 2)
    throw ValidationError("sinusoidal_positional_encoding: invalid table size");
  Tensor<T> e({k_tokens, dim});
  for (std::int64_t k = 0; k < k_tokens; ++k)
    for (std::int64_t l = 0; 2 * l < dim; ++l) {
      const double angle = static_cast<double>(k) /
                           std::pow(10000.0, 2.0 * static_cast<double>(l) / static_cast<double>(dim));
      e.data[static_cast<std::size_t>(k * dim + 2 * l)] = static_cast<T>(std::sin(angle));
      e.data[static_cast<std::size_t>(k * dim + 2 * l + 1)] = static_cast<T>(std::cos(angle));
    }
  return e;
}

}  // namespace rllm::nn
