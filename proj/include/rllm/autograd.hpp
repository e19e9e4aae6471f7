#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rllm/tensor.hpp"

namespace rllm::nn {

// Reverse-mode autodiff over dense tensors. Nodes form a DAG; leaves are
// parameters or constants, interior nodes capture their backward rule in a
// closure. Interior gradients are materialized, which keeps attribution
// checks (e.g. per-token gradients at the logits) cheap.
template <class T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_op;

  void ensure_grad() {
    if (grad.size() != value.data.size()) grad.assign(value.data.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  bool has_grad() const { return grad.size() == value.data.size(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

template <class T>
Var<T> parameter(Tensor<T> v, std::string name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

namespace agdetail {

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_op = std::move(backward);
  return n;
}

// b's shape must be a trailing suffix of a's shape (bias-style broadcast).
template <class T>
void check_suffix(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (b.rank() > a.rank()) throw ValidationError(std::string(op) + ": rank mismatch");
  const std::size_t off = a.rank() - b.rank();
  for (std::size_t i = 0; i < b.rank(); ++i)
    if (a.shape[off + i] != b.shape[i])
      throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                            shape_str(b.shape));
}

}  // namespace agdetail

// ---- elementwise and broadcast ops ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  agdetail::check_suffix(a->value, b->value, "add");
  const std::size_t nb = b->value.data.size();
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i % nb];
  return agdetail::make_op<T>(std::move(out), {a, b}, [nb](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % nb] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  agdetail::check_suffix(a->value, b->value, "sub");
  const std::size_t nb = b->value.data.size();
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i % nb];
  return agdetail::make_op<T>(std::move(out), {a, b}, [nb](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % nb] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  agdetail::check_suffix(a->value, b->value, "mul");
  const std::size_t nb = b->value.data.size();
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i % nb];
  return agdetail::make_op<T>(std::move(out), {a, b}, [nb](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] * pb.value.data[i % nb];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i % nb] += self.grad[i] * pa.value.data[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, double c) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= static_cast<T>(c);
  return agdetail::make_op<T>(std::move(out), {a}, [c](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa.grad[i] += self.grad[i] * static_cast<T>(c);
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, double c) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v += static_cast<T>(c);
  return agdetail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return agdetail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (pa.value.data[i] > T(0)) pa.grad[i] += self.grad[i];
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) {
    const double x = static_cast<double>(v);
    v = static_cast<T>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
  }
  return agdetail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = static_cast<double>(pa.value.data[i]);
      const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      pa.grad[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
    }
  });
}

template <class T>
Var<T> vexp(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = static_cast<T>(std::exp(static_cast<double>(v)));
  return agdetail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa.grad[i] += self.grad[i] * self.value.data[i];
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= v;
  return agdetail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa.grad[i] += T(2) * self.grad[i] * pa.value.data[i];
  });
}

// ---- shape ops ----

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  if (numel_of(s) != a->value.numel())
    throw ValidationError("reshape: element count mismatch " + shape_str(a->value.shape) + " -> " +
                          shape_str(s));
  Tensor<T> out;
  out.shape = std::move(s);
  out.data = a->value.data;
  return agdetail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

template <class T>
Var<T> transpose_last2(const Var<T>& a) {
  const auto& sh = a->value.shape;
  if (sh.size() < 2) throw ValidationError("transpose_last2: rank must be >= 2");
  const std::int64_t m = sh[sh.size() - 2], n = sh[sh.size() - 1];
  const std::int64_t batches = a->value.numel() / (m * n);
  Shape os = sh;
  os[os.size() - 2] = n;
  os[os.size() - 1] = m;
  Tensor<T> out(os);
  for (std::int64_t b = 0; b < batches; ++b) {
    const T* src = a->value.data.data() + b * m * n;
    T* dst = out.data.data() + b * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return agdetail::make_op<T>(std::move(out), {a}, [m, n, batches](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t b = 0; b < batches; ++b) {
      const T* g = self.grad.data() + b * m * n;
      T* dst = pa.grad.data() + b * m * n;
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
    }
  });
}

// [B,K,D] -> [B,H,K,D/H]
template <class T>
Var<T> split_heads(const Var<T>& a, std::int64_t heads) {
  const auto& sh = a->value.shape;
  if (sh.size() != 3) throw ValidationError("split_heads: expected [B,K,D]");
  const std::int64_t B = sh[0], K = sh[1], D = sh[2];
  if (D % heads != 0) throw ValidationError("split_heads: D must be divisible by H");
  const std::int64_t dh = D / heads;
  Tensor<T> out({B, heads, K, dh});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t h = 0; h < heads; ++h) {
        const T* src = a->value.data.data() + (b * K + k) * D + h * dh;
        T* dst = out.data.data() + ((b * heads + h) * K + k) * dh;
        for (std::int64_t j = 0; j < dh; ++j) dst[j] = src[j];
      }
  return agdetail::make_op<T>(std::move(out), {a}, [B, K, D, heads, dh](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t h = 0; h < heads; ++h) {
          T* dst = pa.grad.data() + (b * K + k) * D + h * dh;
          const T* g = self.grad.data() + ((b * heads + h) * K + k) * dh;
          for (std::int64_t j = 0; j < dh; ++j) dst[j] += g[j];
        }
  });
}

// [B,H,K,dh] -> [B,K,H*dh]
template <class T>
Var<T> merge_heads(const Var<T>& a) {
  const auto& sh = a->value.shape;
  if (sh.size() != 4) throw ValidationError("merge_heads: expected [B,H,K,dh]");
  const std::int64_t B = sh[0], H = sh[1], K = sh[2], dh = sh[3];
  const std::int64_t D = H * dh;
  Tensor<T> out({B, K, D});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t k = 0; k < K; ++k) {
        const T* src = a->value.data.data() + ((b * H + h) * K + k) * dh;
        T* dst = out.data.data() + (b * K + k) * D + h * dh;
        for (std::int64_t j = 0; j < dh; ++j) dst[j] = src[j];
      }
  return agdetail::make_op<T>(std::move(out), {a}, [B, H, K, dh, D](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t k = 0; k < K; ++k) {
          T* dst = pa.grad.data() + ((b * H + h) * K + k) * dh;
          const T* g = self.grad.data() + (b * K + k) * D + h * dh;
          for (std::int64_t j = 0; j < dh; ++j) dst[j] += g[j];
        }
  });
}

// ---- matmul ----

namespace agdetail {

// C[m,n] += A[m,k] B[k,n]
template <class T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool parallel) {
#pragma omp parallel for if (parallel)
  for (std::int64_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* __restrict brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m,k] += A[m,n] B^T, B is [k,n]
template <class T>
void gemm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t m,
             std::int64_t n, std::int64_t k, bool parallel) {
#pragma omp parallel for if (parallel)
  for (std::int64_t i = 0; i < m; ++i) {
    const T* __restrict arow = a + i * n;
    T* __restrict crow = c + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T* __restrict brow = b + p * n;
      T acc = T(0);
      for (std::int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A^T B, A is [m,k], B is [m,n]
template <class T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t m,
             std::int64_t k, std::int64_t n, bool parallel) {
#pragma omp parallel for if (parallel)
  for (std::int64_t p = 0; p < k; ++p) {
    T* __restrict crow = c + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T aip = a[i * k + p];
      const T* __restrict brow = b + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

inline constexpr std::int64_t kParallelWork = 262144;

}  // namespace agdetail

// a [..., m, k] times b: either a shared 2-D [k, n] or batched with
// identical leading dims [..., k, n].
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  if (sa.size() < 2 || sb.size() < 2) throw ValidationError("matmul: rank must be >= 2");
  const std::int64_t m = sa[sa.size() - 2], kk = sa[sa.size() - 1];
  const bool shared_b = sb.size() == 2;
  if (shared_b) {
    if (sb[0] != kk)
      throw ValidationError("matmul: inner dims differ " + shape_str(sa) + " x " + shape_str(sb));
  } else {
    if (sb.size() != sa.size() || sb[sb.size() - 2] != kk)
      throw ValidationError("matmul: inner dims differ " + shape_str(sa) + " x " + shape_str(sb));
    for (std::size_t i = 0; i + 2 < sa.size(); ++i)
      if (sa[i] != sb[i]) throw ValidationError("matmul: batch dims differ");
  }
  const std::int64_t n = sb[sb.size() - 1];
  const std::int64_t batches = a->value.numel() / (m * kk);
  const std::int64_t work = m * kk * n;
  // one batch item: parallelize inside the kernel; many: across items
  const bool par_inner = batches == 1 && work > agdetail::kParallelWork;
  const bool par_outer = batches > 1 && batches * work > agdetail::kParallelWork;
  Shape os = sa;
  os[os.size() - 1] = n;
  Tensor<T> out(os);
#pragma omp parallel for if (par_outer)
  for (std::int64_t bt = 0; bt < batches; ++bt)
    agdetail::gemm_nn(a->value.data.data() + bt * m * kk,
                      b->value.data.data() + (shared_b ? 0 : bt * kk * n),
                      out.data.data() + bt * m * n, m, kk, n, par_inner);
  return agdetail::make_op<T>(std::move(out), {a, b},
                              [m, kk, n, batches, shared_b, par_inner, par_outer](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
#pragma omp parallel for if (par_outer)
      for (std::int64_t bt = 0; bt < batches; ++bt)
        agdetail::gemm_nt(self.grad.data() + bt * m * n,
                          pb.value.data.data() + (shared_b ? 0 : bt * kk * n),
                          pa.grad.data() + bt * m * kk, m, n, kk, par_inner);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // shared b accumulates across batch items: keep that loop serial
#pragma omp parallel for if (par_outer && !shared_b)
      for (std::int64_t bt = 0; bt < batches; ++bt)
        agdetail::gemm_tn(pa.value.data.data() + bt * m * kk, self.grad.data() + bt * m * n,
                          pb.grad.data() + (shared_b ? 0 : bt * kk * n), m, kk, n,
                          par_inner || (shared_b && batches > 1));
    }
  });
}

// ---- reductions ----

template <class T>
Var<T> sum_all(const Var<T>& a) {
  T acc = T(0);
  for (const auto& v : a->value.data) acc += v;
  return agdetail::make_op<T>(Tensor<T>({1}, std::vector<T>{acc}), {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const T g = self.grad[0];
    for (auto& v : pa.grad) v += g;
  });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

// ---- softmax / cross-entropy ----

template <class T>
Var<T> softmax_lastdim(const Var<T>& a) {
  const auto& sh = a->value.shape;
  const std::int64_t c = sh[sh.size() - 1];
  const std::int64_t rows = a->value.numel() / c;
  Tensor<T> out = a->value;
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data.data() + r * c;
    T mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)));
      denom += row[j];
    }
    for (std::int64_t j = 0; j < c; ++j) row[j] /= denom;
  }
  return agdetail::make_op<T>(std::move(out), {a}, [c, rows](Node<T>& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data.data() + r * c;
      const T* g = self.grad.data() + r * c;
      T dot = T(0);
      for (std::int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
      T* dst = pa.grad.data() + r * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += y[j] * (g[j] - dot);
    }
  });
}

// Per-position cross-entropy: logits [..., C] + integer labels over the
// leading dims -> loss [...]. Log-sum-exp stabilized.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& sh = logits->value.shape;
  if (sh.size() < 2) throw ValidationError("cross_entropy: logits rank must be >= 2");
  const std::int64_t c = sh[sh.size() - 1];
  const std::int64_t rows = logits->value.numel() / c;
  if (static_cast<std::int64_t>(labels.size()) != rows)
    throw ValidationError("cross_entropy: label count does not match logits rows");
  for (int y : labels)
    if (y < 0 || y >= c) throw ValidationError("cross_entropy: label out of range");
  Shape os(sh.begin(), sh.end() - 1);
  Tensor<T> out(os);
  std::vector<T> probs(static_cast<std::size_t>(rows * c));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = logits->value.data.data() + r * c;
    T mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(denom) + static_cast<double>(mx);
    out.data[static_cast<std::size_t>(r)] =
        static_cast<T>(lse - static_cast<double>(row[labels[static_cast<std::size_t>(r)]]));
    for (std::int64_t j = 0; j < c; ++j)
      probs[static_cast<std::size_t>(r * c + j)] =
          static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
  }
  return agdetail::make_op<T>(
      std::move(out), {logits}, [c, rows, labels, probs = std::move(probs)](Node<T>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T g = self.grad[static_cast<std::size_t>(r)];
          T* dst = pa.grad.data() + r * c;
          const T* p = probs.data() + r * c;
          for (std::int64_t j = 0; j < c; ++j) dst[j] += g * p[j];
          dst[labels[static_cast<std::size_t>(r)]] -= g;
        }
      });
}

// ---- normalization ----

// Layer normalization over `axis`, with gamma/beta indexed by the last
// dimension. axis=1 on [B,K,L] gives the token-axis statistics used by both
// transformer stacks; axis=1 on [B,D] is plain last-dim LayerNorm.
template <class T>
Var<T> layer_norm_axis(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps,
                       std::size_t axis) {
  const auto& sh = x->value.shape;
  if (axis >= sh.size()) throw ValidationError("layer_norm_axis: axis out of range");
  const std::int64_t last = sh[sh.size() - 1];
  if (gamma->value.shape != Shape{last} || beta->value.shape != Shape{last})
    throw ValidationError("layer_norm_axis: gamma/beta must have shape [last_dim]");
  if (!(eps > 0.0)) throw ValidationError("layer_norm_axis: eps must be > 0");
  const std::int64_t n = sh[axis];
  std::int64_t inner = 1;
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::int64_t outer = x->value.numel() / (n * inner);
  const std::int64_t groups = outer * inner;

  std::vector<T> xhat(x->value.data.size());
  std::vector<T> invstd(static_cast<std::size_t>(groups));
  Tensor<T> out(sh);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      double mean = 0.0;
      for (std::int64_t j = 0; j < n; ++j)
        mean += static_cast<double>(x->value.data[static_cast<std::size_t>((o * n + j) * inner + i)]);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        const double d =
            static_cast<double>(x->value.data[static_cast<std::size_t>((o * n + j) * inner + i)]) -
            mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      invstd[static_cast<std::size_t>(o * inner + i)] = static_cast<T>(is);
      for (std::int64_t j = 0; j < n; ++j) {
        const std::size_t idx = static_cast<std::size_t>((o * n + j) * inner + i);
        const std::size_t l = idx % static_cast<std::size_t>(last);
        xhat[idx] = static_cast<T>((static_cast<double>(x->value.data[idx]) - mean) * is);
        out.data[idx] = gamma->value.data[l] * xhat[idx] + beta->value.data[l];
      }
    }
  return agdetail::make_op<T>(
      std::move(out), {x, gamma, beta},
      [n, inner, outer, last, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < inner; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
              const std::size_t idx = static_cast<std::size_t>((o * n + j) * inner + i);
              const std::size_t l = idx % static_cast<std::size_t>(last);
              const double gh = static_cast<double>(pg.value.data[l]) *
                                static_cast<double>(self.grad[idx]);
              m1 += gh;
              m2 += gh * static_cast<double>(xhat[idx]);
              if (pg.requires_grad) pg.grad[l] += self.grad[idx] * xhat[idx];
              if (pb.requires_grad) pb.grad[l] += self.grad[idx];
            }
            if (!px.requires_grad) continue;
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            const double is = static_cast<double>(invstd[static_cast<std::size_t>(o * inner + i)]);
            for (std::int64_t j = 0; j < n; ++j) {
              const std::size_t idx = static_cast<std::size_t>((o * n + j) * inner + i);
              const std::size_t l = idx % static_cast<std::size_t>(last);
              const double gh = static_cast<double>(pg.value.data[l]) *
                                static_cast<double>(self.grad[idx]);
              px.grad[idx] +=
                  static_cast<T>((gh - m1 - static_cast<double>(xhat[idx]) * m2) * is);
            }
          }
      });
}

// Batch normalization over (B,K) per channel on [B,K,D]. Training mode
// updates the caller-owned running statistics (momentum 0.1 convention,
// unbiased variance in the running buffer).
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  std::vector<T>* running_mean, std::vector<T>* running_var, double momentum,
                  double eps, bool training) {
  const auto& sh = x->value.shape;
  if (sh.size() != 3) throw ValidationError("batch_norm: expected [B,K,D]");
  const std::int64_t B = sh[0], K = sh[1], D = sh[2];
  if (gamma->value.shape != Shape{D} || beta->value.shape != Shape{D})
    throw ValidationError("batch_norm: gamma/beta must have shape [D]");
  if (running_mean->size() != static_cast<std::size_t>(D) ||
      running_var->size() != static_cast<std::size_t>(D))
    throw ValidationError("batch_norm: running stats must have shape [D]");
  if (training && B < 2) throw ValidationError("batch_norm: training mode needs batch size >= 2");

  const std::int64_t rows = B * K;
  std::vector<T> mean_v(static_cast<std::size_t>(D)), invstd_v(static_cast<std::size_t>(D));
  if (training) {
    for (std::int64_t d = 0; d < D; ++d) {
      double mean = 0.0;
      for (std::int64_t r = 0; r < rows; ++r)
        mean += static_cast<double>(x->value.data[static_cast<std::size_t>(r * D + d)]);
      mean /= static_cast<double>(rows);
      double var = 0.0;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double dv =
            static_cast<double>(x->value.data[static_cast<std::size_t>(r * D + d)]) - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(rows);
      mean_v[static_cast<std::size_t>(d)] = static_cast<T>(mean);
      invstd_v[static_cast<std::size_t>(d)] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = rows > 1 ? var * static_cast<double>(rows) / static_cast<double>(rows - 1)
                                       : var;
      auto& rm = (*running_mean)[static_cast<std::size_t>(d)];
      auto& rv = (*running_var)[static_cast<std::size_t>(d)];
      rm = static_cast<T>((1.0 - momentum) * static_cast<double>(rm) + momentum * mean);
      rv = static_cast<T>((1.0 - momentum) * static_cast<double>(rv) + momentum * unbiased);
    }
  } else {
    for (std::int64_t d = 0; d < D; ++d) {
      mean_v[static_cast<std::size_t>(d)] = (*running_mean)[static_cast<std::size_t>(d)];
      invstd_v[static_cast<std::size_t>(d)] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>((*running_var)[static_cast<std::size_t>(d)]) + eps));
    }
  }

  std::vector<T> xhat(x->value.data.size());
  Tensor<T> out(sh);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t d = 0; d < D; ++d) {
      const std::size_t idx = static_cast<std::size_t>(r * D + d);
      xhat[idx] = (x->value.data[idx] - mean_v[static_cast<std::size_t>(d)]) *
                  invstd_v[static_cast<std::size_t>(d)];
      out.data[idx] = gamma->value.data[static_cast<std::size_t>(d)] * xhat[idx] +
                      beta->value.data[static_cast<std::size_t>(d)];
    }
  return agdetail::make_op<T>(
      std::move(out), {x, gamma, beta},
      [rows, D, training, xhat = std::move(xhat), invstd = std::move(invstd_v)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::int64_t d = 0; d < D; ++d) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t r = 0; r < rows; ++r) {
            const std::size_t idx = static_cast<std::size_t>(r * D + d);
            sum_g += static_cast<double>(self.grad[idx]);
            sum_gx += static_cast<double>(self.grad[idx]) * static_cast<double>(xhat[idx]);
          }
          if (pg.requires_grad) pg.grad[static_cast<std::size_t>(d)] += static_cast<T>(sum_gx);
          if (pb.requires_grad) pb.grad[static_cast<std::size_t>(d)] += static_cast<T>(sum_g);
          if (!px.requires_grad) continue;
          const double g_d = static_cast<double>(pg.value.data[static_cast<std::size_t>(d)]);
          const double is = static_cast<double>(invstd[static_cast<std::size_t>(d)]);
          if (training) {
            const double m1 = g_d * sum_g / static_cast<double>(rows);
            const double m2 = g_d * sum_gx / static_cast<double>(rows);
            for (std::int64_t r = 0; r < rows; ++r) {
              const std::size_t idx = static_cast<std::size_t>(r * D + d);
              const double gh = g_d * static_cast<double>(self.grad[idx]);
              px.grad[idx] += static_cast<T>((gh - m1 - static_cast<double>(xhat[idx]) * m2) * is);
            }
          } else {
            for (std::int64_t r = 0; r < rows; ++r) {
              const std::size_t idx = static_cast<std::size_t>(r * D + d);
              px.grad[idx] += static_cast<T>(g_d * is * static_cast<double>(self.grad[idx]));
            }
          }
        }
      });
}

// ---- graph traversal ----

template <class T>
void backward(const Var<T>& root, T seed = T(1)) {
  if (root->value.numel() != 1) throw ValidationError("backward: root must be a scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  // Iterative post-order DFS; order ends up children-before-parents.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (!visited.count(p) && p->requires_grad) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_op && node->requires_grad) {
      node->ensure_grad();
      node->backward_op(*node);
    }
  }
}

}  // namespace rllm::nn
