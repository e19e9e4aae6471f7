#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rllm/adam.hpp"
#include "rllm/autograd.hpp"
#include "rllm/grad_check.hpp"
#include "rllm/layers.hpp"
#include "rllm/tensor.hpp"

using namespace rllm;
using namespace rllm::nn;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(s), rng, sd);
}

}  // namespace

TEST_CASE("linear layer identity and toy example") {
  auto x = parameter(randn({2, 3}, 1), "x");
  auto w = constant(Tensor<double>::eye(3));
  auto b = constant(Tensor<double>::zeros({3}));
  auto y = add(matmul(x, w), b);
  for (std::size_t i = 0; i < 6; ++i) REQUIRE(y->value.data[i] == x->value.data[i]);

  auto x2 = constant(Tensor<double>({1, 2}, {1.0, 2.0}));
  auto w2 = constant(Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  auto b2 = constant(Tensor<double>({2}, {1.0, 1.0}));
  auto y2 = add(matmul(x2, w2), b2);
  REQUIRE(y2->value.data[0] == 2.0);
  REQUIRE(y2->value.data[1] == 3.0);
}

TEST_CASE("linear layer gradients match finite differences") {
  auto x = parameter(randn({3, 5}, 2), "x");
  auto w = parameter(randn({5, 4}, 3, 0.5), "w");
  auto b = parameter(randn({4}, 4, 0.1), "b");
  auto f = [&] { return mean_all(square(add(matmul(x, w), b))); };
  REQUIRE(finite_difference_check<double>(f, {x, w, b}, 1e-5) < 1e-5);
}

TEST_CASE("batched matmul gradients") {
  auto a = parameter(randn({2, 3, 4, 5}, 5), "a");
  auto b = parameter(randn({2, 3, 5, 6}, 6), "b");
  auto f = [&] { return mean_all(square(matmul(a, b))); };
  REQUIRE(finite_difference_check<double>(f, {a, b}, 1e-5) < 1e-5);
}

TEST_CASE("matmul rejects shape mismatches") {
  auto a = constant(randn({2, 3}, 1));
  auto b = constant(randn({4, 2}, 2));
  REQUIRE_THROWS_AS(matmul(a, b), ValidationError);
}

TEST_CASE("positional encoding row zero alternates 0 and 1") {
  auto e = sinusoidal_positional_encoding<double>(4, 8);
  for (std::int64_t l = 0; l < 4; ++l) {
    REQUIRE(e.data[static_cast<std::size_t>(2 * l)] == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(e.data[static_cast<std::size_t>(2 * l + 1)] == Catch::Approx(1.0).margin(1e-15));
  }
}

TEST_CASE("positional encoding pairs lie on the unit circle and in [-1,1]") {
  auto e = sinusoidal_positional_encoding<double>(55, 64);
  for (std::int64_t k = 0; k < 55; ++k)
    for (std::int64_t l = 0; 2 * l < 64; ++l) {
      const double s = e.data[static_cast<std::size_t>(k * 64 + 2 * l)];
      const double c = e.data[static_cast<std::size_t>(k * 64 + 2 * l + 1)];
      REQUIRE(s * s + c * c == Catch::Approx(1.0).margin(1e-12));
      REQUIRE(std::abs(s) <= 1.0);
      REQUIRE(std::abs(c) <= 1.0);
    }
}

TEST_CASE("positional encoding spot values match the scalar formula") {
  auto e = sinusoidal_positional_encoding<double>(55, 768);
  for (auto [k, l] : {std::pair<int, int>{0, 0}, {7, 13}, {54, 383}, {23, 200}}) {
    const double angle = k / std::pow(10000.0, 2.0 * l / 768.0);
    REQUIRE(e.data[static_cast<std::size_t>(k * 768 + 2 * l)] ==
            Catch::Approx(std::sin(angle)).margin(1e-12));
    REQUIRE(e.data[static_cast<std::size_t>(k * 768 + 2 * l + 1)] ==
            Catch::Approx(std::cos(angle)).margin(1e-12));
  }
  REQUIRE_THROWS_AS(sinusoidal_positional_encoding<double>(8, 7), ValidationError);
}

TEST_CASE("layer norm over the token axis: constants map to beta") {
  // constant along K with gamma=1, beta=0 -> exactly zero
  Tensor<double> x({2, 4, 3});
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t k = 0; k < 4; ++k)
      for (std::int64_t l = 0; l < 3; ++l)
        x.data[static_cast<std::size_t>((b * 4 + k) * 3 + l)] = 1.7 * static_cast<double>(l + b);
  auto g = constant(Tensor<double>::full({3}, 1.0));
  auto be = constant(Tensor<double>::zeros({3}));
  auto y = layer_norm_axis(constant(x), g, be, 1e-5, 1);
  for (double v : y->value.data) REQUIRE(v == Catch::Approx(0.0).margin(1e-9));

  auto g0 = constant(Tensor<double>::zeros({3}));
  auto be2 = constant(Tensor<double>({3}, {1.0, -2.0, 0.5}));
  auto y2 = layer_norm_axis(constant(randn({2, 4, 3}, 8)), g0, be2, 1e-5, 1);
  for (std::size_t i = 0; i < y2->value.data.size(); ++i)
    REQUIRE(y2->value.data[i] == be2->value.data[i % 3]);
}

TEST_CASE("layer norm gradients (token axis and last axis)") {
  auto x = parameter(randn({2, 4, 3}, 9), "x");
  auto g = parameter(randn({3}, 10, 0.3), "g");
  auto b = parameter(randn({3}, 11, 0.3), "b");
  auto f = [&] { return mean_all(square(layer_norm_axis(x, g, b, 1e-5, 1))); };
  REQUIRE(finite_difference_check<double>(f, {x, g, b}, 1e-5) < 1e-4);

  auto x2 = parameter(randn({5, 7}, 12), "x2");
  auto g2 = parameter(randn({7}, 13, 0.3), "g2");
  auto b2 = parameter(randn({7}, 14, 0.3), "b2");
  auto f2 = [&] { return mean_all(square(layer_norm_axis(x2, g2, b2, 1e-5, 1))); };
  REQUIRE(finite_difference_check<double>(f2, {x2, g2, b2}, 1e-5) < 1e-4);
}

TEST_CASE("batch norm standardizes per channel in training mode") {
  ParamStore<double> store;
  BatchNorm<double> bn(store, "bn", 5, true);
  auto x = constant(randn({4, 6, 5}, 15, 2.5));
  auto y = bn.forward(x, true);
  for (std::int64_t d = 0; d < 5; ++d) {
    double s = 0.0, s2 = 0.0;
    for (std::int64_t r = 0; r < 24; ++r) {
      const double v = y->value.data[static_cast<std::size_t>(r * 5 + d)];
      s += v;
      s2 += v * v;
    }
    const double mean = s / 24.0;
    REQUIRE(mean == Catch::Approx(0.0).margin(1e-6));
    REQUIRE(s2 / 24.0 - mean * mean == Catch::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("batch norm eval mode is deterministic and training requires B >= 2") {
  ParamStore<double> store;
  BatchNorm<double> bn(store, "bn", 3, true);
  auto warm = constant(randn({4, 2, 3}, 16));
  bn.forward(warm, true);
  auto x = constant(randn({2, 2, 3}, 17));
  auto y1 = bn.forward(x, false);
  auto y2 = bn.forward(x, false);
  REQUIRE(y1->value.data == y2->value.data);
  auto single = constant(randn({1, 2, 3}, 18));
  REQUIRE_THROWS_AS(bn.forward(single, true), ValidationError);
}

TEST_CASE("batch norm gradients in training mode") {
  ParamStore<double> store;
  BatchNorm<double> bn(store, "bn", 3, true);
  auto x = parameter(randn({3, 2, 3}, 19), "x");
  auto f = [&] { return mean_all(square(bn.forward(x, true))); };
  std::vector<Var<double>> params{x, bn.gamma, bn.beta};
  REQUIRE(finite_difference_check<double>(f, params, 1e-5) < 1e-4);
}

TEST_CASE("softmax rows are normalized") {
  auto y = softmax_lastdim(constant(randn({6, 9}, 20, 3.0)));
  for (std::int64_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < 9; ++c) {
      const double v = y->value.data[static_cast<std::size_t>(r * 9 + c)];
      REQUIRE(v >= 0.0);
      s += v;
    }
    REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("single-token attention reduces to the projected value path") {
  ParamStore<double> store;
  Rng rng(21);
  MultiHeadAttention<double> mha(store, "attn", 8, 2, rng, true);
  auto x = constant(randn({2, 1, 8}, 22));
  auto y = mha.forward(x);
  // with K=1 the softmax weight is 1, so output = Wo(Wv x + bv) + bo
  auto v = mha.v_lin->forward(x);
  auto expect = mha.o_lin.forward(v);
  for (std::size_t i = 0; i < y->value.data.size(); ++i)
    REQUIRE(y->value.data[i] == Catch::Approx(expect->value.data[i]).margin(1e-12));
}

TEST_CASE("attention matches a naive per-head loop oracle") {
  const std::int64_t B = 2, K = 3, D = 8, H = 2, dh = D / H;
  ParamStore<double> store;
  Rng rng(23);
  MultiHeadAttention<double> mha(store, "attn", D, H, rng, true);
  auto x = constant(randn({B, K, D}, 24));
  auto y = mha.forward(x);

  // direct evaluation: per-head projections are column blocks of the
  // combined matrices
  auto lin = [&](const Var<double>& w, const Var<double>& b, std::int64_t bb, std::int64_t kk,
                 std::int64_t col) {
    double acc = b->value.data[static_cast<std::size_t>(col)];
    for (std::int64_t i = 0; i < D; ++i)
      acc += x->value.data[static_cast<std::size_t>((bb * K + kk) * D + i)] *
             w->value.data[static_cast<std::size_t>(i * D + col)];
    return acc;
  };
  std::vector<double> ctx(static_cast<std::size_t>(B * K * D));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t k = 0; k < K; ++k) {
        std::vector<double> scores(static_cast<std::size_t>(K));
        for (std::int64_t k2 = 0; k2 < K; ++k2) {
          double dot = 0.0;
          for (std::int64_t j = 0; j < dh; ++j)
            dot += lin(mha.q_lin->w, mha.q_lin->b, b, k, h * dh + j) *
                   lin(mha.k_lin.w, mha.k_lin.b, b, k2, h * dh + j);
          scores[static_cast<std::size_t>(k2)] = dot / std::sqrt(static_cast<double>(dh));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double denom = 0.0;
        for (auto& s : scores) {
          s = std::exp(s - mx);
          denom += s;
        }
        for (std::int64_t j = 0; j < dh; ++j) {
          double acc = 0.0;
          for (std::int64_t k2 = 0; k2 < K; ++k2)
            acc += scores[static_cast<std::size_t>(k2)] / denom *
                   lin(mha.v_lin->w, mha.v_lin->b, b, k2, h * dh + j);
          ctx[static_cast<std::size_t>((b * K + k) * D + h * dh + j)] = acc;
        }
      }
  double err = 0.0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t c = 0; c < D; ++c) {
        double acc = mha.o_lin.b->value.data[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < D; ++i)
          acc += ctx[static_cast<std::size_t>((b * K + k) * D + i)] *
                 mha.o_lin.w->value.data[static_cast<std::size_t>(i * D + c)];
        err = std::max(err,
                       std::abs(acc - y->value.data[static_cast<std::size_t>((b * K + k) * D + c)]));
      }
  REQUIRE(err < 1e-9);
}

TEST_CASE("attention gradients match finite differences") {
  ParamStore<double> store;
  Rng rng(25);
  MultiHeadAttention<double> mha(store, "attn", 8, 2, rng, true);
  auto x = parameter(randn({2, 3, 8}, 26), "x");
  auto f = [&] { return mean_all(square(mha.forward(x))); };
  auto params = store.trainable();
  params.push_back(x);
  REQUIRE(finite_difference_check<double>(f, params, 1e-5) < 1e-4);
  REQUIRE_THROWS_AS(MultiHeadAttention<double>(store, "bad", 8, 3, rng, true), ValidationError);
}

TEST_CASE("LoRA starts as the identity adaptation") {
  ParamStore<double> store;
  Rng rng(27);
  LoraLinear<double> lora(store, "q", 16, 16, 4, 2.0, rng);
  auto x = constant(randn({3, 16}, 28));
  auto y = lora.forward(x);
  auto base = add(matmul(x, lora.w), lora.b);
  for (std::size_t i = 0; i < y->value.data.size(); ++i)
    REQUIRE(std::abs(y->value.data[i] - base->value.data[i]) < 1e-12);
  REQUIRE(lora.trainable_count() == 4 * (16 + 16));
}

TEST_CASE("LoRA merged weight equals the two-path forward in 32-bit") {
  ParamStore<float> store;
  Rng rng(29);
  LoraLinear<float> lora(store, "q", 24, 12, 8, 2.0, rng);
  // give the B matrix real content so the adapter actually contributes
  for (auto& v : lora.bm->value.data) v = static_cast<float>(rng.normal()) * 0.05f;
  auto x = constant(Tensor<float>::randn({7, 24}, rng));
  auto two_path = lora.forward(x);
  auto merged = add(matmul(x, constant(lora.merged_weight())), lora.b);
  float err = 0.0f;
  for (std::size_t i = 0; i < two_path->value.data.size(); ++i)
    err = std::max(err, std::abs(two_path->value.data[i] - merged->value.data[i]));
  REQUIRE(err < 1e-6f);
}

TEST_CASE("LoRA gradients flow only through the adapters") {
  ParamStore<double> store;
  Rng rng(30);
  LoraLinear<double> lora(store, "q", 6, 5, 2, 1.5, rng);
  for (auto& v : lora.bm->value.data) v = rng.normal() * 0.1;
  auto x = constant(randn({4, 6}, 31));
  auto f = [&] { return mean_all(square(lora.forward(x))); };
  REQUIRE(finite_difference_check<double>(f, {lora.a, lora.bm}, 1e-5) < 1e-4);
  REQUIRE(store.trainable().size() == 2);  // only A and B train
  REQUIRE(store.frozen().size() == 2);     // W and b stay frozen
}

TEST_CASE("token cross-entropy values") {
  auto equal_logits = constant(Tensor<double>({1, 2, 2}, {0.3, 0.3, -1.0, -1.0}));
  auto ce = cross_entropy(equal_logits, {0, 1});
  REQUIRE(ce->value.data[0] == Catch::Approx(std::log(2.0)).margin(1e-12));
  REQUIRE(ce->value.data[1] == Catch::Approx(std::log(2.0)).margin(1e-12));

  auto margin = constant(Tensor<double>({1, 1, 2}, {50.0, 0.0}));
  REQUIRE(cross_entropy(margin, {0})->value.data[0] < 1e-20);

  REQUIRE_THROWS_AS(cross_entropy(margin, {2}), ValidationError);
}

TEST_CASE("token cross-entropy matches the softmax-log oracle and checks gradients") {
  auto logits = parameter(randn({3, 4, 2}, 32, 2.0), "z");
  std::vector<int> labels(12);
  Rng rng(33);
  for (auto& l : labels) l = static_cast<int>(rng.below(2));
  auto ce = cross_entropy(logits, labels);
  for (std::size_t r = 0; r < 12; ++r) {
    const double z0 = logits->value.data[2 * r], z1 = logits->value.data[2 * r + 1];
    const double m = std::max(z0, z1);
    const double p =
        std::exp((labels[r] == 0 ? z0 : z1) - m) / (std::exp(z0 - m) + std::exp(z1 - m));
    REQUIRE(ce->value.data[r] == Catch::Approx(-std::log(p)).margin(1e-9));
  }
  auto f = [&] { return mean_all(cross_entropy(logits, labels)); };
  REQUIRE(finite_difference_check<double>(f, {logits}, 1e-5) < 1e-4);
}

TEST_CASE("Adam: zero gradients leave parameters unchanged") {
  auto p = parameter(randn({4}, 34), "p");
  const auto before = p->value.data;
  Adam<double> opt({p}, 0.1);
  p->ensure_grad();
  opt.step();
  REQUIRE(p->value.data == before);
}

TEST_CASE("Adam single-step hand oracle") {
  auto p = parameter(Tensor<double>({1}, {1.0}), "p");
  Adam<double> opt({p}, 0.1);
  p->ensure_grad();
  p->grad[0] = 1.0;
  opt.step();
  // m_hat = v_hat = 1 after bias correction, so the update is -lr/(1+eps)
  const double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
  REQUIRE(p->value.data[0] == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("Adam ignores frozen parameters and flags non-finite gradients") {
  ParamStore<double> store;
  auto frozen = store.add("w_frozen", randn({3}, 35), false);
  auto live = store.add("w_live", randn({3}, 36), true);
  const auto frozen_before = frozen->value.data;
  Adam<double> opt(store.trainable(), 0.05);
  frozen->ensure_grad();
  live->ensure_grad();
  frozen->grad = {1.0, 1.0, 1.0};
  live->grad = {1.0, 1.0, 1.0};
  opt.step();
  REQUIRE(frozen->value.data == frozen_before);
  REQUIRE(live->value.data != std::vector<double>(randn({3}, 36).data));

  live->grad[1] = std::nan("");
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("w_live") != std::string::npos);
  }
}

TEST_CASE("finite differences on a quadratic are near exact") {
  auto p = parameter(randn({7}, 37), "p");
  auto f = [&] { return sum_all(square(p)); };
  REQUIRE(finite_difference_check<double>(f, {p}, 1e-5) < 1e-8);
}

TEST_CASE("elementwise op gradients: relu, gelu, exp") {
  auto x = parameter(randn({4, 5}, 38), "x");
  // nudge values away from the relu kink so central differences are valid
  for (auto& v : x->value.data)
    if (std::abs(v) < 1e-3) v += 0.01;
  auto f1 = [&] { return mean_all(square(relu(x))); };
  REQUIRE(finite_difference_check<double>(f1, {x}, 1e-5) < 1e-4);
  auto f2 = [&] { return mean_all(square(gelu(x))); };
  REQUIRE(finite_difference_check<double>(f2, {x}, 1e-5) < 1e-4);
  auto y = parameter(randn({3}, 39, 0.5), "y");
  auto f3 = [&] { return mean_all(vexp(y)); };
  REQUIRE(finite_difference_check<double>(f3, {y}, 1e-5) < 1e-4);
}

TEST_CASE("softmax and shape-op gradients") {
  auto x = parameter(randn({2, 3, 4}, 40), "x");
  auto f = [&] { return mean_all(square(softmax_lastdim(x))); };
  REQUIRE(finite_difference_check<double>(f, {x}, 1e-5) < 1e-4);
  auto g = [&] { return mean_all(square(transpose_last2(reshape(x, {6, 4})))); };
  REQUIRE(finite_difference_check<double>(g, {x}, 1e-5) < 1e-4);
  auto h = [&] { return mean_all(square(merge_heads(split_heads(x, 2)))); };
  REQUIRE(finite_difference_check<double>(h, {x}, 1e-5) < 1e-4);
}

TEST_CASE("fan-out accumulates gradients from every consumer") {
  auto x = parameter(randn({3, 3}, 41), "x");
  auto f = [&] { return mean_all(square(add(matmul(x, x), x))); };
  REQUIRE(finite_difference_check<double>(f, {x}, 1e-5) < 1e-4);
}
