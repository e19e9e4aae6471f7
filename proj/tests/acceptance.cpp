// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Criterion 10 drives the CLI binary end to end; pass its
// path as argv[1].

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rllm/config.hpp"
#include "rllm/grad_check.hpp"
#include "rllm/pipeline.hpp"

using namespace rllm;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

struct Criterion {
  int id;
  std::string detail;
  bool ok = true;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  explicit Criterion(int id_) : id(id_) {}

  void require(bool cond, const std::string& why) {
    if (!cond && ok) {
      ok = false;
      detail = detail.empty() ? why : detail + "; " + why;
    }
  }

  template <class T>
  void note(const std::string& key, T value) {
    std::ostringstream os;
    os << (detail.empty() ? "" : detail + ", ") << key << "=" << value;
    detail = os.str();
  }

  ~Criterion() {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %d (%s)%s%s [%.1f s]\n", ok ? "PASS" : "FAIL", id,
                name(), detail.empty() ? "" : ": ", detail.c_str(), secs);
    std::fflush(stdout);
    if (!ok) ++g_failures;
  }

  const char* name() const {
    switch (id) {
      case 1: return "feature oracles";
      case 2: return "patching";
      case 3: return "gradient suite";
      case 4: return "LoRA contracts";
      case 5: return "loss identities";
      case 6: return "FAR control";
      case 7: return "directional PA vs CE";
      case 8: return "learning-value oracle";
      case 9: return "uncertainty loss sanity";
      case 10: return "end-to-end determinism";
      default: return "?";
    }
  }
};

std::vector<cdouble> random_signal(std::size_t n, Rng& rng) {
  std::vector<cdouble> x(n);
  for (auto& v : x) v = cdouble(rng.normal(), rng.normal());
  return x;
}

// --- criterion 1: every feature op vs an independent direct-formula oracle ---

void criterion_feature_oracles() {
  Criterion c(1);
  Rng rng(1001);
  double max_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 16 + rng.below(497);  // 16..512, mixed radix
    auto x = random_signal(n, rng);

    auto phi = instantaneous_phase(x);
    for (std::size_t i = 0; i < n; ++i) {
      double expect = std::atan2(x[i].imag(), x[i].real());
      if (expect <= -kPi) expect = kPi;
      max_err = std::max(max_err, std::abs(phi[i] - expect));
    }

    auto amp = amplitude(x);
    for (std::size_t i = 0; i < n; ++i)
      max_err = std::max(max_err, std::abs(amp[i] - std::hypot(x[i].real(), x[i].imag())));

    // shared naive Doppler transform for spectrum, DSE, and phase
    std::vector<double> spec_naive(n), dp_naive(n);
    for (std::size_t o = 0; o < n; ++o) {
      const double ks = static_cast<double>(o) - static_cast<double>(n / 2);
      cdouble acc(0.0, 0.0);
      for (std::size_t m = 0; m < n; ++m) {
        const double ang = -2.0 * kPi * ks * static_cast<double>(m) / static_cast<double>(n);
        acc += x[m] * cdouble(std::cos(ang), std::sin(ang));
      }
      spec_naive[o] = std::abs(acc) / std::sqrt(static_cast<double>(n));
      dp_naive[o] = acc == cdouble(0.0, 0.0) ? 0.0 : std::atan2(acc.imag(), acc.real());
      if (dp_naive[o] <= -kPi) dp_naive[o] = kPi;
    }
    auto spec = doppler_amplitude_spectrum(x);
    auto dp = doppler_phase(x);
    for (std::size_t o = 0; o < n; ++o) {
      max_err = std::max(max_err, std::abs(spec[o] - spec_naive[o]));
      max_err = std::max(max_err, std::abs(dp[o] - dp_naive[o]));
    }

    auto dse = doppler_spectrum_entropy(spec);
    double total = 0.0;
    for (double v : spec_naive) total += v;
    for (std::size_t o = 0; o < n; ++o) {
      const double p = spec_naive[o] / total;
      const double expect = p > 0.0 ? -p * std::log(p) : 0.0;
      max_err = std::max(max_err, std::abs(dse[o] - expect));
    }

    // STFT + SMS against the direct double loop
    const std::size_t w = 8 + rng.below(std::min<std::size_t>(n, 48));
    const std::size_t hop = 1 + rng.below(16);
    const std::size_t omega = w + rng.below(64);
    auto window = make_window(WindowKind::hamming, static_cast<std::uint32_t>(w));
    auto s = stft(x, window, static_cast<std::uint32_t>(hop), static_cast<std::uint32_t>(omega));
    std::vector<double> sms_sum(omega, 0.0);
    for (std::size_t m = 0; m < s.n_frames; ++m)
      for (std::size_t k = 0; k < omega; ++k) {
        cdouble acc(0.0, 0.0);
        for (std::size_t nn = 0; nn < n; ++nn) {
          const auto rel = static_cast<std::ptrdiff_t>(nn) - static_cast<std::ptrdiff_t>(m * hop);
          if (rel < 0 || rel >= static_cast<std::ptrdiff_t>(w)) continue;
          const double ang = -2.0 * kPi * static_cast<double>(k) * static_cast<double>(nn) /
                             static_cast<double>(omega);
          acc += x[nn] * window[static_cast<std::size_t>(rel)] *
                 cdouble(std::cos(ang), std::sin(ang));
        }
        max_err = std::max(max_err, std::abs(s.at(k, m) - acc));
        sms_sum[k] += std::abs(acc);
      }
    auto sms_fast = sms(s);
    for (std::size_t k = 0; k < omega; ++k)
      max_err = std::max(
          max_err, std::abs(sms_fast[k] - 10.0 * std::log10(std::max(sms_sum[k], 1e-12))));
  }
  c.note("max_abs_err", max_err);
  c.require(max_err < 1e-9, "feature op deviates from its oracle");
}

// --- criterion 2: patch count and lossless round trip ---

void criterion_patching() {
  Criterion c(2);
  c.require(token_count(512, 48) == 55, "N=512, L=48 must give K=55");
  Rng rng(1002);
  for (int trial = 0; trial < 100 && c.ok; ++trial) {
    const auto n = static_cast<std::uint32_t>(1 + rng.below(800));
    const auto l = static_cast<std::uint32_t>(1 + rng.below(100));
    FeatureSet fs;
    for (int f = 0; f < kNumFeatures; ++f) {
      fs.channel(f).resize(n);
      for (auto& v : fs.channel(f)) v = rng.normal();
    }
    auto tokens = patch_features<double>(fs, l);
    c.require(tokens.size() == static_cast<std::size_t>(token_count(n, l)) * l,
              "token tensor size must equal K*L");
    auto back = unpatch_features<double>(tokens.data(), n, l);
    for (int f = 0; f < kNumFeatures; ++f)
      c.require(back.channel(f) == fs.channel(f), "round trip must be exact");
  }
}

// --- criterion 3: finite-difference gradient suite ---

nn::RefModelConfig tiny_ref_cfg(std::uint64_t seed) {
  nn::RefModelConfig c;
  c.k = 5;
  c.l = 4;
  c.dim = 8;
  c.heads = 2;
  c.blocks = 1;
  c.ffn_hidden = 12;
  c.head_hidden = 6;
  c.seed = seed;
  return c;
}

nn::BackboneConfig tiny_backbone_cfg(std::uint64_t seed) {
  nn::BackboneConfig c;
  c.k = 5;
  c.l = 4;
  c.dim = 8;
  c.heads = 2;
  c.layers = 1;
  c.ffn_hidden = 12;
  c.lora_rank = 2;
  c.lora_scale = 2.0;
  c.head_hidden = 6;
  c.seed = seed;
  return c;
}

void criterion_gradients() {
  using namespace rllm::nn;
  Criterion c(3);
  double worst = 0.0;
  auto check = [&](const char* what, double err) {
    worst = std::max(worst, err);
    c.require(err < 1e-4, std::string(what) + " gradient error " + std::to_string(err));
  };
  Rng rng(1003);

  {  // individual layers
    auto x = parameter(Tensor<double>::randn({3, 5}, rng), "x");
    auto w = parameter(Tensor<double>::randn({5, 4}, rng, 0.5), "w");
    auto b = parameter(Tensor<double>::randn({4}, rng, 0.1), "b");
    check("linear", finite_difference_check<double>(
                        [&] { return mean_all(square(add(matmul(x, w), b))); }, {x, w, b}, 1e-5));
  }
  {
    auto x = parameter(Tensor<double>::randn({2, 4, 3}, rng), "x");
    auto g = parameter(Tensor<double>::randn({3}, rng, 0.3), "g");
    auto b = parameter(Tensor<double>::randn({3}, rng, 0.3), "b");
    check("layer_norm",
          finite_difference_check<double>(
              [&] { return mean_all(square(layer_norm_axis(x, g, b, 1e-5, 1))); }, {x, g, b}, 1e-5));
  }
  {
    ParamStore<double> store;
    BatchNorm<double> bn(store, "bn", 3, true);
    auto x = parameter(Tensor<double>::randn({3, 2, 3}, rng), "x");
    check("batch_norm", finite_difference_check<double>(
                            [&] { return mean_all(square(bn.forward(x, true))); },
                            {x, bn.gamma, bn.beta}, 1e-5));
  }
  {
    ParamStore<double> store;
    Rng lr(7);
    MultiHeadAttention<double> mha(store, "attn", 8, 2, lr, true);
    auto x = parameter(Tensor<double>::randn({2, 3, 8}, rng), "x");
    auto params = store.trainable();
    params.push_back(x);
    check("attention", finite_difference_check<double>(
                           [&] { return mean_all(square(mha.forward(x))); }, params, 1e-5));
  }
  {
    ParamStore<double> store;
    Rng lr(8);
    LoraLinear<double> lora(store, "q", 6, 5, 2, 1.5, lr);
    for (auto& v : lora.bm->value.data) v = lr.normal() * 0.1;
    auto x = constant(Tensor<double>::randn({4, 6}, rng));
    check("lora", finite_difference_check<double>(
                      [&] { return mean_all(square(lora.forward(x))); }, {lora.a, lora.bm}, 1e-5));
  }
  {  // token cross-entropy
    auto z = parameter(Tensor<double>::randn({3, 4, 2}, rng, 2.0), "z");
    std::vector<int> labels(12);
    for (auto& l : labels) l = static_cast<int>(rng.below(2));
    check("token_ce", finite_difference_check<double>(
                          [&] { return mean_all(cross_entropy(z, labels)); }, {z}, 1e-5));
  }

  {  // full reference model (5-point stencil: see grad_check.hpp)
    ReferenceModel<double> m(tiny_ref_cfg(31));
    for (const auto& p : m.store().trainable())
      for (auto& v : p->value.data) v = 0.4 * rng.normal();
    auto x = Tensor<double>::randn({2, 5, 4}, rng);
    std::vector<int> labels(10);
    for (auto& l : labels) l = static_cast<int>(rng.below(2));
    check("reference_model",
          finite_difference_check_5pt<double>(
              [&] { return mean_all(cross_entropy(m.forward(x, true), labels)); },
              m.store().trainable(), 3e-4));
  }
  {  // full backbone under the preference-aware loss with detached importances
    BackboneModel<double> m(tiny_backbone_cfg(32));
    auto x = Tensor<double>::randn({2, 5, 4}, rng);
    std::vector<int> labels(10);
    for (auto& l : labels) l = static_cast<int>(rng.below(2));
    Tensor<double> l_ref({2, 5});
    for (auto& v : l_ref.data) v = std::abs(rng.normal()) * 0.4;
    auto first = cross_entropy(m.forward(x).logits, labels);
    const Tensor<double> s = token_importance(first->value, l_ref, 0.9);  // frozen weights
    check("preference_loss",
          finite_difference_check_5pt<double>(
              [&] {
                auto lt = cross_entropy(m.forward(x).logits, labels);
                return preference_loss(lt, s);
              },
              m.store().trainable(), 3e-4));
  }
  {  // autoencoder head under the uncertainty-weighted total loss
    AeConfig ac;
    ac.k = 3;
    ac.dim = 6;
    ac.ladder = {6, 4};
    ac.fc_hidden = 5;
    ac.latent = 4;
    ac.seed = 33;
    AutoencoderHead<double> head(ac);
    // a generic point: the tiny default init parks decoder ReLUs on kinks
    for (const auto& p : head.store().trainable())
      if (p->name.find("log_sigma") == std::string::npos)
        for (auto& v : p->value.data) v = 0.5 * rng.normal();
    auto hidden = constant(Tensor<double>::randn({2, 3, 6}, rng));
    std::vector<int> labels{0, 1};
    check("ae_total_loss",
          finite_difference_check<double>(
              [&] {
                auto out = head.forward(hidden);
                auto lrec = reconstruction_loss(out.reconstruction, hidden);
                auto lce = mean_all(cross_entropy(out.class_logits, labels));
                return uncertainty_total_loss(lrec, lce, head.log_sigma_recon(),
                                              head.log_sigma_ce());
              },
              head.store().trainable(), 1e-5));
  }
  c.note("max_rel_err", worst);
}

// --- criterion 4: LoRA contracts ---

void criterion_lora() {
  using namespace rllm::nn;
  Criterion c(4);
  {  // zero-init identity in 64-bit
    BackboneModel<double> with_lora(tiny_backbone_cfg(41));
    BackboneModel<double> base(tiny_backbone_cfg(41));
    for (const auto& p : base.store().all()) {
      if (p->name.find("lora") != std::string::npos) continue;
      p->value = with_lora.store().find(p->name)->value;
    }
    Rng rng(42);
    auto x = Tensor<double>::randn({2, 5, 4}, rng);
    auto a = with_lora.forward(x).logits;
    auto b = base.forward(x).logits;
    double err = 0.0;
    for (std::size_t i = 0; i < a->value.data.size(); ++i)
      err = std::max(err, std::abs(a->value.data[i] - b->value.data[i]));
    c.note("zero_init_err", err);
    c.require(err < 1e-12, "zero-init LoRA must be an exact identity");
  }
  {  // merged vs two-path in 32-bit
    ParamStore<float> store;
    Rng rng(43);
    LoraLinear<float> lora(store, "q", 24, 12, 8, 2.0, rng);
    for (auto& v : lora.bm->value.data) v = static_cast<float>(rng.normal()) * 0.05f;
    auto x = constant(Tensor<float>::randn({7, 24}, rng));
    auto two_path = lora.forward(x);
    auto merged = add(matmul(x, constant(lora.merged_weight())), lora.b);
    float err = 0.0f;
    for (std::size_t i = 0; i < two_path->value.data.size(); ++i)
      err = std::max(err, std::abs(two_path->value.data[i] - merged->value.data[i]));
    c.note("merge_err", err);
    c.require(err < 1e-6f, "merged weight must match the two-path forward");
    c.require(lora.trainable_count() == 8 * (24 + 12), "trainable count formula r*(d_in+d_out)");
  }
  {  // frozen hash across 50 fine-tune steps
    TokenBatch<float> data;
    data.n = 8;
    data.l = 4;
    data.k = token_count(8, 4);
    Rng rng(44);
    for (int b = 0; b < 8; ++b) {
      data.labels.push_back(static_cast<std::uint8_t>(b % 2));
      data.sample_ids.push_back(static_cast<std::uint64_t>(b));
      data.time_index.push_back(static_cast<std::uint32_t>(b + 1));
      data.split.push_back(0);
      for (std::uint32_t i = 0; i < data.k * data.l; ++i)
        data.tokens.push_back(static_cast<float>(rng.normal()) +
                              (b % 2 == 0 ? 1.0f : -1.0f));
    }
    nn::BackboneConfig bc;
    bc.k = data.k;
    bc.l = data.l;
    bc.dim = 16;
    bc.heads = 2;
    bc.layers = 1;
    bc.ffn_hidden = 24;
    bc.lora_rank = 2;
    bc.lora_scale = 2.0;
    bc.head_hidden = 8;
    bc.seed = 45;
    BackboneModel<float> m(bc);
    const auto before = m.frozen_hash();
    TokenScoreTable table;
    table.k = data.k;
    for (auto id : data.sample_ids) table.entries[id] = std::vector<float>(data.k, 0.3f);
    FinetuneConfig fc;
    fc.epochs = 50;  // full-batch: one step per epoch
    fc.batch = 8;
    fc.lr = 1e-3;
    finetune_backbone(m, data, table, fc);
    c.require(m.frozen_hash() == before, "frozen base hash changed during fine-tuning");
  }
}

// --- criterion 5: loss identities and gradient attribution ---

void criterion_loss_identities() {
  using namespace rllm::nn;
  Criterion c(5);
  Rng rng(1005);
  {  // s == 1 reduces to the mean token CE, exactly
    auto lt = constant(Tensor<double>::randn({4, 6}, rng));
    for (auto& v : lt->value.data) v = std::abs(v);
    double mean = 0.0;
    for (double v : lt->value.data) mean += v;
    mean /= 24.0;
    const double got = preference_loss(lt, Tensor<double>({4, 6}, 1.0))->value.data[0];
    c.require(got == mean, "s=1 identity must be exact");
  }
  {  // alpha = 0 gives mean(L_t^2)
    auto lt = constant(Tensor<double>::randn({3, 7}, rng));
    for (auto& v : lt->value.data) v = std::abs(v);
    auto s = token_importance(lt->value, Tensor<double>({3, 7}, 0.0), 0.0);
    double acc = 0.0;
    for (double v : lt->value.data) acc += v * v;
    const double got = preference_loss(lt, s)->value.data[0];
    c.require(std::abs(got - acc / 21.0) < 1e-9, "alpha=0 identity beyond 1e-9");
  }
  {  // zero-importance tokens receive exactly zero gradient
    BackboneModel<double> m(tiny_backbone_cfg(51));
    auto x = Tensor<double>::randn({3, 5, 4}, rng);
    std::vector<int> labels(15, 0);
    auto res = m.forward(x);
    auto lt = cross_entropy(res.logits, labels);
    Tensor<double> s(lt->value.shape, 1.0);
    for (std::size_t z : {0u, 4u, 9u, 14u}) s.data[z] = 0.0;
    backward(preference_loss(lt, s));
    for (std::size_t z : {0u, 4u, 9u, 14u})
      c.require(res.logits->grad[2 * z] == 0.0 && res.logits->grad[2 * z + 1] == 0.0,
                "zero-weight token leaked gradient");
    double live = 0.0;
    for (double v : res.logits->grad) live += std::abs(v);
    c.require(live > 0.0, "nonzero-weight tokens must carry gradient");
  }
}

// --- criterion 6: FAR control by counting oracle ---

void criterion_far_control() {
  Criterion c(6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(2000 + seed);
    std::vector<double> clutter(2000);
    for (auto& v : clutter) v = rng.uniform();
    for (double p_fa : {0.05, 0.01, 0.005}) {
      const double eta = select_threshold(clutter, p_fa);
      std::size_t above = 0;
      for (double v : clutter)
        if (v > eta) ++above;
      const double far = static_cast<double>(above) / static_cast<double>(clutter.size());
      c.require(far <= p_fa + 1e-15, "achieved FAR exceeded the request");
      c.require(far >= p_fa - 1.0 / static_cast<double>(clutter.size()) - 1e-15,
                "achieved FAR more than one count below the request");
    }
  }
}

// --- criterion 7: preference-aware vs plain CE on a low-SCR scenario ---

RunConfig pa_ce_config(std::uint64_t seed) {
  RunConfig cfg;  // desk profile defaults
  cfg.seed = seed;
  cfg.n_pulses = 6144;
  cfg.scr_db = -5.0;
  cfg.n_clutter_cells = 3;
  cfg.step_clutter = 64;
  cfg.epochs_ref = 15;
  cfg.epochs_finetune = 15;
  cfg.epochs_head = 10;
  cfg.batch_size = 32;
  cfg.p_fa = 0.01;
  validate_config(cfg);
  return cfg;
}

double finetune_and_eval_dr(const RunConfig& cfg, LossMode mode, const TokenBatch<float>& train,
                            const TokenBatch<float>& test, const TokenScoreTable& table) {
  nn::BackboneModel<float> model(backbone_config(cfg));
  FinetuneConfig fc;
  fc.alpha = cfg.alpha;
  fc.mode = mode;
  fc.epochs = cfg.epochs_finetune;
  fc.lr = cfg.lr_finetune;
  fc.batch = cfg.batch_size;
  fc.eval_batch = cfg.eval_batch;
  fc.seed = stage_seed(cfg, "finetune");
  fc.p_fa = cfg.p_fa;
  finetune_backbone(model, train, table, fc,
                    static_cast<const TokenBatch<float>*>(nullptr));
  auto scored = backbone_scores(model, test, cfg.eval_batch);
  return evaluate(scored, cfg.p_fa).detection_rate;
}

void criterion_pa_vs_ce() {
  Criterion c(7);
  std::vector<double> dr_pa, dr_ce;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig cfg = pa_ce_config(seed * 13);
    auto dataset = segment_cells(cfg, synth_cells(cfg));
    auto tokenized = tokenize_dataset(cfg, dataset);
    auto train = tokenized.tokens.split_subset(0);
    auto val = tokenized.tokens.split_subset(1);
    auto test = tokenized.tokens.split_subset(2);

    nn::ReferenceModel<float> ref(ref_model_config(cfg));
    TrainStageConfig rc;
    rc.epochs = cfg.epochs_ref;
    rc.lr = cfg.lr_ref;
    rc.batch = cfg.batch_size;
    rc.eval_batch = cfg.eval_batch;
    rc.seed = stage_seed(cfg, "ref_train");
    train_reference(ref, val, rc);
    auto table = score_tokens(ref, train, cfg.eval_batch, cfg.alpha);

    dr_pa.push_back(finetune_and_eval_dr(cfg, LossMode::preference, train, test, table));
    dr_ce.push_back(finetune_and_eval_dr(cfg, LossMode::plain_ce, train, test, table));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  double mean_gain = 0.0;
  std::ostringstream pairs;
  for (std::size_t i = 0; i < dr_pa.size(); ++i) {
    mean_gain += dr_pa[i] - dr_ce[i];
    pairs << (i ? " " : "") << std::fixed << std::setprecision(3) << dr_pa[i] << "/" << dr_ce[i];
  }
  mean_gain /= static_cast<double>(dr_pa.size());
  c.note("dr_pa/dr_ce per seed", pairs.str());
  c.note("mean_gain", mean_gain);
  c.require(median(dr_pa) >= median(dr_ce), "median DR(preference) fell below median DR(plain_ce)");
  c.require(mean_gain > 0.0, "mean DR improvement must be positive");
}

// --- criterion 8: learning-value brute force across seeds ---

// Tokens at the noise positions carry no class signal; both models learn to
// hedge them, which is what lets the importance score separate patch kinds.
TokenBatch<double> lv_tokens(std::size_t count, double mu, double sigma, std::uint64_t seed,
                             std::uint64_t first_id,
                             const std::vector<std::uint32_t>& noise_positions) {
  TokenBatch<double> tb;
  tb.n = 4;
  tb.l = 4;
  tb.k = token_count(4, 4);  // 5 tokens
  Rng rng(seed);
  for (std::size_t b = 0; b < count; ++b) {
    const std::uint8_t label = static_cast<std::uint8_t>(b % 2);
    tb.labels.push_back(label);
    tb.sample_ids.push_back(first_id + b);
    tb.time_index.push_back(static_cast<std::uint32_t>(b + 1));
    tb.split.push_back(0);
    const double center = label == 0 ? mu : -mu;
    for (std::uint32_t k = 0; k < tb.k; ++k) {
      const bool is_noise = std::find(noise_positions.begin(), noise_positions.end(), k) !=
                            noise_positions.end();
      for (std::uint32_t j = 0; j < tb.l; ++j)
        tb.tokens.push_back(is_noise ? 3.0 * rng.normal() : center + sigma * rng.normal());
    }
  }
  return tb;
}

void criterion_learning_value() {
  Criterion c(8);
  const std::vector<std::uint32_t> noise_positions{3, 4};
  int positive = 0;
  std::ostringstream rhos;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto train = lv_tokens(20, 1.2, 0.3, 300 + seed, 0, noise_positions);
    auto test = lv_tokens(24, 1.2, 0.3, 400 + seed, 1000, noise_positions);
    // candidates: six test duplicates at signal tokens plus six
    // label-randomized noise-position patches
    TokenBatch<double> candidates = test.subset({0, 1, 2, 3, 4, 5});
    std::vector<std::uint32_t> cand_tok{0, 1, 2, 0, 1, 2};
    auto noise = lv_tokens(6, 1.2, 0.3, 500 + seed, 2000, noise_positions);
    Rng flip(600 + seed);
    for (std::size_t b = 0; b < noise.size(); ++b) {
      auto sub = noise.subset({b});
      sub.labels[0] = static_cast<std::uint8_t>(flip.below(2));
      candidates.tokens.insert(candidates.tokens.end(), sub.tokens.begin(), sub.tokens.end());
      candidates.labels.push_back(sub.labels[0]);
      candidates.sample_ids.push_back(sub.sample_ids[0]);
      candidates.time_index.push_back(sub.time_index[0]);
      candidates.split.push_back(0);
      cand_tok.push_back(noise_positions[b % noise_positions.size()]);
    }
    LearningValueConfig cfg;
    cfg.probe = tiny_ref_cfg(700 + seed);
    cfg.probe.k = train.k;
    cfg.probe.l = train.l;
    cfg.probe.dim = 16;
    cfg.probe.ffn_hidden = 16;
    cfg.base_steps = 12;
    cfg.ref_steps = 80;
    cfg.probe_steps = 25;
    cfg.lr = 5e-3;
    cfg.seed = 800 + seed;
    auto result = learning_value_oracle(train, test, candidates, cand_tok, cfg);
    rhos << (seed > 1 ? " " : "") << std::fixed << std::setprecision(2) << result.spearman;
    if (result.spearman > 0.0) ++positive;
  }
  c.note("spearman per seed", rhos.str());
  c.note("positive", positive);
  c.require(positive >= 4, "need Spearman > 0 in at least 4 of 5 seeds");
}

// --- criterion 9: uncertainty weighting sanity ---

void criterion_uncertainty() {
  using namespace rllm::nn;
  Criterion c(9);
  {  // fixed unit sigmas: exact identity
    Rng rng(900);
    auto lr = constant(Tensor<double>({1}, {std::abs(rng.normal())}));
    auto lc = constant(Tensor<double>({1}, {std::abs(rng.normal())}));
    auto rho_r = parameter(Tensor<double>({1}, {0.0}), "rr");
    auto rho_c = parameter(Tensor<double>({1}, {0.0}), "rc");
    const double got = uncertainty_total_loss(lr, lc, rho_r, rho_c)->value.data[0];
    const double expect = 0.5 * lr->value.data[0] + lc->value.data[0];
    c.require(got == expect, "unit-sigma identity must be exact");
  }
  {  // learnable sigmas: total decreases over the first 20 stage-4 epochs
    TokenBatch<float> data;
    data.n = 8;
    data.l = 4;
    data.k = token_count(8, 4);
    Rng rng(901);
    for (int b = 0; b < 24; ++b) {
      data.labels.push_back(static_cast<std::uint8_t>(b % 2));
      data.sample_ids.push_back(static_cast<std::uint64_t>(b));
      data.time_index.push_back(static_cast<std::uint32_t>(b + 1));
      data.split.push_back(0);
      const float center = b % 2 == 0 ? 1.0f : -1.0f;
      for (std::uint32_t i = 0; i < data.k * data.l; ++i)
        data.tokens.push_back(center + 0.5f * static_cast<float>(rng.normal()));
    }
    nn::BackboneConfig bc;
    bc.k = data.k;
    bc.l = data.l;
    bc.dim = 16;
    bc.heads = 2;
    bc.layers = 1;
    bc.ffn_hidden = 24;
    bc.lora_rank = 2;
    bc.seed = 902;
    BackboneModel<float> backbone(bc);
    AeConfig ac;
    ac.k = data.k;
    ac.dim = 16;
    ac.ladder = {16, 8, 4};
    ac.fc_hidden = 12;
    ac.latent = 20;
    ac.seed = 903;
    AutoencoderHead<float> head(ac);
    HeadTrainConfig hc;
    hc.epochs = 20;
    hc.lr = 1e-3;
    hc.batch = 12;
    hc.seed = 904;
    auto losses = train_head(backbone, head, data, hc);
    c.note("first", losses.front());
    c.note("last", losses.back());
    c.require(losses.back() < losses.front(), "total loss must decrease over 20 epochs");
  }
}

// --- criterion 10: end-to-end determinism through the CLI ---

int run_cmd(const std::string& cmd) { return std::system(cmd.c_str()); }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void criterion_determinism(const std::string& cli) {
  Criterion c(10);
  if (cli.empty() || !fs::exists(cli)) {
    c.require(false, "CLI binary path not supplied (argv[1])");
    return;
  }
  const auto root = fs::temp_directory_path() / "rllm_acceptance_e2e";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto cfg_path = root / "run.cfg";
  {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.n_pulses = 2048;
    cfg.n_clutter_cells = 2;
    cfg.step_clutter = 64;
    cfg.epochs_ref = 4;
    cfg.epochs_finetune = 4;
    cfg.epochs_head = 4;
    cfg.batch_size = 16;
    cfg.p_fa = 0.05;
    save_config_file(cfg_path.string(), cfg);
  }
  for (const char* dir : {"a", "b"}) {
    const auto out = (root / dir).string();
    for (const char* stage :
         {"synth", "features", "train-ref", "score", "finetune", "train-head", "eval"}) {
      const std::string cmd = cli + " --config " + cfg_path.string() + " --out " + out + " " +
                              stage + " > " + out + "_" + stage + ".log 2>&1";
      if (run_cmd(cmd) != 0) {
        c.require(false, std::string("stage failed: ") + stage + " (see " + out + "_" + stage +
                             ".log)");
        return;
      }
    }
  }
  const auto ra = slurp(root / "a" / "report.json");
  const auto rb = slurp(root / "b" / "report.json");
  c.require(!ra.empty(), "first run produced no report");
  c.require(ra == rb, "reports differ between identical runs");
  c.note("report_bytes", ra.size());
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  criterion_feature_oracles();
  criterion_patching();
  criterion_gradients();
  criterion_lora();
  criterion_loss_identities();
  criterion_far_control();
  criterion_pa_vs_ce();
  criterion_learning_value();
  criterion_uncertainty();
  criterion_determinism(cli);
  if (g_failures) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
