#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rllm/autograd.hpp"

namespace rllm::nn {

// Bias-corrected Adam over a fixed parameter list. Frozen parameters must
// not be passed in; the ParamStore's trainable view is the intended source.
template <class T>
class Adam {
 public:
  explicit Adam(std::vector<Var<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->value.data.size(), 0.0);
      v_[i].assign(params_[i]->value.data.size(), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  std::int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.requires_grad) continue;
      if (!p.has_grad()) continue;  // no gradient flowed this step
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.value.data.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        if (!std::isfinite(g))
          throw NumericError("Adam: non-finite gradient in parameter " + p.name);
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p.value.data[j] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  // Moment buffers keyed by parameter name, for checkpointing.
  struct StateEntry {
    std::string name;
    const std::vector<double>* m;
    const std::vector<double>* v;
  };
  std::vector<StateEntry> state() const {
    std::vector<StateEntry> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      out.push_back({params_[i]->name, &m_[i], &v_[i]});
    return out;
  }

  void restore(const std::string& name, const std::vector<double>& m,
               const std::vector<double>& v, std::int64_t t) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i]->name == name) {
        if (m.size() != m_[i].size() || v.size() != v_[i].size())
          throw ValidationError("Adam::restore: state size mismatch for " + name);
        m_[i] = m;
        v_[i] = v;
        t_ = t;
        return;
      }
    throw ValidationError("Adam::restore: unknown parameter " + name);
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace rllm::nn
