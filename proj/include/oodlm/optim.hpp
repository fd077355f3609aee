#pragma once

// AdamW with decoupled weight decay:
//   m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
//   mhat = m / (1 - b1^t)         vhat = v / (1 - b2^t)
//   theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
// The decay term multiplies the parameter directly and is not part of the
// gradient moment estimates.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oodlm/common.hpp"
#include "oodlm/tensor.hpp"

namespace oodlm {

struct AdamWOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr > 0.0)) throw UsageError("AdamW: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0)
      throw UsageError("AdamW: beta1 must lie in [0, 1)");
    if (beta2 < 0.0 || beta2 >= 1.0)
      throw UsageError("AdamW: beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw UsageError("AdamW: eps must be positive");
    if (weight_decay < 0.0)
      throw UsageError("AdamW: weight_decay must be non-negative");
  }
};

template <typename S>
class AdamW {
public:
  AdamW(std::vector<Tensor<S>> params, AdamWOptions opt)
      : params_(std::move(params)), opt_(opt) {
    opt_.validate();
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].numel(), S(0));
      v_[i].assign(params_[i].numel(), S(0));
    }
  }

  std::uint64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(opt_.beta1), b2 = static_cast<S>(opt_.beta2);
    const S one_m_b1 = static_cast<S>(1.0 - opt_.beta1);
    const S one_m_b2 = static_cast<S>(1.0 - opt_.beta2);
    const S inv_bc1 = static_cast<S>(1.0 / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S lr = static_cast<S>(opt_.lr);
    const S eps = static_cast<S>(opt_.eps);
    const S decay = static_cast<S>(opt_.lr * opt_.weight_decay);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& param = params_[p];
      if (!param.has_grad())
        throw UsageError("AdamW::step: parameter " + std::to_string(p) +
                         " has no gradient");
      auto& theta = param.values();
      const auto& g = param.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = b1 * m[i] + one_m_b1 * g[i];
        v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
        const S mhat = m[i] * inv_bc1;
        const S vhat = v[i] * inv_bc2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + eps) + decay * theta[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

private:
  std::vector<Tensor<S>> params_;
  AdamWOptions opt_;
  std::vector<std::vector<S>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace oodlm
