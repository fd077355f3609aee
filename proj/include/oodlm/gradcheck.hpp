#pragma once

// Central finite-difference gradient verification.
//
// grad_check evaluates a scalar-valued closure twice per parameter
// coordinate (at +h and -h) and compares the quotient against the gradient
// produced by one taped backward pass.  The closure must rebuild its graph
// from the parameter tensors on every call.  Run this with S = double; at
// float precision the difference quotient itself carries ~1e-3 noise.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oodlm/common.hpp"
#include "oodlm/tensor.hpp"

namespace oodlm {

struct GradCheckReport {
  double max_rel_err = 0.0;   // |analytic-numeric| / max(1e-6, |a|+|n|)
  double max_abs_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool ok(double tol) const { return max_rel_err < tol; }
};

template <typename S, typename F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<S>> params,
                           double h = 1e-5) {
  if (params.empty()) throw UsageError("grad_check: no parameters given");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.grad_buffer();
    p.zero_grad();
  }

  std::vector<std::vector<S>> analytic;
  {
    Tape<S> tape;
    Tensor<S> loss = f();
    if (loss.numel() != 1)
      throw UsageError("grad_check: closure must return a scalar");
    tape.backward(loss);
  }
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const S orig = vals[i];
      vals[i] = orig + static_cast<S>(h);
      const double fp = static_cast<double>(f().item());
      vals[i] = orig - static_cast<S>(h);
      const double fm = static_cast<double>(f().item());
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double abs_err = std::abs(a - numeric);
      // The denominator floor keeps near-zero gradients from amplifying the
      // difference quotient's own noise (~1e-10 absolute at double) into a
      // spurious relative error; such coordinates are judged absolutely.
      const double rel =
          abs_err / std::max(1e-6, std::abs(a) + std::abs(numeric));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.max_abs_err = abs_err;
        rep.worst_param = pi;
        rep.worst_coord = i;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace oodlm
