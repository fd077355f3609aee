#pragma once

// Differentiable tensor operations.  Each op validates shapes, computes its
// forward value, and — when a tape is active and any input is tracked —
// records a backward closure that accumulates input gradients from the
// output gradient.
//
// Matrix products dispatch to CBLAS when OODLM_USE_CBLAS is defined and fall
// back to a plain row-major kernel otherwise.  BLAS is pinned to one thread
// so results are reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oodlm/common.hpp"
#include "oodlm/tensor.hpp"

#ifdef OODLM_USE_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

namespace oodlm {
namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline void pin_blas_threads() {
#ifdef OODLM_USE_CBLAS
  static const bool once = [] {
    if (openblas_set_num_threads) openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
#endif
}

// Inference wants each output row to be a pure function of its input row,
// bit-identical no matter how many other rows share the call: scoring a
// prefix must reproduce the full sequence's leading logits exactly.  BLAS
// retunes its blocking with the row count, which breaks that, so scoring
// runs the fixed-order fallback kernel instead (each element accumulates
// strictly in k order).  Thread-local so scoring threads don't interfere.
inline bool& row_stable_gemm_mode() {
  thread_local bool enabled = false;
  return enabled;
}

struct RowStableGemmScope {
  bool previous;
  RowStableGemmScope() : previous(row_stable_gemm_mode()) {
    row_stable_gemm_mode() = true;
  }
  ~RowStableGemmScope() { row_stable_gemm_mode() = previous; }
  RowStableGemmScope(const RowStableGemmScope&) = delete;
  RowStableGemmScope& operator=(const RowStableGemmScope&) = delete;
};

// C = op(A) * op(B) + beta * C where op(A) is m x k and op(B) is k x n,
// all matrices dense row-major.
template <typename S>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const S* a, const S* b, S beta, S* c) {
  pin_blas_threads();
#ifdef OODLM_USE_CBLAS
  if constexpr (std::is_same_v<S, float> || std::is_same_v<S, double>) {
    if (!row_stable_gemm_mode()) {
      const auto ta = trans_a ? CblasTrans : CblasNoTrans;
      const auto tb = trans_b ? CblasTrans : CblasNoTrans;
      const int lda = static_cast<int>(trans_a ? m : k);
      const int ldb = static_cast<int>(trans_b ? k : n);
      if constexpr (std::is_same_v<S, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m),
                    static_cast<int>(n), static_cast<int>(k), 1.0f, a, lda, b,
                    ldb, beta, c, static_cast<int>(n));
      } else {
        cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m),
                    static_cast<int>(n), static_cast<int>(k), 1.0, a, lda, b,
                    ldb, beta, c, static_cast<int>(n));
      }
      return;
    }
  }
#endif
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (beta == S(0)) {
      std::fill(crow, crow + n, S(0));
    } else if (beta != S(1)) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const S av = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const S* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename S>
bool any_tracked(Tape<S>* tape, std::initializer_list<const Tensor<S>*> ins) {
  if (!tape) return false;
  for (const auto* t : ins)
    if (tape->tracks(*t)) return true;
  return false;
}

// Rows/cols of a tensor treated as a matrix; rank-1 tensors act as one row.
template <typename S>
std::size_t mat_rows(const Tensor<S>& t) {
  return t.rank() == 1 ? 1 : t.dim(0);
}
template <typename S>
std::size_t mat_cols(const Tensor<S>& t) {
  return t.rank() == 1 ? t.dim(0) : t.dim(1);
}

template <typename S>
void require_rank(const Tensor<S>& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(r) +
                     " tensor, got " + shape_str(t.shape()));
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_offsets(const std::vector<std::size_t>& offsets,
                            std::size_t total, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != total)
    throw UsageError(std::string(op) +
                     ": offsets must start at 0 and end at the row count");
  for (std::size_t b = 1; b < offsets.size(); ++b)
    if (offsets[b] <= offsets[b - 1])
      throw UsageError(std::string(op) +
                       ": offsets must be strictly increasing "
                       "(empty sequences are not allowed)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ, " +
                     detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::gemm<S>(false, false, m, n, k, a.values().data(), b.values().data(),
                  S(0), out.values().data());
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a, &b})) {
    const bool ga = tape->tracks(a), gb = tape->tracks(b);
    tape->record("matmul", {tape->node_of(a), tape->node_of(b)}, out,
                 [a, b, out, ga, gb, m, n, k]() mutable {
                   const S* g = out.grad().data();
                   if (ga)  // dA += g * B^T
                     detail::gemm<S>(false, true, m, k, n, g,
                                     b.values().data(), S(1),
                                     a.grad_buffer().data());
                   if (gb)  // dB += A^T * g
                     detail::gemm<S>(true, false, k, n, m, a.values().data(),
                                     g, S(1), b.grad_buffer().data());
                 });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, m});
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("transpose", {tape->node_of(a)}, out,
                 [a, out, m, n]() mutable {
                   const auto& g = out.grad();
                   auto& da = a.grad_buffer();
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       da[i * n + j] += g[j * m + i];
                 });
  }
  return out;
}

// Same data, new shape (element count must match).
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<std::size_t> shape) {
  Tensor<S> out = Tensor<S>::from(std::move(shape), a.values());
  if (out.numel() != a.numel())
    throw ShapeError("reshape: element count mismatch");
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("reshape", {tape->node_of(a)}, out, [a, out]() mutable {
      const auto& g = out.grad();
      auto& da = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a, &b})) {
    const bool ga = tape->tracks(a), gb = tape->tracks(b);
    tape->record("add", {tape->node_of(a), tape->node_of(b)}, out,
                 [a, b, out, ga, gb]() mutable {
                   const auto& g = out.grad();
                   if (ga) {
                     auto& da = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                   }
                   if (gb) {
                     auto& db = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a, &b})) {
    const bool ga = tape->tracks(a), gb = tape->tracks(b);
    tape->record("sub", {tape->node_of(a), tape->node_of(b)}, out,
                 [a, b, out, ga, gb]() mutable {
                   const auto& g = out.grad();
                   if (ga) {
                     auto& da = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                   }
                   if (gb) {
                     auto& db = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a, &b})) {
    const bool ga = tape->tracks(a), gb = tape->tracks(b);
    tape->record("mul", {tape->node_of(a), tape->node_of(b)}, out,
                 [a, b, out, ga, gb]() mutable {
                   const auto& g = out.grad();
                   const auto& av2 = a.values();
                   const auto& bv2 = b.values();
                   if (ga) {
                     auto& da = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       da[i] += g[i] * bv2[i];
                   }
                   if (gb) {
                     auto& db = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       db[i] += g[i] * av2[i];
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("scale", {tape->node_of(a)}, out, [a, out, c]() mutable {
      const auto& g = out.grad();
      auto& da = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
    });
  }
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

// out[i][j] = a[i][j] + v[j]  (bias broadcast over rows)
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  detail::require_rank(a, 2, "add_rowvec");
  detail::require_rank(v, 1, "add_rowvec");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (v.dim(0) != n)
    throw ShapeError("add_rowvec: vector length " + std::to_string(v.dim(0)) +
                     " does not match column count " + std::to_string(n));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  const auto& vv = v.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = av[i * n + j] + vv[j];
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a, &v})) {
    const bool ga = tape->tracks(a), gv = tape->tracks(v);
    tape->record("add_rowvec", {tape->node_of(a), tape->node_of(v)}, out,
                 [a, v, out, ga, gv, m, n]() mutable {
                   const auto& g = out.grad();
                   if (ga) {
                     auto& da = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                   }
                   if (gv) {
                     auto& dv = v.grad_buffer();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         dv[j] += g[i * n + j];
                   }
                 });
  }
  return out;
}

// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  const double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double x = static_cast<double>(av[i]);
    ov[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("gelu", {tape->node_of(a)}, out, [a, out]() mutable {
      const auto& g = out.grad();
      const auto& av2 = a.values();
      auto& da = a.grad_buffer();
      const double inv_sqrt2b = 0.70710678118654752440;
      const double inv_sqrt2pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = static_cast<double>(av2[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2b));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        da[i] += g[i] * static_cast<S>(cdf + x * pdf);
      }
    });
  }
  return out;
}

// Elementwise square root; inputs must be non-negative.  At exactly zero the
// (one-sided) derivative is taken as zero.
template <typename S>
Tensor<S> sqrt_elem(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    if (!(av[i] >= S(0)))
      throw NumericError("sqrt_elem: negative or non-finite input");
    ov[i] = std::sqrt(av[i]);
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("sqrt", {tape->node_of(a)}, out, [a, out]() mutable {
      const auto& g = out.grad();
      const auto& ov2 = out.values();
      auto& da = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (ov2[i] > S(0)) da[i] += g[i] * S(0.5) / ov2[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax

// Row-wise layer normalization with learned gain/bias.  Rank-1 input is
// treated as a single row.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = S(1e-5)) {
  const std::size_t rows = detail::mat_rows(x), d = detail::mat_cols(x);
  detail::require_rank(gain, 1, "layer_norm");
  detail::require_rank(bias, 1, "layer_norm");
  if (gain.dim(0) != d || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias length must equal feature dim " +
                     std::to_string(d));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  // xhat and rstd are needed by the backward pass.
  auto xhat = std::make_shared<std::vector<S>>(rows * d);
  auto rstd = std::make_shared<std::vector<S>>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const S* row = xv.data() + i * d;
    S mean = S(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (std::size_t j = 0; j < d; ++j) {
      const S c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S r = S(1) / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const S xh = (row[j] - mean) * r;
      (*xhat)[i * d + j] = xh;
      ov[i * d + j] = xh * gv[j] + bv[j];
    }
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&x, &gain, &bias})) {
    const bool gx = tape->tracks(x), gg = tape->tracks(gain),
               gb = tape->tracks(bias);
    tape->record(
        "layer_norm",
        {tape->node_of(x), tape->node_of(gain), tape->node_of(bias)}, out,
        [x, gain, bias, out, xhat, rstd, gx, gg, gb, rows, d]() mutable {
          const auto& g = out.grad();
          const auto& gv2 = gain.values();
          for (std::size_t i = 0; i < rows; ++i) {
            const S* grow = g.data() + i * d;
            const S* xh = xhat->data() + i * d;
            if (gg) {
              auto& dg = gain.grad_buffer();
              for (std::size_t j = 0; j < d; ++j) dg[j] += grow[j] * xh[j];
            }
            if (gb) {
              auto& db = bias.grad_buffer();
              for (std::size_t j = 0; j < d; ++j) db[j] += grow[j];
            }
            if (gx) {
              auto& dx = x.grad_buffer();
              S m1 = S(0), m2 = S(0);
              for (std::size_t j = 0; j < d; ++j) {
                const S dxh = grow[j] * gv2[j];
                m1 += dxh;
                m2 += dxh * xh[j];
              }
              m1 /= static_cast<S>(d);
              m2 /= static_cast<S>(d);
              const S r = (*rstd)[i];
              for (std::size_t j = 0; j < d; ++j) {
                const S dxh = grow[j] * gv2[j];
                dx[i * d + j] += r * (dxh - m1 - xh[j] * m2);
              }
            }
          }
        });
  }
  return out;
}

namespace detail {

template <typename S>
void require_finite(const Tensor<S>& t, const char* op) {
  for (S v : t.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite input value");
}

}  // namespace detail

// Numerically stable softmax over the last axis (rank 1 or 2).
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  if (x.rank() > 2) throw ShapeError("softmax: expects rank-1 or rank-2");
  detail::require_finite(x, "softmax");
  const std::size_t rows = detail::mat_rows(x), n = detail::mat_cols(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const S* row = xv.data() + i * n;
    S* orow = ov.data() + i * n;
    S m = row[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - m);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&x})) {
    tape->record("softmax", {tape->node_of(x)}, out,
                 [x, out, rows, n]() mutable {
                   const auto& g = out.grad();
                   const auto& ov2 = out.values();
                   auto& dx = x.grad_buffer();
                   for (std::size_t i = 0; i < rows; ++i) {
                     const S* grow = g.data() + i * n;
                     const S* srow = ov2.data() + i * n;
                     S dot = S(0);
                     for (std::size_t j = 0; j < n; ++j)
                       dot += grow[j] * srow[j];
                     for (std::size_t j = 0; j < n; ++j)
                       dx[i * n + j] += srow[j] * (grow[j] - dot);
                   }
                 });
  }
  return out;
}

// Stable log-softmax over the last axis (rank 1 or 2).
template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x) {
  if (x.rank() > 2) throw ShapeError("log_softmax: expects rank-1 or rank-2");
  detail::require_finite(x, "log_softmax");
  const std::size_t rows = detail::mat_rows(x), n = detail::mat_cols(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const S* row = xv.data() + i * n;
    S* orow = ov.data() + i * n;
    S m = row[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - m);
    const S lse = m + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) orow[j] = row[j] - lse;
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&x})) {
    tape->record("log_softmax", {tape->node_of(x)}, out,
                 [x, out, rows, n]() mutable {
                   const auto& g = out.grad();
                   const auto& ov2 = out.values();
                   auto& dx = x.grad_buffer();
                   for (std::size_t i = 0; i < rows; ++i) {
                     const S* grow = g.data() + i * n;
                     const S* lrow = ov2.data() + i * n;
                     S gsum = S(0);
                     for (std::size_t j = 0; j < n; ++j) gsum += grow[j];
                     for (std::size_t j = 0; j < n; ++j)
                       dx[i * n + j] += grow[j] - std::exp(lrow[j]) * gsum;
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter style ops

// Rows of an embedding table: out[i][:] = table[ids[i]][:].
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<std::int32_t>& ids) {
  detail::require_rank(table, 2, "embedding");
  if (ids.empty()) throw UsageError("embedding: empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (std::int32_t id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw UsageError("embedding: id " + std::to_string(id) +
                       " out of range [0, " + std::to_string(v) + ")");
  Tensor<S> out = Tensor<S>::zeros({ids.size(), d});
  const auto& tv = table.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d,
                ov.data() + i * d);
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&table})) {
    tape->record("embedding", {tape->node_of(table)}, out,
                 [table, out, ids, d]() mutable {
                   const auto& g = out.grad();
                   auto& dt = table.grad_buffer();
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     S* drow = dt.data() + static_cast<std::size_t>(ids[i]) * d;
                     const S* grow = g.data() + i * d;
                     for (std::size_t j = 0; j < d; ++j) drow[j] += grow[j];
                   }
                 });
  }
  return out;
}

// Row subset: out[t][:] = a[rows[t]][:].
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<std::size_t>& rows) {
  detail::require_rank(a, 2, "gather_rows");
  if (rows.empty()) throw UsageError("gather_rows: empty row list");
  const std::size_t m = a.dim(0), n = a.dim(1);
  for (std::size_t r : rows)
    if (r >= m)
      throw UsageError("gather_rows: row index " + std::to_string(r) +
                       " out of range");
  Tensor<S> out = Tensor<S>::zeros({rows.size(), n});
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t t = 0; t < rows.size(); ++t)
    std::copy_n(av.data() + rows[t] * n, n, ov.data() + t * n);
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("gather_rows", {tape->node_of(a)}, out,
                 [a, out, rows, n]() mutable {
                   const auto& g = out.grad();
                   auto& da = a.grad_buffer();
                   for (std::size_t t = 0; t < rows.size(); ++t) {
                     S* drow = da.data() + rows[t] * n;
                     const S* grow = g.data() + t * n;
                     for (std::size_t j = 0; j < n; ++j) drow[j] += grow[j];
                   }
                 });
  }
  return out;
}

// Entry gather: out[t] = a[rows[t]][cols[t]].
template <typename S>
Tensor<S> pick(const Tensor<S>& a, const std::vector<std::size_t>& rows,
               const std::vector<std::size_t>& cols) {
  detail::require_rank(a, 2, "pick");
  if (rows.empty() || rows.size() != cols.size())
    throw UsageError("pick: rows and cols must be equal-length and non-empty");
  const std::size_t m = a.dim(0), n = a.dim(1);
  for (std::size_t t = 0; t < rows.size(); ++t)
    if (rows[t] >= m || cols[t] >= n)
      throw UsageError("pick: index (" + std::to_string(rows[t]) + ", " +
                       std::to_string(cols[t]) + ") out of range");
  Tensor<S> out = Tensor<S>::zeros({rows.size()});
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t t = 0; t < rows.size(); ++t)
    ov[t] = av[rows[t] * n + cols[t]];
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("pick", {tape->node_of(a)}, out,
                 [a, out, rows, cols, n]() mutable {
                   const auto& g = out.grad();
                   auto& da = a.grad_buffer();
                   for (std::size_t t = 0; t < rows.size(); ++t)
                     da[rows[t] * n + cols[t]] += g[t];
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> row_sum(const Tensor<S>& a) {
  detail::require_rank(a, 2, "row_sum");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m});
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < m; ++i) {
    S s = S(0);
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
    ov[i] = s;
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("row_sum", {tape->node_of(a)}, out, [a, out, m, n]() mutable {
      const auto& g = out.grad();
      auto& da = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros({1});
  S s = S(0);
  for (S v : a.values()) s += v;
  out.values()[0] = s;
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("sum", {tape->node_of(a)}, out, [a, out]() mutable {
      const S g = out.grad()[0];
      auto& da = a.grad_buffer();
      for (auto& v : da) v += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  return scale(sum(a), inv);
}

// Stacks k rank-1 tensors of length m into an [m x k] matrix, one per column.
template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& cols) {
  if (cols.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t m = cols[0].numel(), k = cols.size();
  for (const auto& c : cols) {
    detail::require_rank(c, 1, "concat_cols");
    if (c.numel() != m)
      throw ShapeError("concat_cols: all columns must have equal length");
  }
  Tensor<S> out = Tensor<S>::zeros({m, k});
  auto& ov = out.values();
  for (std::size_t j = 0; j < k; ++j) {
    const auto& cv = cols[j].values();
    for (std::size_t i = 0; i < m; ++i) ov[i * k + j] = cv[i];
  }
  auto* tape = Tape<S>::active();
  bool any = false;
  if (tape)
    for (const auto& c : cols) any = any || tape->tracks(c);
  if (any) {
    std::vector<std::int64_t> in_nodes;
    std::vector<bool> track;
    for (const auto& c : cols) {
      in_nodes.push_back(tape->node_of(c));
      track.push_back(tape->tracks(c));
    }
    tape->record("concat_cols", std::move(in_nodes), out,
                 [cols, out, track, m, k]() mutable {
                   const auto& g = out.grad();
                   for (std::size_t j = 0; j < k; ++j) {
                     if (!track[j]) continue;
                     auto& dc = cols[j].grad_buffer();
                     for (std::size_t i = 0; i < m; ++i) dc[i] += g[i * k + j];
                   }
                 });
  }
  return out;
}

// Mean-of-per-sequence-means: x is a flat rank-1 tensor whose entries belong
// to consecutive segments delimited by offsets (size B+1).  Returns a scalar
// (1/B) * sum_b mean(segment b).  This is the reduction shape used by every
// loss in the library: average within a sequence, then across sequences.
template <typename S>
Tensor<S> per_sequence_mean(const Tensor<S>& x,
                            const std::vector<std::size_t>& offsets) {
  detail::require_rank(x, 1, "per_sequence_mean");
  detail::require_offsets(offsets, x.numel(), "per_sequence_mean");
  const std::size_t b = offsets.size() - 1;
  const auto& xv = x.values();
  S total = S(0);
  for (std::size_t s = 0; s < b; ++s) {
    S seg = S(0);
    for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i) seg += xv[i];
    total += seg / static_cast<S>(offsets[s + 1] - offsets[s]);
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(b));
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&x})) {
    tape->record("per_sequence_mean", {tape->node_of(x)}, out,
                 [x, out, offsets, b]() mutable {
                   const S g = out.grad()[0];
                   auto& dx = x.grad_buffer();
                   for (std::size_t s = 0; s < b; ++s) {
                     const S w = g / (static_cast<S>(b) *
                                      static_cast<S>(offsets[s + 1] - offsets[s]));
                     for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i)
                       dx[i] += w;
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout

// Inverted dropout: keeps each element with probability 1-p and rescales by
// 1/(1-p).  p = 0 returns the input unchanged.  The mask is drawn from `rng`
// in row-major order, so a fixed seed reproduces the exact mask sequence.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw UsageError("dropout: rate must lie in [0, 1)");
  if (p == 0.0) return a;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<std::uint8_t>>(a.numel());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const bool keep = rng.uniform() >= p;
    (*mask)[i] = keep ? 1 : 0;
    ov[i] = keep ? av[i] * keep_scale : S(0);
  }
  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&a})) {
    tape->record("dropout", {tape->node_of(a)}, out,
                 [a, out, mask, keep_scale]() mutable {
                   const auto& g = out.grad();
                   auto& da = a.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i)
                     if ((*mask)[i]) da[i] += g[i] * keep_scale;
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused multi-head causal self-attention.
//
// qkv holds the concatenated projections [R x 3d] for a batch of sequences
// flattened row-wise; offsets (size B+1) delimit the sequences.  Attention is
// strictly causal within each sequence and never crosses sequence boundaries,
// which makes the op independent of how sequences are batched together.

template <typename S>
Tensor<S> causal_attention(const Tensor<S>& qkv,
                           const std::vector<std::size_t>& offsets,
                           std::size_t n_heads) {
  detail::require_rank(qkv, 2, "causal_attention");
  const std::size_t r = qkv.dim(0), three_d = qkv.dim(1);
  if (three_d % 3 != 0)
    throw ShapeError("causal_attention: column count must be 3*d_model");
  const std::size_t d = three_d / 3;
  if (n_heads == 0 || d % n_heads != 0)
    throw ShapeError("causal_attention: d_model must be divisible by n_heads");
  detail::require_offsets(offsets, r, "causal_attention");
  const std::size_t dh = d / n_heads;
  const S att_scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));

  Tensor<S> out = Tensor<S>::zeros({r, d});
  const auto& qv = qkv.values();
  auto& ov = out.values();

  // Softmax probabilities are kept for the backward pass: for each sequence
  // and head an n x n lower-triangular block (stored dense).
  const std::size_t n_seq = offsets.size() - 1;
  std::size_t prob_total = 0;
  std::vector<std::size_t> prob_base(n_seq);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t n = offsets[s + 1] - offsets[s];
    prob_base[s] = prob_total;
    prob_total += n_heads * n * n;
  }
  auto probs = std::make_shared<std::vector<S>>(prob_total, S(0));

  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t o = offsets[s];
    const std::size_t n = offsets[s + 1] - o;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      S* pb = probs->data() + prob_base[s] + h * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const S* qi = qv.data() + (o + i) * three_d + qo;
        // Scores over positions 0..i, stabilized by the row max.
        S m = -std::numeric_limits<S>::infinity();
        S* prow = pb + i * n;
        for (std::size_t j = 0; j <= i; ++j) {
          const S* kj = qv.data() + (o + j) * three_d + ko;
          S dot = S(0);
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          prow[j] = dot * att_scale;
          m = std::max(m, prow[j]);
        }
        S sum = S(0);
        for (std::size_t j = 0; j <= i; ++j) {
          prow[j] = std::exp(prow[j] - m);
          sum += prow[j];
        }
        for (std::size_t j = 0; j <= i; ++j) prow[j] /= sum;
        S* orow = ov.data() + (o + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const S* vj = qv.data() + (o + j) * three_d + vo;
          const S p = prow[j];
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
        }
      }
    }
  }

  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&qkv})) {
    tape->record(
        "causal_attention", {tape->node_of(qkv)}, out,
        [qkv, out, probs, prob_base, offsets, n_heads, d, dh,
         att_scale]() mutable {
          const std::size_t three_d = 3 * d;
          const auto& g = out.grad();
          const auto& qv2 = qkv.values();
          auto& dq = qkv.grad_buffer();
          std::vector<S> dp;  // scratch for one attention row
          for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
            const std::size_t o = offsets[s];
            const std::size_t n = offsets[s + 1] - o;
            dp.resize(n);
            for (std::size_t h = 0; h < n_heads; ++h) {
              const std::size_t qo = h * dh, ko = d + h * dh,
                                vo = 2 * d + h * dh;
              const S* pb = probs->data() + prob_base[s] + h * n * n;
              for (std::size_t i = 0; i < n; ++i) {
                const S* gout = g.data() + (o + i) * d + h * dh;
                const S* prow = pb + i * n;
                // dV and dp from the weighted-sum output.
                S dot = S(0);
                for (std::size_t j = 0; j <= i; ++j) {
                  const S* vj = qv2.data() + (o + j) * three_d + vo;
                  S acc = S(0);
                  for (std::size_t c = 0; c < dh; ++c) acc += gout[c] * vj[c];
                  dp[j] = acc;
                  dot += acc * prow[j];
                  S* dvj = dq.data() + (o + j) * three_d + vo;
                  const S p = prow[j];
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p * gout[c];
                }
                // Softmax backward, then into Q and K.
                const S* qi = qv2.data() + (o + i) * three_d + qo;
                S* dqi = dq.data() + (o + i) * three_d + qo;
                for (std::size_t j = 0; j <= i; ++j) {
                  const S ds = prow[j] * (dp[j] - dot) * att_scale;
                  const S* kj = qv2.data() + (o + j) * three_d + ko;
                  S* dkj = dq.data() + (o + j) * three_d + ko;
                  for (std::size_t c = 0; c < dh; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * qi[c];
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Top-K weighted similarity loss.
//
// sims is [R x A]: one similarity per (token row, candidate column), larger
// meaning more similar (the library uses negated L2 distances).  For every
// row the K most similar columns are selected (ties broken toward the lower
// column index) and their similarities are combined with the weights in
// `weights` (size K, matched to the selection in descending-similarity
// order).  The result is the mean over rows of -sum_k w_k * sims[row, sel_k],
// averaged per sequence and then across sequences via `offsets`.
//
// By default the selection is recomputed from the current values on every
// call; passing `fixed_selection` (row-major R*K column indices) pins it,
// which decouples the selection from value perturbations (finite-difference
// checks, ablation studies).

template <typename S>
std::vector<std::size_t> topk_columns(const S* row, std::size_t a,
                                      std::size_t k) {
  std::vector<std::size_t> idx(a);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [row](std::size_t i, std::size_t j) { return row[i] > row[j]; });
  idx.resize(k);
  return idx;
}

template <typename S>
Tensor<S> topk_similarity_loss(const Tensor<S>& sims, const Tensor<S>& weights,
                               std::size_t k,
                               const std::vector<std::size_t>& offsets,
                               const std::vector<std::size_t>* fixed_selection =
                                   nullptr) {
  detail::require_rank(sims, 2, "topk_similarity_loss");
  detail::require_rank(weights, 1, "topk_similarity_loss");
  const std::size_t r = sims.dim(0), a = sims.dim(1);
  if (k == 0 || k > a)
    throw UsageError("topk_similarity_loss: K must satisfy 1 <= K <= " +
                     std::to_string(a));
  if (weights.dim(0) != k)
    throw ShapeError("topk_similarity_loss: weight count must equal K");
  detail::require_offsets(offsets, r, "topk_similarity_loss");

  auto selection = std::make_shared<std::vector<std::size_t>>();
  if (fixed_selection) {
    if (fixed_selection->size() != r * k)
      throw UsageError(
          "topk_similarity_loss: fixed selection must hold R*K indices");
    for (std::size_t c : *fixed_selection)
      if (c >= a)
        throw UsageError("topk_similarity_loss: fixed selection index out of "
                         "range");
    *selection = *fixed_selection;
  } else {
    selection->resize(r * k);
    const auto& sv = sims.values();
    for (std::size_t i = 0; i < r; ++i) {
      const auto cols = topk_columns(sv.data() + i * a, a, k);
      std::copy(cols.begin(), cols.end(), selection->begin() + i * k);
    }
  }

  const auto& sv = sims.values();
  const auto& wv = weights.values();
  const std::size_t b = offsets.size() - 1;
  S total = S(0);
  for (std::size_t s = 0; s < b; ++s) {
    S seq = S(0);
    for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i)
      for (std::size_t kk = 0; kk < k; ++kk)
        seq -= wv[kk] * sv[i * a + (*selection)[i * k + kk]];
    const std::size_t n = offsets[s + 1] - offsets[s];
    total += seq / (static_cast<S>(n) * static_cast<S>(k));
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(b));

  auto* tape = Tape<S>::active();
  if (detail::any_tracked(tape, {&sims, &weights})) {
    const bool gs = tape->tracks(sims), gw = tape->tracks(weights);
    tape->record(
        "topk_similarity_loss",
        {tape->node_of(sims), tape->node_of(weights)}, out,
        [sims, weights, out, selection, offsets, a, k, b, gs, gw]() mutable {
          const S g = out.grad()[0];
          const auto& sv2 = sims.values();
          const auto& wv2 = weights.values();
          for (std::size_t s = 0; s < b; ++s) {
            const std::size_t n = offsets[s + 1] - offsets[s];
            const S coeff =
                g / (static_cast<S>(b) * static_cast<S>(n) * static_cast<S>(k));
            for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i) {
              for (std::size_t kk = 0; kk < k; ++kk) {
                const std::size_t col = (*selection)[i * k + kk];
                if (gs) sims.grad_buffer()[i * a + col] -= coeff * wv2[kk];
                if (gw) weights.grad_buffer()[kk] -= coeff * sv2[i * a + col];
              }
            }
          }
        });
  }
  return out;
}

}  // namespace oodlm
