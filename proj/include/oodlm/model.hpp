#pragma once

// Causal transformer language model (pre-norm blocks, GELU feed-forward,
// learned positional embeddings, input/output embeddings tied).
//
// Batches are processed in a flattened layout: the real (non-PAD) tokens of
// all sequences are concatenated row-wise and per-sequence row offsets are
// carried alongside.  Position-wise ops become single dense GEMMs over all
// rows, attention stays strictly within each sequence, and padding can never
// influence a real position because padded slots simply do not exist in the
// computation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oodlm/common.hpp"
#include "oodlm/ops.hpp"
#include "oodlm/optim.hpp"
#include "oodlm/tensor.hpp"
#include "oodlm/text.hpp"

namespace oodlm {

struct ModelConfig {
  int n_layers = 6;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_len = 128;
  std::uint64_t seed = 0;
  double dropout = 0.1;

  void validate() const {
    if (n_layers < 1) throw UsageError("ModelConfig: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw UsageError("ModelConfig: d_model must be a positive multiple of "
                       "n_heads (got d_model=" +
                       std::to_string(d_model) + ", n_heads=" +
                       std::to_string(n_heads) + ")");
    if (d_ff < 1) throw UsageError("ModelConfig: d_ff must be >= 1");
    if (vocab_size < 4)
      throw UsageError("ModelConfig: vocab_size must cover the 4 reserved "
                       "tokens");
    if (max_len < 2) throw UsageError("ModelConfig: max_len must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0)
      throw UsageError("ModelConfig: dropout must lie in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Batch flattened to real tokens only.
struct FlatBatch {
  std::vector<std::int32_t> ids;      // concatenated tokens
  std::vector<std::int32_t> pos;      // position within own sequence
  std::vector<std::size_t> offsets;   // B+1 row offsets
};

inline FlatBatch flatten(const Batch& batch) {
  if (batch.rows == 0) throw UsageError("flatten: empty batch");
  FlatBatch fb;
  fb.offsets.push_back(0);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const std::size_t len = batch.lengths[r];
    if (len == 0)
      throw UsageError("flatten: sequence " + std::to_string(r) + " is empty");
    if (len > batch.cols)
      throw UsageError("flatten: sequence length exceeds batch width");
    for (std::size_t c = 0; c < len; ++c) {
      fb.ids.push_back(batch.ids[r * batch.cols + c]);
      fb.pos.push_back(static_cast<std::int32_t>(c));
    }
    fb.offsets.push_back(fb.ids.size());
  }
  return fb;
}

template <typename S = float>
struct ForwardOutput {
  Tensor<S> logits;                  // [R x vocab]
  std::vector<Tensor<S>> hidden;     // n_layers+1 entries of [R x d_model]
  std::vector<std::size_t> offsets;  // B+1 row offsets (sequence boundaries)
};

// Coordinates of the next-token targets inside a flattened batch: target t
// lives at logits row rows[t], column cols[t]; offsets segments the targets
// per sequence.  BOS is never a target; EOS always is.
struct TargetIndex {
  std::vector<std::size_t> rows, cols;
  std::vector<std::size_t> offsets;
};

inline TargetIndex targets_of(const FlatBatch& fb) {
  TargetIndex ti;
  ti.offsets.push_back(0);
  for (std::size_t b = 0; b + 1 < fb.offsets.size(); ++b) {
    const std::size_t o = fb.offsets[b], n = fb.offsets[b + 1] - o;
    if (n < 2)
      throw UsageError("targets_of: sequence " + std::to_string(b) +
                       " has no next-token targets");
    for (std::size_t t = 0; t + 1 < n; ++t) {
      ti.rows.push_back(o + t);
      ti.cols.push_back(static_cast<std::size_t>(fb.ids[o + t + 1]));
    }
    ti.offsets.push_back(ti.rows.size());
  }
  return ti;
}

template <typename S = float>
class TransformerLM {
public:
  explicit TransformerLM(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto v = static_cast<std::size_t>(cfg_.vocab_size);
    const auto ml = static_cast<std::size_t>(cfg_.max_len);
    const auto dff = static_cast<std::size_t>(cfg_.d_ff);
    const double w_std = 0.02;
    // Residual-branch output projections start smaller so the residual
    // stream's variance stays flat across depth.
    const double r_std = w_std / std::sqrt(2.0 * cfg_.n_layers);

    tok_emb_ = param("tok_emb", randn<S>({v, d}, rng, w_std));
    pos_emb_ = param("pos_emb", randn<S>({ml, d}, rng, w_std));
    blocks_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& blk = blocks_[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      blk.ln1_gain = param(p + "ln1.gain", Tensor<S>::full({d}, S(1)));
      blk.ln1_bias = param(p + "ln1.bias", Tensor<S>::zeros({d}));
      blk.w_qkv = param(p + "attn.w_qkv", randn<S>({d, 3 * d}, rng, w_std));
      blk.b_qkv = param(p + "attn.b_qkv", Tensor<S>::zeros({3 * d}));
      blk.w_proj = param(p + "attn.w_proj", randn<S>({d, d}, rng, r_std));
      blk.b_proj = param(p + "attn.b_proj", Tensor<S>::zeros({d}));
      blk.ln2_gain = param(p + "ln2.gain", Tensor<S>::full({d}, S(1)));
      blk.ln2_bias = param(p + "ln2.bias", Tensor<S>::zeros({d}));
      blk.w_ff1 = param(p + "ff.w1", randn<S>({d, dff}, rng, w_std));
      blk.b_ff1 = param(p + "ff.b1", Tensor<S>::zeros({dff}));
      blk.w_ff2 = param(p + "ff.w2", randn<S>({dff, d}, rng, r_std));
      blk.b_ff2 = param(p + "ff.b2", Tensor<S>::zeros({d}));
    }
    ln_f_gain_ = param("ln_f.gain", Tensor<S>::full({d}, S(1)));
    ln_f_bias_ = param("ln_f.bias", Tensor<S>::zeros({d}));
    for (auto& [name, t] : named_) t.set_requires_grad(true);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<Tensor<S>> parameters() const {
    std::vector<Tensor<S>> out;
    for (const auto& [name, t] : named_) out.push_back(t);
    return out;
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& named_parameters()
      const {
    return named_;
  }

  // Forward over the flattened batch.  Dropout is applied only when a
  // dropout RNG is supplied (training); scoring passes none.
  ForwardOutput<S> forward(const FlatBatch& fb, Rng* dropout_rng = nullptr) const {
    validate_flat(fb);
    ForwardOutput<S> out;
    out.offsets = fb.offsets;
    Tensor<S> x = add(embedding(tok_emb_, fb.ids), embedding(pos_emb_, fb.pos));
    x = maybe_dropout(x, dropout_rng);
    out.hidden.push_back(x);
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    for (const auto& blk : blocks_) {
      Tensor<S> a = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
      Tensor<S> qkv = add_rowvec(matmul(a, blk.w_qkv), blk.b_qkv);
      Tensor<S> att = causal_attention(qkv, fb.offsets, heads);
      Tensor<S> proj = add_rowvec(matmul(att, blk.w_proj), blk.b_proj);
      x = add(x, maybe_dropout(proj, dropout_rng));
      Tensor<S> f = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
      Tensor<S> ff = gelu(add_rowvec(matmul(f, blk.w_ff1), blk.b_ff1));
      Tensor<S> ff2 = add_rowvec(matmul(ff, blk.w_ff2), blk.b_ff2);
      x = add(x, maybe_dropout(ff2, dropout_rng));
      out.hidden.push_back(x);
    }
    Tensor<S> hf = layer_norm(x, ln_f_gain_, ln_f_bias_);
    out.logits = matmul(hf, transpose(tok_emb_));
    return out;
  }

  ForwardOutput<S> forward(const Batch& batch, Rng* dropout_rng = nullptr) const {
    return forward(flatten(batch), dropout_rng);
  }

  // Logits for one raw id sequence, shaped [N x vocab] where N includes any
  // trailing PAD positions (their rows are zero).  Evaluation mode, no tape.
  Tensor<S> logits_for(const std::vector<std::int32_t>& ids) const {
    if (ids.empty()) throw UsageError("logits_for: empty input");
    std::size_t len = ids.size();
    while (len > 0 && ids[len - 1] == Vocab::kPad) --len;
    if (len == 0)
      throw UsageError("logits_for: input consists only of padding");
    FlatBatch fb;
    fb.ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(len));
    for (std::size_t i = 0; i < len; ++i)
      fb.pos.push_back(static_cast<std::int32_t>(i));
    fb.offsets = {0, len};
    GradPause<S> pause;
    detail::RowStableGemmScope stable_rows;
    ForwardOutput<S> fo = forward(fb);
    Tensor<S> out = Tensor<S>::zeros({ids.size(),
                                      static_cast<std::size_t>(cfg_.vocab_size)});
    std::copy(fo.logits.values().begin(), fo.logits.values().end(),
              out.values().begin());
    return out;
  }

private:
  struct Block {
    Tensor<S> ln1_gain, ln1_bias, w_qkv, b_qkv, w_proj, b_proj;
    Tensor<S> ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2;
  };

  Tensor<S> param(const std::string& name, Tensor<S> t) {
    named_.emplace_back(name, t);
    return t;
  }

  Tensor<S> maybe_dropout(const Tensor<S>& t, Rng* rng) const {
    return (rng && cfg_.dropout > 0.0) ? dropout(t, cfg_.dropout, *rng) : t;
  }

  void validate_flat(const FlatBatch& fb) const {
    detail::require_offsets(fb.offsets, fb.ids.size(), "forward");
    if (fb.pos.size() != fb.ids.size())
      throw UsageError("forward: ids/pos length mismatch");
    for (std::size_t b = 0; b + 1 < fb.offsets.size(); ++b)
      if (fb.offsets[b + 1] - fb.offsets[b] >
          static_cast<std::size_t>(cfg_.max_len))
        throw UsageError("forward: sequence exceeds max_len " +
                         std::to_string(cfg_.max_len));
    for (std::int32_t id : fb.ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw UsageError("forward: token id " + std::to_string(id) +
                         " out of range [0, " +
                         std::to_string(cfg_.vocab_size) + ")");
  }

  ModelConfig cfg_;
  Tensor<S> tok_emb_, pos_emb_, ln_f_gain_, ln_f_bias_;
  std::vector<Block> blocks_;
  std::vector<std::pair<std::string, Tensor<S>>> named_;
};

// ---------------------------------------------------------------------------
// Losses

// Mean negative log-likelihood of the next-token targets: averaged within
// each sequence first, then across sequences.
template <typename S>
Tensor<S> nll_from_logits(const Tensor<S>& logits, const TargetIndex& ti) {
  Tensor<S> logp = log_softmax(logits);
  Tensor<S> picked = pick(logp, ti.rows, ti.cols);
  return neg(per_sequence_mean(picked, ti.offsets));
}

template <typename S>
Tensor<S> clm_loss(const TransformerLM<S>& model, const Batch& batch,
                   Rng* dropout_rng = nullptr) {
  const FlatBatch fb = flatten(batch);
  const TargetIndex ti = targets_of(fb);  // rejects target-free batches
  ForwardOutput<S> fo = model.forward(fb, dropout_rng);
  return nll_from_logits(fo.logits, ti);
}

// Per-target negative log-likelihoods of one example (evaluation mode).
template <typename S>
std::vector<double> token_nlls(const TransformerLM<S>& model,
                               const EncodedExample& example) {
  if (example.ids.size() < 2)
    throw UsageError("token_nlls: example has no targets");
  GradPause<S> pause;
  detail::RowStableGemmScope stable_rows;
  FlatBatch fb;
  fb.ids = example.ids;
  for (std::size_t i = 0; i < fb.ids.size(); ++i)
    fb.pos.push_back(static_cast<std::int32_t>(i));
  fb.offsets = {0, fb.ids.size()};
  ForwardOutput<S> fo = model.forward(fb);
  Tensor<S> logp = log_softmax(fo.logits);
  const std::size_t v = logp.cols();
  std::vector<double> out;
  out.reserve(example.ids.size() - 1);
  for (std::size_t t = 0; t + 1 < example.ids.size(); ++t)
    out.push_back(-static_cast<double>(
        logp.values()[t * v + static_cast<std::size_t>(example.ids[t + 1])]));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  AdamWOptions adamw;
  std::uint64_t seed = 0;
  // Called after each epoch with (epoch index, mean loss); used by the
  // pipeline for progress logging and last-good checkpointing.
  std::function<void(std::size_t, double)> on_epoch;
};

struct TrainCurve {
  // Loss of the very first batch before any update (the fresh-model loss).
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  // Sequence-weighted mean loss per epoch.
  std::vector<double> epoch_losses;
};

template <typename S>
TrainCurve train_clm(TransformerLM<S>& model,
                     const std::vector<EncodedExample>& corpus,
                     const TrainOptions& topt) {
  if (corpus.empty()) throw UsageError("train_clm: empty corpus");
  TrainCurve curve;
  if (topt.epochs == 0) return curve;
  AdamW<S> opt(model.parameters(), topt.adamw);
  Rng dropout_rng(mix64(topt.seed, 0xd401u));
  bool first_step = true;
  for (std::size_t epoch = 0; epoch < topt.epochs; ++epoch) {
    const auto batches = make_batches(corpus, topt.batch_size, topt.seed, epoch);
    double loss_sum = 0.0;
    std::size_t seq_count = 0;
    for (std::size_t step = 0; step < batches.size(); ++step) {
      const Batch& batch = batches[step];
      double loss_value = 0.0;
      {
        Tape<S> tape;
        Tensor<S> loss = clm_loss(model, batch, &dropout_rng);
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value))
          throw NumericError("train_clm: non-finite loss at epoch " +
                             std::to_string(epoch) + ", step " +
                             std::to_string(step));
        tape.backward(loss);
      }
      opt.step();
      opt.zero_grad();
      if (first_step) {
        curve.initial_loss = loss_value;
        first_step = false;
      }
      loss_sum += loss_value * static_cast<double>(batch.rows);
      seq_count += batch.rows;
    }
    curve.epoch_losses.push_back(loss_sum / static_cast<double>(seq_count));
    if (topt.on_epoch) topt.on_epoch(epoch, curve.epoch_losses.back());
  }
  return curve;
}

}  // namespace oodlm
