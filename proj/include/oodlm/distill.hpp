#pragma once

// Multi-level knowledge distillation of a from-scratch student under a
// frozen teacher:
//   * prediction-layer loss: KL(teacher next-token distribution || student)
//     over target positions;
//   * intermediate-layer loss: for each chosen student layer l and token, the
//     student hidden state is compared against learnable projections of
//     every candidate teacher layer's hidden state by negative L2 distance,
//     the K most similar are selected per token (recomputed each step), and
//     their similarities are maximized under softmax-normalized weights;
//   * total loss: lambda * prediction + (1 - lambda) * sum over layers.
//
// Projections W_j (one per teacher layer, shared across student layers) and
// the weight logits train jointly with the student and are discarded at
// inference.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "oodlm/common.hpp"
#include "oodlm/model.hpp"
#include "oodlm/ops.hpp"
#include "oodlm/tensor.hpp"

namespace oodlm {

struct DistillConfig {
  double lambda = 0.5;  // weight on the prediction-layer term
  std::size_t k = 2;    // per-token top-K candidate teacher layers
  std::vector<int> student_layers;  // hidden-state indices to distill into
  std::vector<int> teacher_layers;  // candidate teacher hidden-state indices
  TrainOptions train;

  // Middle band of the student's layers: indices in [ceil(n/4), floor(3n/4)].
  static std::vector<int> default_student_layers(int n_layers) {
    int lo = (n_layers + 3) / 4;
    int hi = (3 * n_layers) / 4;
    std::vector<int> out;
    for (int l = std::max(lo, 1); l <= std::min(hi, n_layers); ++l)
      out.push_back(l);
    if (out.empty()) out.push_back(std::max(1, (n_layers + 1) / 2));
    return out;
  }

  // All teacher block outputs; the embedding output (index 0) is excluded.
  static std::vector<int> default_teacher_layers(int n_layers) {
    std::vector<int> out;
    for (int j = 1; j <= n_layers; ++j) out.push_back(j);
    return out;
  }

  void validate(const ModelConfig& student, const ModelConfig& teacher) const {
    if (lambda < 0.0 || lambda > 1.0)
      throw UsageError("DistillConfig: lambda must lie in [0, 1]");
    if (student_layers.empty() || teacher_layers.empty())
      throw UsageError("DistillConfig: layer sets must be non-empty");
    if (k == 0 || k > teacher_layers.size())
      throw UsageError("DistillConfig: K must satisfy 1 <= K <= " +
                       std::to_string(teacher_layers.size()) +
                       " (candidate teacher layers)");
    auto check = [](const std::vector<int>& layers, int n_layers,
                    const char* who) {
      std::vector<int> sorted = layers;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw UsageError(std::string("DistillConfig: duplicate ") + who +
                         " layer index");
      for (int l : layers)
        if (l < 0 || l > n_layers)
          throw UsageError(std::string("DistillConfig: ") + who + " layer " +
                           std::to_string(l) + " outside [0, " +
                           std::to_string(n_layers) + "]");
    };
    check(student_layers, student.n_layers, "student");
    check(teacher_layers, teacher.n_layers, "teacher");
  }
};

template <typename S = float>
struct DistillState {
  TransformerLM<S> student;
  const TransformerLM<S>* teacher = nullptr;  // frozen; never receives grads
  std::vector<Tensor<S>> projections;         // aligned with cfg.teacher_layers
  Tensor<S> beta_logits;                      // [K] raw weight logits
  DistillConfig cfg;
};

// Builds the distillation working set: a fresh student, one identity-
// initialized projection per candidate teacher layer, and zero weight logits
// (softmax of zeros = uniform weights).
template <typename S>
DistillState<S> make_distill_state(const TransformerLM<S>& teacher,
                                   const ModelConfig& student_cfg,
                                   const DistillConfig& cfg) {
  cfg.validate(student_cfg, teacher.config());
  if (student_cfg.vocab_size != teacher.config().vocab_size)
    throw UsageError("distill: teacher and student must share a vocabulary "
                     "(sizes " +
                     std::to_string(teacher.config().vocab_size) + " vs " +
                     std::to_string(student_cfg.vocab_size) + ")");
  DistillState<S> state{TransformerLM<S>(student_cfg), &teacher, {}, {}, cfg};
  const auto dt = static_cast<std::size_t>(teacher.config().d_model);
  const auto ds = static_cast<std::size_t>(student_cfg.d_model);
  for (std::size_t j = 0; j < cfg.teacher_layers.size(); ++j) {
    Tensor<S> w = Tensor<S>::zeros({dt, ds});
    for (std::size_t i = 0; i < std::min(dt, ds); ++i)
      w.values()[i * ds + i] = S(1);
    w.set_requires_grad(true);
    state.projections.push_back(w);
  }
  state.beta_logits = Tensor<S>::zeros({cfg.k});
  state.beta_logits.set_requires_grad(true);
  return state;
}

// ---------------------------------------------------------------------------
// Losses

// KL(p_teacher || p_student) per target position, averaged within each
// sequence and then across sequences.  Teacher logits are treated as
// constants; gradients flow only into the student logits.
template <typename S>
Tensor<S> prediction_distill_loss(const ForwardOutput<S>& teacher_out,
                                  const ForwardOutput<S>& student_out,
                                  const TargetIndex& targets) {
  if (teacher_out.logits.shape() != student_out.logits.shape())
    throw UsageError("prediction_distill_loss: teacher/student logits shape "
                     "mismatch " +
                     detail::shape_str(teacher_out.logits.shape()) + " vs " +
                     detail::shape_str(student_out.logits.shape()));
  const Tensor<S> tl = teacher_out.logits.detached_copy();
  // Teacher and student rows run through the same softmax code path, so
  // identical logits give an exact zero.
  Tensor<S> t_rows = gather_rows(tl, targets.rows);
  Tensor<S> s_rows = gather_rows(student_out.logits, targets.rows);
  Tensor<S> p = softmax(t_rows);
  Tensor<S> lp_tea = log_softmax(t_rows);
  Tensor<S> lp_stu = log_softmax(s_rows);
  Tensor<S> ent = row_sum(mul(p, lp_tea));    // sum_v p log p   (constant)
  Tensor<S> cross = row_sum(mul(p, lp_stu));  // sum_v p log q
  return per_sequence_mean(sub(ent, cross), targets.offsets);
}

// Similarity of one student hidden vector to one projected teacher hidden
// vector: the negated L2 distance -||h_stu - h_tea W||.  Zero iff equal;
// always <= 0.  The teacher vector is a constant.
template <typename S>
Tensor<S> layer_similarity(const Tensor<S>& h_stu, const Tensor<S>& h_tea,
                           const Tensor<S>& w) {
  detail::require_rank(w, 2, "layer_similarity");
  Tensor<S> hs = h_stu.rank() == 1 ? reshape(h_stu, {1, h_stu.dim(0)}) : h_stu;
  Tensor<S> ht = h_tea.detached_copy();
  if (ht.rank() == 1) ht = reshape(ht, {1, ht.dim(0)});
  if (hs.rank() != 2 || hs.dim(0) != 1 || ht.rank() != 2 || ht.dim(0) != 1)
    throw ShapeError("layer_similarity: expects single hidden vectors");
  if (ht.dim(1) != w.dim(0) || hs.dim(1) != w.dim(1))
    throw ShapeError("layer_similarity: projection shape " +
                     detail::shape_str(w.shape()) +
                     " does not map teacher dim " + std::to_string(ht.dim(1)) +
                     " to student dim " + std::to_string(hs.dim(1)));
  Tensor<S> diff = sub(hs, matmul(ht, w));
  return neg(sqrt_elem(row_sum(mul(diff, diff))));
}

// The K most similar candidates, descending, ties toward the smaller index.
// Selection is a hard choice: no gradients flow through the ordering.
template <typename S>
std::vector<std::size_t> select_topk(const std::vector<S>& similarities,
                                     std::size_t k) {
  if (k == 0 || k > similarities.size())
    throw UsageError("select_topk: K must satisfy 1 <= K <= " +
                     std::to_string(similarities.size()));
  return topk_columns(similarities.data(), similarities.size(), k);
}

// Similarities of every token's student hidden state (layer l) against all
// candidate teacher layers: [R x |candidates|], column order matching
// cfg.teacher_layers.
template <typename S>
Tensor<S> similarity_matrix(DistillState<S>& state,
                            const ForwardOutput<S>& teacher_out,
                            const ForwardOutput<S>& student_out, int l) {
  const Tensor<S>& hs = student_out.hidden.at(static_cast<std::size_t>(l));
  std::vector<Tensor<S>> sims;
  sims.reserve(state.cfg.teacher_layers.size());
  for (std::size_t jj = 0; jj < state.cfg.teacher_layers.size(); ++jj) {
    const int j = state.cfg.teacher_layers[jj];
    Tensor<S> ht =
        teacher_out.hidden.at(static_cast<std::size_t>(j)).detached_copy();
    Tensor<S> diff = sub(hs, matmul(ht, state.projections[jj]));
    sims.push_back(neg(sqrt_elem(row_sum(mul(diff, diff)))));
  }
  return concat_cols(sims);
}

// Per-token top-K plans for every distilled student layer, extracted at the
// current parameter values (used to pin the selection while probing the
// loss, e.g. for finite-difference checks).
struct DistillSelection {
  std::vector<std::vector<std::size_t>> per_layer;  // flat R*K column indices
};

// Intermediate-layer loss for one student layer l: select the top-K most
// similar projected teacher layers per token, weight the (negated)
// similarities by softmax(beta) in descending-similarity order, and average
// per token, per sequence, then across sequences.  Always >= 0.
template <typename S>
Tensor<S> intermediate_layer_loss(
    DistillState<S>& state, const ForwardOutput<S>& teacher_out,
    const ForwardOutput<S>& student_out, int l,
    const std::vector<std::size_t>* fixed_selection = nullptr) {
  const auto& layers = state.cfg.student_layers;
  if (std::find(layers.begin(), layers.end(), l) == layers.end())
    throw UsageError("intermediate_layer_loss: layer " + std::to_string(l) +
                     " is not in the configured student layer set");
  Tensor<S> sims = similarity_matrix(state, teacher_out, student_out, l);
  Tensor<S> beta_hat = softmax(state.beta_logits);
  return topk_similarity_loss(sims, beta_hat, state.cfg.k, student_out.offsets,
                              fixed_selection);
}

// Extracts the current top-K selection for every distilled layer without
// touching any tape.
template <typename S>
DistillSelection compute_selection(DistillState<S>& state, const Batch& batch) {
  GradPause<S> pause;
  const FlatBatch fb = flatten(batch);
  ForwardOutput<S> teacher_out = state.teacher->forward(fb);
  ForwardOutput<S> student_out = state.student.forward(fb);
  DistillSelection sel;
  for (int l : state.cfg.student_layers) {
    Tensor<S> sims = similarity_matrix(state, teacher_out, student_out, l);
    const std::size_t r = sims.dim(0), a = sims.dim(1);
    std::vector<std::size_t> plan(r * state.cfg.k);
    for (std::size_t i = 0; i < r; ++i) {
      const auto cols = topk_columns(sims.values().data() + i * a, a,
                                     state.cfg.k);
      std::copy(cols.begin(), cols.end(), plan.begin() + i * state.cfg.k);
    }
    sel.per_layer.push_back(std::move(plan));
  }
  return sel;
}

// Combined objective: lambda * prediction KL + (1-lambda) * sum of
// intermediate losses.  The boundaries are exact: lambda=1 returns the
// prediction loss itself and lambda=0 the intermediate sum itself.
template <typename S>
Tensor<S> total_distill_loss(DistillState<S>& state, const Batch& batch,
                             Rng* dropout_rng = nullptr,
                             const DistillSelection* fixed = nullptr) {
  if (state.teacher == nullptr)
    throw UsageError("total_distill_loss: no teacher attached");
  if (state.student.config().vocab_size != state.teacher->config().vocab_size)
    throw UsageError("total_distill_loss: teacher and student vocabularies "
                     "differ");
  const FlatBatch fb = flatten(batch);
  const TargetIndex ti = targets_of(fb);
  ForwardOutput<S> teacher_out;
  {
    // Teacher runs in evaluation mode (no dropout) and off the tape.
    GradPause<S> pause;
    teacher_out = state.teacher->forward(fb);
  }
  ForwardOutput<S> student_out = state.student.forward(fb, dropout_rng);
  const double lam = state.cfg.lambda;
  if (fixed && fixed->per_layer.size() != state.cfg.student_layers.size())
    throw UsageError("total_distill_loss: fixed selection does not cover the "
                     "student layer set");
  if (lam == 1.0)
    return prediction_distill_loss(teacher_out, student_out, ti);
  Tensor<S> inter;
  for (std::size_t li = 0; li < state.cfg.student_layers.size(); ++li) {
    Tensor<S> term = intermediate_layer_loss(
        state, teacher_out, student_out, state.cfg.student_layers[li],
        fixed ? &fixed->per_layer[li] : nullptr);
    inter = li == 0 ? term : add(inter, term);
  }
  if (lam == 0.0) return inter;
  Tensor<S> pred = prediction_distill_loss(teacher_out, student_out, ti);
  return add(scale(pred, static_cast<S>(lam)),
             scale(inter, static_cast<S>(1.0 - lam)));
}

// ---------------------------------------------------------------------------
// Training

// Parameters updated during distillation: the student everywhere; the
// projections and weight logits only while the intermediate term is active.
template <typename S>
std::vector<Tensor<S>> distill_parameters(DistillState<S>& state) {
  std::vector<Tensor<S>> params = state.student.parameters();
  if (state.cfg.lambda < 1.0) {
    for (auto& w : state.projections) params.push_back(w);
    params.push_back(state.beta_logits);
  }
  return params;
}

// AdamW over {student, projections, beta logits}; the teacher is never
// touched.  Returns the per-epoch loss curve.
template <typename S>
TrainCurve train_student(DistillState<S>& state,
                         const std::vector<EncodedExample>& corpus) {
  if (corpus.empty()) throw UsageError("train_student: empty corpus");
  const TrainOptions& topt = state.cfg.train;
  TrainCurve curve;
  if (topt.epochs == 0) return curve;
  AdamW<S> opt(distill_parameters(state), topt.adamw);
  Rng dropout_rng(mix64(topt.seed, 0xd402u));
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
        Tensor<S> loss = total_distill_loss(state, batch, &dropout_rng);
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value))
          throw NumericError("train_student: non-finite loss at epoch " +
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
