#pragma once

// Detection on top of a trained LM: per-example score = mean per-token
// negative log-likelihood (nats/token), strict-threshold classification,
// quantile threshold calibration, and the paired machine-text decision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "oodlm/common.hpp"
#include "oodlm/model.hpp"
#include "oodlm/text.hpp"

namespace oodlm {

struct ScoredExample {
  std::string text;
  std::size_t n_targets = 0;
  double score = 0.0;  // mean NLL in nats per token; higher = more anomalous
  std::optional<Label> label;
  std::optional<Label> prediction;
};

struct Threshold {
  double gamma = std::numeric_limits<double>::infinity();
  std::string calibration_method = "id_quantile";
  double quantile = 0.95;
};

// Mean NLL over all next-token targets (EOS included, BOS never a target).
// Evaluation mode: no dropout, no tape, pure in (model, example).
template <typename S>
ScoredExample ood_score(const TransformerLM<S>& model,
                        const EncodedExample& example) {
  if (example.text.empty())
    throw UsageError("ood_score: empty text cannot be scored");
  const std::vector<double> nlls = token_nlls(model, example);
  double total = 0.0;
  for (double v : nlls) total += v;
  ScoredExample out;
  out.text = example.text;
  out.n_targets = nlls.size();
  out.score = total / static_cast<double>(nlls.size());
  out.label = example.label;
  return out;
}

template <typename S>
ScoredExample score_text(const TransformerLM<S>& model, const Vocab& vocab,
                         const std::string& text,
                         std::optional<Label> label = std::nullopt) {
  return ood_score(model, encode(text, vocab,
                                 static_cast<std::size_t>(model.config().max_len),
                                 label));
}

inline Label classify(const ScoredExample& scored, const Threshold& threshold) {
  if (!std::isfinite(scored.score))
    throw UsageError("classify: score must be finite");
  return scored.score > threshold.gamma ? Label::OOD : Label::ID;
}

// Nearest-rank empirical quantile of the ID validation scores:
// gamma = sorted[ceil(q*n)] (1-based).  Expected ID false-alarm rate is
// about 1-q.
inline Threshold calibrate_threshold(std::vector<double> id_validation_scores,
                                     double quantile = 0.95) {
  if (id_validation_scores.size() < 20)
    throw UsageError("calibrate_threshold: need at least 20 ID validation "
                     "scores, got " +
                     std::to_string(id_validation_scores.size()));
  if (!(quantile > 0.0) || quantile > 1.0)
    throw UsageError("calibrate_threshold: quantile must lie in (0, 1]");
  for (double s : id_validation_scores)
    if (!std::isfinite(s))
      throw UsageError("calibrate_threshold: scores must be finite");
  std::sort(id_validation_scores.begin(), id_validation_scores.end());
  const auto n = id_validation_scores.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(quantile * static_cast<double>(n)));
  rank = std::min(std::max<std::size_t>(rank, 1), n);
  Threshold t;
  t.gamma = id_validation_scores[rank - 1];
  t.quantile = quantile;
  return t;
}

enum class PairAnswer { A, B };

// Picks the machine-generated answer of a pair under a model trained with
// machine text as in-distribution: the answer with the LOWER score.  Exact
// ties go to A.
template <typename S>
PairAnswer pair_expert_decide(const TransformerLM<S>& model,
                              const Vocab& vocab, const std::string& answer_a,
                              const std::string& answer_b) {
  if (answer_a.empty() || answer_b.empty())
    throw UsageError("pair_expert_decide: both answers must be non-empty");
  const double sa = score_text(model, vocab, answer_a).score;
  const double sb = score_text(model, vocab, answer_b).score;
  return sb < sa ? PairAnswer::B : PairAnswer::A;
}

// Scores a list of examples with an order-preserving thread fan-out.  The
// output is independent of the thread count: worker t handles indices
// congruent to t and writes into its own slots.
template <typename S>
std::vector<ScoredExample> score_many(const TransformerLM<S>& model,
                                      const Vocab& vocab,
                                      const std::vector<RawExample>& inputs,
                                      std::size_t n_threads = 1) {
  std::vector<ScoredExample> out(inputs.size());
  if (inputs.empty()) return out;
  n_threads = std::max<std::size_t>(1, std::min(n_threads, inputs.size()));
  const std::size_t max_len = static_cast<std::size_t>(model.config().max_len);

  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&](std::size_t t) {
    try {
      for (std::size_t i = t; i < inputs.size(); i += n_threads)
        out[i] = ood_score(
            model, encode(inputs[i].text, vocab, max_len, inputs[i].label));
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };
  if (n_threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace oodlm
