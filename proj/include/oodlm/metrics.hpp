#pragma once

// Threshold-free detection metrics over labeled scores (higher score =
// more anomalous): AUROC, area under the precision/recall curve, false
// alarm rate at 95% recall, and a shared-bin score histogram.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oodlm/common.hpp"

namespace oodlm {

struct LabeledScore {
  double score = 0.0;
  bool ood = false;  // true = anomalous/positive class
};

namespace detail {

struct ClassCounts {
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

inline ClassCounts validate_labeled(const std::vector<LabeledScore>& data,
                                    const char* who) {
  ClassCounts c;
  for (const auto& d : data) {
    if (!std::isfinite(d.score))
      throw UsageError(std::string(who) + ": scores must be finite");
    (d.ood ? c.n_ood : c.n_id)++;
  }
  if (c.n_id == 0 || c.n_ood == 0)
    throw UsageError(std::string(who) +
                     ": need at least one score from each class");
  return c;
}

// Scores sorted descending and grouped by exact value; each group carries
// its class counts.  Walking groups front-to-back sweeps the decision
// threshold downward through every distinct score.
struct ScoreGroup {
  double score = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

inline std::vector<ScoreGroup> descending_groups(
    std::vector<LabeledScore> data) {
  std::sort(data.begin(), data.end(),
            [](const LabeledScore& a, const LabeledScore& b) {
              return a.score > b.score;
            });
  std::vector<ScoreGroup> groups;
  for (const auto& d : data) {
    if (groups.empty() || groups.back().score != d.score) {
      groups.push_back({d.score, 0, 0});
    }
    (d.ood ? groups.back().n_ood : groups.back().n_id)++;
  }
  return groups;
}

}  // namespace detail

// Probability that a random anomalous example outscores a random nominal
// one, with ties counted half.  Computed by the rank-sum identity, exact
// for tied scores.
inline double auroc(const std::vector<LabeledScore>& data) {
  const auto counts = detail::validate_labeled(data, "auroc");
  std::vector<LabeledScore> sorted = data;
  std::sort(sorted.begin(), sorted.end(),
            [](const LabeledScore& a, const LabeledScore& b) {
              return a.score < b.score;
            });
  double rank_sum_ood = 0.0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].score == sorted[i].score) ++j;
    // 1-based ranks i+1..j share the average rank.
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (sorted[k].ood) rank_sum_ood += avg_rank;
    i = j;
  }
  const double n_ood = static_cast<double>(counts.n_ood);
  const double n_id = static_cast<double>(counts.n_id);
  const double u = rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0;
  return u / (n_id * n_ood);
}

// Average precision with the anomalous class as positive.  Examples with
// identical scores enter as one group, so the result is independent of
// tie ordering.
inline double aupr(const std::vector<LabeledScore>& data) {
  const auto counts = detail::validate_labeled(data, "aupr");
  const auto groups = detail::descending_groups(data);
  const double n_ood = static_cast<double>(counts.n_ood);
  double tp = 0.0, fp = 0.0, ap = 0.0;
  for (const auto& g : groups) {
    const double prev_recall = tp / n_ood;
    tp += static_cast<double>(g.n_ood);
    fp += static_cast<double>(g.n_id);
    const double recall = tp / n_ood;
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
  }
  return ap;
}

// False alarm rate at the loosest threshold still catching >= 95% of the
// anomalous class.  Thresholds sit just below empirical score values, so
// "caught" means score >= candidate; the first (largest) candidate whose
// recall clears the target wins.  Always defined: the smallest score has
// recall 1.
inline double far95(const std::vector<LabeledScore>& data,
                    double recall_target = 0.95) {
  const auto counts = detail::validate_labeled(data, "far95");
  if (!(recall_target > 0.0) || recall_target > 1.0)
    throw UsageError("far95: recall target must lie in (0, 1]");
  const auto groups = detail::descending_groups(data);
  std::size_t cum_ood = 0, cum_id = 0;
  for (const auto& g : groups) {
    cum_ood += g.n_ood;
    cum_id += g.n_id;
    const double recall =
        static_cast<double>(cum_ood) / static_cast<double>(counts.n_ood);
    if (recall >= recall_target)
      return static_cast<double>(cum_id) / static_cast<double>(counts.n_id);
  }
  return 1.0;  // unreachable: the last group always reaches recall 1
}

struct Histogram {
  std::vector<double> bin_low;
  std::vector<double> bin_high;
  std::vector<std::size_t> id_count;
  std::vector<std::size_t> ood_count;
};

// Equal-width bins over the pooled score range, shared by both classes.
// The top edge is inclusive; a degenerate (constant) score range widens
// to a unit interval so everything lands in bin 0.
inline Histogram histogram_bins(const std::vector<LabeledScore>& data,
                                std::size_t n_bins = 50) {
  if (n_bins < 2) throw UsageError("histogram_bins: need at least 2 bins");
  if (data.empty())
    throw UsageError("histogram_bins: need at least one score");
  for (const auto& d : data)
    if (!std::isfinite(d.score))
      throw UsageError("histogram_bins: scores must be finite");
  double lo = data.front().score, hi = data.front().score;
  for (const auto& d : data) {
    lo = std::min(lo, d.score);
    hi = std::max(hi, d.score);
  }
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / static_cast<double>(n_bins);
  Histogram h;
  h.bin_low.resize(n_bins);
  h.bin_high.resize(n_bins);
  h.id_count.assign(n_bins, 0);
  h.ood_count.assign(n_bins, 0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    h.bin_low[b] = lo + width * static_cast<double>(b);
    h.bin_high[b] = (b + 1 == n_bins) ? hi
                                      : lo + width * static_cast<double>(b + 1);
  }
  for (const auto& d : data) {
    auto b = static_cast<std::size_t>((d.score - lo) / width);
    b = std::min(b, n_bins - 1);
    (d.ood ? h.ood_count[b] : h.id_count[b])++;
  }
  return h;
}

struct MetricsReport {
  double auroc = 0.0;
  double aupr = 0.0;
  double far95 = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  Histogram histogram;
};

inline MetricsReport compute_metrics(const std::vector<LabeledScore>& data,
                                     std::size_t n_bins = 50) {
  const auto counts = detail::validate_labeled(data, "compute_metrics");
  MetricsReport r;
  r.auroc = auroc(data);
  r.aupr = aupr(data);
  r.far95 = far95(data);
  r.n_id = counts.n_id;
  r.n_ood = counts.n_ood;
  r.histogram = histogram_bins(data, n_bins);
  return r;
}

inline nlohmann::json report_json(const MetricsReport& r) {
  return nlohmann::json{{"auroc", r.auroc},
                        {"aupr", r.aupr},
                        {"far95", r.far95},
                        {"n_id", r.n_id},
                        {"n_ood", r.n_ood}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.auroc = j.at("auroc").get<double>();
    r.aupr = j.at("aupr").get<double>();
    r.far95 = j.at("far95").get<double>();
    r.n_id = j.at("n_id").get<std::size_t>();
    r.n_ood = j.at("n_ood").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metrics report: ") + e.what());
  }
  return r;
}

// CSV with header bin_low,bin_high,id_count,ood_count; edges carry full
// double precision so the file round-trips.
inline std::string histogram_csv(const Histogram& h) {
  std::ostringstream out;
  out << "bin_low,bin_high,id_count,ood_count\n";
  out << std::setprecision(17);
  for (std::size_t b = 0; b < h.bin_low.size(); ++b)
    out << h.bin_low[b] << ',' << h.bin_high[b] << ',' << h.id_count[b] << ','
        << h.ood_count[b] << '\n';
  return out.str();
}

}  // namespace oodlm
