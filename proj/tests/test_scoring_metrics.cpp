// Detection scoring (mean token surprisal, thresholding, calibration, the
// paired decision rule, threaded scoring) and the evaluation metrics, each
// checked against independent brute-force reference implementations.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <oodlm/metrics.hpp>
#include <oodlm/scoring.hpp>

#include "support/oracles.hpp"

using namespace oodlm;
using Catch::Approx;

namespace {

struct ScoringFixture {
  std::vector<std::string> texts;  // must precede vocab: make_vocab fills it
  Vocab vocab;
  TransformerLM<float> model;

  static ModelConfig make_cfg(const Vocab& v) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = static_cast<int>(v.size());
    cfg.max_len = 16;
    cfg.seed = 77;
    cfg.dropout = 0.0;
    return cfg;
  }

  static Vocab make_vocab(std::vector<std::string>& texts) {
    texts = gen_markov_corpus(id_grammar(10, 3, 8), 24, 19);
    return Vocab::build(texts, TokenizerMode::Whitespace);
  }

  ScoringFixture() : vocab(make_vocab(texts)), model(make_cfg(vocab)) {}
};

std::vector<LabeledScore> random_scores(std::uint64_t seed, bool with_ties) {
  Rng rng(seed);
  std::vector<LabeledScore> data;
  const std::size_t n_id = 15 + rng.below(25);
  const std::size_t n_ood = 15 + rng.below(25);
  auto draw = [&](bool ood) {
    double s = rng.uniform() * 10.0;
    if (with_ties) s = std::floor(s * 2.0) / 2.0;  // 20 possible values
    data.push_back({s, ood});
  };
  for (std::size_t i = 0; i < n_id; ++i) draw(false);
  for (std::size_t i = 0; i < n_ood; ++i) draw(true);
  return data;
}

}  // namespace

TEST_CASE("the detection score is the mean per-token surprisal") {
  ScoringFixture f;
  EncodedExample e = encode(f.texts[0], f.vocab, 16, Label::ID);
  ScoredExample s = ood_score(f.model, e);
  const auto nll = token_nlls(f.model, e);
  double mean = 0.0;
  for (double x : nll) mean += x;
  mean /= static_cast<double>(nll.size());
  REQUIRE(s.score == mean);
  REQUIRE(s.n_targets == e.ids.size() - 1);
  REQUIRE(s.text == f.texts[0]);
  REQUIRE(s.label == Label::ID);
  REQUIRE_FALSE(s.prediction.has_value());

  ScoredExample via_text = score_text(f.model, f.vocab, f.texts[0]);
  REQUIRE(via_text.score == s.score);
  REQUIRE_FALSE(via_text.label.has_value());

  EncodedExample empty;
  empty.ids = {Vocab::kBos, Vocab::kEos};
  REQUIRE_THROWS_AS(ood_score(f.model, empty), UsageError);
}

TEST_CASE("classification is a strict exceed of the threshold") {
  Threshold t;
  t.gamma = 2.0;
  ScoredExample s;
  s.score = 2.0;
  REQUIRE(classify(s, t) == Label::ID);  // equality stays in-distribution
  s.score = std::nextafter(2.0, 3.0);
  REQUIRE(classify(s, t) == Label::OOD);
  s.score = 1.9;
  REQUIRE(classify(s, t) == Label::ID);

  s.score = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(classify(s, t), UsageError);
  s.score = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(classify(s, t), UsageError);

  // The default threshold never fires.
  Threshold def;
  s.score = 1e300;
  REQUIRE(classify(s, def) == Label::ID);
}

TEST_CASE("threshold calibration picks the nearest-rank quantile") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed);
    std::vector<double> scores;
    const std::size_t n = 20 + rng.below(180);
    for (std::size_t i = 0; i < n; ++i)
      scores.push_back(std::floor(rng.uniform() * 50.0) / 10.0);  // many ties
    for (double q : {0.5, 0.9, 0.95, 1.0}) {
      Threshold t = calibrate_threshold(scores, q);
      REQUIRE(t.gamma == oracles::nearest_rank_quantile(scores, q));
      REQUIRE(t.quantile == q);
      // Strict-exceed false alarms on the calibration set itself can never
      // outnumber the (1-q) tail.
      std::size_t above = 0;
      for (double s : scores) above += s > t.gamma ? 1 : 0;
      REQUIRE(static_cast<double>(above) <=
              (1.0 - q) * static_cast<double>(n) + 1e-9);
    }
  }

  REQUIRE(calibrate_threshold(std::vector<double>(20, 1.5)).gamma == 1.5);
  REQUIRE_THROWS_AS(calibrate_threshold(std::vector<double>(19, 1.0)),
                    UsageError);
  REQUIRE_THROWS_AS(calibrate_threshold(std::vector<double>(20, 1.0), 0.0),
                    UsageError);
  REQUIRE_THROWS_AS(calibrate_threshold(std::vector<double>(20, 1.0), 1.2),
                    UsageError);
  std::vector<double> with_nan(20, 1.0);
  with_nan[7] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(calibrate_threshold(with_nan), UsageError);
}

TEST_CASE("the pair decision picks the lower-scoring answer, ties to the "
          "first") {
  ScoringFixture f;
  // Find two fixture texts the model scores differently.
  std::string low, high;
  for (std::size_t i = 1; i < f.texts.size() && high.empty(); ++i) {
    const double s0 = score_text(f.model, f.vocab, f.texts[0]).score;
    const double si = score_text(f.model, f.vocab, f.texts[i]).score;
    if (si > s0) {
      low = f.texts[0];
      high = f.texts[i];
    } else if (si < s0) {
      low = f.texts[i];
      high = f.texts[0];
    }
  }
  REQUIRE_FALSE(high.empty());
  REQUIRE(pair_expert_decide(f.model, f.vocab, low, high) == PairAnswer::A);
  REQUIRE(pair_expert_decide(f.model, f.vocab, high, low) == PairAnswer::B);
  REQUIRE(pair_expert_decide(f.model, f.vocab, low, low) == PairAnswer::A);
  REQUIRE_THROWS_AS(pair_expert_decide(f.model, f.vocab, "", low), UsageError);
  REQUIRE_THROWS_AS(pair_expert_decide(f.model, f.vocab, low, ""), UsageError);
}

TEST_CASE("threaded scoring returns the same values in the same order") {
  ScoringFixture f;
  std::vector<RawExample> inputs;
  for (std::size_t i = 0; i < f.texts.size(); ++i)
    inputs.push_back({f.texts[i], i % 2 ? std::optional<Label>(Label::ID)
                                        : std::nullopt});
  auto one = score_many(f.model, f.vocab, inputs, 1);
  auto three = score_many(f.model, f.vocab, inputs, 3);
  auto eight = score_many(f.model, f.vocab, inputs, 8);
  REQUIRE(one.size() == inputs.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    REQUIRE(one[i].text == inputs[i].text);
    REQUIRE(one[i].label == inputs[i].label);
    REQUIRE(one[i].score == three[i].score);
    REQUIRE(one[i].score == eight[i].score);
  }
  REQUIRE(score_many(f.model, f.vocab, {}, 4).empty());

  std::vector<RawExample> poisoned = inputs;
  poisoned[5].text = "";
  REQUIRE_THROWS_AS(score_many(f.model, f.vocab, poisoned, 3), UsageError);
}

TEST_CASE("ranking metrics agree with pair enumeration and threshold sweeps") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (bool ties : {false, true}) {
      const auto data = random_scores(seed, ties);
      INFO("seed " << seed << " ties " << ties);
      REQUIRE(auroc(data) == Approx(oracles::pairwise_auroc(data)).margin(1e-12));
      REQUIRE(aupr(data) ==
              Approx(oracles::sweep_average_precision(data)).margin(1e-12));
      REQUIRE(far95(data, 0.95) ==
              Approx(oracles::sweep_far(data, 0.95)).margin(1e-12));
      REQUIRE(far95(data, 0.5) ==
              Approx(oracles::sweep_far(data, 0.5)).margin(1e-12));
    }
  }
}

TEST_CASE("metric values on hand-worked configurations") {
  // Perfect separation.
  std::vector<LabeledScore> sep = {
      {0.1, false}, {0.2, false}, {0.5, true}, {0.6, true}};
  REQUIRE(auroc(sep) == 1.0);
  REQUIRE(aupr(sep) == 1.0);
  REQUIRE(far95(sep) == 0.0);

  // Perfectly inverted.
  std::vector<LabeledScore> inv = {
      {0.5, true}, {0.6, true}, {0.9, false}, {1.0, false}};
  REQUIRE(auroc(inv) == 0.0);
  REQUIRE(far95(inv) == 1.0);

  // Identical score multisets: chance ranking, full false-alarm rate.
  std::vector<LabeledScore> same = {
      {1.0, false}, {2.0, false}, {1.0, true}, {2.0, true}};
  REQUIRE(auroc(same) == 0.5);
  REQUIRE(aupr(same) == 0.5);  // equals prevalence
  REQUIRE(far95(same) == 1.0);

  // Interleaved classes, no ties.  Groups descending: {4: ood}, {3: id},
  // {2: ood} gives AP = 0.5*1 + 0.5*(2/3).
  std::vector<LabeledScore> inter = {{4.0, true}, {3.0, false}, {2.0, true}};
  REQUIRE(aupr(inter) == Approx(0.5 + 0.5 * (2.0 / 3.0)).margin(1e-15));

  // A tie group mixing classes: its precision applies to the whole recall
  // increment at once, so ordering within the group cannot matter.
  std::vector<LabeledScore> tied = {{4.0, true}, {4.0, false}, {2.0, true}};
  REQUIRE(aupr(tied) == Approx(0.5 * 0.5 + 0.5 * (2.0 / 3.0)).margin(1e-15));
  std::vector<LabeledScore> tied_flipped = {
      {4.0, false}, {4.0, true}, {2.0, true}};
  REQUIRE(aupr(tied_flipped) == aupr(tied));

  // Thresholds sit just below scores: with 20 anomalous examples, the 19th
  // highest already reaches 95% recall, so the nominal class below stays
  // clean.
  std::vector<LabeledScore> edge;
  for (int i = 1; i <= 19; ++i)
    edge.push_back({10.0 + static_cast<double>(i), true});
  edge.push_back({-5.0, true});
  for (int i = 0; i < 10; ++i)
    edge.push_back({static_cast<double>(i) * 0.1, false});
  REQUIRE(far95(edge, 0.95) == 0.0);
  REQUIRE(far95(edge, 0.96) == 1.0);  // must now catch the straggler too
  REQUIRE(far95(edge, 1.0) == 1.0);
}

TEST_CASE("metrics reject degenerate inputs") {
  std::vector<LabeledScore> one_class = {{1.0, true}, {2.0, true}};
  REQUIRE_THROWS_AS(auroc(one_class), UsageError);
  REQUIRE_THROWS_AS(aupr(one_class), UsageError);
  REQUIRE_THROWS_AS(far95(one_class), UsageError);
  REQUIRE_THROWS_AS(compute_metrics(one_class), UsageError);

  std::vector<LabeledScore> has_nan = {
      {std::numeric_limits<double>::quiet_NaN(), false}, {1.0, true}};
  REQUIRE_THROWS_AS(auroc(has_nan), UsageError);
  std::vector<LabeledScore> mixed = {{1.0, false}, {2.0, true}};
  REQUIRE_THROWS_AS(far95(mixed, 0.0), UsageError);
  REQUIRE_THROWS_AS(far95(mixed, 1.5), UsageError);
}

TEST_CASE("histograms share equal-width bins across both classes") {
  std::vector<LabeledScore> data;
  for (int i = 0; i < 30; ++i)
    data.push_back({static_cast<double>(i) / 29.0, i % 3 == 0});
  Histogram h = histogram_bins(data, 10);
  REQUIRE(h.bin_low.size() == 10);
  REQUIRE(h.bin_low.front() == 0.0);
  REQUIRE(h.bin_high.back() == 1.0);
  std::size_t id_total = 0, ood_total = 0;
  for (std::size_t b = 0; b < 10; ++b) {
    id_total += h.id_count[b];
    ood_total += h.ood_count[b];
    REQUIRE(h.bin_low[b] < h.bin_high[b]);
  }
  REQUIRE(id_total == 20);
  REQUIRE(ood_total == 10);
  // The maximum score lands in the last bin, not one past it.
  REQUIRE(h.id_count[9] + h.ood_count[9] >= 1);

  // Degenerate range: a single widened bin holds everything.
  std::vector<LabeledScore> flat = {{2.0, false}, {2.0, true}, {2.0, true}};
  Histogram hf = histogram_bins(flat, 5);
  REQUIRE(hf.id_count[0] == 1);
  REQUIRE(hf.ood_count[0] == 2);
  REQUIRE(hf.bin_high.back() == 3.0);

  REQUIRE_THROWS_AS(histogram_bins(flat, 1), UsageError);
  REQUIRE_THROWS_AS(histogram_bins({}, 5), UsageError);

  const std::string csv = histogram_csv(hf);
  REQUIRE(csv.rfind("bin_low,bin_high,id_count,ood_count\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 6);  // header + 5 bins
  REQUIRE(csv.find("1,2\n") != std::string::npos);  // bin 0 counts
}

TEST_CASE("the aggregate report serializes losslessly") {
  const auto data = random_scores(42, true);
  MetricsReport r = compute_metrics(data, 12);
  REQUIRE(r.n_id + r.n_ood == data.size());
  REQUIRE(r.histogram.bin_low.size() == 12);
  REQUIRE(r.auroc == auroc(data));

  nlohmann::json j = report_json(r);
  MetricsReport back = report_from_json(j);
  REQUIRE(back.auroc == r.auroc);
  REQUIRE(back.aupr == r.aupr);
  REQUIRE(back.far95 == r.far95);
  REQUIRE(back.n_id == r.n_id);
  REQUIRE(back.n_ood == r.n_ood);

  REQUIRE_THROWS_AS(report_from_json(nlohmann::json{{"auroc", 1.0}}),
                    ParseError);
}
