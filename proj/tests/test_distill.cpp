// Knowledge distillation: configuration, working-set construction, the
// prediction and intermediate losses, their exact combination boundaries,
// top-K selection plumbing, gradient checks, and the training loop.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <oodlm/distill.hpp>
#include <oodlm/gradcheck.hpp>

using namespace oodlm;
using Catch::Approx;

namespace {

struct Fixture {
  Vocab vocab;
  std::vector<EncodedExample> corpus;
  ModelConfig teacher_cfg;
  ModelConfig student_cfg;

  explicit Fixture(std::uint64_t seed = 7, int d_student = 16) {
    MarkovGrammar g = id_grammar(10, 3, 8);
    auto texts = gen_markov_corpus(g, 24, seed);
    vocab = Vocab::build(texts, TokenizerMode::Whitespace);
    for (const auto& t : texts) corpus.push_back(encode(t, vocab, 16));
    teacher_cfg.n_layers = 2;
    teacher_cfg.d_model = 16;
    teacher_cfg.n_heads = 2;
    teacher_cfg.d_ff = 32;
    teacher_cfg.vocab_size = static_cast<int>(vocab.size());
    teacher_cfg.max_len = 16;
    teacher_cfg.seed = 100;
    teacher_cfg.dropout = 0.0;
    student_cfg = teacher_cfg;
    student_cfg.d_model = d_student;
    student_cfg.n_heads = 2;
    student_cfg.d_ff = 2 * d_student;
    student_cfg.seed = 200;
  }

  DistillConfig dconfig(double lambda, std::size_t k = 2) const {
    DistillConfig dc;
    dc.lambda = lambda;
    dc.k = k;
    dc.student_layers = DistillConfig::default_student_layers(student_cfg.n_layers);
    dc.teacher_layers = DistillConfig::default_teacher_layers(teacher_cfg.n_layers);
    return dc;
  }
};

}  // namespace

TEST_CASE("default layer choices cover the middle band and all teacher "
          "blocks") {
  REQUIRE(DistillConfig::default_student_layers(6) ==
          std::vector<int>{2, 3, 4});
  REQUIRE(DistillConfig::default_student_layers(4) ==
          std::vector<int>{1, 2, 3});
  REQUIRE(DistillConfig::default_student_layers(2) == std::vector<int>{1});
  REQUIRE(DistillConfig::default_student_layers(1) == std::vector<int>{1});
  REQUIRE(DistillConfig::default_teacher_layers(6) ==
          std::vector<int>{1, 2, 3, 4, 5, 6});
  REQUIRE(DistillConfig::default_teacher_layers(1) == std::vector<int>{1});
}

TEST_CASE("distillation config validation") {
  Fixture f;
  DistillConfig dc = f.dconfig(0.5);
  REQUIRE_NOTHROW(dc.validate(f.student_cfg, f.teacher_cfg));

  DistillConfig bad = dc;
  bad.lambda = -0.01;
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.lambda = 1.01;
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.k = 0;
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.k = 3;  // only two candidate teacher layers
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.student_layers = {1, 1};
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.teacher_layers = {1, 3};  // teacher has two blocks
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.student_layers = {-1};
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
  bad = dc;
  bad.student_layers.clear();
  REQUIRE_THROWS_AS(bad.validate(f.student_cfg, f.teacher_cfg), UsageError);
}

TEST_CASE("the working set starts from identity projections and uniform "
          "weights") {
  Fixture f(7, 8);  // student narrower than the teacher
  TransformerLM<float> teacher(f.teacher_cfg);
  DistillState<float> st =
      make_distill_state(teacher, f.student_cfg, f.dconfig(0.5));

  REQUIRE(st.projections.size() == 2);
  for (const auto& w : st.projections) {
    REQUIRE(w.rows() == 16);
    REQUIRE(w.cols() == 8);
    REQUIRE(w.requires_grad());
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j)
        REQUIRE(w.values()[i * w.cols() + j] == (i == j ? 1.0f : 0.0f));
  }
  REQUIRE(st.beta_logits.numel() == 2);
  REQUIRE(st.beta_logits.requires_grad());
  REQUIRE(st.beta_logits.values() == std::vector<float>{0.0f, 0.0f});

  ModelConfig other_vocab = f.student_cfg;
  other_vocab.vocab_size += 1;
  REQUIRE_THROWS_AS(make_distill_state(teacher, other_vocab, f.dconfig(0.5)),
                    UsageError);
}

TEST_CASE("matching the teacher exactly zeroes the prediction loss") {
  Fixture f;
  TransformerLM<float> teacher(f.teacher_cfg);
  // Student built from the identical config (including seed) so both nets
  // produce bitwise-identical logits.
  DistillConfig dc = f.dconfig(1.0);
  DistillState<float> st = make_distill_state(teacher, f.teacher_cfg, dc);
  Batch b = pack_batch(f.corpus, 0, 6);
  const float loss = total_distill_loss(st, b).item();
  REQUIRE(loss == 0.0f);
}

TEST_CASE("vector similarity is the negated distance to the projected "
          "teacher state") {
  Tensor<float> hs = Tensor<float>::from({1, 2}, {1.0f, 2.0f});
  Tensor<float> ht = Tensor<float>::from({1, 2}, {3.0f, 4.0f});
  Tensor<float> w = Tensor<float>::zeros({2, 2});
  w.values()[0] = 1.0f;
  w.values()[3] = 1.0f;
  const float sim = layer_similarity(hs, ht, w).item();
  REQUIRE(sim == Approx(-std::sqrt(8.0)).margin(1e-6));
  REQUIRE(layer_similarity(hs, hs, w).item() == 0.0f);

  Tensor<float> w_bad = Tensor<float>::zeros({3, 2});
  REQUIRE_THROWS_AS(layer_similarity(hs, ht, w_bad), ShapeError);
}

TEST_CASE("top-k selection is dense, deterministic, and within range") {
  Fixture f;
  TransformerLM<float> teacher(f.teacher_cfg);
  DistillState<float> st =
      make_distill_state(teacher, f.student_cfg, f.dconfig(0.5));
  Batch b = pack_batch(f.corpus, 0, 5);
  const std::size_t n_tokens = flatten(b).ids.size();

  DistillSelection sel = compute_selection(st, b);
  REQUIRE(sel.per_layer.size() == st.cfg.student_layers.size());
  for (const auto& plan : sel.per_layer) {
    REQUIRE(plan.size() == n_tokens * st.cfg.k);
    for (std::size_t c : plan) REQUIRE(c < st.cfg.teacher_layers.size());
    // Per token, the chosen columns are distinct.
    for (std::size_t t = 0; t < n_tokens; ++t)
      REQUIRE(plan[t * 2] != plan[t * 2 + 1]);
  }
  DistillSelection again = compute_selection(st, b);
  for (std::size_t i = 0; i < sel.per_layer.size(); ++i)
    REQUIRE(sel.per_layer[i] == again.per_layer[i]);

  // Pinning the selection at the current parameters reproduces the free loss.
  const float free_loss = total_distill_loss(st, b).item();
  const float pinned_loss = total_distill_loss(st, b, nullptr, &sel).item();
  REQUIRE(free_loss == pinned_loss);

  DistillSelection wrong;
  wrong.per_layer.resize(sel.per_layer.size() + 1);
  REQUIRE_THROWS_AS(total_distill_loss(st, b, nullptr, &wrong), UsageError);
}

TEST_CASE("the combination weight hits both boundaries exactly") {
  Fixture f;
  TransformerLM<float> teacher(f.teacher_cfg);
  DistillState<float> st =
      make_distill_state(teacher, f.student_cfg, f.dconfig(0.5));
  Batch b = pack_batch(f.corpus, 0, 6);

  // Pieces computed by hand from the same forward passes.
  const FlatBatch fb = flatten(b);
  const TargetIndex ti = targets_of(fb);
  ForwardOutput<float> tea, stu;
  {
    GradPause<float> pause;
    tea = teacher.forward(fb);
    stu = st.student.forward(fb);
  }
  const float pred = prediction_distill_loss(tea, stu, ti).item();
  float inter = 0.0f;
  {
    Tensor<float> sum;
    for (std::size_t li = 0; li < st.cfg.student_layers.size(); ++li) {
      Tensor<float> term = intermediate_layer_loss(
          st, tea, stu, st.cfg.student_layers[li]);
      sum = li == 0 ? term : add(sum, term);
    }
    inter = sum.item();
  }
  REQUIRE(pred > 0.0f);   // different nets
  REQUIRE(inter > 0.0f);  // similarities are strictly negative here

  st.cfg.lambda = 1.0;
  REQUIRE(total_distill_loss(st, b).item() == pred);
  st.cfg.lambda = 0.0;
  REQUIRE(total_distill_loss(st, b).item() == inter);
  st.cfg.lambda = 0.25;
  REQUIRE(total_distill_loss(st, b).item() ==
          Approx(0.25 * pred + 0.75 * inter).margin(1e-6));

  DistillState<float> detached = std::move(st);
  detached.teacher = nullptr;
  REQUIRE_THROWS_AS(total_distill_loss(detached, b), UsageError);
}

TEST_CASE("intermediate loss rejects layers outside the configured set") {
  Fixture f;
  TransformerLM<float> teacher(f.teacher_cfg);
  DistillState<float> st =
      make_distill_state(teacher, f.student_cfg, f.dconfig(0.0));
  Batch b = pack_batch(f.corpus, 0, 3);
  const FlatBatch fb = flatten(b);
  GradPause<float> pause;
  auto tea = teacher.forward(fb);
  auto stu = st.student.forward(fb);
  REQUIRE_THROWS_AS(intermediate_layer_loss(st, tea, stu, 2), UsageError);
}

TEST_CASE("distillation gradients match central differences") {
  Vocab v = Vocab::build({"a b c", "c a b d"}, TokenizerMode::Whitespace);
  ModelConfig tcfg;
  tcfg.n_layers = 2;
  tcfg.d_model = 4;
  tcfg.n_heads = 2;
  tcfg.d_ff = 8;
  tcfg.vocab_size = static_cast<int>(v.size());
  tcfg.max_len = 8;
  tcfg.seed = 31;
  tcfg.dropout = 0.0;
  ModelConfig scfg = tcfg;
  scfg.seed = 32;
  TransformerLM<double> teacher(tcfg);

  DistillConfig dc;
  dc.lambda = 0.5;
  dc.k = 2;
  dc.student_layers = {1};
  dc.teacher_layers = {1, 2};
  DistillState<double> st = make_distill_state(teacher, scfg, dc);

  std::vector<EncodedExample> ex = {encode("a b c", v, 8),
                                    encode("c a b d", v, 8)};
  Batch b = pack_batch(ex, 0, 2);
  // Freeze the per-token selection so the probed function stays smooth.
  const DistillSelection sel = compute_selection(st, b);
  auto report = grad_check<double>(
      [&] { return total_distill_loss(st, b, nullptr, &sel); },
      distill_parameters(st), 5e-6);
  INFO("worst rel err " << report.max_rel_err << " at param "
                        << report.worst_param << " coord "
                        << report.worst_coord << " analytic "
                        << report.worst_analytic << " numeric "
                        << report.worst_numeric);
  // Same bound as the whole-model check: the difference quotient's own
  // noise floor on near-zero coordinates sits around 7e-5.
  REQUIRE(report.ok(2e-4));
}

TEST_CASE("distillation trains the student and the alignment parameters") {
  Fixture f;
  TransformerLM<float> teacher(f.teacher_cfg);
  DistillConfig dc = f.dconfig(0.5);
  dc.train.epochs = 2;
  dc.train.batch_size = 8;
  dc.train.seed = 5;
  DistillState<float> st = make_distill_state(teacher, f.student_cfg, dc);

  const auto teacher_before = teacher.named_parameters()[0].second.values();
  const auto student_before = st.student.named_parameters()[0].second.values();
  const auto proj_before = st.projections[0].values();
  const auto beta_before = st.beta_logits.values();

  TrainCurve curve = train_student(st, f.corpus);
  REQUIRE(curve.epoch_losses.size() == 2);
  REQUIRE(std::isfinite(curve.initial_loss));
  REQUIRE(curve.epoch_losses.back() < curve.initial_loss);

  REQUIRE(teacher.named_parameters()[0].second.values() == teacher_before);
  REQUIRE(st.student.named_parameters()[0].second.values() != student_before);
  REQUIRE(st.projections[0].values() != proj_before);
  REQUIRE(st.beta_logits.values() != beta_before);

  REQUIRE_THROWS_AS(train_student(st, {}), UsageError);
}

TEST_CASE("with the full weight on prediction the alignment parameters stay "
          "frozen") {
  Fixture f;
  TransformerLM<float> teacher(f.teacher_cfg);
  DistillConfig dc = f.dconfig(1.0);
  dc.train.epochs = 1;
  dc.train.batch_size = 8;
  dc.train.seed = 6;
  DistillState<float> st = make_distill_state(teacher, f.student_cfg, dc);

  REQUIRE(distill_parameters(st).size() == st.student.parameters().size());
  const auto proj_before = st.projections[0].values();
  const auto student_before = st.student.named_parameters()[0].second.values();
  TrainCurve curve = train_student(st, f.corpus);
  REQUIRE(curve.epoch_losses.size() == 1);
  REQUIRE(st.projections[0].values() == proj_before);
  REQUIRE(st.beta_logits.values() == std::vector<float>{0.0f, 0.0f});
  REQUIRE(st.student.named_parameters()[0].second.values() != student_before);

  DistillState<float> half = make_distill_state(teacher, f.student_cfg,
                                                f.dconfig(0.5));
  REQUIRE(distill_parameters(half).size() ==
          half.student.parameters().size() + half.projections.size() + 1);
}
