#pragma once

// End-to-end run orchestration behind the CLI: synthetic corpus generation,
// the five training regimes, scoring, metric evaluation, paired comparison,
// and checkpoint inspection.  Every run directory gets a manifest recording
// the configuration hash, input file hashes, checkpoint paths, loss curves,
// and wall-clock time, written atomically.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "oodlm/checkpoint.hpp"
#include "oodlm/config.hpp"
#include "oodlm/distill.hpp"
#include "oodlm/metrics.hpp"
#include "oodlm/model.hpp"
#include "oodlm/scoring.hpp"
#include "oodlm/sha256.hpp"
#include "oodlm/text.hpp"

namespace oodlm {

// ---------------------------------------------------------------------------
// Shared helpers

inline std::string file_sha256(const std::string& path) {
  return sha256_hex(detail::read_file_bytes(path));
}

inline void write_text_atomic(const std::string& path,
                              const std::string& content) {
  detail::atomic_write_file(path, content);
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void require_file(const std::string& key, const std::string& path) {
  if (!std::filesystem::exists(path))
    throw ConfigError(key + ": file not found: " + path);
}

class WallClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

inline void log_line(bool quiet, const std::string& msg) {
  if (!quiet) std::cerr << msg << "\n";
}

}  // namespace detail

// Number of scoring threads actually used: the request (0 = hardware
// concurrency), capped by the DISTILL_OOD_THREADS environment variable when
// that is set.  Results never depend on this value.
inline std::size_t effective_score_threads(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    n = hw == 0 ? 1 : static_cast<std::size_t>(hw);
  }
  if (const char* env = std::getenv("DISTILL_OOD_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    } catch (const std::exception&) {
      throw ConfigError(
          std::string("DISTILL_OOD_THREADS must be a positive integer, got '") +
          env + "'");
    }
  }
  return std::max<std::size_t>(1, n);
}

// ---------------------------------------------------------------------------
// Configuration surface

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "regime",
      "seed",
      "tokenizer.mode",
      "model.n_layers",
      "model.d_model",
      "model.n_heads",
      "model.d_ff",
      "model.max_len",
      "model.dropout",
      "train.epochs",
      "train.batch_size",
      "train.lr",
      "train.beta1",
      "train.beta2",
      "train.eps",
      "train.weight_decay",
      "pretrain.epochs",
      "distill.lambda",
      "distill.k",
      "distill.student_layers",
      "distill.teacher_layers",
      "distill.teacher_checkpoint",
      "distill.student_init_checkpoint",
      "data.pretrain",
      "data.id_train",
      "synth.alphabet_size",
      "synth.len_min",
      "synth.len_max",
      "synth.n_pretrain",
      "synth.n_id_train",
      "synth.n_id_val",
      "synth.n_id_test",
      "synth.n_ood_test",
      "synth.n_pairs",
  };
  return keys;
}

inline void validate_config_keys(const KeyValueConfig& cfg) {
  cfg.require_known(known_config_keys(), {"synth.mix."});
}

inline TokenizerMode tokenizer_mode_from(const KeyValueConfig& cfg) {
  return parse_tokenizer_mode(cfg.get_str("tokenizer.mode", "whitespace"));
}

inline ModelConfig model_config_from(const KeyValueConfig& cfg,
                                     std::uint64_t seed) {
  ModelConfig m;
  m.n_layers = static_cast<int>(cfg.get_int("model.n_layers", 6));
  m.d_model = static_cast<int>(cfg.get_int("model.d_model", 64));
  m.n_heads = static_cast<int>(cfg.get_int("model.n_heads", 4));
  m.d_ff = static_cast<int>(cfg.get_int("model.d_ff", 256));
  m.max_len = static_cast<int>(cfg.get_int("model.max_len", 128));
  m.dropout = cfg.get_double("model.dropout", 0.1);
  m.seed = seed;
  return m;
}

inline TrainOptions train_options_from(const KeyValueConfig& cfg,
                                       std::uint64_t stage_seed) {
  TrainOptions t;
  t.epochs = static_cast<std::size_t>(cfg.get_int("train.epochs", 5));
  t.batch_size = static_cast<std::size_t>(cfg.get_int("train.batch_size", 8));
  t.adamw.lr = cfg.get_double("train.lr", 3e-4);
  t.adamw.beta1 = cfg.get_double("train.beta1", 0.9);
  t.adamw.beta2 = cfg.get_double("train.beta2", 0.999);
  t.adamw.eps = cfg.get_double("train.eps", 1e-8);
  t.adamw.weight_decay = cfg.get_double("train.weight_decay", 0.01);
  t.seed = stage_seed;
  return t;
}

// ---------------------------------------------------------------------------
// Corpus synthesis

struct SynthResult {
  std::map<std::string, std::string> output_hashes;  // path -> sha256
};

namespace detail {

inline std::string jsonl_line(const std::string& text,
                              std::optional<Label> label) {
  nlohmann::json j;
  j["text"] = text;
  if (label) j["label"] = label_str(*label);
  return j.dump() + "\n";
}

inline std::string corpus_jsonl(const std::vector<std::string>& texts,
                                std::optional<Label> label) {
  std::string out;
  for (const auto& t : texts) out += jsonl_line(t, label);
  return out;
}

}  // namespace detail

// Writes pretrain.jsonl, id_train.jsonl, id_val.jsonl, id_test.jsonl,
// ood_test.jsonl, and pairs.jsonl into the output directory, plus a
// manifest with their hashes.  Pretraining text mixes several grammars over
// the shared alphabet, including a small fraction of the anomalous grammar
// itself, so the pretrained model has seen (but not specialized to) it.
inline SynthResult run_synth(const KeyValueConfig& cfg,
                             const std::string& out_dir, bool quiet = false) {
  validate_config_keys(cfg);
  const detail::WallClock clock;
  const std::uint64_t seed = cfg.get_u64("seed", 0);
  const auto alphabet =
      static_cast<std::size_t>(cfg.get_int("synth.alphabet_size", 20));
  const auto len_min = static_cast<std::size_t>(cfg.get_int("synth.len_min", 6));
  const auto len_max =
      static_cast<std::size_t>(cfg.get_int("synth.len_max", 12));
  const auto n_pretrain =
      static_cast<std::size_t>(cfg.get_int("synth.n_pretrain", 6000));
  const auto n_id_train =
      static_cast<std::size_t>(cfg.get_int("synth.n_id_train", 4000));
  const auto n_id_val =
      static_cast<std::size_t>(cfg.get_int("synth.n_id_val", 500));
  const auto n_id_test =
      static_cast<std::size_t>(cfg.get_int("synth.n_id_test", 1000));
  const auto n_ood_test =
      static_cast<std::size_t>(cfg.get_int("synth.n_ood_test", 1000));
  const auto n_pairs =
      static_cast<std::size_t>(cfg.get_int("synth.n_pairs", 500));

  const MarkovGrammar id_g = id_grammar(alphabet, len_min, len_max);
  const MarkovGrammar ood_g = ood_grammar(alphabet, len_min, len_max);

  std::vector<MixtureComponent> mix = {
      {"id", id_g, cfg.get_double("synth.mix.id", 0.30)},
      {"ood", ood_g, cfg.get_double("synth.mix.ood", 0.08)},
      {"uniform", uniform_grammar(alphabet, len_min, len_max),
       cfg.get_double("synth.mix.uniform", 0.22)},
      {"reverse", reverse_band_grammar(alphabet, len_min, len_max),
       cfg.get_double("synth.mix.reverse", 0.20)},
      {"skip", skip_band_grammar(alphabet, len_min, len_max),
       cfg.get_double("synth.mix.skip", 0.20)},
  };
  {
    std::set<std::string> valid;
    for (const auto& c : mix) valid.insert("synth.mix." + c.name);
    for (const auto& [k, v] : cfg.entries())
      if (k.rfind("synth.mix.", 0) == 0 && !valid.count(k))
        throw ConfigError("unknown mixture component '" + k +
                          "' (valid: synth.mix.id, synth.mix.ood, "
                          "synth.mix.uniform, synth.mix.reverse, "
                          "synth.mix.skip)");
  }

  detail::ensure_dir(out_dir);
  SynthResult result;
  auto emit = [&](const std::string& name, const std::string& content) {
    const std::string path = detail::join_path(out_dir, name);
    write_text_atomic(path, content);
    result.output_hashes[path] = sha256_hex(content);
  };

  emit("id_train.jsonl",
       detail::corpus_jsonl(gen_markov_corpus(id_g, n_id_train, mix64(seed, 1)),
                            Label::ID));
  emit("id_val.jsonl",
       detail::corpus_jsonl(gen_markov_corpus(id_g, n_id_val, mix64(seed, 2)),
                            Label::ID));
  emit("id_test.jsonl",
       detail::corpus_jsonl(gen_markov_corpus(id_g, n_id_test, mix64(seed, 3)),
                            Label::ID));
  emit("ood_test.jsonl",
       detail::corpus_jsonl(
           gen_markov_corpus(ood_g, n_ood_test, mix64(seed, 4)), Label::OOD));
  emit("pretrain.jsonl",
       detail::corpus_jsonl(
           gen_pretrain_corpus(mix, n_pretrain, mix64(seed, 5)).texts,
           std::nullopt));
  {
    const auto machine = gen_markov_corpus(id_g, n_pairs, mix64(seed, 6));
    const auto human = gen_markov_corpus(ood_g, n_pairs, mix64(seed, 7));
    std::string content;
    for (std::size_t i = 0; i < n_pairs; ++i) {
      nlohmann::json j;
      j["machine_text"] = machine[i];
      j["human_text"] = human[i];
      content += j.dump() + "\n";
    }
    emit("pairs.jsonl", content);
  }

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["command"] = "synth";
  manifest["seed"] = seed;
  manifest["config_sha256"] = sha256_hex(cfg.canonical());
  manifest["config"] = cfg.entries();
  manifest["outputs"] = result.output_hashes;
  manifest["wall_clock_seconds"] = clock.seconds();
  write_text_atomic(detail::join_path(out_dir, "manifest.json"),
                    manifest.dump(2) + "\n");
  detail::log_line(quiet, "[synth] wrote " +
                              std::to_string(result.output_hashes.size()) +
                              " files to " + out_dir);
  return result;
}

// ---------------------------------------------------------------------------
// Training regimes

struct TrainResult {
  std::string model_checkpoint;
  nlohmann::json manifest;
};

namespace detail {

inline nlohmann::json curve_json(const std::string& stage,
                                 const TrainCurve& curve) {
  nlohmann::json j;
  j["stage"] = stage;
  j["initial_loss"] = curve.initial_loss;
  j["epoch_losses"] = curve.epoch_losses;
  return j;
}

// Epoch-end hook: persist the latest healthy state so a later numeric
// failure aborts with a usable checkpoint on disk.
inline std::function<void(std::size_t, double)> epoch_logger_and_saver(
    const std::string& stage, std::size_t total_epochs, bool quiet,
    const TransformerLM<float>& model, const Vocab& vocab,
    const std::string& last_good_path) {
  return [=, &model, &vocab](std::size_t epoch, double loss) {
    save_checkpoint(model, vocab, last_good_path);
    detail::log_line(quiet, "[" + stage + "] epoch " +
                                std::to_string(epoch + 1) + "/" +
                                std::to_string(total_epochs) +
                                " loss=" + std::to_string(loss));
  };
}

inline void require_same_architecture(const ModelConfig& a,
                                      const ModelConfig& b,
                                      const std::string& what) {
  if (a.n_layers != b.n_layers || a.d_model != b.d_model ||
      a.n_heads != b.n_heads || a.d_ff != b.d_ff ||
      a.vocab_size != b.vocab_size || a.max_len != b.max_len)
    throw ConfigError(what + ": architecture mismatch");
}

}  // namespace detail

inline TrainResult run_train(const KeyValueConfig& cfg,
                             const std::string& out_dir, bool quiet = false) {
  validate_config_keys(cfg);
  const detail::WallClock clock;
  const std::string regime = cfg.require_str("regime");
  static const std::set<std::string> regimes = {
      "teacher_finetune", "from_scratch", "distill", "ablation_no_intermediate",
      "ablation_pretrained_student"};
  if (!regimes.count(regime))
    throw ConfigError(
        "unknown regime '" + regime +
        "' (valid: teacher_finetune, from_scratch, distill, "
        "ablation_no_intermediate, ablation_pretrained_student)");

  const std::uint64_t seed = cfg.get_u64("seed", 0);
  const TokenizerMode mode = tokenizer_mode_from(cfg);
  const bool is_distill_regime = regime == "distill" ||
                                 regime == "ablation_no_intermediate" ||
                                 regime == "ablation_pretrained_student";

  // Regime-specific requirements, checked before any compute.
  const std::string id_train_path = cfg.get_str("data.id_train", "");
  if (id_train_path.empty())
    throw ConfigError("missing required config key 'data.id_train'");
  detail::require_file("data.id_train", id_train_path);
  std::string pretrain_path, teacher_ckpt_path, student_init_path;
  if (regime == "teacher_finetune") {
    pretrain_path = cfg.get_str("data.pretrain", "");
    if (pretrain_path.empty())
      throw ConfigError("regime teacher_finetune requires 'data.pretrain'");
    detail::require_file("data.pretrain", pretrain_path);
  }
  if (is_distill_regime) {
    teacher_ckpt_path = cfg.get_str("distill.teacher_checkpoint", "");
    if (teacher_ckpt_path.empty())
      throw ConfigError("regime " + regime +
                        " requires 'distill.teacher_checkpoint'");
    detail::require_file("distill.teacher_checkpoint", teacher_ckpt_path);
  }
  if (regime == "ablation_pretrained_student") {
    student_init_path = cfg.get_str("distill.student_init_checkpoint", "");
    if (student_init_path.empty())
      throw ConfigError("regime ablation_pretrained_student requires "
                        "'distill.student_init_checkpoint'");
    detail::require_file("distill.student_init_checkpoint", student_init_path);
  }

  detail::ensure_dir(out_dir);
  const std::string model_ckpt = detail::join_path(out_dir, "model.ckpt");
  const std::string last_good = detail::join_path(out_dir, "last_good.ckpt");

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["command"] = "train";
  manifest["regime"] = regime;
  manifest["seed"] = seed;
  manifest["config_sha256"] = sha256_hex(cfg.canonical());
  manifest["config"] = cfg.entries();
  nlohmann::json inputs = nlohmann::json::object();
  inputs[id_train_path] = file_sha256(id_train_path);
  nlohmann::json stages = nlohmann::json::array();
  nlohmann::json checkpoints = nlohmann::json::object();

  auto abort_with_last_good = [&](const NumericError& e) -> void {
    if (std::filesystem::exists(last_good))
      throw NumericError(std::string(e.what()) +
                         "; last good checkpoint: " + last_good);
    throw;
  };

  if (regime == "teacher_finetune") {
    inputs[pretrain_path] = file_sha256(pretrain_path);
    const auto raw_pre = read_jsonl(pretrain_path);
    const auto raw_id = read_jsonl(id_train_path);
    std::vector<std::string> vocab_texts;
    vocab_texts.reserve(raw_pre.size() + raw_id.size());
    for (const auto& r : raw_pre) vocab_texts.push_back(r.text);
    for (const auto& r : raw_id) vocab_texts.push_back(r.text);
    const Vocab vocab = Vocab::build(vocab_texts, mode);

    ModelConfig mc = model_config_from(cfg, seed);
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.validate();
    TransformerLM<float> model(mc);
    const auto max_len = static_cast<std::size_t>(mc.max_len);

    std::vector<EncodedExample> pre_corpus, id_corpus;
    for (const auto& r : raw_pre)
      pre_corpus.push_back(encode(r.text, vocab, max_len, r.label));
    for (const auto& r : raw_id)
      id_corpus.push_back(encode(r.text, vocab, max_len, r.label));

    TrainOptions pre_opts = train_options_from(cfg, mix64(seed, 11));
    pre_opts.epochs =
        static_cast<std::size_t>(cfg.get_int("pretrain.epochs", 3));
    pre_opts.on_epoch = detail::epoch_logger_and_saver(
        "pretrain", pre_opts.epochs, quiet, model, vocab, last_good);
    try {
      stages.push_back(
          detail::curve_json("pretrain", train_clm(model, pre_corpus, pre_opts)));
    } catch (const NumericError& e) {
      abort_with_last_good(e);
    }
    const std::string pretrain_ckpt =
        detail::join_path(out_dir, "pretrain.ckpt");
    save_checkpoint(model, vocab, pretrain_ckpt);
    checkpoints["pretrain"] = pretrain_ckpt;

    TrainOptions ft_opts = train_options_from(cfg, mix64(seed, 12));
    ft_opts.on_epoch = detail::epoch_logger_and_saver(
        "finetune", ft_opts.epochs, quiet, model, vocab, last_good);
    try {
      stages.push_back(
          detail::curve_json("finetune", train_clm(model, id_corpus, ft_opts)));
    } catch (const NumericError& e) {
      abort_with_last_good(e);
    }
    save_checkpoint(model, vocab, model_ckpt);
  } else if (regime == "from_scratch") {
    const auto raw_id = read_jsonl(id_train_path);
    std::vector<std::string> vocab_texts;
    for (const auto& r : raw_id) vocab_texts.push_back(r.text);
    const Vocab vocab = Vocab::build(vocab_texts, mode);

    ModelConfig mc = model_config_from(cfg, seed);
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.validate();
    TransformerLM<float> model(mc);
    std::vector<EncodedExample> corpus;
    for (const auto& r : raw_id)
      corpus.push_back(
          encode(r.text, vocab, static_cast<std::size_t>(mc.max_len), r.label));

    TrainOptions opts = train_options_from(cfg, mix64(seed, 13));
    opts.on_epoch = detail::epoch_logger_and_saver("train", opts.epochs, quiet,
                                                   model, vocab, last_good);
    try {
      stages.push_back(detail::curve_json("train", train_clm(model, corpus, opts)));
    } catch (const NumericError& e) {
      abort_with_last_good(e);
    }
    save_checkpoint(model, vocab, model_ckpt);
  } else {
    // Distillation regimes.
    inputs[teacher_ckpt_path] = file_sha256(teacher_ckpt_path);
    LoadedModel teacher = load_checkpoint(teacher_ckpt_path);
    const Vocab& vocab = teacher.vocab;

    ModelConfig student_cfg = model_config_from(cfg, mix64(seed, 21));
    student_cfg.vocab_size = teacher.model.config().vocab_size;
    student_cfg.max_len = teacher.model.config().max_len;
    student_cfg.validate();

    DistillConfig dc;
    dc.lambda = regime == "ablation_no_intermediate"
                    ? 1.0
                    : cfg.get_double("distill.lambda", 0.5);
    dc.k = static_cast<std::size_t>(cfg.get_int("distill.k", 2));
    dc.student_layers = cfg.get_int_list(
        "distill.student_layers",
        DistillConfig::default_student_layers(student_cfg.n_layers));
    dc.teacher_layers = cfg.get_int_list(
        "distill.teacher_layers",
        DistillConfig::default_teacher_layers(teacher.model.config().n_layers));
    dc.train = train_options_from(cfg, mix64(seed, 15));

    DistillState<float> state =
        make_distill_state(teacher.model, student_cfg, dc);

    if (regime == "ablation_pretrained_student") {
      inputs[student_init_path] = file_sha256(student_init_path);
      LoadedModel init = load_checkpoint(student_init_path);
      detail::require_same_architecture(init.model.config(),
                                        state.student.config(),
                                        "distill.student_init_checkpoint");
      if (init.vocab.tokens() != vocab.tokens() ||
          init.vocab.mode() != vocab.mode())
        throw ConfigError("distill.student_init_checkpoint: vocabulary "
                          "differs from the teacher's");
      const auto& src = init.model.named_parameters();
      auto dst = state.student.named_parameters();
      for (std::size_t i = 0; i < src.size(); ++i)
        dst[i].second.values() = src[i].second.values();
    }

    const auto raw_id = read_jsonl(id_train_path);
    std::vector<EncodedExample> corpus;
    for (const auto& r : raw_id)
      corpus.push_back(encode(r.text, vocab,
                              static_cast<std::size_t>(student_cfg.max_len),
                              r.label));

    state.cfg.train.on_epoch = detail::epoch_logger_and_saver(
        "distill", state.cfg.train.epochs, quiet, state.student, vocab,
        last_good);
    try {
      stages.push_back(
          detail::curve_json("distill", train_student(state, corpus)));
    } catch (const NumericError& e) {
      abort_with_last_good(e);
    }
    save_checkpoint(state.student, vocab, model_ckpt);

    // Auxiliary distillation parameters, for inspection/reuse.
    std::vector<std::pair<std::string, Tensor<float>>> extras;
    for (std::size_t j = 0; j < state.projections.size(); ++j)
      extras.emplace_back(
          "projection." + std::to_string(state.cfg.teacher_layers[j]),
          state.projections[j]);
    extras.emplace_back("beta_logits", state.beta_logits);
    nlohmann::json extra_header;
    extra_header["kind"] = "distill_extras";
    extra_header["lambda"] = state.cfg.lambda;
    extra_header["k"] = state.cfg.k;
    extra_header["teacher_layers"] = state.cfg.teacher_layers;
    extra_header["student_layers"] = state.cfg.student_layers;
    const std::string extras_path =
        detail::join_path(out_dir, "distill_extras.ckpt");
    save_tensor_file(extras, std::move(extra_header), extras_path);
    checkpoints["distill_extras"] = extras_path;
  }

  checkpoints["model"] = model_ckpt;
  manifest["inputs"] = std::move(inputs);
  manifest["checkpoints"] = checkpoints;
  manifest["stages"] = std::move(stages);
  manifest["wall_clock_seconds"] = clock.seconds();
  write_text_atomic(detail::join_path(out_dir, "manifest.json"),
                    manifest.dump(2) + "\n");
  detail::log_line(quiet, "[train] " + regime + " -> " + model_ckpt);
  return TrainResult{model_ckpt, std::move(manifest)};
}

// ---------------------------------------------------------------------------
// Scoring

struct ScoreArgs {
  std::string checkpoint;
  std::string input;
  std::string output;
  std::size_t threads = 0;  // 0 = hardware concurrency (env-capped)
  std::optional<double> gamma;
  std::string calibrate_path;  // ID validation JSONL; scored with the model
  double quantile = 0.95;
  bool quiet = false;
};

struct ScoreResult {
  std::vector<ScoredExample> scored;
  std::optional<Threshold> threshold;
};

inline ScoreResult run_score(const ScoreArgs& args) {
  if (args.gamma && !args.calibrate_path.empty())
    throw UsageError("pass either a fixed gamma or a calibration file, "
                     "not both");
  const LoadedModel loaded = load_checkpoint(args.checkpoint);
  const auto inputs = read_jsonl(args.input);
  const std::size_t threads = effective_score_threads(args.threads);

  ScoreResult result;
  result.scored = score_many(loaded.model, loaded.vocab, inputs, threads);

  if (args.gamma) {
    if (!std::isfinite(*args.gamma))
      throw UsageError("gamma must be finite");
    Threshold t;
    t.gamma = *args.gamma;
    t.calibration_method = "manual";
    t.quantile = 0.0;
    result.threshold = t;
  } else if (!args.calibrate_path.empty()) {
    const auto val_inputs = read_jsonl(args.calibrate_path);
    const auto val_scored =
        score_many(loaded.model, loaded.vocab, val_inputs, threads);
    std::vector<double> val_scores;
    val_scores.reserve(val_scored.size());
    for (const auto& s : val_scored) val_scores.push_back(s.score);
    result.threshold = calibrate_threshold(val_scores, args.quantile);
  }
  if (result.threshold)
    for (auto& s : result.scored)
      s.prediction = classify(s, *result.threshold);

  std::string out_text;
  for (const auto& s : result.scored) {
    nlohmann::json j;
    j["text"] = s.text;
    j["score"] = s.score;
    j["n_targets"] = s.n_targets;
    if (s.label) j["label"] = label_str(*s.label);
    if (s.prediction) j["prediction"] = label_str(*s.prediction);
    out_text += j.dump() + "\n";
  }
  write_text_atomic(args.output, out_text);
  detail::log_line(args.quiet,
                   "[score] " + std::to_string(result.scored.size()) +
                       " examples -> " + args.output +
                       (result.threshold
                            ? " (gamma=" + std::to_string(result.threshold->gamma) +
                                  ")"
                            : ""));
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvaluateArgs {
  std::string id_scores;      // role-labeled pair of files...
  std::string ood_scores;
  std::string merged_scores;  // ...or one file with per-line labels
  std::string report_path;
  std::string histogram_path;
  std::size_t bins = 50;
  bool quiet = false;
};

namespace detail {

inline std::vector<LabeledScore> read_scored_jsonl(
    const std::string& path, std::optional<Label> role) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<LabeledScore> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("score") || !j["score"].is_number())
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": record must carry a numeric \"score\"");
    LabeledScore ls;
    ls.score = j["score"].get<double>();
    if (role) {
      ls.ood = *role == Label::OOD;
    } else {
      if (!j.contains("label") || !j["label"].is_string())
        throw UsageError(path + ":" + std::to_string(lineno) +
                         ": merged evaluation input needs a \"label\" on "
                         "every record");
      ls.ood = parse_label(j["label"].get<std::string>()) == Label::OOD;
    }
    out.push_back(ls);
  }
  return out;
}

}  // namespace detail

inline MetricsReport run_evaluate(const EvaluateArgs& args) {
  const bool split_mode = !args.id_scores.empty() || !args.ood_scores.empty();
  const bool merged_mode = !args.merged_scores.empty();
  if (split_mode == merged_mode)
    throw UsageError("pass either both --id-scores and --ood-scores, or "
                     "--scores alone");
  std::vector<LabeledScore> data;
  if (split_mode) {
    if (args.id_scores.empty() || args.ood_scores.empty())
      throw UsageError("split evaluation needs both --id-scores and "
                       "--ood-scores");
    data = detail::read_scored_jsonl(args.id_scores, Label::ID);
    const auto ood = detail::read_scored_jsonl(args.ood_scores, Label::OOD);
    data.insert(data.end(), ood.begin(), ood.end());
  } else {
    data = detail::read_scored_jsonl(args.merged_scores, std::nullopt);
  }
  const MetricsReport report = compute_metrics(data, args.bins);
  if (!args.report_path.empty())
    write_text_atomic(args.report_path, report_json(report).dump(2) + "\n");
  if (!args.histogram_path.empty())
    write_text_atomic(args.histogram_path, histogram_csv(report.histogram));
  detail::log_line(args.quiet,
                   "[evaluate] auroc=" + std::to_string(report.auroc) +
                       " aupr=" + std::to_string(report.aupr) +
                       " far95=" + std::to_string(report.far95) +
                       " n_id=" + std::to_string(report.n_id) +
                       " n_ood=" + std::to_string(report.n_ood));
  return report;
}

// ---------------------------------------------------------------------------
// Paired comparison

struct PairEvalArgs {
  std::string checkpoint;
  std::string pairs;
  std::string report_path;
  std::size_t threads = 0;
  bool quiet = false;
};

struct PairEvalResult {
  std::size_t n_pairs = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

inline PairEvalResult run_pair_eval(const PairEvalArgs& args) {
  const LoadedModel loaded = load_checkpoint(args.checkpoint);

  std::ifstream in(args.pairs, std::ios::binary);
  if (!in) throw IoError("cannot open " + args.pairs);
  std::vector<std::pair<std::string, std::string>> pairs;  // machine, human
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(args.pairs + ":" + std::to_string(lineno) +
                       ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("machine_text") ||
        !j["machine_text"].is_string() || !j.contains("human_text") ||
        !j["human_text"].is_string())
      throw ParseError(args.pairs + ":" + std::to_string(lineno) +
                       ": record needs string \"machine_text\" and "
                       "\"human_text\" fields");
    pairs.emplace_back(j["machine_text"].get<std::string>(),
                       j["human_text"].get<std::string>());
  }
  if (pairs.empty())
    throw UsageError(args.pairs + ": no pairs to evaluate");

  // Score both sides with the order-preserving fan-out, then compare.
  std::vector<RawExample> flat;
  flat.reserve(pairs.size() * 2);
  for (const auto& [m, h] : pairs) {
    flat.push_back({m, std::nullopt});
    flat.push_back({h, std::nullopt});
  }
  const auto scored = score_many(loaded.model, loaded.vocab, flat,
                                 effective_score_threads(args.threads));
  PairEvalResult result;
  result.n_pairs = pairs.size();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double machine_score = scored[2 * i].score;
    const double human_score = scored[2 * i + 1].score;
    // Lower score = machine; exact tie goes to the first element, which is
    // the machine side here.
    if (machine_score <= human_score) ++result.correct;
  }
  result.accuracy = static_cast<double>(result.correct) /
                    static_cast<double>(result.n_pairs);

  if (!args.report_path.empty()) {
    nlohmann::json report{{"n_pairs", result.n_pairs},
                          {"correct", result.correct},
                          {"accuracy", result.accuracy}};
    write_text_atomic(args.report_path, report.dump(2) + "\n");
  }
  detail::log_line(args.quiet,
                   "[pair-eval] accuracy=" + std::to_string(result.accuracy) +
                       " (" + std::to_string(result.correct) + "/" +
                       std::to_string(result.n_pairs) + ")");
  return result;
}

// ---------------------------------------------------------------------------
// Inspection

inline nlohmann::json run_inspect(const std::string& checkpoint) {
  return checkpoint_header(checkpoint);
}

}  // namespace oodlm
