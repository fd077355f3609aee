// Command-line front end for the anomaly-scoring pipeline.
//
//   oodlm synth     --out DIR [--config FILE] [--seed N] [--set k=v]...
//   oodlm train     --out DIR --config FILE [--regime NAME] [--set k=v]...
//   oodlm score     --checkpoint F --input F --output F [--gamma X | --calibrate F]
//   oodlm evaluate  (--id-scores F --ood-scores F | --scores F) [--report F]
//   oodlm pair-eval --checkpoint F --pairs F [--report F]
//   oodlm inspect   --checkpoint F
//
// Every failure prints a single machine-parsable line to stderr:
//   error: <CODE>: <message>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <oodlm/oodlm.hpp>

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
  cmd->add_option("--config", args.config_path,
                  "key=value configuration file");
  cmd->add_option("--set", args.overrides,
                  "override a config key (key=value; repeatable)");
  cmd->add_option("--seed", args.seed, "random seed (overrides the config)");
  auto* out = cmd->add_option("--out", args.out_dir, "output directory");
  if (out_required) out->required();
  cmd->add_flag("--quiet", args.quiet, "suppress progress output");
}

oodlm::KeyValueConfig resolve_config(const CommonArgs& args) {
  oodlm::KeyValueConfig cfg;
  if (!args.config_path.empty())
    cfg = oodlm::KeyValueConfig::from_file(args.config_path);
  for (const auto& kv : args.overrides) cfg.set_assignment(kv);
  if (args.seed) cfg.set("seed", std::to_string(*args.seed));
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-model training, distillation and anomaly scoring"};
  app.require_subcommand(1);

  CommonArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate synthetic corpora");
  add_common(synth, synth_args, /*out_required=*/true);

  CommonArgs train_args;
  std::string train_regime;
  auto* train = app.add_subcommand("train", "train a model under a regime");
  add_common(train, train_args, /*out_required=*/true);
  train->add_option("--regime", train_regime,
                    "training regime (shorthand for --set regime=...)");

  oodlm::ScoreArgs score_args;
  double score_gamma = 0.0;
  auto* score = app.add_subcommand("score", "score examples with a model");
  score->add_option("--checkpoint", score_args.checkpoint, "model checkpoint")
      ->required();
  score->add_option("--input", score_args.input, "JSONL of examples to score")
      ->required();
  score->add_option("--output", score_args.output, "scored JSONL destination")
      ->required();
  score->add_option("--threads", score_args.threads,
                    "scoring threads (0 = auto)");
  auto* gamma_opt = score->add_option("--gamma", score_gamma,
                                      "fixed decision threshold");
  score->add_option("--calibrate", score_args.calibrate_path,
                    "JSONL of nominal validation text used to pick the "
                    "threshold");
  score->add_option("--quantile", score_args.quantile,
                    "calibration quantile (default 0.95)");
  score->add_flag("--quiet", score_args.quiet, "suppress progress output");

  oodlm::EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate",
                                      "compute detection metrics");
  evaluate->add_option("--id-scores", eval_args.id_scores,
                       "scored JSONL of nominal examples");
  evaluate->add_option("--ood-scores", eval_args.ood_scores,
                       "scored JSONL of anomalous examples");
  evaluate->add_option("--scores", eval_args.merged_scores,
                       "scored JSONL with per-line labels");
  evaluate->add_option("--report", eval_args.report_path,
                       "metrics JSON destination");
  evaluate->add_option("--histogram", eval_args.histogram_path,
                       "score histogram CSV destination");
  evaluate->add_option("--bins", eval_args.bins,
                       "histogram bin count (default 50)");
  evaluate->add_flag("--quiet", eval_args.quiet, "suppress progress output");

  oodlm::PairEvalArgs pair_args;
  auto* pair_eval = app.add_subcommand(
      "pair-eval", "pick the machine-written side of text pairs");
  pair_eval->add_option("--checkpoint", pair_args.checkpoint,
                        "model checkpoint")->required();
  pair_eval->add_option("--pairs", pair_args.pairs,
                        "JSONL with machine_text/human_text fields")
      ->required();
  pair_eval->add_option("--report", pair_args.report_path,
                        "accuracy JSON destination");
  pair_eval->add_option("--threads", pair_args.threads,
                        "scoring threads (0 = auto)");
  pair_eval->add_flag("--quiet", pair_args.quiet, "suppress progress output");

  std::string inspect_ckpt;
  auto* inspect = app.add_subcommand("inspect",
                                     "print a checkpoint's header");
  inspect->add_option("--checkpoint", inspect_ckpt, "model checkpoint")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: USAGE_ERROR: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*synth) {
      oodlm::run_synth(resolve_config(synth_args), synth_args.out_dir,
                       synth_args.quiet);
    } else if (*train) {
      auto cfg = resolve_config(train_args);
      if (!train_regime.empty()) cfg.set("regime", train_regime);
      oodlm::run_train(cfg, train_args.out_dir, train_args.quiet);
    } else if (*score) {
      if (gamma_opt->count() > 0) score_args.gamma = score_gamma;
      oodlm::run_score(score_args);
    } else if (*evaluate) {
      const auto report = oodlm::run_evaluate(eval_args);
      if (eval_args.report_path.empty())
        std::cout << oodlm::report_json(report).dump(2) << "\n";
    } else if (*pair_eval) {
      oodlm::run_pair_eval(pair_args);
    } else if (*inspect) {
      std::cout << oodlm::run_inspect(inspect_ckpt).dump(2) << "\n";
    }
  } catch (const oodlm::Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: INTERNAL: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
