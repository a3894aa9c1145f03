// dynrag: experiment driver for the dynamic retrieval-augmented generation
// model. Subcommands: synth | train | ablate | robustness | eval | gradcheck.
// Exit codes: 0 success, 1 usage/contract error, 2 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "dynrag/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

std::string default_out_root() {
  const char* env = std::getenv("DYNRAG_OUT_ROOT");
  return env ? env : "runs";
}

std::string make_run_id(const std::string& command, const dynrag::HarnessConfig& cfg) {
  std::string hash = dynrag::file_fingerprint(cfg.corpus_path).substr(0, 8);
  return command + "-seed" + std::to_string(cfg.train.seed) + "-" + hash;
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t k = 0;
  bool k_set = false;
  double lambda = 0;
  bool lambda_set = false;
  bool trace = false;
};

dynrag::HarnessConfig resolve_config(const CommonArgs& args) {
  dynrag::HarnessConfig cfg = dynrag::load_config(args.config_path);
  if (args.seed_set) cfg.train.seed = args.seed;
  if (args.k_set) cfg.train.k = args.k;
  if (args.lambda_set) cfg.train.lambda = args.lambda;
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", args.config_path, "config file (key=value lines)");
  if (needs_config) opt->required();
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "override config seed")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--k", args.k, "override candidate pool size (0 = all documents)")
      ->each([&args](const std::string&) { args.k_set = true; });
  cmd->add_option("--lambda", args.lambda, "override retrieval loss weight")
      ->each([&args](const std::string&) { args.lambda_set = true; });
  cmd->add_flag("--trace", args.trace, "emit RetrievalTrace JSONL");
}

std::string out_dir_for(const CommonArgs& args, const std::string& run_id) {
  if (!args.out_dir.empty()) return args.out_dir;
  return default_out_root() + "/" + run_id;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynrag: dynamic retrieval-augmented generation experiments"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic JSONL corpus");
  dynrag::SyntheticSpec spec;
  std::string synth_out;
  std::size_t dis_low = 0, dis_mid = 2, dis_high = 4;
  std::size_t full_low = 0, full_mid = 0, full_high = 0;
  std::size_t uniq_low = 0, uniq_mid = 0, uniq_high = 0;
  synth->add_option("--docs", spec.n_docs, "base document count")->required();
  synth->add_option("--examples", spec.n_examples, "example count")->required();
  synth->add_option("--vocab", spec.vocab_size, "vocabulary budget");
  synth->add_option("--doc-len", spec.doc_len, "tokens per document");
  synth->add_option("--distractors-low", dis_low, "distractors per low-ambiguity query");
  synth->add_option("--distractors-mid", dis_mid, "distractors per mid-ambiguity query");
  synth->add_option("--distractors-high", dis_high, "distractors per high-ambiguity query");
  synth->add_option("--full-key-low", full_low, "full-key distractors per low-ambiguity query");
  synth->add_option("--full-key-mid", full_mid, "full-key distractors per mid-ambiguity query");
  synth->add_option("--full-key-high", full_high, "full-key distractors per high-ambiguity query");
  synth->add_option("--twin-unique-low", uniq_low,
                    "perturbation-stable unique fillers per low-bucket twin-group member");
  synth->add_option("--twin-unique-mid", uniq_mid,
                    "perturbation-stable unique fillers per mid-bucket twin-group member");
  synth->add_option("--twin-unique-high", uniq_high,
                    "perturbation-stable unique fillers per high-bucket twin-group member");
  synth->add_option("--seed", spec.seed, "generator seed");
  synth->add_option("--out", synth_out, "output JSONL path")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "run a training job");
  CommonArgs train_args;
  add_common(train_cmd, train_args);

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate",
      "train all four retrieval-vector construction variants");
  CommonArgs ablate_args;
  add_common(ablate_cmd, ablate_args);

  // robustness
  auto* robust_cmd = app.add_subcommand("robustness",
      "ambiguity-bucketed robustness evaluation of one trained checkpoint");
  CommonArgs robust_args;
  add_common(robust_cmd, robust_args);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  CommonArgs eval_args;
  std::string eval_ckpt;
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck",
      "finite-difference check of the full composite model");
  std::uint64_t grad_seed = 11;
  bool grad_corrupt = false;
  grad_cmd->add_option("--seed", grad_seed, "model init seed");
  grad_cmd->add_flag("--corrupt", grad_corrupt,
                     "negative control: inject a wrong gradient (must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      spec.distractors_per_query = {dis_low, dis_mid, dis_high};
      spec.full_key_distractors = {full_low, full_mid, full_high};
      spec.twin_unique_fillers = {uniq_low, uniq_mid, uniq_high};
      dynrag::Corpus corpus = dynrag::generate_synthetic(spec);
      std::filesystem::path p(synth_out);
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
      dynrag::save_jsonl(corpus, synth_out);
      std::cout << "wrote " << corpus.documents.size() << " documents, "
                << corpus.examples.size() << " examples to " << synth_out << "\n";
      return kExitOk;
    }
    if (*train_cmd) {
      dynrag::HarnessConfig cfg = resolve_config(train_args);
      std::string run_id = make_run_id("train", cfg);
      std::string out_dir = out_dir_for(train_args, run_id);
      dynrag::TrainRunOutput out = dynrag::run_train(cfg, out_dir, run_id);
      if (train_args.trace) {
        dynrag::PreparedRun run = dynrag::prepare_run(cfg);
        dynrag::ModelParams params = dynrag::load_checkpoint(out.checkpoint_path);
        dynrag::Index index = dynrag::build_index(run.corpus.documents, params.encoder);
        dynrag::SessionOptions opts;
        opts.k = cfg.train.k;
        opts.variant = cfg.train.variant;
        auto eval_out = dynrag::evaluate(params, run.corpus.documents, index,
                                         run.splits.test, cfg.max_len, opts);
        dynrag::write_traces_jsonl(eval_out.results, out_dir + "/traces.jsonl");
      }
      std::cout << "run " << run_id << ": final L_total="
                << dynrag::format_double(out.log.records.back().l_total)
                << " test bleu=" << dynrag::format_double(out.test_report.bleu)
                << " rouge_l=" << dynrag::format_double(out.test_report.rouge_l)
                << " retrieval_acc=" << dynrag::format_double(out.test_report.retrieval_acc)
                << "\n";
      return kExitOk;
    }
    if (*ablate_cmd) {
      dynrag::HarnessConfig cfg = resolve_config(ablate_args);
      std::string run_id = make_run_id("ablate", cfg);
      std::string out_dir = out_dir_for(ablate_args, run_id);
      dynrag::run_ablate(cfg, out_dir, run_id);
      std::cout << "wrote " << out_dir << "/ablation.csv\n";
      return kExitOk;
    }
    if (*robust_cmd) {
      dynrag::HarnessConfig cfg = resolve_config(robust_args);
      std::string run_id = make_run_id("robustness", cfg);
      std::string out_dir = out_dir_for(robust_args, run_id);
      dynrag::run_robustness(cfg, out_dir, run_id);
      std::cout << "wrote " << out_dir << "/robustness.csv\n";
      return kExitOk;
    }
    if (*eval_cmd) {
      dynrag::HarnessConfig cfg = resolve_config(eval_args);
      std::string run_id = make_run_id("eval", cfg);
      std::string out_dir = out_dir_for(eval_args, run_id);
      std::filesystem::create_directories(out_dir);
      dynrag::PreparedRun run = dynrag::prepare_run(cfg);
      dynrag::ModelParams params = dynrag::load_checkpoint(eval_ckpt);
      dynrag::Index index = dynrag::build_index(run.corpus.documents, params.encoder);
      dynrag::SessionOptions opts;
      opts.k = cfg.train.k;
      opts.variant = cfg.train.variant;
      auto out = dynrag::evaluate(params, run.corpus.documents, index, run.splits.test,
                                  cfg.max_len, opts);
      dynrag::append_metrics_csv(out_dir + "/metrics.csv", run_id, out.report);
      if (eval_args.trace)
        dynrag::write_traces_jsonl(out.results, out_dir + "/traces.jsonl");
      write_manifest(out_dir, run_id, "eval", cfg, {"metrics.csv"});
      std::cout << "bleu=" << dynrag::format_double(out.report.bleu)
                << " rouge_l=" << dynrag::format_double(out.report.rouge_l)
                << " retrieval_acc=" << dynrag::format_double(out.report.retrieval_acc)
                << "\n";
      return kExitOk;
    }
    if (*grad_cmd) {
      dynrag::GradCheckResult res =
          dynrag::composite_grad_check(grad_seed, 1e-5, grad_corrupt);
      for (const auto& [name, err] : res.per_block)
        std::cout << name << " max_rel_err=" << dynrag::format_double(err) << "\n";
      std::cout << "overall max_rel_err=" << dynrag::format_double(res.max_rel_err) << "\n";
      if (res.max_rel_err >= 1e-4) {
        std::cerr << "gradcheck FAILED (threshold 1e-4)\n";
        return kExitNumerical;
      }
      std::cout << "gradcheck passed\n";
      return kExitOk;
    }
  } catch (const dynrag::NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
