#pragma once

// Experiment driver: config files, run manifests, evaluation, the ablation
// sweep over retrieval-vector construction variants, the ambiguity-bucketed
// robustness protocol, and the composite gradient check.

#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "metrics.hpp"

namespace dynrag {

// ---------------------------------------------------------------------------
// Flat key=value config files. Unknown keys are rejected, '#' starts comments.

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

struct HarnessConfig {
  std::string corpus_path;
  ModelConfig model;
  TrainConfig train;
  std::array<double, 3> split_ratios = {0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;  // 0 -> train.seed
  std::size_t max_len = 16;
  std::size_t robustness_variants = 5;
  std::uint64_t perturb_seed = 99;

  std::uint64_t effective_split_seed() const {
    return split_seed ? split_seed : train.seed;
  }
};

inline HarnessConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  HarnessConfig cfg;
  auto u64 = [](const std::string& s) { return std::stoull(s); };
  auto f64 = [](const std::string& s) { return std::stod(s); };
  for (const auto& [key, val] : kv) {
    if (key == "corpus") cfg.corpus_path = val;
    else if (key == "d_model") cfg.model.d = u64(val);
    else if (key == "layers") cfg.model.layers = u64(val);
    else if (key == "heads") cfg.model.heads = u64(val);
    else if (key == "ff") cfg.model.ff = u64(val);
    else if (key == "t_max") cfg.model.t_max = u64(val);
    else if (key == "controller_hidden") cfg.model.controller_hidden = u64(val);
    else if (key == "lambda") cfg.train.lambda = f64(val);
    else if (key == "lr") cfg.train.lr = f64(val);
    else if (key == "optimizer") {
      if (val == "sgd") cfg.train.optimizer = OptimizerKind::Sgd;
      else if (val == "adam") cfg.train.optimizer = OptimizerKind::Adam;
      else throw ParseError("config: unknown optimizer '" + val + "'");
    } else if (key == "adam_beta1") cfg.train.adam_beta1 = f64(val);
    else if (key == "adam_beta2") cfg.train.adam_beta2 = f64(val);
    else if (key == "adam_eps") cfg.train.adam_eps = f64(val);
    else if (key == "batch") cfg.train.batch = u64(val);
    else if (key == "steps") cfg.train.steps = u64(val);
    else if (key == "seed") cfg.train.seed = u64(val);
    else if (key == "refresh_interval") cfg.train.refresh_interval = u64(val);
    else if (key == "k") cfg.train.k = u64(val);
    else if (key == "freeze_index") cfg.train.freeze_index = (val == "true" || val == "1");
    else if (key == "variant") {
      auto v = parse_variant(val);
      if (!v) throw ParseError("config: unknown variant '" + val + "'");
      cfg.train.variant = *v;
    } else if (key == "miss_penalty") cfg.train.miss_penalty = f64(val);
    else if (key == "grad_clip") cfg.train.grad_clip = f64(val);
    else if (key == "probe_interval") cfg.train.probe_interval = u64(val);
    else if (key == "split_train") cfg.split_ratios[0] = f64(val);
    else if (key == "split_valid") cfg.split_ratios[1] = f64(val);
    else if (key == "split_test") cfg.split_ratios[2] = f64(val);
    else if (key == "split_seed") cfg.split_seed = u64(val);
    else if (key == "max_len") cfg.max_len = u64(val);
    else if (key == "robustness_variants") cfg.robustness_variants = u64(val);
    else if (key == "perturb_seed") cfg.perturb_seed = u64(val);
    else throw ParseError("config: unknown key '" + key + "'");
  }
  return cfg;
}

inline HarnessConfig load_config(const std::string& path) {
  return config_from_kv(read_kv_file(path));
}

// Canonical text form of the resolved configuration; written beside outputs.
inline std::string resolved_config_text(const HarnessConfig& cfg) {
  std::ostringstream os;
  os << "corpus=" << cfg.corpus_path << "\n"
     << "d_model=" << cfg.model.d << "\n"
     << "layers=" << cfg.model.layers << "\n"
     << "heads=" << cfg.model.heads << "\n"
     << "ff=" << cfg.model.ff << "\n"
     << "t_max=" << cfg.model.t_max << "\n"
     << "controller_hidden=" << cfg.model.ctrl_hidden() << "\n"
     << "lambda=" << format_double(cfg.train.lambda) << "\n"
     << "lr=" << format_double(cfg.train.lr) << "\n"
     << "optimizer=" << (cfg.train.optimizer == OptimizerKind::Sgd ? "sgd" : "adam") << "\n"
     << "adam_beta1=" << format_double(cfg.train.adam_beta1) << "\n"
     << "adam_beta2=" << format_double(cfg.train.adam_beta2) << "\n"
     << "adam_eps=" << format_double(cfg.train.adam_eps) << "\n"
     << "batch=" << cfg.train.batch << "\n"
     << "steps=" << cfg.train.steps << "\n"
     << "seed=" << cfg.train.seed << "\n"
     << "refresh_interval=" << cfg.train.refresh_interval << "\n"
     << "k=" << cfg.train.k << "\n"
     << "freeze_index=" << (cfg.train.freeze_index ? "true" : "false") << "\n"
     << "variant=" << variant_name(cfg.train.variant) << "\n";
  if (cfg.train.miss_penalty)
    os << "miss_penalty=" << format_double(*cfg.train.miss_penalty) << "\n";
  os << "grad_clip=" << format_double(cfg.train.grad_clip) << "\n"
     << "probe_interval=" << cfg.train.probe_interval << "\n"
     << "split_train=" << format_double(cfg.split_ratios[0]) << "\n"
     << "split_valid=" << format_double(cfg.split_ratios[1]) << "\n"
     << "split_test=" << format_double(cfg.split_ratios[2]) << "\n"
     << "split_seed=" << cfg.effective_split_seed() << "\n"
     << "max_len=" << cfg.max_len << "\n"
     << "robustness_variants=" << cfg.robustness_variants << "\n"
     << "perturb_seed=" << cfg.perturb_seed << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Run manifests.

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot fingerprint: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return fnv1a_hex(os.str());
}

constexpr const char* kArtifactVersion = "0.1.0";

inline void write_manifest(const std::string& out_dir, const std::string& run_id,
                           const std::string& command, const HarnessConfig& cfg,
                           const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["run_id"] = run_id;
  j["command"] = command;
  j["artifact_version"] = kArtifactVersion;
  j["corpus"] = cfg.corpus_path;
  j["corpus_fingerprint"] = file_fingerprint(cfg.corpus_path);
  j["seed"] = cfg.train.seed;
  j["split_seed"] = cfg.effective_split_seed();
  j["perturb_seed"] = cfg.perturb_seed;
  j["config"] = resolved_config_text(cfg);
  j["outputs"] = outputs;
  std::ofstream out(out_dir + "/manifest.json", std::ios::binary);
  if (!out) throw ParseError("cannot write manifest in " + out_dir);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation over a set of examples (greedy generation).

struct EvalOutcome {
  MetricsReport report;
  std::vector<GenerationResult> results;
};

inline EvalOutcome evaluate(ModelParams& params, const std::vector<Document>& docs,
                            const Index& index, const std::vector<QAExample>& examples,
                            std::size_t max_len, SessionOptions opts = {}) {
  EvalOutcome out;
  out.report.n_examples = examples.size();
  if (examples.empty()) return out;
  double bleu_sum = 0, rouge_sum = 0;
  for (const auto& ex : examples) {
    GenerationResult r = generate(params, docs, index, ex.query_ids, max_len, opts);
    std::vector<TokenId> cand = strip_frame(r.token_ids);
    std::vector<TokenId> gold = strip_frame(ex.answer_ids);
    bleu_sum += bleu(cand, gold);
    rouge_sum += rouge_l(cand, gold);
    out.results.push_back(std::move(r));
  }
  out.report.bleu = bleu_sum / static_cast<double>(examples.size());
  out.report.rouge_l = rouge_sum / static_cast<double>(examples.size());
  out.report.retrieval_acc = retrieval_accuracy(out.results, examples);
  return out;
}

// RetrievalTrace JSONL for the --trace flag.
inline void write_traces_jsonl(const std::vector<GenerationResult>& results,
                               const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open for write: " + path);
  for (std::size_t i = 0; i < results.size(); ++i) {
    for (const auto& tr : results[i].traces) {
      nlohmann::json j;
      j["example"] = i;
      j["step"] = tr.step;
      j["doc_ids"] = tr.doc_ids;
      std::vector<std::string> alpha;
      for (double a : tr.alpha.data) alpha.push_back(format_double(a));
      j["alpha"] = alpha;
      out << j.dump() << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Shared run plumbing.

struct PreparedRun {
  Corpus corpus;
  SplitResult splits;
};

inline PreparedRun prepare_run(const HarnessConfig& cfg) {
  if (cfg.corpus_path.empty()) throw ContractError("config: corpus path required");
  PreparedRun run;
  run.corpus = load_jsonl(cfg.corpus_path);
  run.splits = split(run.corpus.examples, cfg.split_ratios, cfg.effective_split_seed());
  return run;
}

struct TrainRunOutput {
  TrainLog log;
  std::string checkpoint_path;
  MetricsReport test_report;
};

inline TrainRunOutput run_train(const HarnessConfig& cfg, const std::string& out_dir,
                                const std::string& run_id) {
  std::filesystem::create_directories(out_dir);
  PreparedRun run = prepare_run(cfg);
  ModelParams params = ModelParams::init(cfg.model, run.corpus.vocab.size(), cfg.train.seed);
  TrainResult tr = train(cfg.train, run.corpus.documents, run.splits.train,
                         run.splits.valid, params);

  TrainRunOutput out;
  out.log = tr.log;
  out.checkpoint_path = out_dir + "/model.ckpt";
  save_checkpoint(params, out.checkpoint_path);
  out.log.checkpoint_path = out.checkpoint_path;
  write_train_log_csv(out.log, out_dir + "/train_log.csv");

  SessionOptions opts;
  opts.k = cfg.train.k;
  opts.variant = cfg.train.variant;
  Index index = build_index(run.corpus.documents, params.encoder);
  out.test_report = evaluate(params, run.corpus.documents, index, run.splits.test,
                             cfg.max_len, opts).report;
  append_metrics_csv(out_dir + "/metrics.csv", run_id, out.test_report);
  std::ofstream rc(out_dir + "/resolved_config.txt", std::ios::binary);
  rc << resolved_config_text(cfg);
  rc.close();
  write_manifest(out_dir, run_id, "train", cfg,
                 {"model.ckpt", "train_log.csv", "metrics.csv", "resolved_config.txt"});
  return out;
}

// ---------------------------------------------------------------------------
// Fig.2-style ablation: four retrieval-vector construction variants under
// identical seeds and budgets. CSV: variant,bleu,rouge_l,retrieval_acc

struct AblationRow {
  AblationVariant variant;
  MetricsReport report;
};

inline std::vector<AblationRow> run_ablation_rows(const HarnessConfig& cfg) {
  PreparedRun run = prepare_run(cfg);
  std::vector<AblationRow> rows;
  for (AblationVariant v : {AblationVariant::StaticQuery, AblationVariant::QueryPlusHistory,
                            AblationVariant::QueryPlusContext, AblationVariant::AttentionFusion}) {
    TrainConfig tcfg = cfg.train;
    tcfg.variant = v;
    ModelParams params = ModelParams::init(cfg.model, run.corpus.vocab.size(), tcfg.seed);
    train(tcfg, run.corpus.documents, run.splits.train, {}, params);
    SessionOptions opts;
    opts.k = tcfg.k;
    opts.variant = v;
    Index index = build_index(run.corpus.documents, params.encoder);
    MetricsReport rep = evaluate(params, run.corpus.documents, index, run.splits.test,
                                 cfg.max_len, opts).report;
    rows.push_back({v, rep});
  }
  return rows;
}

inline void run_ablate(const HarnessConfig& cfg, const std::string& out_dir,
                       const std::string& run_id) {
  std::filesystem::create_directories(out_dir);
  auto rows = run_ablation_rows(cfg);
  std::ofstream out(out_dir + "/ablation.csv", std::ios::binary);
  if (!out) throw ParseError("cannot write ablation.csv in " + out_dir);
  out << "variant,bleu,rouge_l,retrieval_acc\n";
  for (const auto& row : rows)
    out << variant_name(row.variant) << ',' << format_double(row.report.bleu) << ','
        << format_double(row.report.rouge_l) << ','
        << format_double(row.report.retrieval_acc) << "\n";
  out.close();
  std::ofstream rc(out_dir + "/resolved_config.txt", std::ios::binary);
  rc << resolved_config_text(cfg);
  rc.close();
  write_manifest(out_dir, run_id, "ablate", cfg, {"ablation.csv", "resolved_config.txt"});
}

// ---------------------------------------------------------------------------
// Fig.3-style protocol: one trained checkpoint, evaluated per ambiguity bucket.
// CSV: bucket,bleu,rouge_l,robustness_pct,n_examples

struct BucketRow {
  Ambiguity bucket;
  MetricsReport report;
};

inline std::vector<BucketRow> run_robustness_rows(const HarnessConfig& cfg) {
  PreparedRun run = prepare_run(cfg);
  for (Ambiguity a : {Ambiguity::Low, Ambiguity::Mid, Ambiguity::High}) {
    bool found = false;
    for (const auto& ex : run.splits.test)
      if (ex.ambiguity == a) { found = true; break; }
    if (!found)
      throw ContractError(std::string("robustness: test split has no '") +
                          ambiguity_name(a) + "' bucket");
  }
  ModelParams params = ModelParams::init(cfg.model, run.corpus.vocab.size(), cfg.train.seed);
  train(cfg.train, run.corpus.documents, run.splits.train, {}, params);
  Index index = build_index(run.corpus.documents, params.encoder);
  auto aliases = alias_id_pairs(run.corpus);
  SessionOptions opts;
  opts.k = cfg.train.k;
  opts.variant = cfg.train.variant;

  std::vector<BucketRow> rows;
  for (Ambiguity a : {Ambiguity::Low, Ambiguity::Mid, Ambiguity::High}) {
    std::vector<QAExample> bucket_examples;
    for (const auto& ex : run.splits.test)
      if (ex.ambiguity == a) bucket_examples.push_back(ex);
    MetricsReport rep = evaluate(params, run.corpus.documents, index, bucket_examples,
                                 cfg.max_len, opts).report;
    RobustnessReport rob = robustness(bucket_examples, params, run.corpus.documents,
                                      index, aliases, cfg.perturb_seed,
                                      cfg.robustness_variants, cfg.max_len, opts);
    rep.robustness_pct = rob.pct;
    rep.bucket = a;
    rows.push_back({a, rep});
  }
  return rows;
}

inline void run_robustness(const HarnessConfig& cfg, const std::string& out_dir,
                           const std::string& run_id) {
  std::filesystem::create_directories(out_dir);
  auto rows = run_robustness_rows(cfg);
  std::ofstream out(out_dir + "/robustness.csv", std::ios::binary);
  if (!out) throw ParseError("cannot write robustness.csv in " + out_dir);
  out << "bucket,bleu,rouge_l,robustness_pct,n_examples\n";
  for (const auto& row : rows)
    out << ambiguity_name(row.bucket) << ',' << format_double(row.report.bleu) << ','
        << format_double(row.report.rouge_l) << ','
        << format_double(row.report.robustness_pct) << ',' << row.report.n_examples << "\n";
  out.close();
  std::ofstream rc(out_dir + "/resolved_config.txt", std::ios::binary);
  rc << resolved_config_text(cfg);
  rc.close();
  write_manifest(out_dir, run_id, "robustness", cfg,
                 {"robustness.csv", "resolved_config.txt"});
}

// ---------------------------------------------------------------------------
// Composite gradient check at tiny dimensions (d=8, N=4, V=16): the whole
// controller -> matching -> fusion -> decoder -> joint-loss path against
// central finite differences.

inline GradCheckResult composite_grad_check(std::uint64_t seed = 11,
                                            double eps = 1e-5,
                                            bool corrupt_backward = false) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ff = 16;
  cfg.t_max = 8;
  const std::size_t vocab = 16;
  ModelParams params = ModelParams::init(cfg, vocab, seed);

  std::vector<Document> docs;
  for (std::size_t i = 0; i < 4; ++i) {
    Document d;
    d.doc_id = "d" + std::to_string(i);
    d.text = "synthetic";
    d.token_ids = {4 + i, 8 + i, 12 + (i % 4)};
    docs.push_back(d);
  }
  QAExample ex;
  ex.query_ids = {5, 9};
  ex.gold_doc_id = "d1";
  ex.answer_ids = {BOS_ID, 6, 10, EOS_ID};

  auto f = [&](bool with_grad) {
    Index index = build_index(docs, params.encoder);
    TotalLoss tl = total_loss(params, docs, index, ex, 0.5, {}, std::nullopt, with_grad);
    return tl.total;
  };

  auto blocks = params.blocks();
  GradCheckResult res = grad_check(f, blocks, eps);
  if (corrupt_backward) {
    // Negative control: a deliberately wrong gradient must be detected.
    params.zero_grad();
    f(true);
    params.controller.w1.grad[0] += 1.0;
    double worst = 0.0;
    for (std::size_t i = 0; i < 1; ++i) {
      double saved = params.controller.w1.data[i];
      params.controller.w1.data[i] = saved + eps;
      double fp = f(false);
      params.controller.w1.data[i] = saved - eps;
      double fm = f(false);
      params.controller.w1.data[i] = saved;
      double numeric = (fp - fm) / (2 * eps);
      double analytic = params.controller.w1.grad[i];
      double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    res.max_rel_err = std::max(res.max_rel_err, worst);
    res.per_block["ctrl.w1(corrupted)"] = worst;
  }
  return res;
}

}  // namespace dynrag
