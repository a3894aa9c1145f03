#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dynrag/harness.hpp"

using namespace dynrag;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Small synthetic corpus on disk plus a matching harness config.
struct Fixture {
  fs::path dir;
  fs::path corpus;
  HarnessConfig cfg;
};

Fixture make_fixture(const std::string& name, std::size_t steps = 2) {
  Fixture f;
  f.dir = temp_dir(name);
  f.corpus = f.dir / "corpus.jsonl";
  SyntheticSpec spec;
  spec.n_docs = 6;
  spec.n_examples = 60;
  spec.vocab_size = 160;
  spec.seed = 13;
  save_jsonl(generate_synthetic(spec), f.corpus.string());

  f.cfg.corpus_path = f.corpus.string();
  f.cfg.model.d = 8;
  f.cfg.model.layers = 1;
  f.cfg.model.heads = 2;
  f.cfg.model.ff = 16;
  f.cfg.model.t_max = 16;
  f.cfg.train.steps = steps;
  f.cfg.train.batch = 2;
  f.cfg.train.seed = 7;
  f.cfg.split_ratios = {0.6, 0.2, 0.2};
  f.cfg.max_len = 8;
  f.cfg.robustness_variants = 2;
  return f;
}

}  // namespace

TEST_CASE("key=value parsing with comments and trimming") {
  fs::path dir = temp_dir("dynrag_kv");
  fs::path p = dir / "a.cfg";
  write_file(p, "# leading comment\n  lr = 0.01  # trailing\n\nsteps=5\n");
  auto kv = read_kv_file(p.string());
  CHECK(kv.at("lr") == "0.01");
  CHECK(kv.at("steps") == "5");
  CHECK(kv.size() == 2);

  write_file(p, "no equals sign here\n");
  CHECK_THROWS_WITH(read_kv_file(p.string()), Catch::Matchers::ContainsSubstring(":1:"));
  CHECK_THROWS_AS(read_kv_file((dir / "missing.cfg").string()), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("config mapping and rejection of unknown values") {
  std::map<std::string, std::string> kv = {
      {"corpus", "c.jsonl"}, {"d_model", "16"}, {"lambda", "0.25"},
      {"optimizer", "sgd"},  {"variant", "static_query"}, {"freeze_index", "true"},
      {"k", "3"},            {"seed", "42"}};
  HarnessConfig cfg = config_from_kv(kv);
  CHECK(cfg.corpus_path == "c.jsonl");
  CHECK(cfg.model.d == 16);
  CHECK(cfg.train.lambda == 0.25);
  CHECK(cfg.train.optimizer == OptimizerKind::Sgd);
  CHECK(cfg.train.variant == AblationVariant::StaticQuery);
  CHECK(cfg.train.freeze_index);
  CHECK(cfg.train.k == 3);
  CHECK(cfg.effective_split_seed() == 42);  // split_seed falls back to seed

  CHECK_THROWS_WITH(config_from_kv({{"bogus_key", "1"}}),
                    Catch::Matchers::ContainsSubstring("bogus_key"));
  CHECK_THROWS_AS(config_from_kv({{"optimizer", "lbfgs"}}), ParseError);
  CHECK_THROWS_AS(config_from_kv({{"variant", "mystery"}}), ParseError);
}

TEST_CASE("resolved config text is a fixpoint under reparsing") {
  Fixture f = make_fixture("dynrag_cfg_fixpoint");
  f.cfg.train.miss_penalty = 3.0;
  std::string text = resolved_config_text(f.cfg);
  fs::path p = f.dir / "resolved.cfg";
  write_file(p, text);
  HarnessConfig reparsed = load_config(p.string());
  CHECK(resolved_config_text(reparsed) == text);
  fs::remove_all(f.dir);
}

TEST_CASE("fnv1a fingerprint fixtures") {
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
  CHECK(fnv1a_hex("hello") != fnv1a_hex("hellp"));

  fs::path dir = temp_dir("dynrag_fp");
  write_file(dir / "x.bin", "hello");
  CHECK(file_fingerprint((dir / "x.bin").string()) == fnv1a_hex("hello"));
  CHECK_THROWS_AS(file_fingerprint((dir / "absent").string()), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("manifest is valid json with provenance fields") {
  Fixture f = make_fixture("dynrag_manifest");
  write_manifest(f.dir.string(), "run-1", "train", f.cfg, {"model.ckpt"});
  nlohmann::json j = nlohmann::json::parse(slurp(f.dir / "manifest.json"));
  CHECK(j["run_id"] == "run-1");
  CHECK(j["command"] == "train");
  CHECK(j["artifact_version"] == kArtifactVersion);
  CHECK(j["seed"] == 7);
  CHECK(j["corpus_fingerprint"] == file_fingerprint(f.corpus.string()));
  CHECK(j["outputs"] == nlohmann::json::array({"model.ckpt"}));
  fs::remove_all(f.dir);
}

TEST_CASE("prepare_run contracts") {
  HarnessConfig empty;
  CHECK_THROWS_AS(prepare_run(empty), ContractError);

  Fixture f = make_fixture("dynrag_prepare");
  PreparedRun run = prepare_run(f.cfg);
  CHECK(run.corpus.documents.size() >= 6);  // base docs plus distractors
  CHECK(run.splits.train.size() + run.splits.valid.size() + run.splits.test.size() == 60);
  fs::remove_all(f.dir);
}

TEST_CASE("evaluate handles empty example sets and bounded metrics") {
  Fixture f = make_fixture("dynrag_eval");
  PreparedRun run = prepare_run(f.cfg);
  ModelParams p = ModelParams::init(f.cfg.model, run.corpus.vocab.size(), 3);
  Index idx = build_index(run.corpus.documents, p.encoder);

  EvalOutcome none = evaluate(p, run.corpus.documents, idx, {}, f.cfg.max_len);
  CHECK(none.report.n_examples == 0);
  CHECK(none.report.bleu == 0.0);

  std::vector<QAExample> three(run.splits.test.begin(), run.splits.test.begin() + 3);
  EvalOutcome out = evaluate(p, run.corpus.documents, idx, three, f.cfg.max_len);
  CHECK(out.report.n_examples == 3);
  CHECK(out.results.size() == 3);
  CHECK(out.report.bleu >= 0.0);
  CHECK(out.report.bleu <= 1.0);
  CHECK(out.report.rouge_l >= 0.0);
  CHECK(out.report.rouge_l <= 1.0);
  CHECK(out.report.retrieval_acc >= 0.0);
  CHECK(out.report.retrieval_acc <= 1.0);

  fs::path traces = f.dir / "traces.jsonl";
  write_traces_jsonl(out.results, traces.string());
  std::ifstream in(traces);
  std::string line;
  std::size_t lines = 0, expected = 0;
  for (const auto& r : out.results) expected += r.traces.size();
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("example"));
    CHECK(j.contains("step"));
    CHECK(j.contains("doc_ids"));
    CHECK(j.contains("alpha"));
    ++lines;
  }
  CHECK(lines == expected);
  fs::remove_all(f.dir);
}

TEST_CASE("run_train writes the full artifact set and is reproducible") {
  Fixture f = make_fixture("dynrag_run_train");
  fs::path out1 = f.dir / "r1";
  fs::path out2 = f.dir / "r2";
  TrainRunOutput o1 = run_train(f.cfg, out1.string(), "train-seed7-aaaa");
  TrainRunOutput o2 = run_train(f.cfg, out2.string(), "train-seed7-aaaa");

  for (const char* name :
       {"model.ckpt", "train_log.csv", "metrics.csv", "resolved_config.txt", "manifest.json"})
    CHECK(fs::exists(out1 / name));

  CHECK(o1.log.records.size() == f.cfg.train.steps);
  CHECK(slurp(out1 / "train_log.csv") == slurp(out2 / "train_log.csv"));
  CHECK(slurp(out1 / "model.ckpt") == slurp(out2 / "model.ckpt"));
  CHECK(slurp(out1 / "metrics.csv") == slurp(out2 / "metrics.csv"));

  // train_log.csv schema
  std::ifstream in(out1 / "train_log.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,L_gen,L_ret,L_total,probe_retrieval_acc");
  fs::remove_all(f.dir);
}

TEST_CASE("run_ablate produces one row per retrieval-construction variant") {
  Fixture f = make_fixture("dynrag_run_ablate");
  fs::path out = f.dir / "ablate";
  run_ablate(f.cfg, out.string(), "ablate-seed7-bbbb");
  std::ifstream in(out / "ablation.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "variant,bleu,rouge_l,retrieval_acc");
  std::vector<std::string> variants;
  std::string line;
  while (std::getline(in, line))
    variants.push_back(line.substr(0, line.find(',')));
  CHECK(variants == std::vector<std::string>{"static_query", "query_plus_history",
                                             "query_plus_context", "attention_fusion"});
  CHECK(fs::exists(out / "manifest.json"));
  fs::remove_all(f.dir);
}

TEST_CASE("run_robustness emits all three buckets or fails loudly") {
  Fixture f = make_fixture("dynrag_run_robust");
  fs::path out = f.dir / "robust";
  run_robustness(f.cfg, out.string(), "robustness-seed7-cccc");
  std::ifstream in(out / "robustness.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "bucket,bleu,rouge_l,robustness_pct,n_examples");
  std::vector<std::string> buckets;
  std::string line;
  while (std::getline(in, line))
    buckets.push_back(line.substr(0, line.find(',')));
  CHECK(buckets == std::vector<std::string>{"low", "mid", "high"});

  // a corpus whose examples are all low-ambiguity cannot satisfy the protocol
  fs::path thin = f.dir / "thin.jsonl";
  {
    std::ofstream tc(thin);
    tc << R"({"type":"doc","doc_id":"d0","text":"alpha beta gamma"})" << "\n";
    for (int i = 0; i < 10; ++i)
      tc << R"({"type":"qa","query":"alpha","gold_doc_id":"d0","answer":"beta","ambiguity":"low"})"
         << "\n";
  }
  HarnessConfig bad = f.cfg;
  bad.corpus_path = thin.string();
  CHECK_THROWS_WITH(run_robustness_rows(bad), Catch::Matchers::ContainsSubstring("mid"));
  fs::remove_all(f.dir);
}

TEST_CASE("composite gradient check passes and catches a corrupted gradient") {
  GradCheckResult res = composite_grad_check(11, 1e-5);
  INFO("max_rel_err " << res.max_rel_err);
  CHECK(res.max_rel_err < 1e-4);
  CHECK(!res.per_block.empty());

  GradCheckResult bad = composite_grad_check(11, 1e-5, /*corrupt_backward=*/true);
  CHECK(bad.max_rel_err > 1e-2);
}
