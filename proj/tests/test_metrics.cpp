#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "dynrag/metrics.hpp"

using namespace dynrag;

namespace {

// Independent reference implementations, deliberately structured differently
// from the library (string-keyed hash counting, full-table LCS).

std::string gram_key(const std::vector<TokenId>& seq, std::size_t start, std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) key += std::to_string(seq[start + i]) + "|";
  return key;
}

double oracle_bleu(const std::vector<TokenId>& cand, const std::vector<TokenId>& ref,
                   std::size_t max_n = 4) {
  if (cand.empty()) return 0.0;
  std::size_t orders = std::min(max_n, cand.size());
  double product = 1.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    std::unordered_map<std::string, long> counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++counts[gram_key(ref, i, n)];
    long matched = 0;
    long total = static_cast<long>(cand.size() - n + 1);
    std::unordered_map<std::string, long> used;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      std::string k = gram_key(cand, i, n);
      if (counts.count(k) && used[k] < counts[k]) {
        ++matched;
        ++used[k];
      }
    }
    double p = matched > 0 ? static_cast<double>(matched) / static_cast<double>(total)
                           : 0.5 / static_cast<double>(total);
    product *= std::pow(p, 1.0 / static_cast<double>(orders));
  }
  double bp = 1.0;
  if (cand.size() < ref.size())
    bp = std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size()));
  return bp * product;
}

double oracle_rouge_l(const std::vector<TokenId>& cand, const std::vector<TokenId>& ref) {
  if (cand.empty()) return 0.0;
  std::vector<std::vector<std::size_t>> dp(cand.size() + 1,
                                           std::vector<std::size_t>(ref.size() + 1, 0));
  for (std::size_t i = 1; i <= cand.size(); ++i)
    for (std::size_t j = 1; j <= ref.size(); ++j)
      dp[i][j] = (cand[i - 1] == ref[j - 1]) ? dp[i - 1][j - 1] + 1
                                             : std::max(dp[i - 1][j], dp[i][j - 1]);
  std::size_t l = dp[cand.size()][ref.size()];
  if (l == 0) return 0.0;
  double p = static_cast<double>(l) / static_cast<double>(cand.size());
  double r = static_cast<double>(l) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

RetrievalTrace make_trace(std::vector<std::string> ids, std::vector<double> alpha) {
  RetrievalTrace tr;
  tr.doc_ids = std::move(ids);
  std::size_t n = alpha.size();
  tr.alpha = Tensor(1, n, std::move(alpha));
  return tr;
}

}  // namespace

TEST_CASE("bleu hand-computed fixture") {
  // "the cat sat on the mat" vs "the cat is on the mat"
  // precisions 5/6, 3/5, 1/4, smoothed 1/6; no brevity penalty
  std::vector<TokenId> cand{10, 11, 12, 13, 10, 14};
  std::vector<TokenId> ref{10, 11, 15, 13, 10, 14};
  double expected =
      std::pow((5.0 / 6.0) * (3.0 / 5.0) * (1.0 / 4.0) * (1.0 / 6.0), 0.25);
  CHECK(bleu(cand, ref) == Catch::Approx(0.37991784282579627).margin(1e-12));
  CHECK(bleu(cand, ref) == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("bleu boundary fixtures") {
  std::vector<TokenId> ref{1, 2, 3, 4, 5};
  CHECK(bleu(ref, ref) == Catch::Approx(1.0).margin(1e-12));
  CHECK(bleu({}, ref) == 0.0);
  CHECK_THROWS_AS(bleu(ref, {}), ContractError);

  // fully disjoint candidate: all precisions smoothed, score small but positive
  std::vector<TokenId> off{8, 9, 8, 9, 8};
  double d = bleu(off, ref);
  CHECK(d > 0.0);
  CHECK(d < 0.2);

  // single-token candidate uses unigram order only
  CHECK(bleu({1}, ref) == Catch::Approx(std::exp(1.0 - 5.0)).margin(1e-12));
}

TEST_CASE("bleu brevity penalty is monotone in truncation") {
  std::vector<TokenId> ref{1, 2, 3, 4, 5, 6, 7, 8};
  double prev = bleu(ref, ref);
  for (std::size_t cut = 7; cut >= 4; --cut) {
    std::vector<TokenId> cand(ref.begin(), ref.begin() + static_cast<long>(cut));
    double b = bleu(cand, ref);
    CHECK(b < prev);
    prev = b;
  }
}

TEST_CASE("rouge_l fixtures") {
  std::vector<TokenId> ref{2, 4, 6, 8};
  CHECK(rouge_l(ref, ref) == 1.0);
  CHECK(rouge_l({1, 2, 3, 4}, ref) == Catch::Approx(0.5).margin(1e-12));  // LCS {2,4}
  CHECK(rouge_l({9, 9, 9}, ref) == 0.0);
  CHECK(rouge_l({}, ref) == 0.0);
  CHECK_THROWS_AS(rouge_l(ref, {}), ContractError);

  // precision/recall asymmetry: F = 2pr/(p+r)
  std::vector<TokenId> cand{2, 4};
  CHECK(rouge_l(cand, ref) == Catch::Approx(2.0 * 1.0 * 0.5 / 1.5).margin(1e-12));
}

TEST_CASE("metrics agree with independent oracles on random pairs") {
  std::mt19937_64 rng(4242);
  for (int iter = 0; iter < 100; ++iter) {
    std::size_t cl = 1 + rng() % 12, rl = 1 + rng() % 12;
    std::vector<TokenId> cand(cl), ref(rl);
    for (auto& t : cand) t = 4 + rng() % 6;
    for (auto& t : ref) t = 4 + rng() % 6;
    INFO("iter " << iter);
    CHECK(std::abs(bleu(cand, ref) - oracle_bleu(cand, ref)) < 1e-9);
    CHECK(std::abs(rouge_l(cand, ref) - oracle_rouge_l(cand, ref)) < 1e-9);
  }
}

TEST_CASE("metric ranges and self-identity (property)") {
  std::mt19937_64 rng(515);
  for (int iter = 0; iter < 60; ++iter) {
    std::size_t cl = 1 + rng() % 10, rl = 1 + rng() % 10;
    std::vector<TokenId> cand(cl), ref(rl);
    for (auto& t : cand) t = rng() % 8;
    for (auto& t : ref) t = rng() % 8;
    double b = bleu(cand, ref), r = rouge_l(cand, ref);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0 + 1e-12);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0 + 1e-12);
    CHECK(rouge_l(cand, cand) == 1.0);
  }
}

TEST_CASE("strip_frame removes only framing tokens") {
  std::vector<TokenId> framed{BOS_ID, 5, PAD_ID, 6, EOS_ID};
  CHECK(strip_frame(framed) == std::vector<TokenId>{5, 6});
  CHECK(strip_frame({BOS_ID, EOS_ID}).empty());
}

TEST_CASE("retrieval_accuracy majority vote and alignment contract") {
  QAExample e1, e2;
  e1.gold_doc_id = "a";
  e2.gold_doc_id = "b";
  GenerationResult r1, r2;
  r1.traces = {make_trace({"a", "b"}, {0.9, 0.1}), make_trace({"a", "b"}, {0.8, 0.2}),
               make_trace({"a", "b"}, {0.2, 0.8})};
  r2.traces = {make_trace({"a", "b"}, {0.9, 0.1})};  // wrong doc wins
  CHECK(retrieval_accuracy({r1, r2}, {e1, e2}) == Catch::Approx(0.5));
  CHECK_THROWS_AS(retrieval_accuracy({r1}, {e1, e2}), ContractError);
  CHECK(retrieval_accuracy({}, {}) == 0.0);
}

TEST_CASE("perturb_query substitutes only aliased tokens") {
  std::vector<std::pair<TokenId, TokenId>> aliases{{4, 5}, {6, 7}};
  std::vector<TokenId> q{4, 8, 6, 9};
  std::mt19937_64 rng(3);
  std::vector<TokenId> p = perturb_query(q, aliases, rng);
  REQUIRE(p.size() == q.size());
  CHECK((p[0] == 4 || p[0] == 5));
  CHECK(p[1] == 8);
  CHECK((p[2] == 6 || p[2] == 7));
  CHECK(p[3] == 9);

  // no aliases -> identity
  std::mt19937_64 rng2(3);
  CHECK(perturb_query(q, {}, rng2) == q);

  // deterministic for a fixed seed
  std::mt19937_64 ra(11), rb(11);
  CHECK(perturb_query(q, aliases, ra) == perturb_query(q, aliases, rb));
}

TEST_CASE("alias pairs from the synthetic corpus resolve to real token ids") {
  SyntheticSpec spec;
  spec.n_docs = 6;
  spec.n_examples = 12;
  spec.vocab_size = 160;
  Corpus c = generate_synthetic(spec);
  auto pairs = alias_id_pairs(c);
  CHECK(!pairs.empty());
  for (auto [a, b] : pairs) {
    CHECK(a != UNK_ID);
    CHECK(b != UNK_ID);
    CHECK(a != b);
  }
}

TEST_CASE("identity perturbation yields 100 percent robustness") {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ff = 16;
  cfg.t_max = 8;
  ModelParams p = ModelParams::init(cfg, 16, 2);
  for (auto& [name, t] : p.blocks()) std::fill(t->data.begin(), t->data.end(), 0.0);
  // end token dominates: single-step generations, single-vote majorities
  p.decoder.lnf_b.data[0] = 1.0;
  p.decoder.w_o.at(0, EOS_ID) = 5.0;
  std::vector<Document> docs;
  for (TokenId t = 4; t < 8; ++t) {
    Document d;
    d.doc_id = "doc" + std::to_string(t);
    d.text = "synthetic";
    d.token_ids = {t};
    docs.push_back(d);
  }
  Index idx = build_index(docs, p.encoder);
  QAExample ex;
  ex.query_ids = {4};
  ex.gold_doc_id = "doc4";
  ex.answer_ids = {BOS_ID, 5, EOS_ID};
  RobustnessReport rep = robustness({ex}, p, docs, idx, /*aliases=*/{}, 99, 3, 6);
  CHECK(rep.pct == 100.0);
  CHECK(rep.retrieval_match_rate == 1.0);
  CHECK(rep.quality_hold_rate == 1.0);

  CHECK_THROWS_AS(robustness({}, p, docs, idx, {}, 99), ContractError);
}

TEST_CASE("metrics csv header and append semantics") {
  std::string path = (std::filesystem::temp_directory_path() / "dynrag_metrics.csv").string();
  std::remove(path.c_str());
  MetricsReport rep;
  rep.bleu = 0.5;
  rep.rouge_l = 0.75;
  rep.retrieval_acc = 1.0;
  rep.robustness_pct = 90.0;
  rep.n_examples = 20;
  append_metrics_csv(path, "run-a", rep);
  rep.bucket = Ambiguity::High;
  append_metrics_csv(path, "run-a", rep);

  std::ifstream in(path);
  std::string header, l1, l2, rest;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, rest);
  CHECK(header == "run_id,bucket,bleu,rouge_l,retrieval_acc,robustness_pct,n_examples");
  CHECK(l1 == "run-a,all,0.5,0.75,1,90,20");
  CHECK(l2 == "run-a,high,0.5,0.75,1,90,20");
  CHECK(rest.empty());  // header written once
  std::remove(path.c_str());
}
