#pragma once

// From-scratch sentence-level BLEU and ROUGE-L, retrieval accuracy, and the
// paraphrase-perturbation robustness percentage.

#include <map>
#include <random>

#include "model.hpp"
#include "training.hpp"

namespace dynrag {

struct MetricsReport {
  double bleu = 0, rouge_l = 0, retrieval_acc = 0, robustness_pct = 0;
  std::optional<Ambiguity> bucket;
  std::size_t n_examples = 0;
};

// Geometric mean of clipped n-gram precisions with brevity penalty; any zero
// precision is smoothed to 1/(2 * candidate n-gram count). Orders above the
// candidate length are skipped.
inline double bleu(const std::vector<TokenId>& candidate,
                   const std::vector<TokenId>& reference, std::size_t max_n = 4) {
  if (reference.empty()) throw ContractError("bleu: empty reference");
  if (candidate.empty()) return 0.0;
  std::size_t orders = std::min(max_n, candidate.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    std::map<std::vector<TokenId>, std::size_t> cand_counts, ref_counts;
    for (std::size_t i = 0; i + n <= candidate.size(); ++i)
      ++cand_counts[std::vector<TokenId>(candidate.begin() + i, candidate.begin() + i + n)];
    for (std::size_t i = 0; i + n <= reference.size(); ++i)
      ++ref_counts[std::vector<TokenId>(reference.begin() + i, reference.begin() + i + n)];
    std::size_t total = 0, matched = 0;
    for (const auto& [gram, c] : cand_counts) {
      total += c;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(c, it->second);
    }
    double p = (matched > 0)
                   ? static_cast<double>(matched) / static_cast<double>(total)
                   : 1.0 / (2.0 * static_cast<double>(total));
    log_sum += std::log(p);
  }
  double bp = candidate.size() >= reference.size()
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(reference.size()) /
                                       static_cast<double>(candidate.size()));
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

inline std::size_t lcs_length(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS-based F-measure with beta = 1.
inline double rouge_l(const std::vector<TokenId>& candidate,
                      const std::vector<TokenId>& reference) {
  if (reference.empty()) throw ContractError("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  std::size_t l = lcs_length(candidate, reference);
  if (l == 0) return 0.0;
  double p = static_cast<double>(l) / static_cast<double>(candidate.size());
  double r = static_cast<double>(l) / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

// Strips BOS/EOS/PAD framing before text metrics.
inline std::vector<TokenId> strip_frame(const std::vector<TokenId>& ids) {
  std::vector<TokenId> out;
  for (TokenId t : ids)
    if (t != BOS_ID && t != EOS_ID && t != PAD_ID) out.push_back(t);
  return out;
}

inline double retrieval_accuracy(const std::vector<GenerationResult>& results,
                                 const std::vector<QAExample>& examples) {
  if (results.size() != examples.size())
    throw ContractError("retrieval_accuracy: results and examples misaligned");
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < results.size(); ++i)
    if (majority_doc_matches(results[i].traces, examples[i].gold_doc_id)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

// ---------------------------------------------------------------------------
// Robustness: per (example, variant) pair, both of
//   (a) the majority-vote retrieved document matches the unperturbed run's,
//   (b) ROUGE-L against the gold answer drops by < 0.1 absolute.
// Perturbations are token-level substitutions over the synthetic generator's
// filler alias table; deterministic per (perturb_seed, example, variant).

inline std::vector<std::pair<TokenId, TokenId>> alias_id_pairs(const Corpus& corpus) {
  std::vector<std::pair<TokenId, TokenId>> out;
  for (const auto& [a, b] : corpus.alias_table) {
    TokenId ia = corpus.vocab.lookup(a), ib = corpus.vocab.lookup(b);
    if (ia != UNK_ID && ib != UNK_ID) out.emplace_back(ia, ib);
  }
  return out;
}

inline std::vector<TokenId> perturb_query(
    const std::vector<TokenId>& query_ids,
    const std::vector<std::pair<TokenId, TokenId>>& aliases, std::mt19937_64& rng) {
  std::vector<TokenId> out = query_ids;
  for (TokenId& t : out) {
    for (const auto& [a, b] : aliases) {
      if (t == a || t == b) {
        if (rng() % 2 == 0) t = (t == a) ? b : a;
        break;
      }
    }
  }
  return out;
}

struct RobustnessReport {
  double pct = 0;                 // headline percentage
  double retrieval_match_rate = 0;  // component (a) alone
  double quality_hold_rate = 0;     // component (b) alone
};

inline std::optional<std::string> majority_doc(const std::vector<RetrievalTrace>& traces) {
  std::map<std::string, std::size_t> votes;
  for (const auto& tr : traces) ++votes[tr.top_doc()];
  std::size_t best = 0;
  bool tie = false;
  std::string winner;
  for (const auto& [doc, n] : votes) {
    if (n > best) { best = n; winner = doc; tie = false; }
    else if (n == best) tie = true;
  }
  if (tie || winner.empty()) return std::nullopt;
  return winner;
}

inline RobustnessReport robustness(const std::vector<QAExample>& examples,
                                   ModelParams& params,
                                   const std::vector<Document>& docs,
                                   const Index& index,
                                   const std::vector<std::pair<TokenId, TokenId>>& aliases,
                                   std::uint64_t perturb_seed,
                                   std::size_t n_variants = 5,
                                   std::size_t max_len = 16,
                                   SessionOptions opts = {}) {
  if (examples.empty()) throw ContractError("robustness: no examples");
  std::size_t pairs = 0, stable = 0, ret_match = 0, qual_hold = 0;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const QAExample& ex = examples[e];
    GenerationResult base = generate(params, docs, index, ex.query_ids, max_len, opts);
    auto base_doc = majority_doc(base.traces);
    std::vector<TokenId> gold = strip_frame(ex.answer_ids);
    double base_rouge = rouge_l(strip_frame(base.token_ids), gold);
    for (std::size_t v = 0; v < n_variants; ++v) {
      std::mt19937_64 rng(perturb_seed ^ (e * 1000003ULL + v * 7919ULL + 1ULL));
      std::vector<TokenId> pq = perturb_query(ex.query_ids, aliases, rng);
      GenerationResult pert = generate(params, docs, index, pq, max_len, opts);
      auto pert_doc = majority_doc(pert.traces);
      double pert_rouge = rouge_l(strip_frame(pert.token_ids), gold);
      bool same_doc = base_doc && pert_doc && *base_doc == *pert_doc;
      bool holds = (base_rouge - pert_rouge) < 0.1;
      ++pairs;
      if (same_doc) ++ret_match;
      if (holds) ++qual_hold;
      if (same_doc && holds) ++stable;
    }
  }
  RobustnessReport rep;
  rep.pct = 100.0 * static_cast<double>(stable) / static_cast<double>(pairs);
  rep.retrieval_match_rate = static_cast<double>(ret_match) / static_cast<double>(pairs);
  rep.quality_hold_rate = static_cast<double>(qual_hold) / static_cast<double>(pairs);
  return rep;
}

// ---------------------------------------------------------------------------
// metrics.csv rows: run_id,bucket,bleu,rouge_l,retrieval_acc,robustness_pct,n_examples

inline void append_metrics_csv(const std::string& path, const std::string& run_id,
                               const MetricsReport& report) {
  bool fresh = !std::ifstream(path).good();
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw ParseError("cannot open for write: " + path);
  if (fresh) out << "run_id,bucket,bleu,rouge_l,retrieval_acc,robustness_pct,n_examples\n";
  out << run_id << ',' << (report.bucket ? ambiguity_name(*report.bucket) : "all") << ','
      << format_double(report.bleu) << ',' << format_double(report.rouge_l) << ','
      << format_double(report.retrieval_acc) << ',' << format_double(report.robustness_pct)
      << ',' << report.n_examples << "\n";
}

}  // namespace dynrag
