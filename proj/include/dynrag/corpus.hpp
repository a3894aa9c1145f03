#pragma once

// Tokenization, vocabulary, JSONL corpus IO, and a synthetic retrieval-QA
// generator with controllable query ambiguity.

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tensor.hpp"

namespace dynrag {

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

using TokenId = std::size_t;

constexpr TokenId PAD_ID = 0;
constexpr TokenId BOS_ID = 1;
constexpr TokenId EOS_ID = 2;
constexpr TokenId UNK_ID = 3;

struct Vocab {
  std::unordered_map<std::string, TokenId> token_to_id;
  std::vector<std::string> id_to_token;

  Vocab() {
    id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (TokenId i = 0; i < id_to_token.size(); ++i) token_to_id[id_to_token[i]] = i;
  }

  std::size_t size() const { return id_to_token.size(); }

  TokenId lookup(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? UNK_ID : it->second;
  }

  TokenId add(const std::string& tok) {
    auto it = token_to_id.find(tok);
    if (it != token_to_id.end()) return it->second;
    TokenId id = id_to_token.size();
    id_to_token.push_back(tok);
    token_to_id[tok] = id;
    return id;
  }
};

// Lowercase; splits on whitespace, punctuation becomes its own token.
inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    char c = static_cast<char>(std::tolower(ch));
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) { out.push_back(cur); cur.clear(); }
    } else if (std::ispunct(static_cast<unsigned char>(c))) {
      if (!cur.empty()) { out.push_back(cur); cur.clear(); }
      out.push_back(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::vector<TokenId> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& tok : split_tokens(text)) ids.push_back(vocab.lookup(tok));
  return ids;
}

inline Vocab build_vocab(const std::vector<std::string>& texts, std::size_t min_freq = 1) {
  if (min_freq < 1) throw ContractError("build_vocab: min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& t : texts)
    for (const auto& tok : split_tokens(t)) ++freq[tok];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  for (const auto& [tok, n] : items)
    if (n >= min_freq) v.add(tok);
  return v;
}

enum class Ambiguity { Low = 0, Mid = 1, High = 2 };

inline const char* ambiguity_name(Ambiguity a) {
  switch (a) {
    case Ambiguity::Low: return "low";
    case Ambiguity::Mid: return "mid";
    default: return "high";
  }
}

inline std::optional<Ambiguity> parse_ambiguity(const std::string& s) {
  if (s == "low") return Ambiguity::Low;
  if (s == "mid") return Ambiguity::Mid;
  if (s == "high") return Ambiguity::High;
  return std::nullopt;
}

struct Document {
  std::string doc_id;
  std::string text;
  std::vector<TokenId> token_ids;
};

struct QAExample {
  std::string query_text;
  std::vector<TokenId> query_ids;
  std::string gold_doc_id;
  std::string answer_text;
  std::vector<TokenId> answer_ids;  // BOS ... EOS framed
  Ambiguity ambiguity = Ambiguity::Low;
};

struct Corpus {
  std::vector<Document> documents;
  std::vector<QAExample> examples;
  Vocab vocab;
  // Filler-token synonym pairs used by the robustness perturbations.
  std::vector<std::pair<std::string, std::string>> alias_table;
};

// ---------------------------------------------------------------------------
// JSONL corpus IO.
// Document record: {"type":"doc","doc_id":str,"text":str}
// Example record:  {"type":"qa","query":str,"gold_doc_id":str,"answer":str,
//                   "ambiguity":"low"|"mid"|"high"}
// Alias record:    {"type":"alias","a":str,"b":str}  (synonym pairs for the
//                   robustness perturbations; optional)

inline void save_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open for write: " + path);
  for (const auto& [a, b] : corpus.alias_table) {
    nlohmann::json j{{"type", "alias"}, {"a", a}, {"b", b}};
    out << j.dump() << "\n";
  }
  for (const auto& d : corpus.documents) {
    nlohmann::json j{{"type", "doc"}, {"doc_id", d.doc_id}, {"text", d.text}};
    out << j.dump() << "\n";
  }
  for (const auto& e : corpus.examples) {
    nlohmann::json j{{"type", "qa"},
                     {"query", e.query_text},
                     {"gold_doc_id", e.gold_doc_id},
                     {"answer", e.answer_text},
                     {"ambiguity", ambiguity_name(e.ambiguity)}};
    out << j.dump() << "\n";
  }
}

// Loads documents and examples; builds the vocabulary from all texts and
// verifies gold_doc_id referential integrity.
inline Corpus load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open corpus file: " + path);
  Corpus corpus;
  std::vector<std::string> texts;
  std::string line;
  std::size_t lineno = 0;
  struct RawQA { std::string query, gold, answer, ambiguity; std::size_t line; };
  std::vector<RawQA> raw;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("line " + std::to_string(lineno) + ": " + ex.what());
    }
    std::string type = j.value("type", "");
    if (type == "doc") {
      if (!j.contains("doc_id") || !j.contains("text"))
        throw ParseError("line " + std::to_string(lineno) + ": doc record missing fields");
      corpus.documents.push_back({j["doc_id"].get<std::string>(),
                                  j["text"].get<std::string>(), {}});
      texts.push_back(corpus.documents.back().text);
    } else if (type == "qa") {
      if (!j.contains("query") || !j.contains("gold_doc_id") || !j.contains("answer"))
        throw ParseError("line " + std::to_string(lineno) + ": qa record missing fields");
      raw.push_back({j["query"].get<std::string>(), j["gold_doc_id"].get<std::string>(),
                     j["answer"].get<std::string>(), j.value("ambiguity", "low"), lineno});
      texts.push_back(raw.back().query);
      texts.push_back(raw.back().answer);
    } else if (type == "alias") {
      if (!j.contains("a") || !j.contains("b"))
        throw ParseError("line " + std::to_string(lineno) + ": alias record missing fields");
      corpus.alias_table.emplace_back(j["a"].get<std::string>(), j["b"].get<std::string>());
    } else {
      throw ParseError("line " + std::to_string(lineno) + ": unknown record type '" + type + "'");
    }
  }
  corpus.vocab = build_vocab(texts, 1);
  std::unordered_map<std::string, std::size_t> doc_pos;
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    auto& d = corpus.documents[i];
    if (doc_pos.count(d.doc_id))
      throw IntegrityError("duplicate doc_id '" + d.doc_id + "'");
    doc_pos[d.doc_id] = i;
    d.token_ids = tokenize(d.text, corpus.vocab);
  }
  for (const auto& r : raw) {
    if (!doc_pos.count(r.gold))
      throw IntegrityError("line " + std::to_string(r.line) +
                           ": gold_doc_id '" + r.gold + "' not found");
    auto amb = parse_ambiguity(r.ambiguity);
    if (!amb)
      throw ParseError("line " + std::to_string(r.line) + ": bad ambiguity '" + r.ambiguity + "'");
    QAExample e;
    e.query_text = r.query;
    e.query_ids = tokenize(r.query, corpus.vocab);
    e.gold_doc_id = r.gold;
    e.answer_text = r.answer;
    e.answer_ids.push_back(BOS_ID);
    for (TokenId t : tokenize(r.answer, corpus.vocab)) e.answer_ids.push_back(t);
    e.answer_ids.push_back(EOS_ID);
    e.ambiguity = *amb;
    corpus.examples.push_back(std::move(e));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic generator.
//
// Each base document states a two-token key and a three-token value:
//   "key kA kB value v1 v2 v3 <fillers...>"
// Queries mention both key tokens plus random filler words, so the gold
// document is always uniquely identified by the full key. Ambiguity is
// realized as distractor documents sharing the first key token (>= 50% of
// the query's content tokens) but carrying a different second key token
// and a different value.

struct SyntheticSpec {
  std::size_t n_docs = 20;
  std::size_t n_examples = 200;
  std::size_t vocab_size = 200;
  std::size_t doc_len = 12;
  // distractor documents per query at low/mid/high ambiguity
  std::array<std::size_t, 3> distractors_per_query = {0, 2, 4};
  // filler words prepended to a query at low/mid/high ambiguity: more filler
  // dilutes the key signal, so paraphrase perturbations bite harder
  std::array<std::size_t, 3> query_fillers = {1, 3, 5};
  // distractors sharing the FULL key (distinguishable from the gold document
  // only by value and filler paraphrases); keys stop uniquely identifying the
  // gold wherever this is nonzero, so leave it at zero for solvability-gated
  // experiments
  std::array<std::size_t, 3> full_key_distractors = {0, 0, 0};
  // For buckets with full-key twins: how many of each group member's filler
  // words are unique (no paraphrase alias), and therefore survive query
  // perturbation. More unique fillers make the bucket more robust, so the
  // counts must be non-increasing across buckets that actually have twins.
  std::array<std::size_t, 3> twin_unique_fillers = {0, 0, 0};
  std::uint64_t seed = 7;

  void validate() const {
    if (n_docs == 0 || n_examples == 0 || vocab_size == 0 || doc_len == 0)
      throw ContractError("SyntheticSpec: all counts must be positive");
    if (distractors_per_query[0] > distractors_per_query[1] ||
        distractors_per_query[1] > distractors_per_query[2])
      throw ContractError("SyntheticSpec: distractor counts must be non-decreasing low->high");
    if (query_fillers[0] > query_fillers[1] || query_fillers[1] > query_fillers[2])
      throw ContractError("SyntheticSpec: query filler counts must be non-decreasing low->high");
    if (full_key_distractors[0] > full_key_distractors[1] ||
        full_key_distractors[1] > full_key_distractors[2])
      throw ContractError(
          "SyntheticSpec: full-key distractor counts must be non-decreasing low->high");
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (std::size_t b = 0; b < 3; ++b) {
      if (full_key_distractors[b] == 0) continue;
      if (twin_unique_fillers[b] > prev)
        throw ContractError(
            "SyntheticSpec: twin unique-filler counts must be non-increasing low->high");
      prev = twin_unique_fillers[b];
    }
  }
};

namespace detail {

inline const std::vector<std::pair<std::string, std::string>>& filler_aliases() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"please", "kindly"}, {"tell", "show"},   {"find", "locate"},
      {"info", "detail"},   {"item", "entry"},  {"quick", "fast"},
      {"note", "memo"},     {"now", "today"},
  };
  return table;
}

}  // namespace detail

inline Corpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  // Ambiguity bucket per base document, round-robin.
  std::vector<Ambiguity> doc_bucket(spec.n_docs);
  for (std::size_t i = 0; i < spec.n_docs; ++i)
    doc_bucket[i] = static_cast<Ambiguity>(i % 3);

  std::size_t total_distractors = 0, total_full_key = 0, total_unique_fillers = 0;
  std::size_t n_doc_fillers_budget = spec.doc_len > 7 ? spec.doc_len - 7 : 0;
  for (std::size_t i = 0; i < spec.n_docs; ++i) {
    auto b = static_cast<std::size_t>(doc_bucket[i]);
    total_distractors += spec.distractors_per_query[b];
    total_full_key += spec.full_key_distractors[b];
    if (spec.full_key_distractors[b] > 0)
      total_unique_fillers += std::min(spec.twin_unique_fillers[b], n_doc_fillers_budget) *
                              (1 + spec.full_key_distractors[b]);
  }

  constexpr std::size_t kValueLen = 3;
  std::size_t n_all_docs = spec.n_docs + total_distractors + total_full_key;
  std::size_t n_key_tokens = 2 * spec.n_docs + total_distractors;
  std::size_t n_value_tokens = kValueLen * n_all_docs;
  const auto& aliases = detail::filler_aliases();
  std::size_t n_filler = 2 * aliases.size();
  std::size_t structural = 2;  // "key", "value"
  if (n_key_tokens + n_value_tokens + n_filler + total_unique_fillers + structural >
      spec.vocab_size)
    throw ContractError("SyntheticSpec: vocab_size " + std::to_string(spec.vocab_size) +
                        " too small for " + std::to_string(n_key_tokens) +
                        " unique key tokens plus values and fillers");

  std::vector<std::string> fillers;
  for (const auto& [a, b] : aliases) { fillers.push_back(a); fillers.push_back(b); }

  std::size_t next_key = 0, next_val = 0, next_uniq = 0;
  auto key_tok = [&]() { return "k" + std::to_string(next_key++); };
  auto val_tok = [&]() { return "v" + std::to_string(next_val++); };
  auto uniq_tok = [&]() { return "u" + std::to_string(next_uniq++); };
  auto pick_filler = [&]() { return fillers[rng() % fillers.size()]; };
  auto alias_partner = [&](const std::string& w) {
    for (const auto& [a, b] : aliases) {
      if (w == a) return b;
      if (w == b) return a;
    }
    return w;
  };

  Corpus corpus;
  corpus.alias_table = aliases;

  // Every example targets one entry here: the base documents plus any
  // full-key twins (which are answerable only through their filler words).
  struct Target {
    std::string doc_id;
    std::string k1, k2;
    std::string value;
    std::vector<std::string> fillers;
    Ambiguity bucket = Ambiguity::Low;
  };
  std::vector<Target> targets;

  auto make_doc_text = [&](const std::string& k1, const std::string& k2,
                           const std::string& value,
                           const std::vector<std::string>& doc_fillers) {
    std::ostringstream os;
    os << "key " << k1 << " " << k2 << " value " << value;
    for (const auto& f : doc_fillers) os << " " << f;
    return os.str();
  };

  std::size_t n_doc_fillers = spec.doc_len > 7 ? spec.doc_len - 7 : 0;
  for (std::size_t i = 0; i < spec.n_docs; ++i) {
    Target base;
    base.doc_id = "d" + std::to_string(i);
    base.k1 = key_tok();
    base.k2 = key_tok();
    base.value = val_tok() + " " + val_tok() + " " + val_tok();
    for (std::size_t f = 0; f < n_doc_fillers; ++f) base.fillers.push_back(pick_filler());
    base.bucket = doc_bucket[i];

    std::vector<std::string> partner_fillers;
    for (const auto& f : base.fillers) partner_fillers.push_back(alias_partner(f));

    // Full-key twins share the whole key and are themselves query targets.
    // Each twin-group member (base included) may carry a bucket-controlled
    // number of unique fillers with no paraphrase alias: those survive query
    // perturbation, so buckets with fewer unique fillers are more fragile.
    std::size_t n_full = spec.full_key_distractors[static_cast<std::size_t>(doc_bucket[i])];
    std::size_t n_uniq =
        n_full > 0 ? std::min(spec.twin_unique_fillers[static_cast<std::size_t>(doc_bucket[i])],
                              base.fillers.size())
                   : 0;
    std::vector<Target> twins;
    for (std::size_t j = 0; j < n_full; ++j) {
      Target twin;
      twin.doc_id = base.doc_id + "f" + std::to_string(j);
      twin.k1 = base.k1;
      twin.k2 = base.k2;
      twin.value = val_tok() + " " + val_tok() + " " + val_tok();
      twin.fillers = partner_fillers;
      twin.bucket = doc_bucket[i];
      twins.push_back(std::move(twin));
    }
    for (std::size_t u = 0; u < n_uniq; ++u) {
      base.fillers[u] = uniq_tok();
      for (auto& twin : twins) twin.fillers[u] = uniq_tok();
    }
    corpus.documents.push_back(
        {base.doc_id, make_doc_text(base.k1, base.k2, base.value, base.fillers), {}});

    // Partial distractors share the first key token and carry the paraphrase
    // partners of the base document's fillers; they are never query targets.
    std::size_t n_dis = spec.distractors_per_query[static_cast<std::size_t>(doc_bucket[i])];
    for (std::size_t j = 0; j < n_dis; ++j) {
      std::string k2 = key_tok();
      std::string value = val_tok() + " " + val_tok() + " " + val_tok();
      corpus.documents.push_back({base.doc_id + "x" + std::to_string(j),
                                  make_doc_text(base.k1, k2, value, partner_fillers), {}});
    }

    for (auto& twin : twins) {
      corpus.documents.push_back(
          {twin.doc_id, make_doc_text(twin.k1, twin.k2, twin.value, twin.fillers), {}});
      targets.push_back(std::move(twin));
    }
    targets.push_back(std::move(base));
  }

  for (std::size_t e = 0; e < spec.n_examples; ++e) {
    const Target& tg = targets[e % targets.size()];
    std::size_t n_lead = spec.query_fillers[static_cast<std::size_t>(tg.bucket)];
    std::ostringstream q;
    for (std::size_t i = 0; i < n_lead; ++i) {
      // query fillers echo the gold document's fillers when it has any
      const std::string& f = tg.fillers.empty()
                                 ? fillers[rng() % fillers.size()]
                                 : tg.fillers[rng() % tg.fillers.size()];
      q << f << " ";
    }
    q << "value key " << tg.k1 << " " << tg.k2;
    QAExample ex;
    ex.query_text = q.str();
    ex.gold_doc_id = tg.doc_id;
    ex.answer_text = tg.value;
    ex.ambiguity = tg.bucket;
    corpus.examples.push_back(std::move(ex));
  }

  std::vector<std::string> texts;
  for (const auto& d : corpus.documents) texts.push_back(d.text);
  for (const auto& ex : corpus.examples) {
    texts.push_back(ex.query_text);
    texts.push_back(ex.answer_text);
  }
  // Both halves of every alias pair must be in-vocabulary so perturbed
  // queries never degrade to UNK.
  for (const auto& [a, b] : aliases) { texts.push_back(a); texts.push_back(b); }
  corpus.vocab = build_vocab(texts, 1);

  for (auto& d : corpus.documents) d.token_ids = tokenize(d.text, corpus.vocab);
  for (auto& ex : corpus.examples) {
    ex.query_ids = tokenize(ex.query_text, corpus.vocab);
    ex.answer_ids.clear();
    ex.answer_ids.push_back(BOS_ID);
    for (TokenId t : tokenize(ex.answer_text, corpus.vocab)) ex.answer_ids.push_back(t);
    ex.answer_ids.push_back(EOS_ID);
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Split.

struct SplitResult {
  std::vector<QAExample> train, valid, test;
  std::vector<std::string> warnings;
};

inline SplitResult split(const std::vector<QAExample>& examples,
                         std::array<double, 3> ratios, std::uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0 || std::abs(sum - 1.0) > 1e-9)
    throw ContractError("split: ratios must be positive and sum to 1");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n = examples.size();
  std::size_t n_train = static_cast<std::size_t>(ratios[0] * static_cast<double>(n));
  std::size_t n_valid = static_cast<std::size_t>(ratios[1] * static_cast<double>(n));
  SplitResult res;
  for (std::size_t i = 0; i < n; ++i) {
    const QAExample& e = examples[order[i]];
    if (i < n_train) res.train.push_back(e);
    else if (i < n_train + n_valid) res.valid.push_back(e);
    else res.test.push_back(e);
  }
  for (auto [name, part] : {std::pair{"train", &res.train}, {"valid", &res.valid},
                            {"test", &res.test}})
    if (part->empty())
      res.warnings.push_back(std::string("split produced empty ") + name + " partition");
  return res;
}

}  // namespace dynrag
