#pragma once

// Full model: encoder + controller + decoder, checkpoint IO, and a per-tape
// forward session implementing one retrieval-conditioned decoding step for
// every retrieval-vector construction variant.

#include <cstring>
#include <fstream>

#include "generator.hpp"

namespace dynrag {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff = 128;
  std::size_t t_max = 64;
  std::size_t controller_hidden = 0;  // 0 -> 2*d

  std::size_t ctrl_hidden() const { return controller_hidden ? controller_hidden : 2 * d; }
};

struct ModelParams {
  ModelConfig cfg;
  std::size_t vocab = 0;
  DocEncoderParams encoder;
  ControllerParams controller;
  DecoderParams decoder;

  static ModelParams init(const ModelConfig& cfg, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelParams p;
    p.cfg = cfg;
    p.vocab = vocab;
    p.encoder = DocEncoderParams::init(vocab, cfg.d, rng);
    p.controller = ControllerParams::init(cfg.d, cfg.ctrl_hidden(), rng);
    p.decoder = DecoderParams::init(vocab, cfg.d, cfg.layers, cfg.heads, cfg.ff,
                                    cfg.t_max, rng);
    return p;
  }

  std::vector<std::pair<std::string, Tensor*>> blocks() {
    auto out = encoder.blocks();
    for (auto& b : controller.blocks()) out.push_back(b);
    for (auto& b : decoder.blocks()) out.push_back(b);
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : blocks()) t->zero_grad();
  }
};

// ---------------------------------------------------------------------------
// Checkpoint: versioned header, named parameter blocks, f64 LE row-major data.
// Save/load round-trips bit-exactly.

namespace detail {
inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<char*>(b), 8);
}
inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw ParseError("truncated checkpoint: " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void save_checkpoint(ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open for write: " + path);
  out.write("DRCKPT01", 8);
  detail::put_u64(out, params.cfg.d);
  detail::put_u64(out, params.cfg.layers);
  detail::put_u64(out, params.cfg.heads);
  detail::put_u64(out, params.cfg.ff);
  detail::put_u64(out, params.cfg.t_max);
  detail::put_u64(out, params.cfg.ctrl_hidden());
  detail::put_u64(out, params.vocab);
  auto blocks = params.blocks();
  detail::put_u64(out, blocks.size());
  for (auto& [name, t] : blocks) {
    detail::put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(out, t->rows);
    detail::put_u64(out, t->cols);
    for (double v : t->data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      detail::put_u64(out, bits);
    }
  }
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "DRCKPT01", 8) != 0)
    throw ParseError("bad checkpoint magic in " + path);
  ModelConfig cfg;
  cfg.d = detail::get_u64(in, path);
  cfg.layers = detail::get_u64(in, path);
  cfg.heads = detail::get_u64(in, path);
  cfg.ff = detail::get_u64(in, path);
  cfg.t_max = detail::get_u64(in, path);
  cfg.controller_hidden = detail::get_u64(in, path);
  std::size_t vocab = detail::get_u64(in, path);
  ModelParams params = ModelParams::init(cfg, vocab, 0);
  auto blocks = params.blocks();
  std::size_t n = detail::get_u64(in, path);
  if (n != blocks.size())
    throw ParseError("checkpoint block count mismatch in " + path);
  for (auto& [name, t] : blocks) {
    std::size_t len = detail::get_u64(in, path);
    std::string got(len, '\0');
    in.read(got.data(), static_cast<std::streamsize>(len));
    if (got != name)
      throw ParseError("checkpoint block '" + got + "' where '" + name + "' expected");
    std::size_t rows = detail::get_u64(in, path);
    std::size_t cols = detail::get_u64(in, path);
    if (rows != t->rows || cols != t->cols)
      throw ParseError("checkpoint block '" + name + "' has unexpected shape");
    for (double& v : t->data) {
      std::uint64_t bits = detail::get_u64(in, path);
      std::memcpy(&v, &bits, 8);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward session.

enum class AblationVariant { StaticQuery, QueryPlusHistory, QueryPlusContext, AttentionFusion };

inline const char* variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::StaticQuery: return "static_query";
    case AblationVariant::QueryPlusHistory: return "query_plus_history";
    case AblationVariant::QueryPlusContext: return "query_plus_context";
    default: return "attention_fusion";
  }
}

inline std::optional<AblationVariant> parse_variant(const std::string& s) {
  if (s == "static_query") return AblationVariant::StaticQuery;
  if (s == "query_plus_history") return AblationVariant::QueryPlusHistory;
  if (s == "query_plus_context") return AblationVariant::QueryPlusContext;
  if (s == "attention_fusion") return AblationVariant::AttentionFusion;
  return std::nullopt;
}

struct SessionOptions {
  std::size_t k = 0;  // candidate pool size; 0 -> all documents
  bool freeze_index = false;
  AblationVariant variant = AblationVariant::AttentionFusion;
};

// One tape's worth of model wiring: leaves registered once, candidate matrix
// either re-encoded on tape (trainable index) or a constant snapshot.
class Session {
 public:
  Session(Tape& tape, ModelParams& params, const std::vector<Document>& docs,
          const Index& index, SessionOptions opts)
      : tape_(tape), params_(params), index_(index), opts_(opts) {
    enc_ = encoder_on_tape(tape, params.encoder);
    ctrl_ = controller_on_tape(tape, params.controller);
    dec_ = decoder_on_tape(tape, params.decoder);
    if (opts.freeze_index) {
      candidates_ = tape.constant(index.matrix);
    } else {
      std::vector<std::size_t> all(docs.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      candidates_ = encode_candidates(tape, docs, all, enc_);
    }
    zero_ctx_ = tape.constant(Tensor(1, params.cfg.d));
  }

  Tape& tape() { return tape_; }
  NodeId zero_context() const { return zero_ctx_; }
  const DecoderNodes& decoder_nodes() const { return dec_; }
  const EncoderNodes& encoder_nodes() const { return enc_; }
  const ControllerNodes& controller_nodes() const { return ctrl_; }
  NodeId candidates() const { return candidates_; }

  NodeId encode_query(const std::vector<TokenId>& query_ids) {
    return encode_tokens(tape_, query_ids, enc_);
  }

  struct StepResult {
    RetrievalTrace trace;
    NodeId c_t = -1;
    NodeId alpha = -1;
    NodeId logits = -1;
  };

  // One decoding step: state from the prefix (conditioned on the previous
  // context), variant-specific retrieval, then logits with the fresh context
  // injected.
  StepResult step(const std::vector<TokenId>& prefix, NodeId c_prev, NodeId q,
                  std::size_t step_idx) {
    NodeId h = transformer_hidden(tape_, prefix, c_prev, dec_);
    StepResult res = retrieve(q, h, prefix, step_idx);
    res.logits = decode_step(tape_, prefix, res.c_t, dec_);
    return res;
  }

  StepResult retrieve(NodeId q, NodeId h, const std::vector<TokenId>& prefix,
                      std::size_t step_idx) {
    std::size_t k = opts_.k == 0 ? index_.count() : opts_.k;
    StepResult res;
    switch (opts_.variant) {
      case AblationVariant::StaticQuery: {
        RetrieveStepResult r = raw_retrieve(q, step_idx, k, /*use_controller=*/false);
        res.trace = std::move(r.trace);
        res.alpha = r.alpha;
        res.c_t = r.c_t;
        break;
      }
      case AblationVariant::QueryPlusHistory: {
        NodeId hist = tape_.mean_rows(tape_.gather_rows(
            dec_.tok_emb, std::vector<std::size_t>(prefix.begin(), prefix.end())));
        RetrieveStepResult r = retrieve_step(tape_, step_idx, q, hist, index_,
                                             candidates_, ctrl_, k);
        res.trace = std::move(r.trace);
        res.alpha = r.alpha;
        res.c_t = r.c_t;
        break;
      }
      case AblationVariant::QueryPlusContext: {
        RetrieveStepResult r = retrieve_step(tape_, step_idx, q, h, index_,
                                             candidates_, ctrl_, k);
        // Hard top-1 selection replaces the soft fusion.
        std::size_t best = r.trace.argmax_alpha();
        res.c_t = tape_.slice_rows(candidates_, r.trace.candidate_rows[best], 1);
        res.alpha = r.alpha;
        res.trace = std::move(r.trace);
        res.trace.c_t = tape_.value(res.c_t);
        break;
      }
      case AblationVariant::AttentionFusion: {
        RetrieveStepResult r = retrieve_step(tape_, step_idx, q, h, index_,
                                             candidates_, ctrl_, k);
        res.trace = std::move(r.trace);
        res.alpha = r.alpha;
        res.c_t = r.c_t;
        break;
      }
    }
    return res;
  }

 private:
  // Retrieval without the controller (static query variant).
  RetrieveStepResult raw_retrieve(NodeId q_prime, std::size_t step_idx,
                                  std::size_t k, bool) {
    Tensor full_scores = tape_.value(score_all(tape_, q_prime, candidates_));
    std::vector<std::size_t> rows = top_k(full_scores, index_.doc_ids, k);
    std::sort(rows.begin(), rows.end());
    NodeId pool = candidates_;
    if (k < index_.count()) {
      pool = tape_.slice_rows(candidates_, rows[0], 1);
      for (std::size_t i = 1; i < rows.size(); ++i)
        pool = tape_.concat_rows(pool, tape_.slice_rows(candidates_, rows[i], 1));
    }
    NodeId scores = score_all(tape_, q_prime, pool);
    NodeId alpha = tape_.softmax_rows(scores);
    NodeId c_t = fuse(tape_, alpha, pool);
    RetrieveStepResult res;
    res.alpha = alpha;
    res.c_t = c_t;
    res.trace.step = step_idx;
    res.trace.q_prime = tape_.value(q_prime);
    res.trace.candidate_rows = rows;
    for (std::size_t r : rows) res.trace.doc_ids.push_back(index_.doc_ids[r]);
    res.trace.scores = tape_.value(scores);
    res.trace.alpha = tape_.value(alpha);
    res.trace.c_t = tape_.value(c_t);
    return res;
  }

  Tape& tape_;
  ModelParams& params_;
  const Index& index_;
  SessionOptions opts_;
  EncoderNodes enc_;
  ControllerNodes ctrl_;
  DecoderNodes dec_;
  NodeId candidates_ = -1;
  NodeId zero_ctx_ = -1;
};

// ---------------------------------------------------------------------------
// Greedy generation with one retrieval per emitted token.

inline GenerationResult generate(ModelParams& params, const std::vector<Document>& docs,
                                 const Index& index, const std::vector<TokenId>& query_ids,
                                 std::size_t max_len, SessionOptions opts = {},
                                 bool keep_logits = false) {
  if (max_len > params.cfg.t_max)
    throw ContractError("generate: max_len exceeds decoder capacity");
  Tape tape;
  // Generation never backpropagates; a frozen snapshot is always valid here
  // and avoids re-encoding documents at every step.
  SessionOptions gen_opts = opts;
  gen_opts.freeze_index = true;
  Session session(tape, params, docs, index, gen_opts);
  NodeId q = session.encode_query(query_ids);

  GenerationResult result;
  result.token_ids.push_back(BOS_ID);
  std::vector<TokenId> prefix{BOS_ID};
  NodeId c_prev = session.zero_context();
  for (std::size_t t = 0; t < max_len; ++t) {
    Session::StepResult step = session.step(prefix, c_prev, q, t);
    const Tensor& logits = tape.value(step.logits);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.cols; ++i)
      if (logits.data[i] > logits.data[best]) best = i;  // ties -> lowest id
    result.traces.push_back(step.trace);
    if (keep_logits) result.logit_snapshots.push_back(logits);
    result.token_ids.push_back(best);
    if (best == EOS_ID) break;
    if (prefix.size() + 1 > params.cfg.t_max) break;
    prefix.push_back(best);
    c_prev = step.c_t;
  }
  return result;
}

}  // namespace dynrag
