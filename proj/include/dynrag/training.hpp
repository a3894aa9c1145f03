#pragma once

// Joint end-to-end optimization: teacher-forced generation loss plus the
// contrastive retrieval loss (-log alpha[gold]), L_total = L_gen + lambda*L_ret.

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>

#include "model.hpp"

namespace dynrag {

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  double lambda = 0.5;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch = 4;
  std::size_t steps = 1;
  std::uint64_t seed = 7;
  std::size_t refresh_interval = 1;
  std::size_t k = 0;  // 0 -> all documents
  bool freeze_index = false;
  AblationVariant variant = AblationVariant::AttentionFusion;
  std::optional<double> miss_penalty;  // retrieval loss when gold leaves the pool
  double grad_clip = 5.0;
  std::size_t probe_interval = 25;

  void validate() const {
    if (lambda < 0) throw ContractError("TrainConfig: lambda must be >= 0");
    if (steps < 1) throw ContractError("TrainConfig: steps must be >= 1");
    if (batch < 1) throw ContractError("TrainConfig: batch must be >= 1");
  }
};

struct TrainLogRecord {
  std::size_t step = 0;
  double l_gen = 0, l_ret = 0, l_total = 0;
  double probe_acc = 0;
};

struct TrainLog {
  std::vector<TrainLogRecord> records;
  std::string checkpoint_path;
};

// ---------------------------------------------------------------------------
// Per-example losses on a shared forward pass.

struct ExampleLosses {
  NodeId gen = -1;
  NodeId ret = -1;
  std::vector<RetrievalTrace> traces;
};

inline ExampleLosses example_losses(Session& session, const QAExample& example,
                                    const std::optional<double>& miss_penalty) {
  if (example.answer_ids.size() < 2)
    throw ContractError("gen_loss: answer must hold BOS and at least EOS");
  Tape& tape = session.tape();
  NodeId q = session.encode_query(example.query_ids);
  std::vector<TokenId> prefix{example.answer_ids[0]};
  NodeId c_prev = session.zero_context();
  NodeId ce_sum = -1;
  NodeId ret_sum = -1;
  ExampleLosses out;
  std::size_t n_pos = example.answer_ids.size() - 1;
  for (std::size_t t = 1; t < example.answer_ids.size(); ++t) {
    Session::StepResult step = session.step(prefix, c_prev, q, t - 1);
    NodeId ce = tape.cross_entropy(step.logits, example.answer_ids[t]);
    ce_sum = (ce_sum < 0) ? ce : tape.add(ce_sum, ce);

    auto gold_pos = step.trace.position_of(example.gold_doc_id);
    NodeId term;
    if (gold_pos) {
      term = tape.scale(tape.log_(tape.pick(step.alpha, *gold_pos)), -1.0);
    } else if (miss_penalty) {
      Tensor penalty(1, 1);
      penalty.data[0] = *miss_penalty;
      term = tape.constant(penalty);
    } else {
      throw ContractError("ret_loss: gold document '" + example.gold_doc_id +
                          "' absent from candidate pool and no miss penalty configured");
    }
    ret_sum = (ret_sum < 0) ? term : tape.add(ret_sum, term);

    out.traces.push_back(step.trace);
    prefix.push_back(example.answer_ids[t]);
    c_prev = step.c_t;
  }
  double inv = 1.0 / static_cast<double>(n_pos);
  out.gen = tape.scale(ce_sum, inv);
  out.ret = tape.scale(ret_sum, inv);
  return out;
}

// Value-level retrieval loss over recorded traces (spec-facing convenience).
inline double ret_loss(const std::vector<RetrievalTrace>& traces,
                       const std::string& gold_doc_id,
                       std::optional<double> miss_penalty = std::nullopt) {
  if (traces.empty()) throw ContractError("ret_loss: no traces");
  double sum = 0.0;
  for (const auto& tr : traces) {
    auto pos = tr.position_of(gold_doc_id);
    if (pos) sum += -std::log(tr.alpha.data[*pos]);
    else if (miss_penalty) sum += *miss_penalty;
    else throw ContractError("ret_loss: gold document '" + gold_doc_id +
                             "' absent from candidate pool and no miss penalty configured");
  }
  return sum / static_cast<double>(traces.size());
}

struct TotalLoss {
  double total = 0, gen = 0, ret = 0;
  std::vector<RetrievalTrace> traces;
};

// Single-example L_total = L_gen + lambda * L_ret on one shared forward pass.
inline TotalLoss total_loss(ModelParams& params, const std::vector<Document>& docs,
                            const Index& index, const QAExample& example,
                            double lambda, SessionOptions opts = {},
                            std::optional<double> miss_penalty = std::nullopt,
                            bool run_backward = false) {
  if (lambda < 0) throw ContractError("total_loss: lambda must be >= 0");
  Tape tape;
  Session session(tape, params, docs, index, opts);
  ExampleLosses losses = example_losses(session, example, miss_penalty);
  NodeId total = (lambda == 0.0)
                     ? losses.gen
                     : tape.add(losses.gen, tape.scale(losses.ret, lambda));
  TotalLoss out;
  out.gen = tape.value(losses.gen).data[0];
  out.ret = tape.value(losses.ret).data[0];
  out.total = tape.value(total).data[0];
  out.traces = std::move(losses.traces);
  if (run_backward) tape.backward(total);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers.

inline double global_grad_norm(const std::vector<std::pair<std::string, Tensor*>>& blocks) {
  double sq = 0.0;
  for (const auto& [name, t] : blocks)
    for (double g : t->grad) sq += g * g;
  return std::sqrt(sq);
}

inline void clip_global_norm(std::vector<std::pair<std::string, Tensor*>>& blocks,
                             double max_norm) {
  double norm = global_grad_norm(blocks);
  if (norm <= max_norm || norm == 0.0) return;
  double s = max_norm / norm;
  for (auto& [name, t] : blocks)
    for (double& g : t->grad) g *= s;
}

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(std::vector<std::pair<std::string, Tensor*>>& blocks) {
    if (cfg_.grad_clip > 0) clip_global_norm(blocks, cfg_.grad_clip);
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (auto& [name, t] : blocks)
        for (std::size_t i = 0; i < t->data.size(); ++i)
          t->data[i] -= cfg_.lr * t->grad[i];
      return;
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (auto& [name, t] : blocks) {
      auto& st = state_[name];
      if (st.m.size() != t->data.size()) {
        st.m.assign(t->data.size(), 0.0);
        st.v.assign(t->data.size(), 0.0);
      }
      for (std::size_t i = 0; i < t->data.size(); ++i) {
        double g = t->grad[i];
        st.m[i] = cfg_.adam_beta1 * st.m[i] + (1 - cfg_.adam_beta1) * g;
        st.v[i] = cfg_.adam_beta2 * st.v[i] + (1 - cfg_.adam_beta2) * g * g;
        double mhat = st.m[i] / bc1;
        double vhat = st.v[i] / bc2;
        t->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

 private:
  struct AdamState {
    std::vector<double> m, v;
  };
  TrainConfig cfg_;
  std::map<std::string, AdamState> state_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Probe: teacher-forced retrieval accuracy (majority-vote argmax == gold;
// ties count as misses).

inline bool majority_doc_matches(const std::vector<RetrievalTrace>& traces,
                                 const std::string& gold) {
  std::map<std::string, std::size_t> votes;
  for (const auto& tr : traces) ++votes[tr.top_doc()];
  std::size_t best = 0;
  bool tie = false;
  std::string winner;
  for (const auto& [doc, n] : votes) {
    if (n > best) { best = n; winner = doc; tie = false; }
    else if (n == best) tie = true;
  }
  return !tie && winner == gold;
}

inline double probe_retrieval_accuracy(ModelParams& params,
                                       const std::vector<Document>& docs,
                                       const Index& index,
                                       const std::vector<QAExample>& examples,
                                       SessionOptions opts = {},
                                       std::optional<double> miss_penalty = 1e3) {
  if (examples.empty()) return 0.0;
  SessionOptions probe_opts = opts;
  probe_opts.freeze_index = true;
  std::size_t hits = 0;
  for (const auto& ex : examples) {
    Tape tape;
    Session session(tape, params, docs, index, probe_opts);
    ExampleLosses losses = example_losses(session, ex, miss_penalty);
    if (majority_doc_matches(losses.traces, ex.gold_doc_id)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainResult {
  TrainLog log;
};

inline TrainResult train(const TrainConfig& cfg, const std::vector<Document>& docs,
                         const std::vector<QAExample>& train_examples,
                         const std::vector<QAExample>& probe_examples,
                         ModelParams& params) {
  cfg.validate();
  if (train_examples.empty()) throw ContractError("train: no training examples");
  std::mt19937_64 rng(cfg.seed);
  Optimizer optimizer(cfg);
  auto blocks = params.blocks();
  std::vector<std::pair<std::string, Tensor*>> trainable;
  for (auto& b : blocks) {
    bool encoder_block = b.first.rfind("enc.", 0) == 0;
    if (cfg.freeze_index && encoder_block) continue;
    trainable.push_back(b);
  }

  SessionOptions opts;
  opts.k = cfg.k;
  opts.freeze_index = cfg.freeze_index;
  opts.variant = cfg.variant;

  Index index = build_index(docs, params.encoder);
  TrainResult result;
  double last_probe = 0.0;
  bool probe_ever = false;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (step > 0 && cfg.refresh_interval > 0 && step % cfg.refresh_interval == 0 &&
        !cfg.freeze_index)
      index = build_index(docs, params.encoder);

    Tape tape;
    Session session(tape, params, docs, index, opts);
    NodeId gen_sum = -1, ret_sum = -1;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const QAExample& ex = train_examples[rng() % train_examples.size()];
      ExampleLosses losses = example_losses(session, ex, cfg.miss_penalty);
      gen_sum = (gen_sum < 0) ? losses.gen : tape.add(gen_sum, losses.gen);
      ret_sum = (ret_sum < 0) ? losses.ret : tape.add(ret_sum, losses.ret);
    }
    double inv_b = 1.0 / static_cast<double>(cfg.batch);
    NodeId l_gen = tape.scale(gen_sum, inv_b);
    NodeId l_ret = tape.scale(ret_sum, inv_b);
    NodeId l_total = (cfg.lambda == 0.0)
                         ? l_gen
                         : tape.add(l_gen, tape.scale(l_ret, cfg.lambda));

    TrainLogRecord rec;
    rec.step = step;
    rec.l_gen = tape.value(l_gen).data[0];
    rec.l_ret = tape.value(l_ret).data[0];
    rec.l_total = tape.value(l_total).data[0];
    if (!std::isfinite(rec.l_total)) {
      std::string diag = "NaN/Inf loss at step " + std::to_string(step) + ";";
      for (auto& [name, t] : trainable) {
        double mx = 0;
        for (double g : t->grad) mx = std::max(mx, std::abs(g));
        diag += " " + name + " max|grad|=" + std::to_string(mx);
      }
      throw NumericError(diag);
    }

    params.zero_grad();
    tape.backward(l_total);
    optimizer.step(trainable);

    if (!probe_examples.empty() &&
        (step % std::max<std::size_t>(cfg.probe_interval, 1) == 0 ||
         step + 1 == cfg.steps)) {
      Index snapshot = cfg.freeze_index ? index : build_index(docs, params.encoder);
      last_probe = probe_retrieval_accuracy(params, docs, snapshot, probe_examples,
                                            opts, cfg.miss_penalty);
      probe_ever = true;
    }
    rec.probe_acc = probe_ever ? last_probe : 0.0;
    result.log.records.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// TrainLog CSV: step,L_gen,L_ret,L_total,probe_retrieval_acc

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_train_log_csv(const TrainLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open for write: " + path);
  out << "step,L_gen,L_ret,L_total,probe_retrieval_acc\n";
  for (const auto& r : log.records)
    out << r.step << ',' << format_double(r.l_gen) << ',' << format_double(r.l_ret)
        << ',' << format_double(r.l_total) << ',' << format_double(r.probe_acc) << "\n";
}

}  // namespace dynrag
