#pragma once

// State-aware retrieval controller: q' = MLP([q; h_t]), scaled dot-product
// matching over candidate documents, and weighted context fusion into c_t.

#include "doc_index.hpp"
#include "tensor.hpp"

namespace dynrag {

struct ControllerParams {
  Tensor w1;  // [2d x d_h]
  Tensor b1;  // [1 x d_h]
  Tensor w2;  // [d_h x d]
  Tensor b2;  // [1 x d]

  static ControllerParams init(std::size_t d, std::size_t d_h, std::mt19937_64& rng) {
    ControllerParams p;
    p.w1 = init_uniform(2 * d, d_h, 2 * d, rng);
    p.b1 = Tensor(1, d_h);
    p.b1.set_requires_grad(true);
    p.w2 = init_uniform(d_h, d, d_h, rng);
    p.b2 = Tensor(1, d);
    p.b2.set_requires_grad(true);
    return p;
  }

  std::size_t dim() const { return w2.cols; }

  std::vector<std::pair<std::string, Tensor*>> blocks() {
    return {{"ctrl.w1", &w1}, {"ctrl.b1", &b1}, {"ctrl.w2", &w2}, {"ctrl.b2", &b2}};
  }
};

struct ControllerNodes {
  NodeId w1, b1, w2, b2;
};

inline ControllerNodes controller_on_tape(Tape& tape, ControllerParams& params) {
  return {tape.leaf(params.w1), tape.leaf(params.b1), tape.leaf(params.w2),
          tape.leaf(params.b2)};
}

inline NodeId controller_forward(Tape& tape, NodeId q, NodeId h_t,
                                 const ControllerNodes& ctrl) {
  const Tensor& tq = tape.value(q);
  const Tensor& th = tape.value(h_t);
  const Tensor& w1 = tape.value(ctrl.w1);
  if (tq.rows != 1 || th.rows != 1 || tq.cols + th.cols != w1.rows)
    throw ShapeError("controller_forward: [q;h] width " +
                     std::to_string(tq.cols + th.cols) + " does not match MLP input " +
                     std::to_string(w1.rows));
  NodeId x = tape.concat_cols(q, h_t);
  NodeId hidden = tape.tanh_(tape.add_row(tape.matmul(x, ctrl.w1), ctrl.b1));
  return tape.add_row(tape.matmul(hidden, ctrl.w2), ctrl.b2);
}

// alpha = softmax(q' . d_i / sqrt(d)) over the candidate rows.
inline NodeId attend(Tape& tape, NodeId q_prime, NodeId candidates) {
  const Tensor& c = tape.value(candidates);
  if (c.rows < 1) throw ContractError("attend: no candidates");
  return tape.softmax_rows(score_all(tape, q_prime, candidates));
}

// c_t = sum_i alpha_i d_i
inline NodeId fuse(Tape& tape, NodeId alpha, NodeId candidates) {
  const Tensor& a = tape.value(alpha);
  const Tensor& c = tape.value(candidates);
  if (a.rows != 1 || a.cols != c.rows)
    throw ShapeError("fuse: alpha " + shape_str(a) + " vs candidates " + shape_str(c));
  return tape.matmul(alpha, candidates);
}

struct RetrievalTrace {
  std::size_t step = 0;
  Tensor q_prime;                       // [1 x d]
  std::vector<std::string> doc_ids;     // candidates, index-row order
  std::vector<std::size_t> candidate_rows;
  Tensor scores;                        // [1 x k]
  Tensor alpha;                         // [1 x k]
  Tensor c_t;                           // [1 x d]

  // Candidate position of a document, if present.
  std::optional<std::size_t> position_of(const std::string& doc_id) const {
    for (std::size_t i = 0; i < doc_ids.size(); ++i)
      if (doc_ids[i] == doc_id) return i;
    return std::nullopt;
  }

  std::size_t argmax_alpha() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < alpha.cols; ++i)
      if (alpha.data[i] > alpha.data[best]) best = i;
    return best;
  }
  const std::string& top_doc() const { return doc_ids[argmax_alpha()]; }
};

struct RetrieveStepResult {
  RetrievalTrace trace;
  NodeId alpha = -1;
  NodeId c_t = -1;
};

// Composes controller -> scoring -> top-k candidate selection -> softmax over
// candidates -> fusion, recording the full trace. `candidates` holds one tape
// row per index document in index row order (differentiable when the encoder
// is unfrozen; a constant node otherwise).
inline RetrieveStepResult retrieve_step(Tape& tape, std::size_t step, NodeId q,
                                        NodeId h_t, const Index& index,
                                        NodeId candidates,
                                        const ControllerNodes& ctrl, std::size_t k) {
  if (index.count() == 0) throw ContractError("retrieve_step: empty index");
  if (k > index.count()) throw ContractError("retrieve_step: k exceeds index size");
  NodeId q_prime = controller_forward(tape, q, h_t, ctrl);

  // Candidate preselection over current tape values (non-differentiable).
  Tensor full_scores = tape.value(score_all(tape, q_prime, candidates));
  std::vector<std::size_t> rows = top_k(full_scores, index.doc_ids, k);
  std::sort(rows.begin(), rows.end());  // keep index row order within the pool

  NodeId pool = candidates;
  if (k < index.count()) {
    pool = tape.slice_rows(candidates, rows[0], 1);
    for (std::size_t i = 1; i < rows.size(); ++i)
      pool = tape.concat_rows(pool, tape.slice_rows(candidates, rows[i], 1));
  }

  NodeId scores = score_all(tape, q_prime, pool);
  NodeId alpha = tape.softmax_rows(scores);
  NodeId c_t = fuse(tape, alpha, pool);

  RetrieveStepResult res;
  res.alpha = alpha;
  res.c_t = c_t;
  res.trace.step = step;
  res.trace.q_prime = tape.value(q_prime);
  res.trace.candidate_rows = rows;
  for (std::size_t r : rows) res.trace.doc_ids.push_back(index.doc_ids[r]);
  res.trace.scores = tape.value(scores);
  res.trace.alpha = tape.value(alpha);
  res.trace.c_t = tape.value(c_t);
  return res;
}

}  // namespace dynrag
