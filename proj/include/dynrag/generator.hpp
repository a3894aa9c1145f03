#pragma once

// Micro-transformer decoder: causal self-attention over the generated prefix
// with the fused retrieval context injected at the current position.
// Pre-layer-norm convention, tanh feed-forward activation, learned positions.

#include "controller.hpp"
#include "corpus.hpp"
#include "tensor.hpp"

namespace dynrag {

struct DecoderLayerParams {
  Tensor wq, wk, wv, wo;          // [d x d]
  Tensor ff1, ffb1, ff2, ffb2;    // [d x ff], [1 x ff], [ff x d], [1 x d]
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // [1 x d]
};

struct DecoderParams {
  std::size_t n_heads = 2;
  std::size_t t_max = 64;
  Tensor tok_emb;   // [V x d]
  Tensor pos;       // [T_max x d], learned
  std::vector<DecoderLayerParams> layers;
  Tensor lnf_g, lnf_b;  // final layer norm [1 x d]
  Tensor w_inj;     // [2d x d], context injection
  Tensor w_o;       // [d x V], output map

  std::size_t dim() const { return w_inj.cols; }
  std::size_t vocab() const { return w_o.cols; }

  static DecoderParams init(std::size_t vocab, std::size_t d, std::size_t n_layers,
                            std::size_t n_heads, std::size_t ff, std::size_t t_max,
                            std::mt19937_64& rng) {
    if (n_layers < 1) throw ContractError("decoder: need at least one layer");
    if (d % n_heads != 0) throw ContractError("decoder: head count must divide d");
    DecoderParams p;
    p.n_heads = n_heads;
    p.t_max = t_max;
    p.tok_emb = init_uniform(vocab, d, d, rng);
    p.pos = init_uniform(t_max, d, d, rng);
    for (std::size_t l = 0; l < n_layers; ++l) {
      DecoderLayerParams lp;
      lp.wq = init_uniform(d, d, d, rng);
      lp.wk = init_uniform(d, d, d, rng);
      lp.wv = init_uniform(d, d, d, rng);
      lp.wo = init_uniform(d, d, d, rng);
      lp.ff1 = init_uniform(d, ff, d, rng);
      lp.ffb1 = Tensor(1, ff);
      lp.ffb1.set_requires_grad(true);
      lp.ff2 = init_uniform(ff, d, ff, rng);
      lp.ffb2 = Tensor(1, d);
      lp.ffb2.set_requires_grad(true);
      lp.ln1_g = Tensor(1, d, 1.0);
      lp.ln1_g.set_requires_grad(true);
      lp.ln1_b = Tensor(1, d);
      lp.ln1_b.set_requires_grad(true);
      lp.ln2_g = Tensor(1, d, 1.0);
      lp.ln2_g.set_requires_grad(true);
      lp.ln2_b = Tensor(1, d);
      lp.ln2_b.set_requires_grad(true);
      p.layers.push_back(std::move(lp));
    }
    p.lnf_g = Tensor(1, d, 1.0);
    p.lnf_g.set_requires_grad(true);
    p.lnf_b = Tensor(1, d);
    p.lnf_b.set_requires_grad(true);
    p.w_inj = init_uniform(2 * d, d, 2 * d, rng);
    p.w_o = init_uniform(d, vocab, d, rng);
    return p;
  }

  std::vector<std::pair<std::string, Tensor*>> blocks() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"dec.tok_emb", &tok_emb}, {"dec.pos", &pos}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& lp = layers[l];
      std::string pre = "dec.layer" + std::to_string(l) + ".";
      out.emplace_back(pre + "wq", &lp.wq);
      out.emplace_back(pre + "wk", &lp.wk);
      out.emplace_back(pre + "wv", &lp.wv);
      out.emplace_back(pre + "wo", &lp.wo);
      out.emplace_back(pre + "ff1", &lp.ff1);
      out.emplace_back(pre + "ffb1", &lp.ffb1);
      out.emplace_back(pre + "ff2", &lp.ff2);
      out.emplace_back(pre + "ffb2", &lp.ffb2);
      out.emplace_back(pre + "ln1_g", &lp.ln1_g);
      out.emplace_back(pre + "ln1_b", &lp.ln1_b);
      out.emplace_back(pre + "ln2_g", &lp.ln2_g);
      out.emplace_back(pre + "ln2_b", &lp.ln2_b);
    }
    out.emplace_back("dec.lnf_g", &lnf_g);
    out.emplace_back("dec.lnf_b", &lnf_b);
    out.emplace_back("dec.w_inj", &w_inj);
    out.emplace_back("dec.w_o", &w_o);
    return out;
  }
};

struct DecoderLayerNodes {
  NodeId wq, wk, wv, wo, ff1, ffb1, ff2, ffb2, ln1_g, ln1_b, ln2_g, ln2_b;
};

struct DecoderNodes {
  NodeId tok_emb, pos;
  std::vector<DecoderLayerNodes> layers;
  NodeId lnf_g, lnf_b, w_inj, w_o;
  std::size_t n_heads = 2;
  std::size_t t_max = 64;
};

inline DecoderNodes decoder_on_tape(Tape& tape, DecoderParams& params) {
  DecoderNodes n;
  n.n_heads = params.n_heads;
  n.t_max = params.t_max;
  n.tok_emb = tape.leaf(params.tok_emb);
  n.pos = tape.leaf(params.pos);
  for (auto& lp : params.layers)
    n.layers.push_back({tape.leaf(lp.wq), tape.leaf(lp.wk), tape.leaf(lp.wv),
                        tape.leaf(lp.wo), tape.leaf(lp.ff1), tape.leaf(lp.ffb1),
                        tape.leaf(lp.ff2), tape.leaf(lp.ffb2), tape.leaf(lp.ln1_g),
                        tape.leaf(lp.ln1_b), tape.leaf(lp.ln2_g), tape.leaf(lp.ln2_b)});
  n.lnf_g = tape.leaf(params.lnf_g);
  n.lnf_b = tape.leaf(params.lnf_b);
  n.w_inj = tape.leaf(params.w_inj);
  n.w_o = tape.leaf(params.w_o);
  return n;
}

// Final-layer representation at the last prefix position, with the context
// vector injected at that position before layer 1.
inline NodeId transformer_hidden(Tape& tape, const std::vector<TokenId>& prefix,
                                 NodeId context, const DecoderNodes& dec) {
  std::size_t T = prefix.size();
  if (T == 0) throw ContractError("transformer: empty prefix");
  if (T > dec.t_max)
    throw ContractError("transformer: prefix length " + std::to_string(T) +
                        " exceeds capacity " + std::to_string(dec.t_max));
  const std::size_t d = tape.value(dec.lnf_g).cols;
  const std::size_t dh = d / dec.n_heads;

  std::vector<std::size_t> positions(T);
  for (std::size_t i = 0; i < T; ++i) positions[i] = i;
  NodeId x = tape.add(tape.gather_rows(dec.tok_emb, std::vector<std::size_t>(prefix.begin(), prefix.end())),
                      tape.gather_rows(dec.pos, positions));

  // Context injection at the current position: [x_T ; c_t] -> d.
  NodeId last = tape.take_row(x, T - 1);
  NodeId injected = tape.matmul(tape.concat_cols(last, context), dec.w_inj);
  x = (T == 1) ? injected : tape.concat_rows(tape.slice_rows(x, 0, T - 1), injected);

  for (const auto& L : dec.layers) {
    NodeId a = tape.add_row(tape.mul_row(tape.layer_norm_rows(x), L.ln1_g), L.ln1_b);
    NodeId q = tape.matmul(a, L.wq);
    NodeId k = tape.matmul(a, L.wk);
    NodeId v = tape.matmul(a, L.wv);
    NodeId heads = -1;
    for (std::size_t h = 0; h < dec.n_heads; ++h) {
      NodeId qh = tape.slice_cols(q, h * dh, dh);
      NodeId kh = tape.slice_cols(k, h * dh, dh);
      NodeId vh = tape.slice_cols(v, h * dh, dh);
      NodeId s = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                            1.0 / std::sqrt(static_cast<double>(dh)));
      NodeId p = tape.softmax_rows(tape.causal_mask(s));
      NodeId hh = tape.matmul(p, vh);
      heads = (heads < 0) ? hh : tape.concat_cols(heads, hh);
    }
    x = tape.add(x, tape.matmul(heads, L.wo));
    NodeId b = tape.add_row(tape.mul_row(tape.layer_norm_rows(x), L.ln2_g), L.ln2_b);
    NodeId f = tape.add_row(
        tape.matmul(tape.tanh_(tape.add_row(tape.matmul(b, L.ff1), L.ffb1)), L.ff2),
        L.ffb2);
    x = tape.add(x, f);
  }
  NodeId hidden = tape.add_row(tape.mul_row(tape.layer_norm_rows(x), dec.lnf_g), dec.lnf_b);
  return tape.take_row(hidden, T - 1);
}

inline NodeId decode_step(Tape& tape, const std::vector<TokenId>& prefix,
                          NodeId c_t, const DecoderNodes& dec) {
  return tape.matmul(transformer_hidden(tape, prefix, c_t, dec), dec.w_o);
}

struct GenerationResult {
  std::vector<TokenId> token_ids;          // BOS ... (EOS when reached)
  std::vector<RetrievalTrace> traces;      // one per emitted token
  std::vector<Tensor> logit_snapshots;     // flag-gated
};

}  // namespace dynrag
