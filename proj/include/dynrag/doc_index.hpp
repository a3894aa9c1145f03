#pragma once

// Trainable document encoder (mean-pooled embeddings -> affine -> tanh) and
// an exact dense inner-product index with differentiable scaled scoring.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "corpus.hpp"
#include "tensor.hpp"

namespace dynrag {

struct DocEncoderParams {
  Tensor embedding;  // [V x d]
  Tensor proj;       // [d x d]
  Tensor bias;       // [1 x d]

  static DocEncoderParams init(std::size_t vocab, std::size_t d, std::mt19937_64& rng) {
    DocEncoderParams p;
    p.embedding = init_uniform(vocab, d, d, rng);
    p.proj = init_uniform(d, d, d, rng);
    p.bias = Tensor(1, d);
    p.bias.set_requires_grad(true);
    return p;
  }

  std::size_t dim() const { return proj.cols; }

  std::vector<std::pair<std::string, Tensor*>> blocks() {
    return {{"enc.embedding", &embedding}, {"enc.proj", &proj}, {"enc.bias", &bias}};
  }
};

struct EncoderNodes {
  NodeId embedding, proj, bias;
};

inline EncoderNodes encoder_on_tape(Tape& tape, DocEncoderParams& params) {
  return {tape.leaf(params.embedding), tape.leaf(params.proj), tape.leaf(params.bias)};
}

// tanh(mean(embeddings of tokens) * proj + bias); the tokens with id >= V are
// a caller bug, surfaced by gather_rows.
inline NodeId encode_tokens(Tape& tape, const std::vector<TokenId>& token_ids,
                            const EncoderNodes& enc) {
  if (token_ids.empty()) throw ContractError("encode: empty token sequence");
  NodeId emb = tape.gather_rows(enc.embedding, token_ids);
  NodeId pooled = tape.mean_rows(emb);
  return tape.tanh_(tape.add_row(tape.matmul(pooled, enc.proj), enc.bias));
}

inline NodeId encode_document(Tape& tape, const Document& doc, const EncoderNodes& enc) {
  if (doc.token_ids.empty())
    throw ContractError("encode_document: document '" + doc.doc_id + "' is empty");
  return encode_tokens(tape, doc.token_ids, enc);
}

// Value-only encoding on a scratch tape.
inline Tensor encode_document_value(const Document& doc, DocEncoderParams& params) {
  Tape tape;
  EncoderNodes enc = encoder_on_tape(tape, params);
  return tape.value(encode_document(tape, doc, enc));
}

struct Index {
  std::vector<std::string> doc_ids;
  Tensor matrix;  // [N x d]

  std::size_t count() const { return doc_ids.size(); }
  std::size_t dim() const { return matrix.cols; }
};

inline Index build_index(const std::vector<Document>& docs, DocEncoderParams& params) {
  if (docs.empty()) throw ContractError("build_index: no documents");
  std::unordered_set<std::string> seen;
  for (const auto& d : docs)
    if (!seen.insert(d.doc_id).second)
      throw IntegrityError("build_index: duplicate doc_id '" + d.doc_id + "'");
  Tape tape;
  EncoderNodes enc = encoder_on_tape(tape, params);
  Index index;
  index.matrix = Tensor(docs.size(), params.dim());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    index.doc_ids.push_back(docs[i].doc_id);
    const Tensor& row = tape.value(encode_document(tape, docs[i], enc));
    std::copy(row.data.begin(), row.data.end(),
              index.matrix.data.begin() + i * params.dim());
  }
  return index;
}

// Differentiable candidate matrix: encodes the selected documents on the
// given tape so gradients reach the encoder.
inline NodeId encode_candidates(Tape& tape, const std::vector<Document>& docs,
                                const std::vector<std::size_t>& rows,
                                const EncoderNodes& enc) {
  if (rows.empty()) throw ContractError("encode_candidates: empty candidate set");
  NodeId acc = encode_document(tape, docs[rows[0]], enc);
  for (std::size_t i = 1; i < rows.size(); ++i)
    acc = tape.concat_rows(acc, encode_document(tape, docs[rows[i]], enc));
  return acc;
}

// entry i = (q' . d_i) / sqrt(d)
inline NodeId score_all(Tape& tape, NodeId q_prime, NodeId candidates) {
  const Tensor& q = tape.value(q_prime);
  const Tensor& c = tape.value(candidates);
  if (q.rows != 1 || q.cols != c.cols)
    throw ShapeError("score_all: query " + shape_str(q) + " vs candidates " + shape_str(c));
  NodeId raw = tape.matmul(q_prime, tape.transpose(candidates));
  return tape.scale(raw, 1.0 / std::sqrt(static_cast<double>(q.cols)));
}

inline Tensor score_all_value(const Tensor& q_prime, const Index& index) {
  if (q_prime.rows != 1 || q_prime.cols != index.dim())
    throw ShapeError("score_all: query " + shape_str(q_prime) + " vs index dim " +
                     std::to_string(index.dim()));
  Tensor out(1, index.count());
  double inv = 1.0 / std::sqrt(static_cast<double>(index.dim()));
  for (std::size_t i = 0; i < index.count(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < index.dim(); ++c)
      s += q_prime.data[c] * index.matrix.at(i, c);
    out.data[i] = s * inv;
  }
  return out;
}

// k highest-scoring rows; ties broken by ascending doc_id.
inline std::vector<std::size_t> top_k(const Tensor& scores,
                                      const std::vector<std::string>& doc_ids,
                                      std::size_t k) {
  std::size_t n = scores.cols;
  if (scores.rows != 1) throw ShapeError("top_k: scores must be a row vector");
  if (k < 1 || k > n)
    throw ContractError("top_k: k=" + std::to_string(k) + " out of range for N=" +
                        std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.data[a] != scores.data[b]) return scores.data[a] > scores.data[b];
    return doc_ids[a] < doc_ids[b];
  });
  order.resize(k);
  return order;
}

// ---------------------------------------------------------------------------
// Binary snapshot: magic, N, d (u64 LE), doc ids (u32 length + bytes each),
// then row-major f64 LE rows.

inline void save_index(const Index& index, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open for write: " + path);
  const char magic[8] = {'D', 'R', 'I', 'D', 'X', '0', '0', '1'};
  out.write(magic, 8);
  auto put_u64 = [&](std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<char*>(b), 8);
  };
  put_u64(index.count());
  put_u64(index.dim());
  for (const auto& id : index.doc_ids) {
    std::uint32_t len = static_cast<std::uint32_t>(id.size());
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<char*>(b), 4);
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  for (double v : index.matrix.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(bits);
  }
}

inline Index load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open index file: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "DRIDX001", 8) != 0)
    throw ParseError("bad index file magic in " + path);
  auto get_u64 = [&]() {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw ParseError("truncated index file: " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  };
  std::uint64_t n = get_u64(), d = get_u64();
  Index index;
  for (std::uint64_t i = 0; i < n; ++i) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ParseError("truncated index file: " + path);
    std::uint32_t len = 0;
    for (int j = 0; j < 4; ++j) len |= static_cast<std::uint32_t>(b[j]) << (8 * j);
    std::string id(len, '\0');
    in.read(id.data(), len);
    index.doc_ids.push_back(std::move(id));
  }
  index.matrix = Tensor(n, d);
  for (auto& v : index.matrix.data) {
    std::uint64_t bits = get_u64();
    std::memcpy(&v, &bits, 8);
  }
  return index;
}

}  // namespace dynrag
