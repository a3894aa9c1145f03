#pragma once

// Dense 2-D tensors with a tape-based reverse-mode autodiff engine.
// The tape is rebuilt for every forward pass; leaves accumulate
// gradients into their owning Tensor until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dynrag {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};
struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily, same length as data

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {
    if (r == 0 || c == 0) throw ShapeError("tensor dimensions must be positive");
  }
  Tensor(std::size_t r, std::size_t c, std::vector<double> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (r == 0 || c == 0) throw ShapeError("tensor dimensions must be positive");
    if (data.size() != r * c) throw ShapeError("data length does not match shape");
  }

  static Tensor row(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor(1, n, std::move(d));
  }

  std::size_t size() const { return data.size(); }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  void set_requires_grad(bool on = true) {
    requires_grad = on;
    if (on) grad.assign(data.size(), 0.0);
    else grad.clear();
  }
  void zero_grad() {
    if (requires_grad) grad.assign(data.size(), 0.0);
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced in ") + where);
}

inline std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows) + "x" + std::to_string(t.cols) + "]";
}

// ---------------------------------------------------------------------------
// Tape

using NodeId = int;

class Tape {
 public:
  NodeId leaf(Tensor& t) {
    if (!t.requires_grad) throw ContractError("leaf() requires a requires_grad tensor");
    if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
    NodeId id = push(t, nullptr);
    nodes_[id].leaf = &t;
    return id;
  }

  NodeId constant(Tensor t) {
    check_finite(t, "constant");
    return push(std::move(t), nullptr);
  }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  std::size_t node_count() const { return nodes_.size(); }

  // -- ops -------------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rows != tb.rows || ta.cols != tb.cols)
      throw ShapeError("add: shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
    Tensor out(ta.rows, ta.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    return record(std::move(out), "add", [this, a, b](const Node& n) {
      axpy(a, n.adj);
      axpy(b, n.adj);
    });
  }

  // a [m x n] + bias row [1 x n], broadcast over rows
  NodeId add_row(NodeId a, NodeId bias) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(bias);
    if (tb.rows != 1 || tb.cols != ta.cols)
      throw ShapeError("add_row: bias " + shape_str(tb) + " does not match " + shape_str(ta));
    Tensor out = ta;
    for (std::size_t r = 0; r < ta.rows; ++r)
      for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) += tb.at(0, c);
    return record(std::move(out), "add_row", [this, a, bias](const Node& n) {
      axpy(a, n.adj);
      const Tensor& ta = val(a);
      auto& g = nodes_[bias].adj;
      ensure_adj(bias);
      for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < ta.cols; ++c) g[c] += n.adj[r * ta.cols + c];
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rows != tb.rows || ta.cols != tb.cols)
      throw ShapeError("mul: shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
    Tensor out(ta.rows, ta.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
    return record(std::move(out), "mul", [this, a, b](const Node& n) {
      const Tensor& ta = val(a);
      const Tensor& tb = val(b);
      ensure_adj(a);
      ensure_adj(b);
      for (std::size_t i = 0; i < ta.size(); ++i) {
        nodes_[a].adj[i] += n.adj[i] * tb.data[i];
        nodes_[b].adj[i] += n.adj[i] * ta.data[i];
      }
    });
  }

  // a [m x n] * gain row [1 x n], broadcast over rows
  NodeId mul_row(NodeId a, NodeId gain) {
    const Tensor& ta = val(a);
    const Tensor& tg = val(gain);
    if (tg.rows != 1 || tg.cols != ta.cols)
      throw ShapeError("mul_row: gain " + shape_str(tg) + " does not match " + shape_str(ta));
    Tensor out = ta;
    for (std::size_t r = 0; r < ta.rows; ++r)
      for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) *= tg.at(0, c);
    return record(std::move(out), "mul_row", [this, a, gain](const Node& n) {
      const Tensor& ta = val(a);
      const Tensor& tg = val(gain);
      ensure_adj(a);
      ensure_adj(gain);
      for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < ta.cols; ++c) {
          nodes_[a].adj[r * ta.cols + c] += n.adj[r * ta.cols + c] * tg.at(0, c);
          nodes_[gain].adj[c] += n.adj[r * ta.cols + c] * ta.at(r, c);
        }
    });
  }

  NodeId scale(NodeId a, double k) {
    const Tensor& ta = val(a);
    Tensor out = ta;
    for (double& v : out.data) v *= k;
    return record(std::move(out), "scale", [this, a, k](const Node& n) {
      ensure_adj(a);
      for (std::size_t i = 0; i < n.adj.size(); ++i) nodes_[a].adj[i] += n.adj[i] * k;
    });
  }

  NodeId tanh_(NodeId a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::tanh(v);
    return record(std::move(out), "tanh", [this, a](const Node& n) {
      ensure_adj(a);
      for (std::size_t i = 0; i < n.adj.size(); ++i) {
        double y = n.value.data[i];
        nodes_[a].adj[i] += n.adj[i] * (1.0 - y * y);
      }
    });
  }

  NodeId log_(NodeId a) {
    const Tensor& ta = val(a);
    Tensor out = ta;
    for (double& v : out.data) {
      if (v <= 0.0) throw NumericError("log of non-positive value");
      v = std::log(v);
    }
    return record(std::move(out), "log", [this, a](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t i = 0; i < n.adj.size(); ++i)
        nodes_[a].adj[i] += n.adj[i] / ta.data[i];
    });
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.cols != tb.rows)
      throw ShapeError("matmul: inner dimensions disagree " + shape_str(ta) + " x " + shape_str(tb));
    Tensor out(ta.rows, tb.cols);
    matmul_into(ta, tb, out);
    return record(std::move(out), "matmul", [this, a, b](const Node& n) {
      const Tensor& ta = val(a);
      const Tensor& tb = val(b);
      ensure_adj(a);
      ensure_adj(b);
      // dA = dOut * B^T ; dB = A^T * dOut
      auto& da = nodes_[a].adj;
      auto& db = nodes_[b].adj;
      std::size_t m = ta.rows, k = ta.cols, p = tb.cols;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
          double g = n.adj[i * p + j];
          if (g == 0.0) continue;
          for (std::size_t t = 0; t < k; ++t) {
            da[i * k + t] += g * tb.data[t * p + j];
            db[t * p + j] += g * ta.data[i * k + t];
          }
        }
    });
  }

  NodeId transpose(NodeId a) {
    const Tensor& ta = val(a);
    Tensor out(ta.cols, ta.rows);
    for (std::size_t r = 0; r < ta.rows; ++r)
      for (std::size_t c = 0; c < ta.cols; ++c) out.at(c, r) = ta.at(r, c);
    return record(std::move(out), "transpose", [this, a](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < ta.cols; ++c)
          nodes_[a].adj[r * ta.cols + c] += n.adj[c * ta.rows + r];
    });
  }

  // Row-vector / column-wise concatenation: [m x p] ++ [m x q] -> [m x (p+q)]
  NodeId concat_cols(NodeId a, NodeId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rows != tb.rows)
      throw ShapeError("concat_cols: row counts disagree " + shape_str(ta) + " vs " + shape_str(tb));
    Tensor out(ta.rows, ta.cols + tb.cols);
    for (std::size_t r = 0; r < ta.rows; ++r) {
      for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c);
      for (std::size_t c = 0; c < tb.cols; ++c) out.at(r, ta.cols + c) = tb.at(r, c);
    }
    return record(std::move(out), "concat_cols", [this, a, b](const Node& n) {
      const Tensor& ta = val(a);
      const Tensor& tb = val(b);
      ensure_adj(a);
      ensure_adj(b);
      std::size_t w = ta.cols + tb.cols;
      for (std::size_t r = 0; r < ta.rows; ++r) {
        for (std::size_t c = 0; c < ta.cols; ++c)
          nodes_[a].adj[r * ta.cols + c] += n.adj[r * w + c];
        for (std::size_t c = 0; c < tb.cols; ++c)
          nodes_[b].adj[r * tb.cols + c] += n.adj[r * w + ta.cols + c];
      }
    });
  }

  NodeId concat_rows(NodeId a, NodeId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.cols != tb.cols)
      throw ShapeError("concat_rows: column counts disagree " + shape_str(ta) + " vs " + shape_str(tb));
    Tensor out(ta.rows + tb.rows, ta.cols);
    std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
    std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + ta.size());
    return record(std::move(out), "concat_rows", [this, a, b](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      ensure_adj(b);
      for (std::size_t i = 0; i < ta.size(); ++i) nodes_[a].adj[i] += n.adj[i];
      for (std::size_t i = 0; i < val(b).size(); ++i)
        nodes_[b].adj[i] += n.adj[ta.size() + i];
    });
  }

  NodeId slice_rows(NodeId a, std::size_t start, std::size_t len) {
    const Tensor& ta = val(a);
    if (len == 0 || start + len > ta.rows)
      throw ShapeError("slice_rows: range out of bounds for " + shape_str(ta));
    Tensor out(len, ta.cols);
    std::copy(ta.data.begin() + start * ta.cols,
              ta.data.begin() + (start + len) * ta.cols, out.data.begin());
    return record(std::move(out), "slice_rows", [this, a, start, len](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t i = 0; i < len * ta.cols; ++i)
        nodes_[a].adj[start * ta.cols + i] += n.adj[i];
    });
  }

  NodeId take_row(NodeId a, std::size_t r) { return slice_rows(a, r, 1); }

  NodeId slice_cols(NodeId a, std::size_t start, std::size_t len) {
    const Tensor& ta = val(a);
    if (len == 0 || start + len > ta.cols)
      throw ShapeError("slice_cols: range out of bounds for " + shape_str(ta));
    Tensor out(ta.rows, len);
    for (std::size_t r = 0; r < ta.rows; ++r)
      for (std::size_t c = 0; c < len; ++c) out.at(r, c) = ta.at(r, start + c);
    return record(std::move(out), "slice_cols", [this, a, start, len](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < len; ++c)
          nodes_[a].adj[r * ta.cols + start + c] += n.adj[r * len + c];
    });
  }

  // Gather rows of an embedding-style matrix: out row i = a row idx[i].
  NodeId gather_rows(NodeId a, std::vector<std::size_t> idx) {
    const Tensor& ta = val(a);
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    for (std::size_t r : idx)
      if (r >= ta.rows) throw IndexError("gather_rows: row index " + std::to_string(r) +
                                         " out of range for " + shape_str(ta));
    Tensor out(idx.size(), ta.cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(ta.data.begin() + idx[i] * ta.cols,
                ta.data.begin() + (idx[i] + 1) * ta.cols,
                out.data.begin() + i * ta.cols);
    return record(std::move(out), "gather_rows", [this, a, idx](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < ta.cols; ++c)
          nodes_[a].adj[idx[i] * ta.cols + c] += n.adj[i * ta.cols + c];
    });
  }

  NodeId mean_rows(NodeId a) {
    const Tensor& ta = val(a);
    Tensor out(1, ta.cols);
    for (std::size_t r = 0; r < ta.rows; ++r)
      for (std::size_t c = 0; c < ta.cols; ++c) out.data[c] += ta.at(r, c);
    double inv = 1.0 / static_cast<double>(ta.rows);
    for (double& v : out.data) v *= inv;
    return record(std::move(out), "mean_rows", [this, a, inv](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < ta.cols; ++c)
          nodes_[a].adj[r * ta.cols + c] += n.adj[c] * inv;
    });
  }

  NodeId sum(NodeId a) {
    const Tensor& ta = val(a);
    double s = 0.0;
    for (double v : ta.data) s += v;
    Tensor out(1, 1);
    out.data[0] = s;
    return record(std::move(out), "sum", [this, a](const Node& n) {
      ensure_adj(a);
      for (double& g : nodes_[a].adj) g += n.adj[0];
    });
  }

  NodeId pick(NodeId a, std::size_t i) {
    const Tensor& ta = val(a);
    if (ta.rows != 1) throw ShapeError("pick: expected a row vector, got " + shape_str(ta));
    if (i >= ta.cols) throw IndexError("pick: index " + std::to_string(i) + " out of range");
    Tensor out(1, 1);
    out.data[0] = ta.data[i];
    return record(std::move(out), "pick", [this, a, i](const Node& n) {
      ensure_adj(a);
      nodes_[a].adj[i] += n.adj[0];
    });
  }

  // Row-wise softmax with max-subtraction.
  NodeId softmax_rows(NodeId a) {
    const Tensor& ta = val(a);
    if (ta.size() == 0) throw ShapeError("softmax: empty input");
    Tensor out = ta;
    for (std::size_t r = 0; r < ta.rows; ++r) {
      double mx = ta.at(r, 0);
      for (std::size_t c = 1; c < ta.cols; ++c) mx = std::max(mx, ta.at(r, c));
      double denom = 0.0;
      for (std::size_t c = 0; c < ta.cols; ++c) {
        out.at(r, c) = std::exp(ta.at(r, c) - mx);
        denom += out.at(r, c);
      }
      for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) /= denom;
    }
    return record(std::move(out), "softmax", [this, a](const Node& n) {
      const Tensor& y = n.value;
      ensure_adj(a);
      for (std::size_t r = 0; r < y.rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < y.cols; ++c)
          dot += n.adj[r * y.cols + c] * y.at(r, c);
        for (std::size_t c = 0; c < y.cols; ++c)
          nodes_[a].adj[r * y.cols + c] +=
              y.at(r, c) * (n.adj[r * y.cols + c] - dot);
      }
    });
  }

  // Adds a large negative constant above the diagonal; used before softmax
  // in causal self-attention. Gradients through masked entries are dropped.
  NodeId causal_mask(NodeId a) {
    const Tensor& ta = val(a);
    if (ta.rows != ta.cols) throw ShapeError("causal_mask: expected square scores, got " + shape_str(ta));
    Tensor out = ta;
    for (std::size_t r = 0; r < ta.rows; ++r)
      for (std::size_t c = r + 1; c < ta.cols; ++c) out.at(r, c) = kMaskValue;
    return record(std::move(out), "causal_mask", [this, a](const Node& n) {
      const Tensor& ta = val(a);
      ensure_adj(a);
      for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c <= r; ++c)
          nodes_[a].adj[r * ta.cols + c] += n.adj[r * ta.cols + c];
    }, /*check=*/false);
  }

  // Per-row normalization to zero mean / unit variance.
  NodeId layer_norm_rows(NodeId a, double eps = 1e-5) {
    const Tensor& ta = val(a);
    Tensor out(ta.rows, ta.cols);
    std::vector<double> inv_std(ta.rows), mean(ta.rows);
    std::size_t nc = ta.cols;
    for (std::size_t r = 0; r < ta.rows; ++r) {
      double mu = 0.0;
      for (std::size_t c = 0; c < nc; ++c) mu += ta.at(r, c);
      mu /= static_cast<double>(nc);
      double var = 0.0;
      for (std::size_t c = 0; c < nc; ++c) {
        double d = ta.at(r, c) - mu;
        var += d * d;
      }
      var /= static_cast<double>(nc);
      double is = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < nc; ++c) out.at(r, c) = (ta.at(r, c) - mu) * is;
      inv_std[r] = is;
      mean[r] = mu;
    }
    return record(std::move(out), "layer_norm",
                  [this, a, inv_std = std::move(inv_std)](const Node& n) {
      const Tensor& y = n.value;
      ensure_adj(a);
      std::size_t nc = y.cols;
      double inv_n = 1.0 / static_cast<double>(nc);
      for (std::size_t r = 0; r < y.rows; ++r) {
        double gsum = 0.0, gysum = 0.0;
        for (std::size_t c = 0; c < nc; ++c) {
          gsum += n.adj[r * nc + c];
          gysum += n.adj[r * nc + c] * y.at(r, c);
        }
        for (std::size_t c = 0; c < nc; ++c) {
          double g = n.adj[r * nc + c];
          nodes_[a].adj[r * nc + c] +=
              inv_std[r] * (g - inv_n * gsum - y.at(r, c) * inv_n * gysum);
        }
      }
    });
  }

  // -log softmax(logits)[target], fused for stability.
  NodeId cross_entropy(NodeId logits, std::size_t target) {
    const Tensor& tl = val(logits);
    if (tl.rows != 1) throw ShapeError("cross_entropy: logits must be a row vector, got " + shape_str(tl));
    if (target >= tl.cols)
      throw IndexError("cross_entropy: target " + std::to_string(target) +
                       " out of range for vocab " + std::to_string(tl.cols));
    double mx = *std::max_element(tl.data.begin(), tl.data.end());
    double denom = 0.0;
    for (double v : tl.data) denom += std::exp(v - mx);
    double lse = mx + std::log(denom);
    Tensor out(1, 1);
    out.data[0] = lse - tl.data[target];
    std::vector<double> probs(tl.cols);
    for (std::size_t i = 0; i < tl.cols; ++i) probs[i] = std::exp(tl.data[i] - mx) / denom;
    return record(std::move(out), "cross_entropy",
                  [this, logits, target, probs = std::move(probs)](const Node& n) {
      ensure_adj(logits);
      for (std::size_t i = 0; i < probs.size(); ++i) {
        double d = probs[i] - (i == target ? 1.0 : 0.0);
        nodes_[logits].adj[i] += n.adj[0] * d;
      }
    });
  }

  // -- backward ---------------------------------------------------------

  void backward(NodeId loss) {
    if (backward_done_) throw StateError("backward already run on this tape");
    const Tensor& tl = val(loss);
    if (tl.rows != 1 || tl.cols != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(tl));
    backward_done_ = true;
    ensure_adj(loss);
    nodes_[loss].adj[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.adj.empty()) continue;
      if (n.backward_fn) n.backward_fn(n);
      if (n.leaf) {
        for (std::size_t i = 0; i < n.adj.size(); ++i) n.leaf->grad[i] += n.adj[i];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> adj;  // sized on demand during backward
    std::function<void(const Node&)> backward_fn;
    Tensor* leaf = nullptr;
  };

  static constexpr double kMaskValue = -1e30;

  const Tensor& val(NodeId id) const { return nodes_[id].value; }

  void ensure_adj(NodeId id) {
    if (nodes_[id].adj.empty()) nodes_[id].adj.assign(nodes_[id].value.size(), 0.0);
  }

  void axpy(NodeId dst, const std::vector<double>& g) {
    ensure_adj(dst);
    auto& a = nodes_[dst].adj;
    for (std::size_t i = 0; i < g.size(); ++i) a[i] += g[i];
  }

  NodeId push(Tensor t, std::function<void(const Node&)> fn) {
    nodes_.push_back(Node{std::move(t), {}, std::move(fn), nullptr});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId record(Tensor out, const char* op, std::function<void(const Node&)> fn,
                bool check = true) {
    if (check) check_finite(out, op);
    return push(std::move(out), std::move(fn));
  }

  static void matmul_into(const Tensor& a, const Tensor& b, Tensor& out) {
    std::size_t m = a.rows, k = a.cols, p = b.cols;
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = out.data.data() + i * p;
      for (std::size_t t = 0; t < k; ++t) {
        double av = a.data[i * k + t];
        if (av == 0.0) continue;
        const double* brow = b.data.data() + t * p;
        for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
      }
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::map<std::string, double> per_block;
  bool deterministic = true;
};

// f(with_grad): evaluates the scalar function at the current parameter values;
// when with_grad it must also run backward so grads land in the parameters.
// Grads are zeroed here before every analytic evaluation.
inline GradCheckResult grad_check(
    const std::function<double(bool with_grad)>& f,
    const std::vector<std::pair<std::string, Tensor*>>& params, double eps) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");
  for (auto& [name, p] : params) p->zero_grad();
  double base = f(true);
  double repeat = f(false);
  GradCheckResult res;
  if (base != repeat) {
    res.deterministic = false;
    throw ContractError("grad_check: function is not deterministic (" +
                        std::to_string(base) + " vs " + std::to_string(repeat) + ")");
  }
  for (auto& [name, p] : params) {
    double block_worst = 0.0;
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      double saved = p->data[i];
      p->data[i] = saved + eps;
      double fp = f(false);
      p->data[i] = saved - eps;
      double fm = f(false);
      p->data[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double analytic = p->grad[i];
      double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      block_worst = std::max(block_worst, std::abs(analytic - numeric) / denom);
    }
    res.per_block[name] = block_worst;
    res.max_rel_err = std::max(res.max_rel_err, block_worst);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Parameter initialization helper: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

inline Tensor init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in,
                           std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (double& v : t.data) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

}  // namespace dynrag
