#pragma once

#include <utility>
#include <vector>

#include "mmkn/tensor.hpp"

namespace mmkn {

// Reverse-mode gradient tape. Nodes are recorded in construction order,
// which is already a topological order (an op can only consume ids that
// exist), so backward() is a single reverse sweep that touches each node
// once. Forward intermediates are saved eagerly.
//
// A tape is single-threaded for one forward/backward pass; independent
// tapes may run concurrently.
class Tape {
 public:
  enum class Op {
    Leaf,
    MatMul,
    Add,
    AddRowVec,
    AddConst,
    Hadamard,
    Scale,
    Gelu,
    LayerNormRows,
    SoftmaxRows,
    CausalAttention,
    ConcatRows,
    GatherRows,
    Pick,
    CrossEntropyMean,
  };

  struct Node {
    Op op = Op::Leaf;
    int in0 = -1, in1 = -1, in2 = -1;
    Tensor value;
    Tensor aux;   // op-specific saved state (softmax probs, xhat, ...)
    Tensor aux2;  // secondary saved state (layernorm inv-std)
    std::vector<int> idata;
    double scalar = 0.0;
    bool needs_grad = false;
  };

  int leaf(Tensor value, bool needs_grad = true) {
    value.assert_finite("tape leaf");
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  int matmul(int a, int b) {
    Node n = binary(Op::MatMul, a, b);
    n.value = mmkn::matmul(value(a), value(b));
    return push(std::move(n));
  }

  int add(int a, int b) {
    Node n = binary(Op::Add, a, b);
    n.value = mmkn::add(value(a), value(b));
    return push(std::move(n));
  }

  // A (m x n) plus a length-n vector broadcast over rows.
  int add_rowvec(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_shape(av.rank() == 2 && bv.numel() == static_cast<std::size_t>(av.dim(1)),
                  "add_rowvec shape mismatch");
    Node n = binary(Op::AddRowVec, a, b);
    n.value = av;
    for (int i = 0; i < av.dim(0); ++i) {
      double* row = n.value.row(i);
      for (int j = 0; j < av.dim(1); ++j) row[j] += bv.data[static_cast<std::size_t>(j)];
    }
    return push(std::move(n));
  }

  // Adds a constant tensor; gradient passes through to the input only.
  int add_const(int a, Tensor c) {
    require_shape(value(a).same_shape(c), "add_const shape mismatch");
    Node n = unary(Op::AddConst, a);
    n.value = mmkn::add(value(a), c);
    n.aux = std::move(c);
    return push(std::move(n));
  }

  int hadamard(int a, int b) {
    Node n = binary(Op::Hadamard, a, b);
    n.value = mmkn::hadamard(value(a), value(b));
    return push(std::move(n));
  }

  int scale(int a, double s) {
    Node n = unary(Op::Scale, a);
    n.scalar = s;
    n.value = mmkn::scale(value(a), s);
    return push(std::move(n));
  }

  int gelu(int a) {
    Node n = unary(Op::Gelu, a);
    n.value = mmkn::gelu(value(a));
    return push(std::move(n));
  }

  int layernorm_rows(int x, int gamma, int beta, double eps = 1e-5) {
    const Tensor& xv = value(x);
    require_shape(xv.rank() == 2, "layernorm_rows expects a matrix");
    const int m = xv.dim(0), nn = xv.dim(1);
    Node n;
    n.op = Op::LayerNormRows;
    n.in0 = x;
    n.in1 = gamma;
    n.in2 = beta;
    n.needs_grad = node(x).needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
    n.scalar = eps;
    n.aux = Tensor::zeros({m, nn});  // xhat
    n.aux2 = Tensor::zeros({m});     // inv-std per row
    n.value = layernorm_rows_forward(xv, value(gamma), value(beta), eps, &n.aux, &n.aux2);
    return push(std::move(n));
  }

  int softmax_rows(int a) {
    Node n = unary(Op::SoftmaxRows, a);
    n.value = mmkn::softmax_rows(value(a));
    return push(std::move(n));
  }

  // Fused multi-head causal self-attention over projected q/k/v.
  // Attention weights are saved for backward.
  int causal_attention(int q, int k, int v, int heads) {
    const Tensor& qv = value(q);
    Node n;
    n.op = Op::CausalAttention;
    n.in0 = q;
    n.in1 = k;
    n.in2 = v;
    n.needs_grad = node(q).needs_grad || node(k).needs_grad || node(v).needs_grad;
    n.idata = {heads};
    n.aux = Tensor::zeros({heads, qv.dim(0), qv.dim(0)});
    n.value = attention_core(qv, value(k), value(v), heads, &n.aux);
    return push(std::move(n));
  }

  // Vertical concatenation [A; B] of two matrices with equal widths.
  int concat_rows(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_shape(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
                  "concat_rows width mismatch");
    Node n = binary(Op::ConcatRows, a, b);
    n.value = Tensor::zeros({av.dim(0) + bv.dim(0), av.dim(1)});
    std::copy(av.data.begin(), av.data.end(), n.value.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), n.value.data.begin() + static_cast<long>(av.data.size()));
    return push(std::move(n));
  }

  // Rows of an embedding table selected by id; backward scatter-adds.
  int gather_rows(int table, const std::vector<int>& ids) {
    const Tensor& tv = value(table);
    require_shape(tv.rank() == 2, "gather_rows expects a matrix");
    for (int id : ids)
      require(id >= 0 && id < tv.dim(0), "gather_rows id out of range");
    Node n = unary(Op::GatherRows, table);
    n.idata = ids;
    n.value = Tensor::zeros({static_cast<int>(ids.size()), tv.dim(1)});
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const double* src = tv.row(ids[r]);
      double* dst = n.value.row(static_cast<int>(r));
      std::copy(src, src + tv.dim(1), dst);
    }
    return push(std::move(n));
  }

  // A single matrix entry as a scalar node.
  int pick(int a, int r, int c) {
    const Tensor& av = value(a);
    require_shape(av.rank() == 2, "pick expects a matrix");
    require(r >= 0 && r < av.dim(0) && c >= 0 && c < av.dim(1), "pick index out of range");
    Node n = unary(Op::Pick, a);
    n.idata = {r, c};
    n.value = Tensor::from({1}, {av.at(r, c)});
    return push(std::move(n));
  }

  // Mean token cross-entropy over the given (row, target) pairs.
  int cross_entropy_mean(int logits, const std::vector<int>& rows, const std::vector<int>& targets) {
    const Tensor& lv = value(logits);
    require_shape(lv.rank() == 2, "cross_entropy_mean expects a matrix");
    require(rows.size() == targets.size() && !rows.empty(), "cross_entropy_mean needs rows");
    const int vdim = lv.dim(1);
    Node n = unary(Op::CrossEntropyMean, logits);
    n.idata.reserve(rows.size() * 2);
    n.idata.insert(n.idata.end(), rows.begin(), rows.end());
    n.idata.insert(n.idata.end(), targets.begin(), targets.end());
    n.aux = Tensor::zeros({static_cast<int>(rows.size()), vdim});
    double loss = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r] >= 0 && rows[r] < lv.dim(0), "cross_entropy_mean row out of range");
      require(targets[r] >= 0 && targets[r] < vdim, "cross_entropy_mean target out of range");
      const double* row = lv.row(rows[r]);
      double* probs = n.aux.row(static_cast<int>(r));
      std::copy(row, row + vdim, probs);
      double mx = row[0];
      for (int j = 1; j < vdim; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < vdim; ++j) {
        probs[j] = std::exp(probs[j] - mx);
        sum += probs[j];
      }
      for (int j = 0; j < vdim; ++j) probs[j] /= sum;
      loss += std::log(sum) + mx - row[targets[r]];
    }
    loss /= static_cast<double>(rows.size());
    n.value = Tensor::from({1}, {loss});
    return push(std::move(n));
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Gradient of the backward output with respect to node `id`. Zero
  // tensor if the node did not participate.
  const Tensor& grad(int id) const {
    require(ran_backward_, "grad requested before backward");
    Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.data.empty()) g = Tensor::zeros(value(id).shape);
    return g;
  }

  // Reverse sweep from a scalar output node.
  void backward(int output) {
    require(!ran_backward_, "backward already run on this tape");
    require(value(output).numel() == 1, "backward output must be scalar");
    ran_backward_ = true;
    grads_.assign(nodes_.size(), Tensor());
    grads_[static_cast<std::size_t>(output)] = Tensor::full(value(output).shape, 1.0);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      Tensor& g = grads_[static_cast<std::size_t>(id)];
      if (g.data.empty() || !n.needs_grad) continue;
      switch (n.op) {
        case Op::Leaf:
          break;
        case Op::MatMul:
          if (node(n.in0).needs_grad) accumulate(n.in0, matmul_nt(g, value(n.in1)));
          if (node(n.in1).needs_grad) accumulate(n.in1, matmul_tn(value(n.in0), g));
          break;
        case Op::Add:
          accumulate(n.in0, g);
          accumulate(n.in1, g);
          break;
        case Op::AddRowVec: {
          accumulate(n.in0, g);
          Tensor db = Tensor::zeros(node(n.in1).value.shape);
          for (int i = 0; i < g.dim(0); ++i)
            for (int j = 0; j < g.dim(1); ++j) db.data[static_cast<std::size_t>(j)] += g.at(i, j);
          accumulate(n.in1, std::move(db));
          break;
        }
        case Op::AddConst:
          accumulate(n.in0, g);
          break;
        case Op::Hadamard:
          accumulate(n.in0, hadamard_grad(g, value(n.in1)));
          accumulate(n.in1, hadamard_grad(g, value(n.in0)));
          break;
        case Op::Scale:
          accumulate(n.in0, mmkn::scale(g, n.scalar));
          break;
        case Op::Gelu: {
          const Tensor& x = value(n.in0);
          Tensor dx = g;
          for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= gelu_grad(x.data[i]);
          accumulate(n.in0, std::move(dx));
          break;
        }
        case Op::LayerNormRows:
          backward_layernorm(n, g);
          break;
        case Op::SoftmaxRows: {
          const Tensor& s = n.value;
          Tensor dx = Tensor::zeros(s.shape);
          for (int i = 0; i < s.dim(0); ++i) {
            double dot = 0.0;
            for (int j = 0; j < s.dim(1); ++j) dot += g.at(i, j) * s.at(i, j);
            for (int j = 0; j < s.dim(1); ++j) dx.at(i, j) = s.at(i, j) * (g.at(i, j) - dot);
          }
          accumulate(n.in0, std::move(dx));
          break;
        }
        case Op::CausalAttention:
          backward_attention(n, g);
          break;
        case Op::ConcatRows: {
          const int top_rows = node(n.in0).value.dim(0);
          const int cols = g.dim(1);
          if (node(n.in0).needs_grad) {
            Tensor da = Tensor::zeros(node(n.in0).value.shape);
            std::copy(g.data.begin(), g.data.begin() + static_cast<long>(da.data.size()),
                      da.data.begin());
            accumulate(n.in0, std::move(da));
          }
          if (node(n.in1).needs_grad) {
            Tensor db = Tensor::zeros(node(n.in1).value.shape);
            std::copy(g.data.begin() + static_cast<long>(top_rows) * cols, g.data.end(),
                      db.data.begin());
            accumulate(n.in1, std::move(db));
          }
          break;
        }
        case Op::GatherRows: {
          Tensor dt = Tensor::zeros(node(n.in0).value.shape);
          const int cols = dt.dim(1);
          for (std::size_t r = 0; r < n.idata.size(); ++r) {
            double* dst = dt.row(n.idata[r]);
            const double* src = g.row(static_cast<int>(r));
            for (int j = 0; j < cols; ++j) dst[j] += src[j];
          }
          accumulate(n.in0, std::move(dt));
          break;
        }
        case Op::Pick: {
          Tensor dx = Tensor::zeros(node(n.in0).value.shape);
          dx.at(n.idata[0], n.idata[1]) = g.data[0];
          accumulate(n.in0, std::move(dx));
          break;
        }
        case Op::CrossEntropyMean: {
          const std::size_t count = n.idata.size() / 2;
          const double go = g.data[0] / static_cast<double>(count);
          Tensor dl = Tensor::zeros(node(n.in0).value.shape);
          for (std::size_t r = 0; r < count; ++r) {
            const int row = n.idata[r];
            const int target = n.idata[count + r];
            const double* probs = n.aux.row(static_cast<int>(r));
            double* dst = dl.row(row);
            for (int j = 0; j < dl.dim(1); ++j) dst[j] += go * probs[j];
            dst[target] -= go;
          }
          accumulate(n.in0, std::move(dl));
          break;
        }
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  Node unary(Op op, int a) {
    Node n;
    n.op = op;
    n.in0 = a;
    n.needs_grad = node(a).needs_grad;
    return n;
  }

  Node binary(Op op, int a, int b) {
    Node n;
    n.op = op;
    n.in0 = a;
    n.in1 = b;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return n;
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static Tensor hadamard_grad(const Tensor& g, const Tensor& other) {
    return mmkn::hadamard(g, other);
  }

  void accumulate(int id, Tensor g) {
    if (!node(id).needs_grad) return;
    Tensor& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.data.empty()) {
      slot = std::move(g);
    } else {
      for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
    }
  }

  void backward_layernorm(Node& n, const Tensor& g) {
    const Tensor& gamma = value(n.in1);
    const int m = g.dim(0), nn = g.dim(1);
    Tensor dx = Tensor::zeros({m, nn});
    Tensor dgamma = Tensor::zeros(node(n.in1).value.shape);
    Tensor dbeta = Tensor::zeros(node(n.in2).value.shape);
    std::vector<double> gy(static_cast<std::size_t>(nn));
    for (int i = 0; i < m; ++i) {
      const double* grow = g.row(i);
      const double* xh = n.aux.row(i);
      const double inv = n.aux2.at(i);
      double mean_gy = 0.0, mean_gyxh = 0.0;
      for (int j = 0; j < nn; ++j) {
        gy[static_cast<std::size_t>(j)] = grow[j] * gamma.data[static_cast<std::size_t>(j)];
        mean_gy += gy[static_cast<std::size_t>(j)];
        mean_gyxh += gy[static_cast<std::size_t>(j)] * xh[j];
        dgamma.data[static_cast<std::size_t>(j)] += grow[j] * xh[j];
        dbeta.data[static_cast<std::size_t>(j)] += grow[j];
      }
      mean_gy /= nn;
      mean_gyxh /= nn;
      double* dst = dx.row(i);
      for (int j = 0; j < nn; ++j)
        dst[j] = inv * (gy[static_cast<std::size_t>(j)] - mean_gy - xh[j] * mean_gyxh);
    }
    accumulate(n.in0, std::move(dx));
    accumulate(n.in1, std::move(dgamma));
    accumulate(n.in2, std::move(dbeta));
  }

  void backward_attention(Node& n, const Tensor& g) {
    const Tensor& qv = value(n.in0);
    const Tensor& kv = value(n.in1);
    const Tensor& vv = value(n.in2);
    const int t = qv.dim(0), h = qv.dim(1);
    const int heads = n.idata[0];
    const int dk = h / heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor dq = Tensor::zeros({t, h});
    Tensor dkt = Tensor::zeros({t, h});
    Tensor dv = Tensor::zeros({t, h});
    std::vector<double> dp(static_cast<std::size_t>(t)), ds(static_cast<std::size_t>(t));
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * dk;
      for (int i = 0; i < t; ++i) {
        const double* gi = g.row(i) + off;
        // dP and dV
        for (int j = 0; j <= i; ++j) {
          const double p = n.aux.at(hd, i, j);
          const double* vj = vv.row(j) + off;
          double* dvj = dv.row(j) + off;
          double acc = 0.0;
          for (int d = 0; d < dk; ++d) {
            acc += gi[d] * vj[d];
            dvj[d] += p * gi[d];
          }
          dp[static_cast<std::size_t>(j)] = acc;
        }
        // softmax backward within the causal prefix
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += dp[static_cast<std::size_t>(j)] * n.aux.at(hd, i, j);
        for (int j = 0; j <= i; ++j)
          ds[static_cast<std::size_t>(j)] =
              n.aux.at(hd, i, j) * (dp[static_cast<std::size_t>(j)] - dot) * inv_sqrt_dk;
        // dQ and dK
        double* dqi = dq.row(i) + off;
        const double* qi = qv.row(i) + off;
        for (int j = 0; j <= i; ++j) {
          const double s = ds[static_cast<std::size_t>(j)];
          if (s == 0.0) continue;
          const double* kj = kv.row(j) + off;
          double* dkj = dkt.row(j) + off;
          for (int d = 0; d < dk; ++d) {
            dqi[d] += s * kj[d];
            dkj[d] += s * qi[d];
          }
        }
      }
    }
    accumulate(n.in0, std::move(dq));
    accumulate(n.in1, std::move(dkt));
    accumulate(n.in2, std::move(dv));
  }

  std::vector<Node> nodes_;
  mutable std::vector<Tensor> grads_;
  bool ran_backward_ = false;
};

}  // namespace mmkn
