#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "mmkn/common.hpp"
#include "mmkn/rng.hpp"

namespace mmkn {

// Dense row-major tensor of 64-bit reals. Values are immutable by
// convention once handed to another component; mutation happens only
// while a tensor is being filled in.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(t.checked_numel(), 0.0);
    return t;
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    require_shape(t.data.size() == t.checked_numel(), "tensor data length does not match shape");
    return t;
  }

  static Tensor normal(std::vector<int> shape, Pcg32& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.data) v = stddev * rng.next_normal();
    return t;
  }

  static Tensor uniform(std::vector<int> shape, Pcg32& rng, double lo, double hi) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.data) v = lo + (hi - lo) * rng.next_double();
    return t;
  }

  std::size_t numel() const { return data.size(); }

  std::size_t checked_numel() const {
    std::size_t n = 1;
    for (int d : shape) {
      require_shape(d >= 0, "negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  double& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  double at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  double* row(int i) { return data.data() + static_cast<std::size_t>(i) * dim(rank() - 1); }
  const double* row(int i) const {
    return data.data() + static_cast<std::size_t>(i) * dim(rank() - 1);
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void assert_finite(const std::string& what) const {
    if (!all_finite()) throw ContractError(what + ": non-finite value");
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

// C = A(m x k) * B(k x n). Runs over contiguous rows of B, four at a
// time, so the inner accumulation vectorizes with enough parallelism.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_shape(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
  require_shape(a.dim(1) == b.dim(0), "matmul inner dimensions differ: " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    int p = 0;
    for (; p + 4 <= k; p += 4) {
      const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
      const double* b0 = b.data.data() + static_cast<std::size_t>(p) * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      for (int j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// One row of a matmul: crow = arow (1 x k) times B (k x n). Identical
// blocking to matmul so single-row products agree with it bitwise.
inline void matmul_row(const double* arow, const Tensor& b, double* crow) {
  const int k = b.dim(0), n = b.dim(1);
  for (int j = 0; j < n; ++j) crow[j] = 0.0;
  int p = 0;
  for (; p + 4 <= k; p += 4) {
    const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
    const double* b0 = b.data.data() + static_cast<std::size_t>(p) * n;
    const double* b1 = b0 + n;
    const double* b2 = b1 + n;
    const double* b3 = b2 + n;
    for (int j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
  }
  for (; p < k; ++p) {
    const double av = arow[p];
    const double* brow = b.data.data() + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

// C = A(m x k) * B^T where B is (n x k); rows dot rows, unit stride.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_shape(a.rank() == 2 && b.rank() == 2, "matmul_nt expects matrices");
  require_shape(a.dim(1) == b.dim(1), "matmul_nt inner dimensions differ");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int j = 0; j < n; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
  return c;
}

// C = A^T * B where A is (k x m), B is (k x n).
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_shape(a.rank() == 2 && b.rank() == 2, "matmul_tn expects matrices");
  require_shape(a.dim(0) == b.dim(0), "matmul_tn inner dimensions differ");
  const int k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  for (int p = 0; p < k; ++p) {
    const double* arow = a.row(p);
    const double* brow = b.row(p);
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.row(i);
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_shape(a.rank() == 2, "transpose expects a matrix");
  Tensor t = Tensor::zeros({a.dim(1), a.dim(0)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// Row softmax with max subtraction. No other stabilization is applied,
// so independent reimplementations can match to machine precision.
inline void softmax_row_inplace(double* row, int n) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) row[j] *= inv;
}

inline Tensor softmax_rows(const Tensor& m) {
  require_shape(m.rank() == 2, "softmax_rows expects a matrix");
  m.assert_finite("softmax_rows input");
  Tensor out = m;
  for (int i = 0; i < m.dim(0); ++i) softmax_row_inplace(out.row(i), m.dim(1));
  return out;
}

// Exact (erf-based) GELU and its derivative.
inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline Tensor gelu(const Tensor& a) {
  Tensor out = a;
  for (double& v : out.data) v = gelu(v);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_shape(a.same_shape(b), "add shapes differ");
  Tensor c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_shape(a.same_shape(b), "sub shapes differ");
  Tensor c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_shape(a.same_shape(b), "hadamard shapes differ");
  Tensor c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.data) v *= s;
  return c;
}

// Multi-head scaled-dot-product attention with a causal mask, applied to
// already-projected q/k/v (T x h). Shared by the plain forward pass and
// the gradient tape so the two paths agree bitwise. When `save_probs` is
// given it must be zeroed {heads, T, T} and receives the row softmaxes.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                             Tensor* save_probs = nullptr) {
  require_shape(q.rank() == 2 && q.same_shape(k) && q.same_shape(v),
                "attention_core expects three equal matrices");
  const int t = q.dim(0), h = q.dim(1);
  require_shape(heads > 0 && h % heads == 0, "hidden size not divisible by head count");
  const int dk = h / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor out = Tensor::zeros({t, h});
  std::vector<double> scores(static_cast<std::size_t>(t));
  for (int hd = 0; hd < heads; ++hd) {
    const int off = hd * dk;
    for (int i = 0; i < t; ++i) {
      const double* qi = q.row(i) + off;
      for (int j = 0; j <= i; ++j) {
        const double* kj = k.row(j) + off;
        double acc = 0.0;
        for (int d = 0; d < dk; ++d) acc += qi[d] * kj[d];
        scores[static_cast<std::size_t>(j)] = acc * inv_sqrt_dk;
      }
      softmax_row_inplace(scores.data(), i + 1);
      double* orow = out.row(i) + off;
      for (int j = 0; j <= i; ++j) {
        const double p = scores[static_cast<std::size_t>(j)];
        if (save_probs) save_probs->at(hd, i, j) = p;
        const double* vj = v.row(j) + off;
        for (int d = 0; d < dk; ++d) orow[d] += p * vj[d];
      }
    }
  }
  return out;
}

// Row layer norm used by both forward paths; when xhat/inv_std are given
// they receive the normalized rows and per-row inverse deviations.
inline Tensor layernorm_rows_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                     double eps = 1e-5, Tensor* xhat_out = nullptr,
                                     Tensor* inv_std_out = nullptr) {
  require_shape(x.rank() == 2, "layernorm expects a matrix");
  const int m = x.dim(0), nn = x.dim(1);
  require_shape(gamma.numel() == static_cast<std::size_t>(nn) &&
                    beta.numel() == static_cast<std::size_t>(nn),
                "layernorm parameter size mismatch");
  Tensor out = Tensor::zeros({m, nn});
  for (int i = 0; i < m; ++i) {
    const double* row = x.row(i);
    double mu = 0.0;
    for (int j = 0; j < nn; ++j) mu += row[j];
    mu /= nn;
    double var = 0.0;
    for (int j = 0; j < nn; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= nn;
    const double inv = 1.0 / std::sqrt(var + eps);
    if (inv_std_out) inv_std_out->at(i) = inv;
    double* orow = out.row(i);
    for (int j = 0; j < nn; ++j) {
      const double xh = (row[j] - mu) * inv;
      if (xhat_out) xhat_out->at(i, j) = xh;
      orow[j] = gamma.data[static_cast<std::size_t>(j)] * xh + beta.data[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

inline double mean(const Tensor& a) {
  require(!a.data.empty(), "mean of empty tensor");
  double s = std::accumulate(a.data.begin(), a.data.end(), 0.0);
  return s / static_cast<double>(a.data.size());
}

// Population standard deviation over all entries.
inline double stddev(const Tensor& a) {
  double mu = mean(a);
  double acc = 0.0;
  for (double v : a.data) acc += (v - mu) * (v - mu);
  return std::sqrt(acc / static_cast<double>(a.data.size()));
}

}  // namespace mmkn
