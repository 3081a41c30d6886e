#pragma once

// Reverse-mode tape autodiff over a fixed op set.
//
// A Graph records every op eagerly: the forward value is computed when the op
// is called and a backward closure is appended to the tape. backward() walks
// the tape in reverse and finally adds leaf gradients into the Parameter
// objects the graph was built from. Parameters accumulate across backward
// calls until zero_grad(); intermediate node gradients are reset per call.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vidcap/error.hpp"
#include "vidcap/tensor.hpp"

namespace vidcap {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(T{0}); }
};

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
constexpr T prob_floor() {
  if constexpr (std::is_same_v<T, float>) {
    return T(1e-30);
  } else {
    return T(1e-300);
  }
}

template <typename T>
constexpr T bce_clamp() {
  if constexpr (std::is_same_v<T, float>) {
    return T(1e-7);
  } else {
    return T(1e-12);
  }
}

}  // namespace detail

template <typename T>
class Graph {
 public:
  struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
  };

  /// With record_backward = false no closures are kept (inference mode).
  explicit Graph(bool record_backward = true) : record_(record_backward) { nodes_.reserve(512); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t node_count() const { return nodes_.size(); }
  /// Number of probabilities clamped by unlikelihood(); non-zero means the
  /// penalty saturated somewhere in this graph.
  std::size_t clamped_count() const { return clamped_; }
  /// True once p has entered this graph as a leaf.
  bool reads(const Parameter<T>& p) const { return param_ids_.count(&p) != 0; }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward() target w.r.t. v (zeros if untouched).
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // ---- leaves -------------------------------------------------------------

  Var constant(Tensor<T> value) { return push("constant", std::move(value), false, nullptr); }

  Var param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var{it->second};
    Var v = push("param:" + p.name, p.value, record_, nullptr);
    nodes_[v.id].param = &p;
    param_ids_.emplace(&p, v.id);
    return v;
  }

  Var detach(Var a) { return constant(value(a)); }

  // ---- linear algebra -----------------------------------------------------

  Var matmul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.cols() != B.rows()) {
      throw ShapeError("matmul: " + A.shape_str() + " x " + B.shape_str());
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor<T> out(m, n);
    detail::gemm_nn(A.data(), B.data(), out.data(), m, k, n);
    return push("matmul", std::move(out), any_grad(a, b), [this, a, b, o = next_id(), m, k, n] {
      const auto& dC = nodes_[o].grad;
      if (needs(a)) {
        detail::gemm_nt(dC.data(), value(b).data(), grad_ref(a).data(), m, n, k);
      }
      if (needs(b)) {
        detail::gemm_tn(value(a).data(), dC.data(), grad_ref(b).data(), m, k, n);
      }
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.cols() != B.cols()) {
      throw ShapeError("matmul_nt: " + A.shape_str() + " x " + B.shape_str() + "^T");
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
    Tensor<T> out(m, n);
    detail::gemm_nt(A.data(), B.data(), out.data(), m, k, n);
    return push("matmul_nt", std::move(out), any_grad(a, b), [this, a, b, o = next_id(), m, k, n] {
      const auto& dC = nodes_[o].grad;
      if (needs(a)) detail::gemm_nn(dC.data(), value(b).data(), grad_ref(a).data(), m, n, k);
      if (needs(b)) detail::gemm_tn(dC.data(), value(a).data(), grad_ref(b).data(), m, n, k);
    });
  }

  Var transpose(Var a) {
    const auto& A = value(a);
    Tensor<T> out(A.cols(), A.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(j, i) = A(i, j);
    return push("transpose", std::move(out), any_grad(a), [this, a, o = next_id()] {
      const auto& d = nodes_[o].grad;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += d(j, i);
    });
  }

  // ---- elementwise --------------------------------------------------------

  /// a + b, where b has a's shape, is a 1 x cols row (broadcast over rows),
  /// or is 1 x 1.
  Var add(Var a, Var b) { return add_scaled(a, b, T{1}, "add"); }
  Var sub(Var a, Var b) { return add_scaled(a, b, T{-1}, "sub"); }

  /// Elementwise product. b may match a, be a 1 x cols row, or be a
  /// rows x 1 column (scales each row of a by one value).
  Var mul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    const Broadcast mode = broadcast_mode(A, B, "mul");
    Tensor<T> out = A;
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) *= pick(B, mode, i, j);
    return push("mul", std::move(out), any_grad(a, b), [this, a, b, mode, o = next_id()] {
      const auto& d = nodes_[o].grad;
      const auto& Av = value(a);
      const auto& Bv = value(b);
      const bool ga = needs(a), gb = needs(b);
      Tensor<T>* GA = ga ? &grad_ref(a) : nullptr;
      Tensor<T>* GB = gb ? &grad_ref(b) : nullptr;
      for (std::size_t i = 0; i < Av.rows(); ++i)
        for (std::size_t j = 0; j < Av.cols(); ++j) {
          if (ga) (*GA)(i, j) += d(i, j) * pick(Bv, mode, i, j);
          if (gb) pick_ref(*GB, mode, i, j) += d(i, j) * Av(i, j);
        }
    });
  }

  /// alpha * a + beta
  Var affine(Var a, T alpha, T beta = T{0}) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = alpha * v + beta;
    return push("affine", std::move(out), any_grad(a), [this, a, alpha, o = next_id()] {
      const auto& d = nodes_[o].grad;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * d[i];
    });
  }
  Var scale(Var a, T alpha) { return affine(a, alpha, T{0}); }

  Var sigmoid(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = T{1} / (T{1} + std::exp(-v));
    return push("sigmoid", std::move(out), any_grad(a), [this, a, o = next_id()] {
      const auto& d = nodes_[o].grad;
      const auto& y = nodes_[o].value;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * y[i] * (T{1} - y[i]);
    });
  }

  Var tanh(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.values()) v = std::tanh(v);
    return push("tanh", std::move(out), any_grad(a), [this, a, o = next_id()] {
      const auto& d = nodes_[o].grad;
      const auto& y = nodes_[o].value;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * (T{1} - y[i] * y[i]);
    });
  }

  Var softmax_rows(Var a) {
    const auto& A = value(a);
    Tensor<T> out(A.rows(), A.cols());
    for (std::size_t i = 0; i < A.rows(); ++i) {
      auto src = A.row_span(i);
      auto dst = out.row_span(i);
      const T mx = *std::max_element(src.begin(), src.end());
      T sum{0};
      for (std::size_t j = 0; j < src.size(); ++j) sum += (dst[j] = std::exp(src[j] - mx));
      for (auto& v : dst) v /= sum;
    }
    return push("softmax", std::move(out), any_grad(a), [this, a, o = next_id()] {
      const auto& d = nodes_[o].grad;
      const auto& y = nodes_[o].value;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < y.rows(); ++i) {
        T dot{0};
        for (std::size_t j = 0; j < y.cols(); ++j) dot += d(i, j) * y(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) g(i, j) += y(i, j) * (d(i, j) - dot);
      }
    });
  }

  /// Per-row normalisation followed by gain (1 x cols) and bias (1 x cols).
  Var layer_norm(Var a, Var gain, Var bias, T eps = T(1e-5)) {
    const auto& A = value(a);
    const auto& G = value(gain);
    const auto& B = value(bias);
    if (G.rows() != 1 || G.cols() != A.cols() || !same_shape(G, B)) {
      throw ShapeError("layer_norm: input " + A.shape_str() + ", gain " + G.shape_str() +
                       ", bias " + B.shape_str());
    }
    const std::size_t m = A.rows(), n = A.cols();
    Tensor<T> xhat(m, n);
    std::vector<T> inv_std(m);
    Tensor<T> out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
      T mean{0};
      for (std::size_t j = 0; j < n; ++j) mean += A(i, j);
      mean /= T(n);
      T var{0};
      for (std::size_t j = 0; j < n; ++j) var += (A(i, j) - mean) * (A(i, j) - mean);
      var /= T(n);
      inv_std[i] = T{1} / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) {
        xhat(i, j) = (A(i, j) - mean) * inv_std[i];
        out(i, j) = xhat(i, j) * G[j] + B[j];
      }
    }
    return push("layer_norm", std::move(out), any_grad(a, gain, bias),
                [this, a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std),
                 o = next_id()] {
                  const auto& d = nodes_[o].grad;
                  const auto& G = value(gain);
                  const std::size_t m = xhat.rows(), n = xhat.cols();
                  if (needs(gain) || needs(bias)) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        if (needs(gain)) grad_ref(gain)[j] += d(i, j) * xhat(i, j);
                        if (needs(bias)) grad_ref(bias)[j] += d(i, j);
                      }
                  }
                  if (!needs(a)) return;
                  auto& g = grad_ref(a);
                  std::vector<T> dx(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    T mean_d{0}, mean_dx{0};
                    for (std::size_t j = 0; j < n; ++j) {
                      dx[j] = d(i, j) * G[j];
                      mean_d += dx[j];
                      mean_dx += dx[j] * xhat(i, j);
                    }
                    mean_d /= T(n);
                    mean_dx /= T(n);
                    for (std::size_t j = 0; j < n; ++j)
                      g(i, j) += inv_std[i] * (dx[j] - mean_d - xhat(i, j) * mean_dx);
                  }
                });
  }

  /// Inverted dropout: zeroes each entry with probability `rate` and scales
  /// survivors by 1 / (1 - rate). rate == 0 is the identity.
  Var dropout(Var a, T rate, std::mt19937_64& rng) {
    if (rate <= T{0}) return a;
    if (rate >= T{1}) throw ValidationError("dropout rate must be < 1");
    const auto& A = value(a);
    Tensor<T> mask(A.rows(), A.cols());
    const T keep_scale = T{1} / (T{1} - rate);
    for (auto& v : mask.values()) v = uniform01(rng) < double(rate) ? T{0} : keep_scale;
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return push("dropout", std::move(out), any_grad(a), [this, a, mask = std::move(mask), o = next_id()] {
      const auto& d = nodes_[o].grad;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * mask[i];
    });
  }

  // ---- structural ---------------------------------------------------------

  /// Concatenation along the last axis; all parts share a row count.
  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = value(parts[0]).rows();
    std::size_t n = 0;
    for (Var p : parts) {
      if (value(p).rows() != m) {
        throw ShapeError("concat_cols: row mismatch " + value(parts[0]).shape_str() + " vs " +
                         value(p).shape_str());
      }
      n += value(p).cols();
    }
    Tensor<T> out(m, n);
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& P = value(p);
      for (std::size_t i = 0; i < m; ++i)
        std::copy(P.row_span(i).begin(), P.row_span(i).end(), out.row_span(i).begin() + off);
      off += P.cols();
    }
    bool rg = false;
    for (Var p : parts) rg = rg || requires_grad(p);
    return push("concat_cols", std::move(out), rg && record_, [this, parts, o = next_id()] {
      const auto& d = nodes_[o].grad;
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t w = value(p).cols();
        if (needs(p)) {
          auto& g = grad_ref(p);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < w; ++j) g(i, j) += d(i, off + j);
        }
        off += w;
      }
    });
  }

  /// Concatenation along the first axis; all parts share a column count.
  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = value(parts[0]).cols();
    std::size_t m = 0;
    for (Var p : parts) {
      if (value(p).cols() != n) {
        throw ShapeError("concat_rows: column mismatch " + value(parts[0]).shape_str() + " vs " +
                         value(p).shape_str());
      }
      m += value(p).rows();
    }
    std::vector<T> data;
    data.reserve(m * n);
    for (Var p : parts) {
      const auto& P = value(p);
      data.insert(data.end(), P.values().begin(), P.values().end());
    }
    bool rg = false;
    for (Var p : parts) rg = rg || requires_grad(p);
    return push("concat_rows", Tensor<T>(m, n, std::move(data)), rg && record_,
                [this, parts, o = next_id()] {
                  const auto& d = nodes_[o].grad;
                  std::size_t off = 0;
                  for (Var p : parts) {
                    const std::size_t sz = value(p).size();
                    if (needs(p)) {
                      auto& g = grad_ref(p);
                      for (std::size_t i = 0; i < sz; ++i) g[i] += d[off + i];
                    }
                    off += sz;
                  }
                });
  }

  /// Repeats a 1 x n row `times` times.
  Var tile_rows(Var a, std::size_t times) {
    const auto& A = value(a);
    if (A.rows() != 1) throw ShapeError("tile_rows: expected a row, got " + A.shape_str());
    std::vector<T> data;
    data.reserve(times * A.cols());
    for (std::size_t i = 0; i < times; ++i) data.insert(data.end(), A.values().begin(), A.values().end());
    return push("tile_rows", Tensor<T>(times, A.cols(), std::move(data)), any_grad(a),
                [this, a, o = next_id()] {
                  const auto& d = nodes_[o].grad;
                  auto& g = grad_ref(a);
                  for (std::size_t i = 0; i < d.rows(); ++i)
                    for (std::size_t j = 0; j < d.cols(); ++j) g[j] += d(i, j);
                });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const auto& A = value(a);
    if (begin >= end || end > A.cols()) {
      throw ShapeError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") of " + A.shape_str());
    }
    Tensor<T> out(A.rows(), end - begin);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = A(i, j);
    return push("slice_cols", std::move(out), any_grad(a), [this, a, begin, o = next_id()] {
      const auto& d = nodes_[o].grad;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) g(i, begin + j) += d(i, j);
    });
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const auto& A = value(a);
    if (begin >= end || end > A.rows()) {
      throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") of " + A.shape_str());
    }
    std::vector<T> data(A.data() + begin * A.cols(), A.data() + end * A.cols());
    return push("slice_rows", Tensor<T>(end - begin, A.cols(), std::move(data)), any_grad(a),
                [this, a, begin, o = next_id()] {
                  const auto& d = nodes_[o].grad;
                  auto& g = grad_ref(a);
                  const std::size_t off = begin * g.cols();
                  for (std::size_t i = 0; i < d.size(); ++i) g[off + i] += d[i];
                });
  }

  /// Mean over the row (frame) axis: m x n -> 1 x n.
  Var mean_rows(Var a) { return mean_pool(a, value(a).rows()); }

  /// Averages consecutive groups of `stride` rows; the last group may be
  /// shorter. m x n -> ceil(m / stride) x n.
  Var mean_pool(Var a, std::size_t stride) {
    const auto& A = value(a);
    if (stride == 0) throw ShapeError("mean_pool: stride must be positive");
    const std::size_t groups = (A.rows() + stride - 1) / stride;
    Tensor<T> out(groups, A.cols());
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t lo = g * stride, hi = std::min(A.rows(), lo + stride);
      for (std::size_t i = lo; i < hi; ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) out(g, j) += A(i, j);
      for (std::size_t j = 0; j < A.cols(); ++j) out(g, j) /= T(hi - lo);
    }
    return push("mean_pool", std::move(out), any_grad(a), [this, a, stride, o = next_id()] {
      const auto& d = nodes_[o].grad;
      auto& g = grad_ref(a);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const std::size_t grp = i / stride;
        const std::size_t lo = grp * stride, hi = std::min(g.rows(), lo + stride);
        const T w = T{1} / T(hi - lo);
        for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += d(grp, j) * w;
      }
    });
  }

  /// Rows of `table` selected by `ids`.
  Var embedding(Var table, std::span<const int> ids) {
    const auto& E = value(table);
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    Tensor<T> out(ids.size(), E.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || std::size_t(ids[i]) >= E.rows()) {
        throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " +
                         E.shape_str());
      }
      auto src = E.row_span(std::size_t(ids[i]));
      std::copy(src.begin(), src.end(), out.row_span(i).begin());
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return push("embedding", std::move(out), any_grad(table), [this, table, idv = std::move(idv), o = next_id()] {
      const auto& d = nodes_[o].grad;
      auto& g = grad_ref(table);
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) g(std::size_t(idv[i]), j) += d(i, j);
    });
  }

  // ---- reductions and losses ---------------------------------------------

  Var sum(Var a) {
    T s{0};
    for (T v : value(a).values()) s += v;
    return push("sum", Tensor<T>::scalar(s), any_grad(a), [this, a, o = next_id()] {
      const T d = nodes_[o].grad[0];
      auto& g = grad_ref(a);
      for (auto& v : g.values()) v += d;
    });
  }

  Var mean(Var a) { return scale(sum(a), T{1} / T(value(a).size())); }

  /// Mean binary cross-entropy between probabilities `pred` and a 0/1
  /// target of the same shape. Probabilities are clamped away from 0 and 1.
  Var bce_mean(Var pred, const Tensor<T>& target) {
    const auto& P = value(pred);
    if (!same_shape(P, target)) {
      throw ShapeError("bce: prediction " + P.shape_str() + " vs target " + target.shape_str());
    }
    for (T t : target.values()) {
      if (t != T{0} && t != T{1}) throw ValidationError("bce: target values must be 0 or 1");
    }
    const T lo = detail::bce_clamp<T>(), hi = T{1} - detail::bce_clamp<T>();
    T s{0};
    for (std::size_t i = 0; i < P.size(); ++i) {
      const T p = std::clamp(P[i], lo, hi);
      s -= target[i] * std::log(p) + (T{1} - target[i]) * std::log(T{1} - p);
    }
    const T n = T(P.size());
    return push("bce", Tensor<T>::scalar(s / n), any_grad(pred), [this, pred, target, lo, hi, n, o = next_id()] {
      const T d = nodes_[o].grad[0];
      const auto& P = value(pred);
      auto& g = grad_ref(pred);
      for (std::size_t i = 0; i < P.size(); ++i) {
        if (P[i] < lo || P[i] > hi) continue;
        const T t = target[i];
        g[i] += d * (-t / P[i] + (T{1} - t) / (T{1} - P[i])) / n;
      }
    });
  }

  /// Label-smoothed negative log-likelihood averaged over rows. Row j of
  /// `probs` is a distribution; the smoothed target puts 1 - eps on
  /// targets[j] and eps / (V - 1) on every other entry.
  Var smoothed_nll(Var probs, std::span<const int> targets, T eps) {
    const auto& P = value(probs);
    if (P.rows() != targets.size()) {
      throw ShapeError("smoothed_nll: " + std::to_string(targets.size()) + " targets for " +
                       P.shape_str() + " distributions");
    }
    const std::size_t V = P.cols();
    const T off = V > 1 ? eps / T(V - 1) : T{0};
    const T on = T{1} - eps;
    std::vector<int> tg(targets.begin(), targets.end());
    T s{0};
    for (std::size_t j = 0; j < P.rows(); ++j) {
      if (tg[j] < 0 || std::size_t(tg[j]) >= V) throw ShapeError("smoothed_nll: target id out of range");
      for (std::size_t k = 0; k < V; ++k) {
        const T q = (int(k) == tg[j]) ? on : off;
        if (q == T{0}) continue;
        s -= q * std::log(std::max(P(j, k), detail::prob_floor<T>()));
      }
    }
    const T J = T(P.rows());
    return push("smoothed_nll", Tensor<T>::scalar(s / J), any_grad(probs),
                [this, probs, tg = std::move(tg), on, off, J, o = next_id()] {
                  const T d = nodes_[o].grad[0];
                  const auto& P = value(probs);
                  auto& g = grad_ref(probs);
                  for (std::size_t j = 0; j < P.rows(); ++j)
                    for (std::size_t k = 0; k < P.cols(); ++k) {
                      const T q = (int(k) == tg[j]) ? on : off;
                      if (q == T{0} || P(j, k) < detail::prob_floor<T>()) continue;
                      g(j, k) -= d * q / P(j, k) / J;
                    }
                });
  }

  /// Unlikelihood penalty: sum over rows j and candidates c in
  /// candidates[j] of -log(1 - probs(j, c)). 1 - p is floored at 1e-9;
  /// floored entries contribute no gradient and bump clamped_count().
  Var unlikelihood(Var probs, const std::vector<std::vector<int>>& candidates) {
    const auto& P = value(probs);
    if (P.rows() != candidates.size()) {
      throw ShapeError("unlikelihood: " + std::to_string(candidates.size()) +
                       " candidate sets for " + P.shape_str() + " distributions");
    }
    const T floor_ = T(1e-9);
    T s{0};
    for (std::size_t j = 0; j < P.rows(); ++j)
      for (int c : candidates[j]) {
        if (c < 0 || std::size_t(c) >= P.cols()) throw ShapeError("unlikelihood: candidate id out of range");
        const T rest = T{1} - P(j, std::size_t(c));
        if (rest < floor_) ++clamped_;
        s -= std::log(std::max(rest, floor_));
      }
    return push("unlikelihood", Tensor<T>::scalar(s), any_grad(probs),
                [this, probs, candidates, floor_, o = next_id()] {
                  const T d = nodes_[o].grad[0];
                  const auto& P = value(probs);
                  auto& g = grad_ref(probs);
                  for (std::size_t j = 0; j < P.rows(); ++j)
                    for (int c : candidates[j]) {
                      const T rest = T{1} - P(j, std::size_t(c));
                      if (rest < floor_) continue;
                      g(j, std::size_t(c)) += d / rest;
                    }
                });
  }

  // ---- reverse pass -------------------------------------------------------

  /// Back-propagates from a 1 x 1 loss and adds leaf gradients into the
  /// Parameters. Calling it twice adds the gradients twice.
  void backward(Var loss) {
    const auto& L = value(loss);
    if (L.rows() != 1 || L.cols() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + L.shape_str());
    }
    if (!record_) throw Error("backward: graph was built without recording");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[loss.id].requires_grad) return;
    grad_ref(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (backward_hook_ && n.param == nullptr) backward_hook_(n.op, n.grad);
      if (n.back) n.back();
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || n.grad.empty()) continue;
      auto& pg = n.param->grad;
      if (pg.empty() || !same_shape(pg, n.grad)) pg = Tensor<T>(n.grad.rows(), n.grad.cols());
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }

  /// Test hook: called with (op name, output gradient) for every op node
  /// before its closure propagates that gradient. Used to corrupt gradients deliberately in
  /// negative-control tests of the gradient checker.
  void set_backward_hook(std::function<void(const std::string&, Tensor<T>&)> hook) {
    backward_hook_ = std::move(hook);
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> back;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  enum class Broadcast { Same, Row, Column, Scalar };

  static Broadcast broadcast_mode(const Tensor<T>& A, const Tensor<T>& B, const char* op) {
    if (same_shape(A, B)) return Broadcast::Same;
    if (B.rows() == 1 && B.cols() == 1) return Broadcast::Scalar;
    if (B.rows() == 1 && B.cols() == A.cols()) return Broadcast::Row;
    if (B.cols() == 1 && B.rows() == A.rows()) return Broadcast::Column;
    throw ShapeError(std::string(op) + ": cannot broadcast " + B.shape_str() + " onto " + A.shape_str());
  }
  static T pick(const Tensor<T>& B, Broadcast m, std::size_t i, std::size_t j) {
    switch (m) {
      case Broadcast::Same: return B(i, j);
      case Broadcast::Row: return B[j];
      case Broadcast::Column: return B[i];
      case Broadcast::Scalar: return B[0];
    }
    return T{0};
  }
  static T& pick_ref(Tensor<T>& B, Broadcast m, std::size_t i, std::size_t j) {
    switch (m) {
      case Broadcast::Same: return B(i, j);
      case Broadcast::Row: return B[j];
      case Broadcast::Column: return B[i];
      case Broadcast::Scalar: break;
    }
    return B[0];
  }

  Var add_scaled(Var a, Var b, T sign, const char* op) {
    const auto& A = value(a);
    const auto& B = value(b);
    const Broadcast mode = broadcast_mode(A, B, op);
    if (mode == Broadcast::Column) {
      throw ShapeError(std::string(op) + ": column broadcast unsupported, " + A.shape_str() +
                       " and " + B.shape_str());
    }
    Tensor<T> out = A;
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) += sign * pick(B, mode, i, j);
    return push(op, std::move(out), any_grad(a, b), [this, a, b, mode, sign, o = next_id()] {
      const auto& d = nodes_[o].grad;
      if (needs(a)) {
        auto& g = grad_ref(a);
        for (std::size_t i = 0; i < d.size(); ++i) g[i] += d[i];
      }
      if (needs(b)) {
        auto& g = grad_ref(b);
        for (std::size_t i = 0; i < d.rows(); ++i)
          for (std::size_t j = 0; j < d.cols(); ++j) pick_ref(g, mode, i, j) += sign * d(i, j);
      }
    });
  }

  std::size_t next_id() const { return nodes_.size(); }

  template <typename... Vs>
  bool any_grad(Vs... vs) const {
    return record_ && (requires_grad(vs) || ...);
  }
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  Tensor<T>& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var push(std::string op, Tensor<T> value, bool requires_grad, std::function<void()> back) {
    if (!value.all_finite()) throw NumericError(op + ": non-finite output " + value.shape_str());
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool record_;
  std::size_t clamped_ = 0;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
  std::function<void(const std::string&, Tensor<T>&)> backward_hook_;
};

}  // namespace vidcap
