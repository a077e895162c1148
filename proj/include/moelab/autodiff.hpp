#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/mat.hpp"

namespace moelab::ad {

using moelab::Mat;

// Additive mask sentinel standing in for -inf. Softmax entries at or below
// this are clamped to exactly zero so masked positions never leak mass.
template <typename T>
inline constexpr T kNegInf = T(-1e30);

// One node of the gradient tape. Nodes are created in program order; the
// monotonically increasing id doubles as a topological order because an
// op's inputs always exist before its output.
template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;

  Mat<T>& ensure_grad() {
    if (grad.empty()) grad = Mat<T>(value.rows(), value.cols());
    return grad;
  }
  void zero_grad() { grad = Mat<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
Var<T> make_var(Mat<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->id = next_node_id();
  return n;
}

template <typename T>
Var<T> constant(Mat<T> value) {
  return make_var(std::move(value), false);
}

template <typename T>
Var<T> scalar(T v) {
  return constant(Mat<T>(1, 1, std::vector<T>{v}));
}

namespace detail {

template <typename T>
Var<T> make_op(Mat<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backfn) {
  bool req = false;
  for (const auto& p : parents) req = req || p->requires_grad;
  auto n = make_var(std::move(value), req);
  if (req) {
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return n;
}

template <typename T>
void accumulate(const Var<T>& target, const Mat<T>& delta) {
  if (!target->requires_grad) return;
  Mat<T>& g = target->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "add");
  Mat<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate(a, self.grad);
    detail::accumulate(b, self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "sub");
  Mat<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate(a, self.grad);
    if (b->requires_grad) {
      Mat<T>& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "mul");
  Mat<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) {
      Mat<T>& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Mat<T>& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Mat<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return detail::make_op<T>(std::move(out), {a}, [a, s](Node<T>& self) {
    if (a->requires_grad) {
      Mat<T>& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

// GELU with the exact erf form.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.7071067811865475244);
  constexpr T inv_sqrt2pi = T(0.3989422804014326779);
  Mat<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    T x = out[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T x = a->value[i];
      T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

// ---- matrix products ----

namespace detail {

// c += a * b with optional transposes, naive triple loop ordered for
// row-major locality.
template <typename T>
void gemm_acc(Mat<T>& c, const Mat<T>& a, bool ta, const Mat<T>& b, bool tb) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta ? a(p, i) : a(i, p);
      if (av == T(0)) continue;
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(j, p);
      } else {
        for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(p, j);
      }
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a->value.cols() != b->value.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + a->value.shape_str() +
                     " vs " + b->value.shape_str());
  }
  Mat<T> out(a->value.rows(), b->value.cols());
  detail::gemm_acc(out, a->value, false, b->value, false);
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) detail::gemm_acc(a->ensure_grad(), self.grad, false, b->value, true);
    if (b->requires_grad) detail::gemm_acc(b->ensure_grad(), a->value, true, self.grad, false);
  });
}

// a * b^T, the similarity-matrix product.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a->value.cols() != b->value.cols()) {
    throw ShapeError("matmul_nt: column dimensions disagree, " + a->value.shape_str() +
                     " vs " + b->value.shape_str());
  }
  Mat<T> out(a->value.rows(), b->value.rows());
  detail::gemm_acc(out, a->value, false, b->value, true);
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) detail::gemm_acc(a->ensure_grad(), self.grad, false, b->value, false);
    if (b->requires_grad) detail::gemm_acc(b->ensure_grad(), self.grad, true, a->value, false);
  });
}

// Broadcast-add a 1xc row vector to every row.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& v) {
  if (v->value.rows() != 1 || v->value.cols() != a->value.cols()) {
    throw ShapeError("add_rowvec: bias " + v->value.shape_str() + " vs matrix " +
                     a->value.shape_str());
  }
  Mat<T> out = a->value;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += v->value(0, c);
  return detail::make_op<T>(std::move(out), {a, v}, [a, v](Node<T>& self) {
    detail::accumulate(a, self.grad);
    if (v->requires_grad) {
      Mat<T>& g = v->ensure_grad();
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t c = 0; c < self.grad.cols(); ++c) g(0, c) += self.grad(r, c);
    }
  });
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = std::accumulate(a->value.vec().begin(), a->value.vec().end(), T(0));
  return detail::make_op<T>(Mat<T>(1, 1, std::vector<T>{s}), {a}, [a](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    const T gs = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / T(a->value.size()));
}

// Column means: nxc -> 1xc.
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  const std::size_t n = a->value.rows(), c = a->value.cols();
  Mat<T> out(1, c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out(0, j) += a->value(r, j);
  for (std::size_t j = 0; j < c; ++j) out(0, j) /= T(n);
  return detail::make_op<T>(std::move(out), {a}, [a, n](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < g.cols(); ++j) g(r, j) += self.grad(0, j) / T(n);
  });
}

// Diagonal of a square matrix as nx1.
template <typename T>
Var<T> diag(const Var<T>& a) {
  if (a->value.rows() != a->value.cols()) {
    throw ShapeError("diag: matrix not square, " + a->value.shape_str());
  }
  const std::size_t n = a->value.rows();
  Mat<T> out(n, 1);
  for (std::size_t i = 0; i < n; ++i) out(i, 0) = a->value(i, i);
  return detail::make_op<T>(std::move(out), {a}, [a, n](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g(i, i) += self.grad(i, 0);
  });
}

// Dot with a constant row vector times a constant factor:
// out = factor * sum_j w[j] * a(0, j). Used for the balance penalty where
// the assignment fractions are constants.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, const std::vector<T>& w, T factor) {
  if (a->value.rows() != 1 || a->value.cols() != w.size()) {
    throw ShapeError("weighted_sum: expected 1x" + std::to_string(w.size()) + ", got " +
                     a->value.shape_str());
  }
  T s = 0;
  for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * a->value(0, j);
  s *= factor;
  return detail::make_op<T>(Mat<T>(1, 1, std::vector<T>{s}), {a},
                            [a, w, factor](Node<T>& self) {
                              if (!a->requires_grad) return;
                              Mat<T>& g = a->ensure_grad();
                              const T gs = self.grad[0];
                              for (std::size_t j = 0; j < w.size(); ++j)
                                g(0, j) += gs * factor * w[j];
                            });
}

// ---- row-normalizing ops ----

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a) {
  const std::size_t n = a->value.rows(), d = a->value.cols();
  Mat<T> out(n, d);
  std::vector<T> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < d; ++c) s += a->value(r, c) * a->value(r, c);
    T nrm = std::sqrt(s);
    if (!(nrm > T(0))) {
      throw DataError("l2_normalize_rows: degenerate zero-norm row " + std::to_string(r));
    }
    norms[r] = nrm;
    for (std::size_t c = 0; c < d; ++c) out(r, c) = a->value(r, c) / nrm;
  }
  Var<T> result = detail::make_op<T>(std::move(out), {a}, [](Node<T>&) {});
  if (result->requires_grad) {
    result->backfn = [a, norms](Node<T>& self) {
      Mat<T>& g = a->ensure_grad();
      const std::size_t d = self.value.cols();
      for (std::size_t r = 0; r < self.value.rows(); ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += self.grad(r, c) * self.value(r, c);
        for (std::size_t c = 0; c < d; ++c)
          g(r, c) += (self.grad(r, c) - self.value(r, c) * dot) / norms[r];
      }
    };
  }
  return result;
}

namespace detail {

// Row softmax over entries above the mask sentinel. Masked entries get
// probability exactly 0. Throws if a row is fully masked.
template <typename T>
Mat<T> masked_softmax_values(const Mat<T>& x, const Mat<T>* mask, const char* who) {
  const std::size_t n = x.rows(), c = x.cols();
  const T cutoff = kNegInf<T> / T(2);
  Mat<T> out(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      T v = x(r, j) + (mask ? (*mask)(r, j) : T(0));
      if (v > cutoff) {
        any = true;
        mx = std::max(mx, v);
      }
    }
    if (!any) {
      throw DataError(std::string(who) + ": row " + std::to_string(r) +
                      " is entirely masked");
    }
    T denom = 0;
    for (std::size_t j = 0; j < c; ++j) {
      T v = x(r, j) + (mask ? (*mask)(r, j) : T(0));
      if (v > cutoff) {
        out(r, j) = std::exp(v - mx);
        denom += out(r, j);
      } else {
        out(r, j) = T(0);
      }
    }
    for (std::size_t j = 0; j < c; ++j) out(r, j) /= denom;
  }
  return out;
}

}  // namespace detail

// Row softmax, optionally with an additive 0 / -inf mask matrix.
template <typename T>
Var<T> softmax_rows(const Var<T>& a, const Mat<T>* mask = nullptr) {
  if (mask) check_same_shape(a->value, *mask, "softmax_rows mask");
  Mat<T> out = detail::masked_softmax_values(a->value, mask, "softmax_rows");
  return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    const std::size_t c = self.value.cols();
    for (std::size_t r = 0; r < self.value.rows(); ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad(r, j) * self.value(r, j);
      for (std::size_t j = 0; j < c; ++j)
        g(r, j) += self.value(r, j) * (self.grad(r, j) - dot);
    }
  });
}

// Row log-softmax with additive mask; masked positions output the sentinel
// and receive zero gradient.
template <typename T>
Var<T> masked_log_softmax_rows(const Var<T>& a, const Mat<T>& mask) {
  check_same_shape(a->value, mask, "masked_log_softmax_rows mask");
  Mat<T> probs = detail::masked_softmax_values<T>(a->value, &mask, "masked_log_softmax_rows");
  const T cutoff = kNegInf<T> / T(2);
  const std::size_t n = a->value.rows(), c = a->value.cols();
  Mat<T> out(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    // log p = (x + m - max) - log denom, recomputed stably from probs
    for (std::size_t j = 0; j < c; ++j) {
      T masked_in = a->value(r, j) + mask(r, j);
      out(r, j) = (masked_in > cutoff) ? std::log(probs(r, j)) : kNegInf<T>;
    }
  }
  return detail::make_op<T>(
      std::move(out), {a}, [a, probs, mask, cutoff](Node<T>& self) {
        if (!a->requires_grad) return;
        Mat<T>& g = a->ensure_grad();
        const std::size_t c = probs.cols();
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          T gsum = 0;
          for (std::size_t j = 0; j < c; ++j)
            if (mask(r, j) > cutoff) gsum += self.grad(r, j);
          for (std::size_t j = 0; j < c; ++j)
            if (mask(r, j) > cutoff) g(r, j) += self.grad(r, j) - probs(r, j) * gsum;
        }
      });
}

// ---- row gather / scatter, per-row scaling, column extraction ----

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> idx) {
  const std::size_t c = a->value.cols();
  Mat<T> out(idx.size(), c);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a->value.rows()) throw ShapeError("gather_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) out(r, j) = a->value(idx[r], j);
  }
  return detail::make_op<T>(std::move(out), {a}, [a, idx](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < self.grad.cols(); ++j)
        g(idx[r], j) += self.grad(r, j);
  });
}

// Place rows of a (mxc) at positions idx of an nxc zero matrix. idx must be
// unique.
template <typename T>
Var<T> scatter_rows(const Var<T>& a, std::vector<std::size_t> idx, std::size_t n) {
  if (idx.size() != a->value.rows()) throw ShapeError("scatter_rows: index count mismatch");
  Mat<T> out(n, a->value.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeError("scatter_rows: index out of range");
    for (std::size_t j = 0; j < out.cols(); ++j) out(idx[r], j) = a->value(r, j);
  }
  return detail::make_op<T>(std::move(out), {a}, [a, idx](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < g.cols(); ++j) g(r, j) += self.grad(idx[r], j);
  });
}

// Multiply row i of a by scalar w(i, 0).
template <typename T>
Var<T> mul_rows(const Var<T>& a, const Var<T>& w) {
  if (w->value.cols() != 1 || w->value.rows() != a->value.rows()) {
    throw ShapeError("mul_rows: weights " + w->value.shape_str() + " vs matrix " +
                     a->value.shape_str());
  }
  Mat<T> out = a->value;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t j = 0; j < out.cols(); ++j) out(r, j) *= w->value(r, 0);
  return detail::make_op<T>(std::move(out), {a, w}, [a, w](Node<T>& self) {
    if (a->requires_grad) {
      Mat<T>& g = a->ensure_grad();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < g.cols(); ++j)
          g(r, j) += self.grad(r, j) * w->value(r, 0);
    }
    if (w->requires_grad) {
      Mat<T>& g = w->ensure_grad();
      for (std::size_t r = 0; r < a->value.rows(); ++r) {
        T s = 0;
        for (std::size_t j = 0; j < a->value.cols(); ++j)
          s += self.grad(r, j) * a->value(r, j);
        g(r, 0) += s;
      }
    }
  });
}

// Column j as nx1.
template <typename T>
Var<T> col(const Var<T>& a, std::size_t j) {
  if (j >= a->value.cols()) throw ShapeError("col: column index out of range");
  const std::size_t n = a->value.rows();
  Mat<T> out(n, 1);
  for (std::size_t r = 0; r < n; ++r) out(r, 0) = a->value(r, j);
  return detail::make_op<T>(std::move(out), {a}, [a, j](Node<T>& self) {
    if (!a->requires_grad) return;
    Mat<T>& g = a->ensure_grad();
    for (std::size_t r = 0; r < self.grad.rows(); ++r) g(r, j) += self.grad(r, 0);
  });
}

// Top-K softmax routing weights: per row keep the K largest logits (ties
// broken toward the lower column index), softmax over exactly those, zeros
// elsewhere. Gradient flows only through the selected logits.
template <typename T>
Var<T> topk_softmax(const Var<T>& logits, std::size_t k) {
  const std::size_t n = logits->value.rows(), e = logits->value.cols();
  if (k < 1 || k > e) {
    throw ShapeError("topk_softmax: k=" + std::to_string(k) + " out of range for " +
                     std::to_string(e) + " experts");
  }
  Mat<T> out(n, e);
  std::vector<std::vector<std::size_t>> selected(n);
  std::vector<std::size_t> order(e);
  for (std::size_t r = 0; r < n; ++r) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return logits->value(r, x) > logits->value(r, y);
    });
    auto& sel = selected[r];
    sel.assign(order.begin(), order.begin() + k);
    std::sort(sel.begin(), sel.end());
    T mx = logits->value(r, sel[0]);
    for (std::size_t j : sel) mx = std::max(mx, logits->value(r, j));
    T denom = 0;
    for (std::size_t j : sel) {
      out(r, j) = std::exp(logits->value(r, j) - mx);
      denom += out(r, j);
    }
    for (std::size_t j : sel) out(r, j) /= denom;
  }
  return detail::make_op<T>(
      std::move(out), {logits}, [logits, selected](Node<T>& self) {
        if (!logits->requires_grad) return;
        Mat<T>& g = logits->ensure_grad();
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
          T dot = 0;
          for (std::size_t j : selected[r]) dot += self.grad(r, j) * self.value(r, j);
          for (std::size_t j : selected[r])
            g(r, j) += self.value(r, j) * (self.grad(r, j) - dot);
        }
      });
}

// ---- backward ----

// Reverse pass from a scalar loss. Visits every reachable recorded node
// exactly once, in decreasing creation order (a valid reverse topological
// order by construction).
template <typename T>
void backward(const Var<T>& loss) {
  if (loss->value.rows() != 1 || loss->value.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + loss->value.shape_str());
  }
  if (!loss->requires_grad) return;

  std::vector<Node<T>*> topo;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    topo.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(topo.begin(), topo.end(),
            [](const Node<T>* x, const Node<T>* y) { return x->id > y->id; });

  loss->ensure_grad()[0] = T(1);
  for (Node<T>* n : topo) {
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
  }
}

}  // namespace moelab::ad
