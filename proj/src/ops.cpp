#include "moa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "moa/errors.hpp"

namespace moa {
namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

void require_finite(const char* op, const Tensor& x) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + av.shape_string() + " x " +
                         bv.shape_string());
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(m, n);
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      gemm_nt(g.data().data(), b.value().data().data(), ga->data().data(), m, n, k);
    }
    if (Tensor* gb = t.grad_target(b)) {
      gemm_tn(a.value().data().data(), g.data().data(), gb->data().data(), m, k, n);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + av.shape_string() +
                         " x " + bv.shape_string() + "^T");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out(m, n);
  gemm_nt(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      gemm_nn(g.data().data(), b.value().data().data(), ga->data().data(), m, n, k);
    }
    if (Tensor* gb = t.grad_target(b)) {
      gemm_tn(g.data().data(), a.value().data().data(), gb->data().data(), m, n, k);
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.cols(), av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      for (std::size_t i = 0; i < ga->rows(); ++i)
        for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += g(j, i);
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  out += b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) *ga += g;
    if (Tensor* gb = t.grad_target(b)) *gb += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) *ga += g;
    if (Tensor* gb = t.grad_target(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.grad_target(b)) {
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.tape().record(std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
    }
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) *ga += g;
  });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: cannot broadcast " + rv.shape_string() + " over " +
                         av.shape_string());
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) *ga += g;
    if (Tensor* gr = t.grad_target(row)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gr)[j] += g(i, j);
    }
  });
}

Var scale_rows(Var a, Var s) {
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != av.rows()) {
    throw DimensionError("scale_rows: scale " + sv.shape_string() + " does not match " +
                         av.shape_string());
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= sv[i];
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      const Tensor& sv = s.value();
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, j) += g(i, j) * sv[i];
    }
    if (Tensor* gs = t.grad_target(s)) {
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) acc += g(i, j) * av(i, j);
        (*gs)[i] += acc;
      }
    }
  });
}

Var div_scalar(Var a, Var s) {
  const double sv = s.value().item();
  Tensor out = a.value();
  for (auto& v : out.data()) v /= sv;
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const double sv = s.value().item();
    if (Tensor* ga = t.grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / sv;
    }
    if (Tensor* gs = t.grad_target(s)) {
      const Tensor& av = a.value();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      (*gs)[0] -= acc / (sv * sv);
    }
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      const Tensor& x = a.value();
      constexpr double inv_sqrt_2pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        (*ga)[i] += g[i] * (cdf + v * pdf);
      }
    }
  });
}

Var softplus(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) {
    v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_target(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                    : std::exp(v) / (1.0 + std::exp(v));
        (*ga)[i] += g[i] * sig;
      }
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != n) {
    throw DimensionError("layer_norm: gamma " + gamma.value().shape_string() +
                         " does not match " + xv.shape_string());
  }
  require_same_shape("layer_norm", gamma.value(), beta.value());
  auto xhat = std::make_shared<Tensor>(m, n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Tensor out(m, n);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xv(i, j) - mu) * is;
      (*xhat)(i, j) = h;
      out(i, j) = h * gv[j] + bv[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, m, n](Tape& t, const Tensor& g) {
        if (Tensor* gg = t.grad_target(gamma)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g(i, j) * (*xhat)(i, j);
        }
        if (Tensor* gb = t.grad_target(beta)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
        }
        if (Tensor* gx = t.grad_target(x)) {
          const Tensor& gv = gamma.value();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g(i, j) * gv[j];
              s1 += dh;
              s2 += dh * (*xhat)(i, j);
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g(i, j) * gv[j];
              (*gx)(i, j) += (*inv_std)[i] * (dh - inv_n * s1 - (*xhat)(i, j) * inv_n * s2);
            }
          }
        }
      });
}

namespace {
void softmax_row_inplace(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= s;
}
}  // namespace

Var softmax_rows(Var x) {
  require_finite("softmax_rows", x.value());
  Tensor out = x.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i) softmax_row_inplace(&out(i, 0), n);
  auto y = std::make_shared<Tensor>(out);
  return x.tape().record(std::move(out), {x}, [x, m, n, y](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * (*y)(i, j);
        for (std::size_t j = 0; j < n; ++j) (*gx)(i, j) += (*y)(i, j) * (g(i, j) - dot);
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  const std::size_t m = lv.rows(), c = lv.cols();
  if (labels.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + lv.shape_string());
  }
  for (std::size_t lab : labels) {
    if (lab >= c) {
      throw ArgumentError("cross_entropy: label " + std::to_string(lab) +
                          " out of range for " + std::to_string(c) + " classes");
    }
  }
  require_finite("cross_entropy", lv);
  auto probs = std::make_shared<Tensor>(lv);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &lv(i, 0);
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double log_z = mx + std::log(s);
    loss += log_z - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) (*probs)(i, j) = std::exp(row[j] - log_z);
  }
  loss /= static_cast<double>(m);
  std::vector<std::size_t> labs(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor::scalar(loss), {logits}, [logits, probs, labs, m, c](Tape& t, const Tensor& g) {
        if (Tensor* gl = t.grad_target(logits)) {
          const double s = g[0] / static_cast<double>(m);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < c; ++j) (*gl)(i, j) += s * (*probs)(i, j);
            (*gl)(i, labs[i]) -= s;
          }
        }
      });
}

Var kron(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), n = av.cols(), p = bv.rows(), q = bv.cols();
  Tensor out(m * p, n * q);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double aij = av(i, j);
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t s = 0; s < q; ++s) out(i * p + r, j * q + s) = aij * bv(r, s);
    }
  return a.tape().record(std::move(out), {a, b}, [a, b, m, n, p, q](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_target(a);
    Tensor* gb = t.grad_target(b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        const double aij = av(i, j);
        for (std::size_t r = 0; r < p; ++r)
          for (std::size_t s = 0; s < q; ++s) {
            const double gv = g(i * p + r, j * q + s);
            acc += gv * bv(r, s);
            if (gb) (*gb)(r, s) += gv * aij;
          }
        if (ga) (*ga)(i, j) += acc;
      }
  });
}

TopK top_k(Var scores, std::size_t k) {
  const Tensor& sv = scores.value();
  const std::size_t m = sv.rows(), n = sv.cols();
  if (k < 1 || k > n) {
    throw ArgumentError("top_k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(n) + "]");
  }
  TopK result;
  result.k = k;
  result.indices.resize(m * k);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = &sv(i, 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t x, std::size_t y) {
                        return row[x] > row[y] || (row[x] == row[y] && x < y);
                      });
    std::copy_n(order.begin(), k, result.indices.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  std::vector<std::size_t> rows(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) rows[i * k + j] = i;
  result.values = reshape(pick(scores, rows, result.indices), m, k);
  return result;
}

Var gather_rows(Var x, std::span<const std::size_t> indices) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (indices.empty()) throw ArgumentError("gather_rows: no indices");
  Tensor out(indices.size(), n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.rows()) {
      throw ArgumentError("gather_rows: row " + std::to_string(indices[i]) +
                          " out of range for " + xv.shape_string());
    }
    std::copy_n(&xv(indices[i], 0), n, &out(i, 0));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape().record(std::move(out), {x}, [x, idx, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)(idx[i], j) += g(i, j);
    }
  });
}

Var scatter_rows(Var x, std::span<const std::size_t> indices, std::size_t out_rows) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (indices.size() != xv.rows()) {
    throw DimensionError("scatter_rows: " + std::to_string(indices.size()) +
                         " indices for " + xv.shape_string());
  }
  Tensor out(out_rows, n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= out_rows) {
      throw ArgumentError("scatter_rows: row " + std::to_string(indices[i]) +
                          " out of range for " + std::to_string(out_rows) + " rows");
    }
    for (std::size_t j = 0; j < n; ++j) out(indices[i], j) += xv(i, j);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape().record(std::move(out), {x}, [x, idx, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)(i, j) += g(idx[i], j);
    }
  });
}

Var pick(Var x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  const Tensor& xv = x.value();
  if (rows.size() != cols.size() || rows.empty()) {
    throw DimensionError("pick: row/column index lists must be nonempty and equal length");
  }
  Tensor out(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows() || cols[i] >= xv.cols()) {
      throw ArgumentError("pick: index out of range for " + xv.shape_string());
    }
    out[i] = xv(rows[i], cols[i]);
  }
  std::vector<std::size_t> r(rows.begin(), rows.end()), c(cols.begin(), cols.end());
  return x.tape().record(std::move(out), {x}, [x, r, c](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < r.size(); ++i) (*gx)(r[i], c[i]) += g[i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + parts.front().value().shape_string() +
                           " vs " + p.value().shape_string());
    }
    total += p.rows();
  }
  Tensor out(total, n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() +
              static_cast<std::ptrdiff_t>(offset * n));
    offset += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts, [parts, n](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (Tensor* gp = t.grad_target(p)) {
        for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += g[offset * n + i];
      }
      offset += p.rows();
    }
  });
}

Var reshape(Var x, std::size_t rows, std::size_t cols) {
  const Tensor& xv = x.value();
  if (rows * cols != xv.size()) {
    throw DimensionError("reshape: cannot view " + xv.shape_string() + " as " +
                         shape_string(rows, cols));
  }
  Tensor out(rows, cols, xv.storage());
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      for (auto& v : gx->data()) v += g[0];
    }
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(1, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv(i, j);
  for (auto& v : out.data()) v /= static_cast<double>(m);
  return x.tape().record(std::move(out), {x}, [x, m, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_target(x)) {
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)(i, j) += g[j] * inv;
    }
  });
}

Var l2_normalize_rows(Var x, double eps) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  auto denom = std::make_shared<std::vector<double>>(m);
  auto clamped = std::make_shared<std::vector<bool>>(m);
  Tensor out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv(i, j) * xv(i, j);
    const double norm = std::sqrt(s);
    (*clamped)[i] = !(norm > eps);
    (*denom)[i] = (*clamped)[i] ? eps : norm;
    for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) / (*denom)[i];
  }
  auto y = std::make_shared<Tensor>(out);
  return x.tape().record(std::move(out), {x}, [x, y, denom, clamped, m, n](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = (*denom)[i];
      double dot = 0.0;
      if (!(*clamped)[i]) {
        for (std::size_t j = 0; j < n; ++j) dot += (*y)(i, j) * g(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) (*gx)(i, j) += (g(i, j) - (*y)(i, j) * dot) / d;
    }
  });
}

Var attention(Var qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const Tensor& in = qkv.value();
  if (in.rows() != batch * tokens || in.cols() % 3 != 0) {
    throw DimensionError("attention: qkv " + in.shape_string() + " does not hold " +
                         std::to_string(batch) + " sequences of " + std::to_string(tokens) +
                         " tokens");
  }
  const std::size_t d = in.cols() / 3;
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * d;
  // probs[(b * heads + h) * T * T + i * T + j]
  auto probs = std::make_shared<std::vector<double>>(batch * heads * tokens * tokens);
  Tensor out(batch * tokens, d);
  const double* x = in.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * tokens * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        const double* q = x + (b * tokens + i) * stride + h * dh;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double* kk = x + (b * tokens + j) * stride + d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * kk[c];
          p[i * tokens + j] = s * inv_sqrt;
        }
        softmax_row_inplace(p + i * tokens, tokens);
        double* o = &out(b * tokens + i, h * dh);
        for (std::size_t j = 0; j < tokens; ++j) {
          const double pij = p[i * tokens + j];
          const double* v = x + (b * tokens + j) * stride + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += pij * v[c];
        }
      }
    }
  }
  return qkv.tape().record(
      std::move(out), {qkv},
      [qkv, probs, batch, tokens, heads, d, dh, inv_sqrt, stride](Tape& t, const Tensor& g) {
        Tensor* gq = t.grad_target(qkv);
        if (!gq) return;
        const double* x = qkv.value().data().data();
        double* gx = gq->data().data();
        std::vector<double> dp(tokens);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + (b * heads + h) * tokens * tokens;
            for (std::size_t i = 0; i < tokens; ++i) {
              const double* go = &g(b * tokens + i, h * dh);
              // dP[i, j] = dO[i] . V[j]; dV[j] += P[i, j] dO[i]
              double dot = 0.0;
              for (std::size_t j = 0; j < tokens; ++j) {
                const double* v = x + (b * tokens + j) * stride + 2 * d + h * dh;
                double* gv = gx + (b * tokens + j) * stride + 2 * d + h * dh;
                const double pij = p[i * tokens + j];
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += go[c] * v[c];
                  gv[c] += pij * go[c];
                }
                dp[j] = s;
                dot += s * pij;
              }
              const double* q = x + (b * tokens + i) * stride + h * dh;
              double* gqi = gx + (b * tokens + i) * stride + h * dh;
              for (std::size_t j = 0; j < tokens; ++j) {
                const double ds = p[i * tokens + j] * (dp[j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kk = x + (b * tokens + j) * stride + d + h * dh;
                double* gk = gx + (b * tokens + j) * stride + d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kk[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace moa
