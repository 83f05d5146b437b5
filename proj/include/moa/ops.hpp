#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moa/tape.hpp"

// Differentiable primitives. Every op records its result on the tape owning
// its inputs; all inputs of one op must share a tape.

namespace moa {

/// a[m x k] * b[k x n].
Var matmul(Var a, Var b);
/// a[m x k] * b[n x k]^T, i.e. a row-major "x W^T".
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

/// Elementwise a + b, a - b, a * b (equal shapes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// c * a for a constant c.
Var scale(Var a, double c);
/// a + c for a constant c.
Var add_scalar(Var a, double c);
/// a[m x n] + row[1 x n] broadcast over rows.
Var add_row(Var a, Var row);
/// a[m x n] with row i multiplied by s[i, 0].
Var scale_rows(Var a, Var s);
/// a / s for a 1x1 variable s.
Var div_scalar(Var a, Var s);

/// Exact GELU: 0.5 x (1 + erf(x / sqrt 2)).
Var gelu(Var a);
/// log(1 + exp(x)), evaluated without overflow.
Var softplus(Var a);

/// Row-wise layer normalization with biased variance:
/// y = (x - mean) / sqrt(var + eps) * gamma + beta, gamma/beta are 1 x n.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

/// Row-wise softmax with max subtraction. Throws NumericError on
/// non-finite input.
Var softmax_rows(Var x);

/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

/// Kronecker product; block (i, j) of the result is a(i, j) * b.
Var kron(Var a, Var b);

struct TopK {
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // row-major m x k
  Var values;                        // m x k, differentiable
};
/// Per row, the k largest entries in descending order. Ties go to the lowest
/// column index. The selection is a constant for differentiation.
TopK top_k(Var scores, std::size_t k);

/// out[i] = x[indices[i]]; repeated indices accumulate in backward.
Var gather_rows(Var x, std::span<const std::size_t> indices);
/// out[out_rows x n] zero except out[indices[i]] += x[i].
Var scatter_rows(Var x, std::span<const std::size_t> indices, std::size_t out_rows);
/// Column vector out[i, 0] = x[rows[i], cols[i]].
Var pick(Var x, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
/// Stacks inputs with equal column counts vertically.
Var concat_rows(const std::vector<Var>& parts);
/// Same data, new shape (row-major order is preserved).
Var reshape(Var x, std::size_t rows, std::size_t cols);

/// Sum and mean of all entries, as 1x1.
Var sum(Var x);
Var mean(Var x);
/// Column means, 1 x n.
Var mean_rows(Var x);

/// Each row divided by max(||row||_2, eps).
Var l2_normalize_rows(Var x, double eps = 1e-12);

/// Multi-head scaled dot-product self-attention over `batch` independent
/// sequences of `tokens` rows each. qkv is (batch*tokens) x 3d laid out as
/// [Q | K | V]; head h uses columns [h*dh, (h+1)*dh) of each third. Returns
/// the concatenated head outputs, (batch*tokens) x d.
Var attention(Var qkv, std::size_t batch, std::size_t tokens, std::size_t heads);

}  // namespace moa
