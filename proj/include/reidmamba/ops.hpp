#pragma once

// Differentiable building blocks on top of ag::Graph. Shapes are checked at
// record time and violations throw std::invalid_argument.

#include "reidmamba/autograd.hpp"

#include <utility>
#include <vector>

namespace reidmamba::ag {

Var matmul(Var a, Var b);
Var transpose(Var x);
/// x·w with w stored as (in × out).
Var linear(Var x, Var w);
/// x·w + b, b a 1 × out row broadcast over rows.
Var linear(Var x, Var w, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
/// Adds a 1 × C row to every row of x.
Var add_row(Var x, Var row);

Var exp(Var x);
Var silu(Var x);
Var softplus(Var x);

/// Per-row layer normalization with learnable 1 × C scale and shift.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Per-row Euclidean normalization. Throws std::domain_error on a zero row.
Var l2_normalize_rows(Var x);

Var gather_rows(Var x, std::vector<int> rows);
Var concat_rows(const std::vector<Var>& parts);
/// Row-major reshape.
Var reshape(Var x, int rows, int cols);
/// Flattens to a single row (row-major).
Var flatten(Var x);
/// Gathers arbitrary (row, col) entries into a 1 × B row.
Var pick(Var x, std::vector<std::pair<int, int>> entries);

Var sum(Var x);
Var mean(Var x);

/// Row-wise cosine similarity between the rows of a and b (rows(a) × rows(b)).
Var cosine_similarity(Var a, Var b);
/// Mean of the listed rows for each group (groups.size() × C).
Var group_mean_rows(Var x, const std::vector<std::vector<int>>& groups);

/// Depthwise causal convolution over rows. x: T × C, w: C × k, b: 1 × C.
/// y[t,c] = b[c] + sum_j w[c,j] * x[t-(k-1)+j, c], zero history before t=0.
Var causal_depthwise_conv(Var x, Var w, Var b);

}  // namespace reidmamba::ag
