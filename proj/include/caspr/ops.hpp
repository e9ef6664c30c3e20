#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "caspr/tape.hpp"

namespace caspr {

// Op catalog. All ops work on rank-2 tensors. Binary elementwise ops accept
// equal shapes, or one operand that is a 1 x C row (broadcast down the rows)
// or a 1 x 1 scalar.

enum class OpKind {
  add,
  sub,
  mul,
  matmul,
  concat,
  slice,
  relu,
  tanh,
  sigmoid,
  softplus,
  reduce_max_over_points,
  reduce_mean,
  group_norm,
  affine,
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);

Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var abs(Var a);
Var square(Var a);
Var exp(Var a);

Var scale(Var a, double factor);
Var shift(Var a, double offset);
Var neg(Var a);

// Column-wise max over rows; ties resolve to the lowest row index.
Var reduce_max_over_points(Var a);
// Max over consecutive blocks of `segment` rows: (m * segment) x C -> m x C.
Var segment_max(Var a, std::size_t segment);
// Mean of every entry -> 1 x 1.
Var reduce_mean(Var a);
Var reduce_sum(Var a);
// Column means over rows -> 1 x C.
Var mean_rows(Var a);
// Row sums over columns -> n x 1.
Var sum_cols(Var a);

// Normalizes x (n x C) with statistics over all rows and the C / groups
// channels of each group, then applies per-channel gamma/beta (1 x C).
Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, double eps = 1e-5);

// x (n x k) * w (k x m) + b (1 x m).
Var affine(Var x, Var w, Var b);

Var gather_rows(Var a, std::span<const std::uint32_t> rows);
// out[i] = sum_j weights[i*k + j] * a[index[i*k + j]].
Var interpolate_rows(Var a, std::span<const std::uint32_t> index, std::span<const double> weights, std::size_t k);
Var broadcast_rows(Var a, std::size_t rows);

struct OpArgs {
  int axis = 1;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t groups = 4;
  double eps = 1e-5;
};

// Generic dispatch over the cataloged ops. group_norm takes (x, gamma, beta)
// and affine takes (x, w, b).
Var forward(OpKind kind, std::span<const Var> inputs, const OpArgs& args = {});

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace caspr
