#include "caspr/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace caspr {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_matrix(const Tensor& t) { return ConstMapMat(t.data(), t.rows(), t.cols()); }
MapMat as_matrix(Tensor& t) { return MapMat(t.data(), t.rows(), t.cols()); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 input, got " + shape_string(t.shape()));
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("op applied to an unbound Var");
  return *a.tape;
}

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("op inputs live on different tapes");
}

// How an operand is indexed relative to the output of a broadcasting op.
enum class Bcast { full, row, scalar };

Bcast classify(const Tensor& operand, const Shape& out) {
  if (operand.shape() == out) return Bcast::full;
  if (operand.size() == 1) return Bcast::scalar;
  if (operand.rows() == 1 && operand.cols() == out[1]) return Bcast::row;
  throw ShapeError("operand " + shape_string(operand.shape()) + " cannot broadcast to " + shape_string(out));
}

// Row and column strides of an operand viewed at the output shape.
struct Strides {
  std::size_t row, col;
};

inline Strides strides(Bcast mode, std::size_t cols) {
  switch (mode) {
    case Bcast::full:
      return {cols, 1};
    case Bcast::row:
      return {0, 1};
    case Bcast::scalar:
      return {0, 0};
  }
  return {cols, 1};
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_rank2(a, op);
  require_rank2(b, op);
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  if (b.rows() == 1 && b.cols() == a.cols()) return a.shape();
  if (a.rows() == 1 && a.cols() == b.cols()) return b.shape();
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

enum class BinKind { add, sub, mul };

template <BinKind kind>
void forward_loop(const Tensor& av, Strides sa, const Tensor& bv, Strides sb, Tensor& out) {
  const std::size_t rows = out.rows(), cols = out.cols();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * sa.row;
    const double* y = bv.data() + r * sb.row;
    for (std::size_t c = 0; c < cols; ++c, ++o) {
      const double u = x[c * sa.col], v = y[c * sb.col];
      *o = kind == BinKind::add ? u + v : kind == BinKind::sub ? u - v : u * v;
    }
  }
}

// Accumulates sign * grad_out (times `other` for products) into `grad`.
void backward_loop(const Tensor& grad_out, double sign, const Tensor* other, Strides so, Tensor& grad, Strides sg) {
  const std::size_t rows = grad_out.rows(), cols = grad_out.cols();
  const double* g = grad_out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* dst = grad.data() + r * sg.row;
    const double* w = other ? other->data() + r * so.row : nullptr;
    for (std::size_t c = 0; c < cols; ++c, ++g) {
      const double d = w ? *g * w[c * so.col] : sign * *g;
      dst[c * sg.col] += d;
    }
  }
}

Var binary(Var a, Var b, BinKind kind, const char* name) {
  same_tape(a, b);
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape shape = broadcast_shape(av, bv, name);
  const std::size_t cols = shape[1];
  const Strides sa = strides(classify(av, shape), cols);
  const Strides sb = strides(classify(bv, shape), cols);
  Tensor out(shape);
  switch (kind) {
    case BinKind::add:
      forward_loop<BinKind::add>(av, sa, bv, sb, out);
      break;
    case BinKind::sub:
      forward_loop<BinKind::sub>(av, sa, bv, sb, out);
      break;
    case BinKind::mul:
      forward_loop<BinKind::mul>(av, sa, bv, sb, out);
      break;
  }
  return tape.record(std::move(out), {a, b}, [sa, sb, kind](const BackwardArgs& g) {
    const bool product = kind == BinKind::mul;
    if (Tensor* ga = g.in_grad[0]) backward_loop(g.grad_out, 1.0, product ? g.in[1] : nullptr, sb, *ga, sa);
    if (Tensor* gb = g.in_grad[1]) {
      backward_loop(g.grad_out, kind == BinKind::sub ? -1.0 : 1.0, product ? g.in[0] : nullptr, sa, *gb, sb);
    }
  });
}

template <class F, class D>
Var unary(Var a, const char* name, F f, D dfdx) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, name);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return tape.record(std::move(out), {a}, [dfdx](const BackwardArgs& g) {
    Tensor* ga = g.in_grad[0];
    const Tensor& x = *g.in[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g.grad_out[i] * dfdx(x[i], g.out[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Var add(Var a, Var b) { return binary(a, b, BinKind::add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinKind::sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinKind::mul, "mul"); }

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor out = Tensor::zeros(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return tape_of(a).record(std::move(out), {a, b}, [](const BackwardArgs& g) {
    auto go = as_matrix(g.grad_out);
    if (Tensor* ga = g.in_grad[0]) as_matrix(*ga).noalias() += go * as_matrix(*g.in[1]).transpose();
    if (Tensor* gb = g.in_grad[1]) as_matrix(*gb).noalias() += as_matrix(*g.in[0]).transpose() * go;
  });
}

Var affine(Var x, Var w, Var b) {
  same_tape(x, w);
  same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank2(xv, "affine");
  require_rank2(wv, "affine");
  if (xv.cols() != wv.rows() || bv.size() != wv.cols()) {
    throw ShapeError("affine: x " + shape_string(xv.shape()) + ", w " + shape_string(wv.shape()) + ", b " +
                     shape_string(bv.shape()));
  }
  Tensor out = Tensor::zeros(xv.rows(), wv.cols());
  auto om = as_matrix(out);
  om.noalias() = as_matrix(xv) * as_matrix(wv);
  Eigen::Map<const Eigen::RowVectorXd> bias(bv.data(), static_cast<Eigen::Index>(bv.size()));
  om.rowwise() += bias;
  return tape_of(x).record(std::move(out), {x, w, b}, [](const BackwardArgs& g) {
    auto go = as_matrix(g.grad_out);
    if (Tensor* gx = g.in_grad[0]) as_matrix(*gx).noalias() += go * as_matrix(*g.in[1]).transpose();
    if (Tensor* gw = g.in_grad[1]) as_matrix(*gw).noalias() += as_matrix(*g.in[0]).transpose() * go;
    if (Tensor* gb = g.in_grad[2]) {
      Eigen::Map<Eigen::RowVectorXd> gbias(gb->data(), static_cast<Eigen::Index>(gb->size()));
      gbias += go.colwise().sum();
    }
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  if (axis != 0 && axis != 1) throw ShapeError("concat axis must be 0 or 1");
  Tape& tape = tape_of(parts[0]);
  std::vector<std::size_t> extents;
  std::size_t rows = parts[0].value().rows();
  std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& v = p.value();
    require_rank2(v, "concat");
    if (axis == 0 && v.cols() != cols) throw ShapeError("concat(axis=0): column mismatch");
    if (axis == 1 && v.rows() != rows) throw ShapeError("concat(axis=1): row mismatch");
    const std::size_t e = axis == 0 ? v.rows() : v.cols();
    extents.push_back(e);
    total += e;
  }
  Tensor out = axis == 0 ? Tensor::zeros(total, cols) : Tensor::zeros(rows, total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    if (axis == 0) {
      std::copy(v.data(), v.data() + v.size(), out.data() + offset * cols);
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(v.data() + r * extents[p], v.data() + (r + 1) * extents[p], out.data() + r * total + offset);
      }
    }
    offset += extents[p];
  }
  return tape.record(std::move(out), parts, [axis, extents, rows, cols, total](const BackwardArgs& g) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      if (Tensor* gp = g.in_grad[p]) {
        if (axis == 0) {
          const double* src = g.grad_out.data() + offset * cols;
          for (std::size_t i = 0; i < extents[p] * cols; ++i) (*gp)[i] += src[i];
        } else {
          for (std::size_t r = 0; r < rows; ++r) {
            const double* src = g.grad_out.data() + r * total + offset;
            double* dst = gp->data() + r * extents[p];
            for (std::size_t c = 0; c < extents[p]; ++c) dst[c] += src[c];
          }
        }
      }
      offset += extents[p];
    }
  });
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  require_rank2(av, "slice");
  if (axis != 0 && axis != 1) throw ShapeError("slice axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? av.rows() : av.cols();
  if (begin > end || end > extent) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     shape_string(av.shape()));
  }
  const std::size_t rows = av.rows();
  const std::size_t cols = av.cols();
  const std::size_t width = end - begin;
  Tensor out = axis == 0 ? Tensor::zeros(width, cols) : Tensor::zeros(rows, width);
  if (axis == 0) {
    std::copy(av.data() + begin * cols, av.data() + end * cols, out.data());
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(av.data() + r * cols + begin, av.data() + r * cols + end, out.data() + r * width);
    }
  }
  return tape_of(a).record(std::move(out), {a}, [axis, begin, width, rows, cols](const BackwardArgs& g) {
    Tensor* ga = g.in_grad[0];
    if (axis == 0) {
      double* dst = ga->data() + begin * cols;
      for (std::size_t i = 0; i < width * cols; ++i) dst[i] += g.grad_out[i];
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) ga->at(r, begin + c) += g.grad_out[r * width + c];
      }
    }
  });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary(a, "softplus", stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var abs(Var a) {
  return unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(Var a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var scale(Var a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var shift(Var a, double offset) {
  return unary(
      a, "shift", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var segment_max(Var a, std::size_t segment) {
  const Tensor& av = a.value();
  require_rank2(av, "segment_max");
  if (segment == 0 || av.rows() == 0 || av.rows() % segment != 0) {
    throw ShapeError("segment_max: " + std::to_string(av.rows()) + " rows not divisible into segments of " +
                     std::to_string(segment));
  }
  const std::size_t groups = av.rows() / segment;
  const std::size_t cols = av.cols();
  Tensor out = Tensor::zeros(groups, cols);
  std::vector<std::uint32_t> argmax(groups * cols);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t best = g * segment;
      double v = av.at(best, c);
      for (std::size_t r = best + 1; r < (g + 1) * segment; ++r) {
        if (av.at(r, c) > v) {
          v = av.at(r, c);
          best = r;
        }
      }
      out.at(g, c) = v;
      argmax[g * cols + c] = static_cast<std::uint32_t>(best);
    }
  }
  return tape_of(a).record(std::move(out), {a}, [argmax = std::move(argmax), cols](const BackwardArgs& g) {
    Tensor* ga = g.in_grad[0];
    for (std::size_t i = 0; i < argmax.size(); ++i) ga->at(argmax[i], i % cols) += g.grad_out[i];
  });
}

Var reduce_max_over_points(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "reduce_max_over_points");
  return segment_max(a, av.rows());
}

Var reduce_sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  return tape_of(a).record(Tensor::scalar(s), {a}, [](const BackwardArgs& g) {
    const double d = g.grad_out[0];
    for (double& v : g.in_grad[0]->values()) v += d;
  });
}

Var reduce_mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("reduce_mean of an empty tensor");
  return scale(reduce_sum(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "mean_rows");
  const std::size_t rows = av.rows();
  if (rows == 0) throw ShapeError("mean_rows of an empty tensor");
  Tensor out = Tensor::zeros(1, av.cols());
  as_matrix(out) = as_matrix(av).colwise().mean();
  return tape_of(a).record(std::move(out), {a}, [rows](const BackwardArgs& g) {
    auto ga = as_matrix(*g.in_grad[0]);
    Eigen::Map<const Eigen::RowVectorXd> go(g.grad_out.data(), static_cast<Eigen::Index>(g.grad_out.size()));
    ga.rowwise() += go / static_cast<double>(rows);
  });
}

Var sum_cols(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "sum_cols");
  Tensor out = Tensor::zeros(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < av.cols(); ++c) s += av.at(r, c);
    out[r] = s;
  }
  return tape_of(a).record(std::move(out), {a}, [](const BackwardArgs& g) {
    Tensor* ga = g.in_grad[0];
    const std::size_t cols = ga->cols();
    for (std::size_t r = 0; r < ga->rows(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) ga->at(r, c) += g.grad_out[r];
    }
  });
}

Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& xv = x.value();
  require_rank2(xv, "group_norm");
  const std::size_t n = xv.rows();
  const std::size_t channels = xv.cols();
  if (groups == 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.value().size() != channels || beta.value().size() != channels) {
    throw ShapeError("group_norm: gamma/beta must have one entry per channel");
  }
  if (n == 0) throw ShapeError("group_norm of an empty tensor");
  const std::size_t per = channels / groups;
  const double count = static_cast<double>(n * per);
  std::vector<double> inv_std(groups);
  Tensor normalized(xv.shape());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) mean += xv.at(r, c);
    }
    mean /= count;
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) {
        const double d = xv.at(r, c) - mean;
        var += d * d;
      }
    }
    var /= count;
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) normalized.at(r, c) = (xv.at(r, c) - mean) * inv_std[gi];
    }
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < channels; ++c) out.at(r, c) = normalized.at(r, c) * gv[c] + bv[c];
  }
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [normalized = std::move(normalized), inv_std = std::move(inv_std), groups, per, count](const BackwardArgs& g) {
        const std::size_t n = normalized.rows();
        const std::size_t channels = normalized.cols();
        const Tensor& gv = *g.in[1];
        if (Tensor* gg = g.in_grad[1]) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < channels; ++c) (*gg)[c] += g.grad_out.at(r, c) * normalized.at(r, c);
          }
        }
        if (Tensor* gb = g.in_grad[2]) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < channels; ++c) (*gb)[c] += g.grad_out.at(r, c);
          }
        }
        if (Tensor* gx = g.in_grad[0]) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            double sum_d = 0.0;
            double sum_dx = 0.0;
            for (std::size_t r = 0; r < n; ++r) {
              for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) {
                const double d = g.grad_out.at(r, c) * gv[c];
                sum_d += d;
                sum_dx += d * normalized.at(r, c);
              }
            }
            for (std::size_t r = 0; r < n; ++r) {
              for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) {
                const double d = g.grad_out.at(r, c) * gv[c];
                gx->at(r, c) += inv_std[gi] * (d - sum_d / count - normalized.at(r, c) * sum_dx / count);
              }
            }
          }
        }
      });
}

Var gather_rows(Var a, std::span<const std::uint32_t> rows) {
  const Tensor& av = a.value();
  require_rank2(av, "gather_rows");
  const std::size_t cols = av.cols();
  Tensor out = Tensor::zeros(rows.size(), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy(av.data() + rows[i] * cols, av.data() + (rows[i] + 1) * cols, out.data() + i * cols);
  }
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  return tape_of(a).record(std::move(out), {a}, [idx = std::move(idx), cols](const BackwardArgs& g) {
    Tensor* ga = g.in_grad[0];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = ga->data() + idx[i] * cols;
      const double* src = g.grad_out.data() + i * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

Var interpolate_rows(Var a, std::span<const std::uint32_t> index, std::span<const double> weights, std::size_t k) {
  const Tensor& av = a.value();
  require_rank2(av, "interpolate_rows");
  if (k == 0 || index.size() != weights.size() || index.size() % k != 0) {
    throw ShapeError("interpolate_rows: index/weight layout mismatch");
  }
  const std::size_t n = index.size() / k;
  const std::size_t cols = av.cols();
  Tensor out = Tensor::zeros(n, cols);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::uint32_t src = index[i * k + j];
      if (src >= av.rows()) throw ShapeError("interpolate_rows: index out of range");
      const double w = weights[i * k + j];
      for (std::size_t c = 0; c < cols; ++c) out.at(i, c) += w * av.at(src, c);
    }
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  std::vector<double> wts(weights.begin(), weights.end());
  return tape_of(a).record(std::move(out), {a},
                           [idx = std::move(idx), wts = std::move(wts), k, n, cols](const BackwardArgs& g) {
                             Tensor* ga = g.in_grad[0];
                             for (std::size_t i = 0; i < n; ++i) {
                               for (std::size_t j = 0; j < k; ++j) {
                                 double* dst = ga->data() + idx[i * k + j] * cols;
                                 const double w = wts[i * k + j];
                                 for (std::size_t c = 0; c < cols; ++c) dst[c] += w * g.grad_out.at(i, c);
                               }
                             }
                           });
}

Var broadcast_rows(Var a, std::size_t rows) {
  const Tensor& av = a.value();
  require_rank2(av, "broadcast_rows");
  if (av.rows() != 1) throw ShapeError("broadcast_rows expects a single row");
  const std::size_t cols = av.cols();
  Tensor out = Tensor::zeros(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) std::copy(av.data(), av.data() + cols, out.data() + r * cols);
  return tape_of(a).record(std::move(out), {a}, [](const BackwardArgs& g) {
    Tensor* ga = g.in_grad[0];
    const std::size_t cols = ga->size();
    for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*ga)[i % cols] += g.grad_out[i];
  });
}

Var forward(OpKind kind, std::span<const Var> inputs, const OpArgs& args) {
  auto need = [&](std::size_t count) {
    if (inputs.size() != count) {
      throw ShapeError("op expects " + std::to_string(count) + " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::add:
      need(2);
      return add(inputs[0], inputs[1]);
    case OpKind::sub:
      need(2);
      return sub(inputs[0], inputs[1]);
    case OpKind::mul:
      need(2);
      return mul(inputs[0], inputs[1]);
    case OpKind::matmul:
      need(2);
      return matmul(inputs[0], inputs[1]);
    case OpKind::concat:
      return concat(inputs, args.axis);
    case OpKind::slice:
      need(1);
      return slice(inputs[0], args.axis, args.begin, args.end);
    case OpKind::relu:
      need(1);
      return relu(inputs[0]);
    case OpKind::tanh:
      need(1);
      return tanh(inputs[0]);
    case OpKind::sigmoid:
      need(1);
      return sigmoid(inputs[0]);
    case OpKind::softplus:
      need(1);
      return softplus(inputs[0]);
    case OpKind::reduce_max_over_points:
      need(1);
      return reduce_max_over_points(inputs[0]);
    case OpKind::reduce_mean:
      need(1);
      return reduce_mean(inputs[0]);
    case OpKind::group_norm:
      need(3);
      return group_norm(inputs[0], args.groups, inputs[1], inputs[2], args.eps);
    case OpKind::affine:
      need(3);
      return affine(inputs[0], inputs[1], inputs[2]);
  }
  throw Error("unknown op kind");
}

}  // namespace caspr
