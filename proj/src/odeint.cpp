#include "caspr/odeint.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

#include "caspr/ops.hpp"

namespace caspr::ode {
namespace {

// Dormand-Prince 5(4) tableau.
constexpr std::array<double, 7> kC = {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0};
constexpr double kA[6][6] = {
    {1.0 / 5.0, 0, 0, 0, 0, 0},
    {3.0 / 40.0, 9.0 / 40.0, 0, 0, 0, 0},
    {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0, 0, 0},
    {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0, 0},
    {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0},
    {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0},
};
// Fifth-order weights are the last row of kA (FSAL). Error weights b5 - b4.
constexpr std::array<double, 7> kE = {71.0 / 57600.0,      0.0, -71.0 / 16695.0, 71.0 / 1920.0,
                                      -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0};

struct StepRecord {
  double t;
  double h;
  Tensor z;
};

class Evaluator {
 public:
  Evaluator(const Dynamics& dyn, InputValues inputs, SolveStats& stats) : dyn_(dyn), inputs_(inputs), stats_(stats) {}

  Tensor operator()(double t, const Tensor& z) const {
    Tape tape(false);
    Var state = tape.leaf_ref(z);
    std::vector<Var> ins;
    ins.reserve(inputs_.size());
    for (const Tensor* in : inputs_) ins.push_back(tape.leaf_ref(*in));
    ++stats_.nfe;
    Var out;
    try {
      out = dyn_.evaluate(tape, state, t, ins);
    } catch (const NumericError& e) {
      throw SolverError(std::string("non-finite derivative: ") + e.what());
    }
    const Tensor& v = out.value();
    if (v.shape() != z.shape()) {
      throw ShapeError("dynamics returned " + shape_string(v.shape()) + " for state " + shape_string(z.shape()));
    }
    if (!v.all_finite()) throw SolverError("non-finite derivative");
    return v;
  }

 private:
  const Dynamics& dyn_;
  InputValues inputs_;
  SolveStats& stats_;
};

// z + h * sum_j coeffs[j] * k[j]
Tensor combine(const Tensor& z, double h, std::span<const double> coeffs, std::span<const Tensor> k) {
  Tensor out = z;
  double* o = out.data();
  const std::size_t n = out.size();
  for (std::size_t j = 0; j < coeffs.size(); ++j) {
    if (coeffs[j] == 0.0) continue;
    const double w = h * coeffs[j];
    const double* kj = k[j].data();
    for (std::size_t i = 0; i < n; ++i) o[i] += w * kj[i];
  }
  return out;
}

double rms_scaled(const Tensor& v, const Tensor& z, double atol, double rtol) {
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = atol + rtol * std::abs(z[i]);
    const double r = v[i] / s;
    acc += r * r;
  }
  return v.size() ? std::sqrt(acc / static_cast<double>(v.size())) : 0.0;
}

double error_norm(const Tensor& err, const Tensor& z0, const Tensor& z1, double atol, double rtol) {
  double acc = 0.0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    const double s = atol + rtol * std::max(std::abs(z0[i]), std::abs(z1[i]));
    const double r = err[i] / s;
    acc += r * r;
  }
  return err.size() ? std::sqrt(acc / static_cast<double>(err.size())) : 0.0;
}

double initial_step(const Evaluator& f, double t0, const Tensor& z0, const Tensor& f0, double span,
                    const OdeConfig& cfg) {
  const double d0 = rms_scaled(z0, z0, cfg.atol, cfg.rtol);
  const double d1 = rms_scaled(f0, z0, cfg.atol, cfg.rtol);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, span);
  Tensor z1 = z0;
  for (std::size_t i = 0; i < z1.size(); ++i) z1[i] += h0 * f0[i];
  const Tensor f1 = f(t0 + h0, z1);
  Tensor diff = f1;
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= f0[i];
  const double d2 = rms_scaled(diff, z0, cfg.atol, cfg.rtol) / h0;
  const double dmax = std::max(d1, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 1.0 / 5.0);
  return std::min(100.0 * h0, h1);
}

// State carried between chained segments: the derivative at the current
// point (FSAL) and the controller's proposed step.
struct Carry {
  Tensor k1;
  double h = 0.0;
};

Tensor advance(const Evaluator& f, Tensor z, double t0, double t1, const OdeConfig& cfg, SolveStats& stats,
               Carry& carry, std::vector<StepRecord>* record) {
  if (!(t1 >= t0)) throw SolverError("integration end time precedes start time");
  if (t1 == t0) return z;
  const double span = t1 - t0;
  if (carry.k1.empty()) carry.k1 = f(t0, z);
  double h;
  if (cfg.fixed_step) {
    h = *cfg.fixed_step;
  } else if (carry.h > 0.0) {
    h = carry.h;
  } else if (cfg.initial_step) {
    h = *cfg.initial_step;
  } else {
    h = initial_step(f, t0, z, carry.k1, span, cfg);
  }
  double t = t0;
  long attempts = 0;
  std::array<Tensor, 7> k;
  while (t < t1) {
    if (++attempts > cfg.max_steps) {
      throw SolverError("maximum number of steps (" + std::to_string(cfg.max_steps) + ") exceeded");
    }
    bool last = false;
    double step = h;
    if (step >= t1 - t) {
      step = t1 - t;
      last = true;
    }
    k[0] = carry.k1;
    for (int s = 1; s < 6; ++s) {
      const Tensor zs = combine(z, step, std::span<const double>(kA[s - 1], s), std::span<const Tensor>(k.data(), s));
      k[s] = f(t + kC[s] * step, zs);
    }
    Tensor z5 = combine(z, step, std::span<const double>(kA[5], 6), std::span<const Tensor>(k.data(), 6));
    if (cfg.fixed_step) {
      if (record) record->push_back({t, step, z});
      t = last ? t1 : t + step;
      z = std::move(z5);
      carry.k1 = f(t, z);
      ++stats.accepted_steps;
      continue;
    }
    k[6] = f(t + step, z5);
    Tensor err = combine(Tensor(z.shape(), 0.0), step, kE, k);
    const double norm = error_norm(err, z, z5, cfg.atol, cfg.rtol);
    const double factor = norm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(norm, -0.2), 0.2, 5.0);
    if (norm <= 1.0) {
      if (record) record->push_back({t, step, z});
      t = last ? t1 : t + step;
      z = std::move(z5);
      carry.k1 = std::move(k[6]);
      ++stats.accepted_steps;
      h = step * factor;
    } else {
      ++stats.rejected_steps;
      h = step * std::min(1.0, factor);
      if (h < 1e-12 * span) throw SolverError("step size underflow");
    }
  }
  carry.h = h;
  return z;
}

void check_times(std::span<const double> times, double t0) {
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i])) throw SolverError("non-finite query time");
    if (times[i] < (i ? times[i - 1] : t0)) throw SolverError("query times must be nondecreasing and >= t0");
  }
}

// One accepted RK step replayed on a tape.
Var rk_step(Tape& tape, const Dynamics& dyn, Var z, double t, double h, std::span<const Var> inputs) {
  std::array<Var, 6> k;
  auto combine_vars = [&](std::span<const double> coeffs) {
    Var acc = z;
    for (std::size_t j = 0; j < coeffs.size(); ++j) {
      if (coeffs[j] == 0.0) continue;
      acc = add(acc, scale(k[j], h * coeffs[j]));
    }
    return acc;
  };
  k[0] = dyn.evaluate(tape, z, t, inputs);
  for (int s = 1; s < 6; ++s) k[s] = dyn.evaluate(tape, combine_vars(std::span<const double>(kA[s - 1], s)), t + kC[s] * h, inputs);
  return combine_vars(std::span<const double>(kA[5], 6));
}

// Backward-in-time augmented system for the adjoint method. State is the
// flattened row [z, a, g_1, ..., g_p] and the time variable runs from 0 at
// t_hi to t_hi - t_lo.
class AugmentedDynamics final : public Dynamics {
 public:
  AugmentedDynamics(const Dynamics& base, const Shape& state_shape, InputValues inputs, std::vector<bool> wanted,
                    double t_hi)
      : base_(base), shape_(state_shape), inputs_(inputs), wanted_(std::move(wanted)), t_hi_(t_hi) {}

  Var evaluate(Tape& tape, Var state, double s, std::span<const Var>) const override {
    const Tensor& packed = state.value();
    const std::size_t n = shape_product(shape_);
    Tensor z(shape_, std::vector<double>(packed.data(), packed.data() + n));
    Tensor a(shape_, std::vector<double>(packed.data() + n, packed.data() + 2 * n));
    Tape inner;
    Var zv = inner.leaf(std::move(z), true);
    std::vector<Var> ins;
    for (std::size_t i = 0; i < inputs_.size(); ++i) ins.push_back(inner.leaf_ref(*inputs_[i], wanted_[i]));
    Var f = base_.evaluate(inner, zv, t_hi_ - s, ins);
    Tensor out(packed.shape(), 0.0);
    const Tensor& fv = f.value();
    for (std::size_t i = 0; i < n; ++i) out[i] = -fv[i];
    inner.backward(f, a);
    const Tensor gz = inner.grad(zv);
    std::copy(gz.data(), gz.data() + n, out.data() + n);
    std::size_t offset = 2 * n;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (!wanted_[i]) continue;
      const Tensor gi = inner.grad(ins[i]);
      std::copy(gi.data(), gi.data() + gi.size(), out.data() + offset);
      offset += gi.size();
    }
    return tape.constant(std::move(out));
  }

 private:
  const Dynamics& base_;
  Shape shape_;
  InputValues inputs_;
  std::vector<bool> wanted_;
  double t_hi_;
};

}  // namespace

void OdeConfig::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw SolverError("rtol and atol must be positive");
  if (max_steps < 1) throw SolverError("max_steps must be at least 1");
  if (fixed_step && !(*fixed_step > 0.0)) throw SolverError("fixed_step must be positive");
  if (initial_step && !(*initial_step > 0.0)) throw SolverError("initial_step must be positive");
}

OdeResult integrate(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const OdeConfig& cfg,
                    InputValues inputs) {
  cfg.validate();
  if (!z0.all_finite()) throw SolverError("initial state is not finite");
  OdeResult result;
  if (t1 < t0) throw SolverError("integration end time precedes start time");
  Evaluator f(dyn, inputs, result.stats);
  Carry carry;
  result.state = advance(f, z0, t0, t1, cfg, result.stats, carry, nullptr);
  return result;
}

DenseResult integrate_dense(const Dynamics& dyn, const Tensor& z0, std::span<const double> times, const OdeConfig& cfg,
                            InputValues inputs, double t0) {
  cfg.validate();
  if (!z0.all_finite()) throw SolverError("initial state is not finite");
  check_times(times, t0);
  DenseResult result;
  Evaluator f(dyn, inputs, result.stats);
  Carry carry;
  Tensor z = z0;
  double t = t0;
  for (double target : times) {
    z = advance(f, std::move(z), t, target, cfg, result.stats, carry, nullptr);
    t = target;
    result.states.push_back(z);
  }
  return result;
}

Var solve(Tape& tape, const Dynamics& dyn, Var z0, std::span<const Var> inputs, double t0,
          std::span<const double> times, const OdeConfig& cfg, GradMode mode, SolveStats* stats) {
  return solve(tape, std::shared_ptr<const Dynamics>(std::shared_ptr<const Dynamics>(), &dyn), z0, inputs, t0, times,
               cfg, mode, stats);
}

Var solve(Tape& tape, std::shared_ptr<const Dynamics> dynamics, Var z0, std::span<const Var> inputs, double t0,
          std::span<const double> times, const OdeConfig& cfg, GradMode mode, SolveStats* stats) {
  cfg.validate();
  if (times.empty()) throw SolverError("solve requires at least one query time");
  check_times(times, t0);
  const Tensor& z0v = z0.value();
  if (z0v.rank() != 2) throw ShapeError("ODE state must be rank 2");
  if (!z0v.all_finite()) throw SolverError("initial state is not finite");

  std::vector<const Tensor*> in_values;
  for (Var v : inputs) in_values.push_back(&v.value());

  const Dynamics& dyn = *dynamics;
  SolveStats local;
  Evaluator f(dyn, in_values, local);
  Carry carry;
  auto segments = std::make_shared<std::vector<std::vector<StepRecord>>>(times.size());
  const bool keep_steps = tape.recording() && mode == GradMode::discretize;
  const std::size_t rows = z0v.rows();
  const std::size_t cols = z0v.cols();
  Tensor stacked = Tensor::zeros(rows * times.size(), cols);
  Tensor z = z0v;
  double t = t0;
  for (std::size_t j = 0; j < times.size(); ++j) {
    z = advance(f, std::move(z), t, times[j], cfg, local, carry, keep_steps ? &(*segments)[j] : nullptr);
    t = times[j];
    std::copy(z.data(), z.data() + z.size(), stacked.data() + j * z.size());
  }
  if (stats) *stats += local;

  std::vector<Var> all;
  all.push_back(z0);
  all.insert(all.end(), inputs.begin(), inputs.end());
  std::vector<double> query(times.begin(), times.end());
  return tape.record(
      std::move(stacked), all, [dynp = std::move(dynamics), segments, query, t0, cfg, mode, rows, cols](const BackwardArgs& g) {
        const std::size_t n_inputs = g.in.size() - 1;
        const std::size_t block = rows * cols;
        Tensor adj({rows, cols}, 0.0);
        auto add_block = [&](std::size_t j) {
          const double* src = g.grad_out.data() + j * block;
          for (std::size_t i = 0; i < block; ++i) adj[i] += src[i];
        };
        if (mode == GradMode::discretize) {
          for (std::size_t j = query.size(); j-- > 0;) {
            add_block(j);
            const auto& steps = (*segments)[j];
            for (std::size_t s = steps.size(); s-- > 0;) {
              Tape sub;
              Var zs = sub.leaf_ref(steps[s].z, true);
              std::vector<Var> ins;
              for (std::size_t i = 0; i < n_inputs; ++i) ins.push_back(sub.leaf_ref(*g.in[1 + i], g.in_grad[1 + i] != nullptr));
              Var next = rk_step(sub, *dynp, zs, steps[s].t, steps[s].h, ins);
              sub.backward(next, adj);
              adj = sub.grad(zs);
              for (std::size_t i = 0; i < n_inputs; ++i) {
                if (Tensor* gi = g.in_grad[1 + i]) {
                  const Tensor d = sub.grad(ins[i]);
                  for (std::size_t e = 0; e < d.size(); ++e) (*gi)[e] += d[e];
                }
              }
            }
          }
        } else {
          std::vector<const Tensor*> in_values(g.in.begin() + 1, g.in.end());
          std::vector<bool> wanted(n_inputs);
          std::size_t grad_len = 0;
          for (std::size_t i = 0; i < n_inputs; ++i) {
            wanted[i] = g.in_grad[1 + i] != nullptr;
            if (wanted[i]) grad_len += in_values[i]->size();
          }
          std::vector<double> accum(grad_len, 0.0);
          for (std::size_t j = query.size(); j-- > 0;) {
            add_block(j);
            const double t_hi = query[j];
            const double t_lo = j ? query[j - 1] : t0;
            if (t_hi == t_lo) continue;
            // Start from the forward solution at t_hi.
            Tensor packed = Tensor::zeros(1, 2 * block + grad_len);
            std::copy(g.out.data() + j * block, g.out.data() + (j + 1) * block, packed.data());
            std::copy(adj.data(), adj.data() + block, packed.data() + block);
            AugmentedDynamics aug(*dynp, Shape{rows, cols}, in_values, wanted, t_hi);
            OdeResult back = integrate(aug, packed, 0.0, t_hi - t_lo, cfg);
            std::copy(back.state.data() + block, back.state.data() + 2 * block, adj.data());
            for (std::size_t e = 0; e < grad_len; ++e) accum[e] += back.state[2 * block + e];
          }
          std::size_t offset = 0;
          for (std::size_t i = 0; i < n_inputs; ++i) {
            if (!wanted[i]) continue;
            Tensor* gi = g.in_grad[1 + i];
            for (std::size_t e = 0; e < gi->size(); ++e) (*gi)[e] += accum[offset + e];
            offset += gi->size();
          }
        }
        if (Tensor* gz = g.in_grad[0]) {
          for (std::size_t i = 0; i < block; ++i) (*gz)[i] += adj[i];
        }
      });
}

namespace {

GradientResult gradients(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const Tensor& dL_dzT,
                         const OdeConfig& cfg, InputValues inputs, GradMode mode) {
  if (dL_dzT.shape() != z0.shape()) throw ShapeError("cotangent shape must match the state");
  Tape tape;
  Var z = tape.leaf_ref(z0, true);
  std::vector<Var> ins;
  for (const Tensor* in : inputs) ins.push_back(tape.leaf_ref(*in, true));
  GradientResult result;
  const double times[1] = {t1};
  Var out = solve(tape, dyn, z, ins, t0, times, cfg, mode, &result.stats);
  tape.backward(out, dL_dzT);
  result.dz0 = tape.grad(z);
  for (Var v : ins) result.dinputs.push_back(tape.grad(v));
  return result;
}

}  // namespace

GradientResult adjoint_gradients(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const Tensor& dL_dzT,
                                 const OdeConfig& cfg, InputValues inputs) {
  return gradients(dyn, z0, t0, t1, dL_dzT, cfg, inputs, GradMode::adjoint);
}

GradientResult discrete_gradients(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const Tensor& dL_dzT,
                                  const OdeConfig& cfg, InputValues inputs) {
  return gradients(dyn, z0, t0, t1, dL_dzT, cfg, inputs, GradMode::discretize);
}

}  // namespace caspr::ode
