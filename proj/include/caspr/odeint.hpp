#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "caspr/tape.hpp"

namespace caspr::ode {

class SolverError : public Error {
 public:
  using Error::Error;
};

struct OdeConfig {
  double rtol = 1e-3;
  double atol = 1e-4;
  int max_steps = 10000;
  std::optional<double> initial_step;
  // Disables error control and takes steps of this size (last step clipped).
  std::optional<double> fixed_step;

  void validate() const;

  static OdeConfig latent() { return {}; }
  static OdeConfig cnf() {
    OdeConfig c;
    c.rtol = 1e-5;
    c.atol = 1e-5;
    return c;
  }
};

struct SolveStats {
  long accepted_steps = 0;
  long rejected_steps = 0;
  long nfe = 0;

  SolveStats& operator+=(const SolveStats& o) {
    accepted_steps += o.accepted_steps;
    rejected_steps += o.rejected_steps;
    nfe += o.nfe;
    return *this;
  }
};

/// Right-hand side of dz/dt = f(z, t; inputs). `inputs` are the
/// differentiable non-state arguments (conditioning codes, network
/// parameters), bound on the same tape as `state`.
class Dynamics {
 public:
  virtual ~Dynamics() = default;
  virtual Var evaluate(Tape& tape, Var state, double t, std::span<const Var> inputs) const = 0;
};

using InputValues = std::span<const Tensor* const>;

struct OdeResult {
  Tensor state;
  SolveStats stats;
};

struct DenseResult {
  std::vector<Tensor> states;
  SolveStats stats;
};

struct GradientResult {
  Tensor dz0;
  std::vector<Tensor> dinputs;
  SolveStats stats;
};

/// Dormand-Prince 5(4) with embedded error control. Returns z0 unchanged
/// when t1 == t0.
OdeResult integrate(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const OdeConfig& cfg,
                    InputValues inputs = {});

/// States at each of `times` (nondecreasing, >= t0) from one chained solve
/// that restarts at every requested time from the previously returned state.
DenseResult integrate_dense(const Dynamics& dyn, const Tensor& z0, std::span<const double> times, const OdeConfig& cfg,
                            InputValues inputs = {}, double t0 = 0.0);

enum class GradMode {
  // Backpropagate through the accepted RK steps (step sizes held fixed),
  // recomputing one step at a time.
  discretize,
  // Integrate the augmented adjoint system backward in time.
  adjoint,
};

/// Differentiable dense solve recorded as one tape node. The result stacks
/// the state at each requested time along rows: (times.size() * rows) x cols.
/// `dyn` must outlive the tape's backward pass; the shared_ptr overload keeps
/// it alive instead.
Var solve(Tape& tape, std::shared_ptr<const Dynamics> dyn, Var z0, std::span<const Var> inputs, double t0,
          std::span<const double> times, const OdeConfig& cfg, GradMode mode = GradMode::discretize,
          SolveStats* stats = nullptr);
Var solve(Tape& tape, const Dynamics& dyn, Var z0, std::span<const Var> inputs, double t0,
          std::span<const double> times, const OdeConfig& cfg, GradMode mode = GradMode::discretize,
          SolveStats* stats = nullptr);

/// dL/dz0 and dL/dinputs for L with cotangent dL_dzT at t1, via the adjoint
/// method.
GradientResult adjoint_gradients(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const Tensor& dL_dzT,
                                 const OdeConfig& cfg, InputValues inputs = {});

/// Same quantities by differentiating the discrete solver steps.
GradientResult discrete_gradients(const Dynamics& dyn, const Tensor& z0, double t0, double t1, const Tensor& dL_dzT,
                                  const OdeConfig& cfg, InputValues inputs = {});

}  // namespace caspr::ode
