#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "caspr/odeint.hpp"
#include "caspr/params.hpp"

namespace caspr::flow {

/// Velocity field g(y, t | z) over 3-D points y (n x 3), flow time t (1 x 1)
/// and a context row z (1 x C).
class FlowField {
 public:
  struct Eval {
    Var velocity;
    // J * tangent for each requested tangent (each n x 3), J = dg/dy.
    std::vector<Var> jvps;
  };

  virtual ~FlowField() = default;
  virtual Eval evaluate(Var y, Var t, Var ctx, std::span<const Var> params, std::span<const Var> tangents) const = 0;
  // Parameter names in the order `evaluate` expects them.
  virtual std::vector<std::string> param_names() const { return {}; }
};

struct FlowConfig {
  std::size_t hidden = 64;
  std::size_t hidden_layers = 3;
  std::size_t context_dim = 128;
  std::string prefix = "cnf.";
};

/// (h W + b) * sigmoid([t, z] Wg + bg) + [t, z] Wc
Var gated_layer(Var h, Var tz, Var w, Var b, Var wg, Var bg, Var wc);

/// Stack of gated layers with softplus between them: 3 -> hidden x L -> 3.
class ConcatSquashField final : public FlowField {
 public:
  explicit ConcatSquashField(FlowConfig cfg);

  Eval evaluate(Var y, Var t, Var ctx, std::span<const Var> params, std::span<const Var> tangents) const override;
  std::vector<std::string> param_names() const override;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; the last layer's W, b and
  // Wc are zero so the untrained flow is the identity map. Also adds the flow
  // time parameter.
  void init_params(ParamSet& params, std::mt19937_64& rng) const;
  std::string time_param() const { return cfg_.prefix + "sqrt_T"; }
  const FlowConfig& config() const noexcept { return cfg_; }

 private:
  FlowConfig cfg_;
  std::vector<std::size_t> dims_;
};

enum class Divergence { exact, hutchinson };

struct FlowOptions {
  ode::OdeConfig ode = ode::OdeConfig::cnf();
  ode::GradMode grad_mode = ode::GradMode::discretize;
  Divergence divergence = Divergence::exact;
  std::uint64_t hutchinson_seed = 0;
};

/// A field together with how to find its parameters and flow time in a
/// ParamSet. The flow time is T = sqrt_T^2; when `time_param` is empty the
/// fixed `end_time` is used instead.
struct FlowModel {
  std::shared_ptr<const FlowField> field;
  std::string time_param;
  double end_time = 1.0;

  static FlowModel concat_squash(const FlowConfig& cfg);
};

/// Field, flow time and parameters bound on one tape.
struct FlowBinding {
  const FlowField* field = nullptr;
  Var end_time;
  std::vector<Var> params;
};

FlowBinding bind(Tape& tape, const FlowModel& model, const BoundParams& params);
FlowBinding bind(Tape& tape, const FlowModel& model, const ParamSet& params);

/// Per-point divergence tr(dg/dy) as n x 1. The Hutchinson estimator uses the
/// given probe (n x 3); exact mode ignores it.
Var divergence(const FlowField& field, Var y, Var t, Var ctx, std::span<const Var> params,
               Divergence mode = Divergence::exact, const Tensor* probe = nullptr);

/// Pushes noise (n x 3) through the flow: y(T) for dy/dt = g(y, t | z).
Var sample_on_tape(Tape& tape, const FlowBinding& flow, Var noise, Var ctx, const FlowOptions& opts = {},
                   ode::SolveStats* stats = nullptr);

/// Inverse flow from x back to t = 0 with the accumulated divergence:
/// returns n x 4 rows (y0, integral of the divergence over [0, T]).
Var inverse_on_tape(Tape& tape, const FlowBinding& flow, Var x, Var ctx, const FlowOptions& opts = {},
                    ode::SolveStats* stats = nullptr);

/// log p(x | z) per point, n x 1.
Var logprob_on_tape(Tape& tape, const FlowBinding& flow, Var x, Var ctx, const FlowOptions& opts = {},
                    ode::SolveStats* stats = nullptr);

/// log N(y; 0, I) per row of y (n x 3).
Tensor standard_normal_logpdf(const Tensor& y);

Tensor gaussian_noise(std::size_t n, std::uint64_t seed);

struct Sample {
  Tensor points;
  Tensor noise;
};

Sample flow_sample(const FlowModel& model, const ParamSet& params, const Tensor& ctx, std::size_t n,
                   std::uint64_t seed, const FlowOptions& opts = {});
Tensor flow_from_noise(const FlowModel& model, const ParamSet& params, const Tensor& ctx, const Tensor& noise,
                       const FlowOptions& opts = {});
Tensor flow_logprob(const FlowModel& model, const ParamSet& params, const Tensor& x, const Tensor& ctx,
                    const FlowOptions& opts = {});
Tensor flow_inverse(const FlowModel& model, const ParamSet& params, const Tensor& x, const Tensor& ctx,
                    const FlowOptions& opts = {});

}  // namespace caspr::flow
