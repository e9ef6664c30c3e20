#include "caspr/flow.hpp"

#include <cmath>
#include <numbers>

#include "caspr/ops.hpp"

namespace caspr::flow {
namespace {

constexpr std::size_t kDim = 3;
constexpr std::size_t kPerLayer = 5;

Var time_context(Var t, Var ctx) {
  if (!ctx.valid() || ctx.cols() == 0) return t;
  return concat({t, ctx}, 1);
}

struct VelocityDivergence {
  Var velocity;
  Var divergence;
};

VelocityDivergence velocity_divergence(const FlowField& field, Var y, Var t, Var ctx, std::span<const Var> params,
                                       Divergence mode, const Tensor* probe) {
  Tape& tape = *y.tape;
  const std::size_t n = y.rows();
  std::vector<Var> tangents;
  if (mode == Divergence::exact) {
    for (std::size_t i = 0; i < kDim; ++i) {
      Tensor e = Tensor::zeros(n, kDim);
      for (std::size_t r = 0; r < n; ++r) e.at(r, i) = 1.0;
      tangents.push_back(tape.constant(std::move(e)));
    }
  } else {
    if (!probe || probe->shape() != y.shape()) throw ShapeError("hutchinson divergence needs an n x 3 probe");
    tangents.push_back(tape.leaf_ref(*probe));
  }
  FlowField::Eval ev = field.evaluate(y, t, ctx, params, tangents);
  Var div;
  if (mode == Divergence::exact) {
    for (std::size_t i = 0; i < kDim; ++i) {
      Var d = slice(ev.jvps[i], 1, i, i + 1);
      div = i == 0 ? d : add(div, d);
    }
  } else {
    div = sum_cols(mul(tangents[0], ev.jvps[0]));
  }
  return {ev.velocity, div};
}

// Flow time is reparameterized onto v in [0, 1]: t = v T.
class ForwardDynamics final : public ode::Dynamics {
 public:
  explicit ForwardDynamics(const FlowField& field) : field_(field) {}
  Var evaluate(Tape&, Var y, double v, std::span<const Var> in) const override {
    Var T = in[1];
    FlowField::Eval ev = field_.evaluate(y, scale(T, v), in[0], in.subspan(2), {});
    return mul(ev.velocity, T);
  }

 private:
  const FlowField& field_;
};

// State rows are (y, accumulated divergence); t = (1 - v) T.
class InverseDynamics final : public ode::Dynamics {
 public:
  InverseDynamics(const FlowField& field, Divergence mode, Tensor probe)
      : field_(field), mode_(mode), probe_(std::move(probe)) {}
  Var evaluate(Tape&, Var state, double v, std::span<const Var> in) const override {
    Var T = in[1];
    Var y = slice(state, 1, 0, kDim);
    auto vd = velocity_divergence(field_, y, scale(T, 1.0 - v), in[0], in.subspan(2), mode_, &probe_);
    return concat({neg(mul(vd.velocity, T)), mul(vd.divergence, T)}, 1);
  }

 private:
  const FlowField& field_;
  Divergence mode_;
  Tensor probe_;
};

std::vector<Var> solver_inputs(const FlowBinding& flow, Var ctx) {
  std::vector<Var> in = {ctx, flow.end_time};
  in.insert(in.end(), flow.params.begin(), flow.params.end());
  return in;
}

void check_points(Var x) {
  if (x.value().rank() != 2 || x.cols() != kDim) throw ShapeError("flow expects n x 3 points");
}

}  // namespace

Var gated_layer(Var h, Var tz, Var w, Var b, Var wg, Var bg, Var wc) {
  Var gate = sigmoid(affine(tz, wg, bg));
  return add(mul(affine(h, w, b), gate), matmul(tz, wc));
}

ConcatSquashField::ConcatSquashField(FlowConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.hidden == 0 || cfg_.hidden_layers == 0) throw Error("flow needs at least one nonempty hidden layer");
  dims_.push_back(kDim);
  for (std::size_t i = 0; i < cfg_.hidden_layers; ++i) dims_.push_back(cfg_.hidden);
  dims_.push_back(kDim);
}

std::vector<std::string> ConcatSquashField::param_names() const {
  std::vector<std::string> names;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const std::string p = cfg_.prefix + "l" + std::to_string(l) + ".";
    for (const char* s : {"W", "b", "Wg", "bg", "Wc"}) names.push_back(p + s);
  }
  return names;
}

void ConcatSquashField::init_params(ParamSet& params, std::mt19937_64& rng) const {
  const std::size_t tz = 1 + cfg_.context_dim;
  const std::size_t layers = dims_.size() - 1;
  auto uniform = [&](std::size_t r, std::size_t c, std::size_t fan_in) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = bound * u(rng);
    return t;
  };
  const auto names = param_names();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = dims_[l];
    const std::size_t out = dims_[l + 1];
    const bool last = l + 1 == layers;
    const std::string* n = &names[l * kPerLayer];
    params.add(n[0], last ? Tensor::zeros(in, out) : uniform(in, out, in));
    params.add(n[1], last ? Tensor::zeros(1, out) : uniform(1, out, in));
    params.add(n[2], uniform(tz, out, tz));
    params.add(n[3], Tensor::zeros(1, out));
    params.add(n[4], last ? Tensor::zeros(tz, out) : uniform(tz, out, tz));
  }
  params.add(time_param(), Tensor::scalar(1.0));
}

FlowField::Eval ConcatSquashField::evaluate(Var y, Var t, Var ctx, std::span<const Var> params,
                                            std::span<const Var> tangents) const {
  const std::size_t layers = dims_.size() - 1;
  if (params.size() != layers * kPerLayer) throw ShapeError("concat-squash field: wrong parameter count");
  if (ctx.valid() && ctx.cols() != cfg_.context_dim) {
    throw ShapeError("flow context has " + std::to_string(ctx.cols()) + " entries, expected " +
                     std::to_string(cfg_.context_dim));
  }
  Var tz = time_context(t, ctx);
  Var h = y;
  std::vector<Var> tan(tangents.begin(), tangents.end());
  Var pre;
  for (std::size_t l = 0; l < layers; ++l) {
    const Var* p = &params[l * kPerLayer];
    Var gate = sigmoid(affine(tz, p[2], p[3]));
    pre = add(mul(affine(h, p[0], p[1]), gate), matmul(tz, p[4]));
    for (Var& d : tan) d = mul(matmul(d, p[0]), gate);
    if (l + 1 < layers) {
      if (!tan.empty()) {
        Var slope = sigmoid(pre);
        for (Var& d : tan) d = mul(d, slope);
      }
      h = softplus(pre);
    }
  }
  return {pre, std::move(tan)};
}

FlowModel FlowModel::concat_squash(const FlowConfig& cfg) {
  auto field = std::make_shared<ConcatSquashField>(cfg);
  FlowModel m;
  m.time_param = field->time_param();
  m.field = std::move(field);
  return m;
}

FlowBinding bind(Tape& tape, const FlowModel& model, const BoundParams& params) {
  FlowBinding b;
  b.field = model.field.get();
  for (const auto& name : model.field->param_names()) b.params.push_back(params[name]);
  b.end_time = model.time_param.empty() ? tape.constant(Tensor::scalar(model.end_time))
                                        : square(params[model.time_param]);
  return b;
}

FlowBinding bind(Tape& tape, const FlowModel& model, const ParamSet& params) {
  FlowBinding b;
  b.field = model.field.get();
  for (const auto& name : model.field->param_names()) b.params.push_back(tape.leaf_ref(params.at(name)));
  b.end_time = model.time_param.empty() ? tape.constant(Tensor::scalar(model.end_time))
                                        : square(tape.leaf_ref(params.at(model.time_param)));
  return b;
}

Var divergence(const FlowField& field, Var y, Var t, Var ctx, std::span<const Var> params, Divergence mode,
               const Tensor* probe) {
  check_points(y);
  return velocity_divergence(field, y, t, ctx, params, mode, probe).divergence;
}

Var sample_on_tape(Tape& tape, const FlowBinding& flow, Var noise, Var ctx, const FlowOptions& opts,
                   ode::SolveStats* stats) {
  check_points(noise);
  auto dyn = std::make_shared<ForwardDynamics>(*flow.field);
  const auto in = solver_inputs(flow, ctx);
  const double end[] = {1.0};
  return ode::solve(tape, dyn, noise, in, 0.0, end, opts.ode, opts.grad_mode, stats);
}

Var inverse_on_tape(Tape& tape, const FlowBinding& flow, Var x, Var ctx, const FlowOptions& opts,
                    ode::SolveStats* stats) {
  check_points(x);
  Tensor probe;
  if (opts.divergence == Divergence::hutchinson) {
    std::mt19937_64 rng(opts.hutchinson_seed);
    probe = Tensor::zeros(x.rows(), kDim);
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = (rng() & 1u) ? 1.0 : -1.0;
  }
  auto dyn = std::make_shared<InverseDynamics>(*flow.field, opts.divergence, std::move(probe));
  Var state = concat({x, tape.constant(Tensor::zeros(x.rows(), 1))}, 1);
  const auto in = solver_inputs(flow, ctx);
  const double end[] = {1.0};
  return ode::solve(tape, dyn, state, in, 0.0, end, opts.ode, opts.grad_mode, stats);
}

Var logprob_on_tape(Tape& tape, const FlowBinding& flow, Var x, Var ctx, const FlowOptions& opts,
                    ode::SolveStats* stats) {
  Var out = inverse_on_tape(tape, flow, x, ctx, opts, stats);
  Var y0 = slice(out, 1, 0, kDim);
  Var accumulated = slice(out, 1, kDim, kDim + 1);
  const double norm = -0.5 * static_cast<double>(kDim) * std::log(2.0 * std::numbers::pi);
  return sub(shift(scale(sum_cols(square(y0)), -0.5), norm), accumulated);
}

Tensor standard_normal_logpdf(const Tensor& y) {
  const double norm = -0.5 * static_cast<double>(kDim) * std::log(2.0 * std::numbers::pi);
  Tensor out = Tensor::zeros(y.rows(), 1);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < y.cols(); ++c) sq += y.at(r, c) * y.at(r, c);
    out[r] = norm - 0.5 * sq;
  }
  return out;
}

Tensor gaussian_noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Tensor out = Tensor::zeros(n, kDim);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = normal(rng);
  return out;
}

Tensor flow_from_noise(const FlowModel& model, const ParamSet& params, const Tensor& ctx, const Tensor& noise,
                       const FlowOptions& opts) {
  if (noise.rows() == 0) return Tensor::zeros(0, kDim);
  Tape tape(false);
  FlowBinding b = bind(tape, model, params);
  return sample_on_tape(tape, b, tape.leaf_ref(noise), tape.leaf_ref(ctx), opts).value();
}

Sample flow_sample(const FlowModel& model, const ParamSet& params, const Tensor& ctx, std::size_t n,
                   std::uint64_t seed, const FlowOptions& opts) {
  Sample s;
  s.noise = gaussian_noise(n, seed);
  s.points = flow_from_noise(model, params, ctx, s.noise, opts);
  return s;
}

Tensor flow_inverse(const FlowModel& model, const ParamSet& params, const Tensor& x, const Tensor& ctx,
                    const FlowOptions& opts) {
  if (x.rows() == 0) return Tensor::zeros(0, kDim + 1);
  Tape tape(false);
  FlowBinding b = bind(tape, model, params);
  return inverse_on_tape(tape, b, tape.leaf_ref(x), tape.leaf_ref(ctx), opts).value();
}

Tensor flow_logprob(const FlowModel& model, const ParamSet& params, const Tensor& x, const Tensor& ctx,
                    const FlowOptions& opts) {
  if (x.rows() == 0) return Tensor::zeros(0, 1);
  Tape tape(false);
  FlowBinding b = bind(tape, model, params);
  return logprob_on_tape(tape, b, tape.leaf_ref(x), tape.leaf_ref(ctx), opts).value();
}

}  // namespace caspr::flow
