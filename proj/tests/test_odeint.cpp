#include <cmath>

#include "caspr/odeint.hpp"
#include "caspr/ops.hpp"
#include "caspr/params.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace caspr;
using namespace caspr::ode;
using caspr::testing::random_tensor;

namespace {

// dz/dt = a * z with a taken from inputs[0] (1x1), or `rate` when absent.
struct Linear : Dynamics {
  double rate = -1.0;
  Var evaluate(Tape& tape, Var z, double, std::span<const Var> in) const override {
    if (!in.empty()) return mul(z, in[0]);
    return scale(z, rate);
  }
};

struct Zero : Dynamics {
  Var evaluate(Tape& tape, Var z, double, std::span<const Var>) const override {
    return tape.constant(Tensor(z.shape(), 0.0));
  }
};

struct TimeField : Dynamics {
  Var evaluate(Tape& tape, Var z, double t, std::span<const Var>) const override {
    return tape.constant(Tensor(z.shape(), t));
  }
};

// tanh MLP with weights passed as inputs (w1, b1, w2); sign flips the field.
struct Mlp : Dynamics {
  double sign = 1.0;
  Var evaluate(Tape&, Var z, double t, std::span<const Var> in) const override {
    Var h = tanh(affine(z, in[0], in[1]));
    return scale(matmul(h, in[2]), sign * (1.0 + 0.3 * std::sin(t)));
  }
};

struct MlpParams {
  Tensor w1, b1, w2;
  std::vector<const Tensor*> values() const { return {&w1, &b1, &w2}; }
};

MlpParams random_mlp(std::mt19937_64& rng, std::size_t dim, std::size_t hidden) {
  return {random_tensor(dim, hidden, rng, -1, 1), random_tensor(1, hidden, rng, -1, 1),
          random_tensor(hidden, dim, rng, -1, 1)};
}

}  // namespace

TEST_CASE("integrate analytic examples") {
  Linear decay;
  auto r = integrate(decay, Tensor::scalar(1.0), 0.0, 1.0, OdeConfig{});
  CHECK(std::abs(r.state.item() - std::exp(-1.0)) < 1e-4);
  CHECK(r.stats.nfe >= r.stats.accepted_steps);

  Zero zero;
  Tensor z0 = Tensor::row({0.3, -1.7, 2.5});
  CHECK(integrate(zero, z0, 0.0, 7.0, OdeConfig{}).state == z0);

  TimeField tf;
  CHECK(std::abs(integrate(tf, Tensor::scalar(0.0), 0.0, 2.0, OdeConfig{}).state.item() - 2.0) < 1e-6);
}

TEST_CASE("equal endpoints are the identity") {
  Linear decay;
  Tensor z0 = Tensor::row({1.0 / 3.0, -2.0});
  auto r = integrate(decay, z0, 0.4, 0.4, OdeConfig{});
  CHECK(r.state == z0);
  CHECK(r.stats.nfe == 0);
}

TEST_CASE("invalid requests") {
  Linear decay;
  CHECK_THROWS_AS(integrate(decay, Tensor::scalar(1.0), 1.0, 0.0, OdeConfig{}), SolverError);
  OdeConfig bad;
  bad.rtol = 0.0;
  CHECK_THROWS_AS(integrate(decay, Tensor::scalar(1.0), 0.0, 1.0, bad), SolverError);
  OdeConfig few;
  few.max_steps = 2;
  few.rtol = few.atol = 1e-10;
  CHECK_THROWS_AS(integrate(decay, Tensor::scalar(1.0), 0.0, 10.0, few), SolverError);
  CHECK_THROWS_AS(integrate(decay, Tensor::scalar(std::nan("")), 0.0, 1.0, OdeConfig{}), SolverError);

  struct Blowup : Dynamics {
    Var evaluate(Tape&, Var z, double, std::span<const Var>) const override { return exp(scale(z, 1e3)); }
  } blowup;
  CHECK_THROWS_AS(integrate(blowup, Tensor::scalar(1.0), 0.0, 1.0, OdeConfig{}), SolverError);
}

TEST_CASE("dense output") {
  Linear decay;
  const std::vector<double> times = {0.0, 0.5, 1.0};
  auto r = integrate_dense(decay, Tensor::scalar(1.0), times, OdeConfig{});
  REQUIRE(r.states.size() == 3);
  CHECK(r.states[0].item() == 1.0);
  CHECK(std::abs(r.states[1].item() - std::exp(-0.5)) < 1e-4);
  CHECK(std::abs(r.states[2].item() - std::exp(-1.0)) < 1e-4);

  const std::vector<double> one = {0.3};
  auto d = integrate_dense(decay, Tensor::scalar(1.0), one, OdeConfig{});
  auto s = integrate(decay, Tensor::scalar(1.0), 0.0, 0.3, OdeConfig{});
  CHECK(std::abs(d.states[0].item() - s.state.item()) < 1e-4);

  Tensor z0 = Tensor::row({0.25, 4.0});
  const std::vector<double> zero = {0.0};
  CHECK(integrate_dense(decay, z0, zero, OdeConfig{}).states[0] == z0);

  const std::vector<double> unsorted = {0.5, 0.2};
  CHECK_THROWS_AS(integrate_dense(decay, z0, unsorted, OdeConfig{}), SolverError);
}

TEST_CASE("chained solve agrees with independent solves") {
  std::mt19937_64 rng(21);
  MlpParams p = random_mlp(rng, 4, 16);
  auto in = p.values();
  Mlp f;
  Tensor z0 = random_tensor(1, 4, rng);
  const std::vector<double> times = {0.25, 0.5, 1.0};
  auto dense = integrate_dense(f, z0, times, OdeConfig{}, in);
  for (std::size_t i = 0; i < times.size(); ++i) {
    auto single = integrate(f, z0, 0.0, times[i], OdeConfig{}, in);
    for (std::size_t k = 0; k < z0.size(); ++k) {
      CHECK(std::abs(dense.states[i][k] - single.state[k]) <= 1e-3 * std::max(1.0, std::abs(single.state[k])));
    }
  }
}

TEST_CASE("fixed-step convergence order is five") {
  Linear decay;
  auto error = [&](double h) {
    OdeConfig cfg;
    cfg.fixed_step = h;
    return std::abs(integrate(decay, Tensor::scalar(1.0), 0.0, 1.0, cfg).state.item() - std::exp(-1.0));
  };
  const double order = std::log2(error(0.25) / error(0.125));
  CHECK(order >= 4.5);
  CHECK(order <= 5.5);
}

TEST_CASE("round trip through the negated field") {
  std::mt19937_64 rng(8);
  MlpParams p = random_mlp(rng, 3, 12);
  auto in = p.values();
  Mlp forward_field;
  Mlp backward_field;
  backward_field.sign = -1.0;
  // Time-dependent field: reverse time by integrating g(y, T - s).
  struct Reversed : Dynamics {
    const Mlp* base;
    double end;
    Var evaluate(Tape& tape, Var z, double s, std::span<const Var> in) const override {
      return base->evaluate(tape, z, end - s, in);
    }
  } rev;
  rev.base = &backward_field;
  rev.end = 1.0;
  Tensor z0 = random_tensor(4, 3, rng);
  for (double rtol : {1e-3, 1e-5}) {
    OdeConfig cfg;
    cfg.rtol = rtol;
    cfg.atol = rtol / 10;
    auto fwd = integrate(forward_field, z0, 0.0, 1.0, cfg, in);
    auto back = integrate(rev, fwd.state, 0.0, 1.0, cfg, in);
    CHECK(caspr::testing::max_abs_diff(back.state, z0) < 10 * cfg.rtol);
  }
}

TEST_CASE("nfe is monotone in accuracy") {
  std::mt19937_64 rng(13);
  MlpParams p = random_mlp(rng, 3, 12);
  auto in = p.values();
  Mlp f;
  Tensor z0 = random_tensor(8, 3, rng);
  long previous = 0;
  for (double rtol : {1e-2, 1e-3, 1e-4, 1e-5, 1e-6}) {
    OdeConfig cfg;
    cfg.rtol = rtol;
    const long nfe = integrate(f, z0, 0.0, 2.0, cfg, in).stats.nfe;
    CHECK(nfe >= previous);
    previous = nfe;
  }
}

TEST_CASE("adjoint gradient of exponential growth") {
  Linear lin;
  Tensor a = Tensor::scalar(0.0);
  const Tensor* in[] = {&a};
  auto g = adjoint_gradients(lin, Tensor::scalar(1.0), 0.0, 1.0, Tensor::scalar(1.0), OdeConfig{}, in);
  CHECK(std::abs(g.dinputs[0].item() - 1.0) < 1e-4);
  CHECK(std::abs(g.dz0.item() - 1.0) < 1e-4);

  auto zero = adjoint_gradients(lin, Tensor::scalar(1.0), 0.0, 1.0, Tensor::scalar(0.0), OdeConfig{}, in);
  CHECK(zero.dz0.item() == 0.0);
  CHECK(zero.dinputs[0].item() == 0.0);

  auto disc = discrete_gradients(lin, Tensor::scalar(1.0), 0.0, 1.0, Tensor::scalar(1.0), OdeConfig{}, in);
  CHECK(std::abs(disc.dinputs[0].item() - 1.0) < 1e-4);
}

TEST_CASE("adjoint matches backprop through the solver") {
  std::mt19937_64 rng(17);
  MlpParams p = random_mlp(rng, 3, 10);
  auto in = p.values();
  Mlp f;
  Tensor z0 = random_tensor(5, 3, rng);
  Tensor cot = random_tensor(5, 3, rng);
  OdeConfig cfg;
  cfg.rtol = cfg.atol = 1e-8;
  auto adj = adjoint_gradients(f, z0, 0.0, 1.0, cot, cfg, in);
  auto disc = discrete_gradients(f, z0, 0.0, 1.0, cot, cfg, in);
  auto rel = [](const Tensor& a, const Tensor& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num = std::max(num, std::abs(a[i] - b[i]));
      den = std::max(den, std::abs(b[i]));
    }
    return num / den;
  };
  CHECK(rel(adj.dz0, disc.dz0) < 1e-4);
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(rel(adj.dinputs[i], disc.dinputs[i]) < 1e-4);
}

TEST_CASE("on-tape dense solve matches central differences") {
  std::mt19937_64 rng(4);
  ParamSet params;
  params.add("z0", random_tensor(3, 2, rng));
  params.add("w1", random_tensor(2, 6, rng, -1, 1));
  params.add("b1", random_tensor(1, 6, rng, -1, 1));
  params.add("w2", random_tensor(6, 2, rng, -1, 1));
  Mlp f;
  OdeConfig cfg;
  cfg.fixed_step = 0.1;
  const std::vector<double> times = {0.0, 0.35, 0.8};
  for (GradMode mode : {GradMode::discretize, GradMode::adjoint}) {
    OdeConfig c = cfg;
    if (mode == GradMode::adjoint) c = OdeConfig{1e-9, 1e-9};
    auto fn = [&](Tape&, const BoundParams& b) {
      const Var in[] = {b["w1"], b["b1"], b["w2"]};
      Var out = solve(b.tape(), f, b["z0"], in, 0.0, times, c, mode);
      return reduce_sum(square(out));
    };
    if (mode == GradMode::discretize) {
      CHECK(grad_check(fn, params).max_relative_error < 1e-5);
    } else {
      CHECK(grad_check(fn, params, {1e-5, 1e-4}).max_relative_error < 1e-4);
    }
  }
}
