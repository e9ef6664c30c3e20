#include <cmath>
#include <numbers>

#include "caspr/flow.hpp"
#include "caspr/ops.hpp"
#include "doctest.h"
#include "flow_fields.hpp"
#include "test_support.hpp"

using namespace caspr;
using namespace caspr::flow;
using caspr::testing::affine_model;
using caspr::testing::diag3;
using caspr::testing::random_tensor;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// A small field whose last layer is randomized so it is not the identity.
struct RandomFlow {
  FlowModel model;
  ParamSet params;
  Tensor ctx;
};

RandomFlow random_flow(std::uint64_t seed, std::size_t hidden, std::size_t ctx_dim, double last_scale = 0.5) {
  FlowConfig cfg;
  cfg.hidden = hidden;
  cfg.hidden_layers = 2;
  cfg.context_dim = ctx_dim;
  RandomFlow f{FlowModel::concat_squash(cfg), {}, {}};
  std::mt19937_64 rng(seed);
  static_cast<const ConcatSquashField&>(*f.model.field).init_params(f.params, rng);
  for (const char* name : {"cnf.l2.W", "cnf.l2.b", "cnf.l2.Wc"}) {
    Tensor& t = f.params.at(name);
    t = random_tensor(t.rows(), t.cols(), rng, -last_scale, last_scale);
  }
  f.ctx = random_tensor(1, ctx_dim, rng, -1, 1);
  return f;
}

}  // namespace

TEST_CASE("gated layer examples") {
  Tape tape;
  std::mt19937_64 rng(1);
  Var h = tape.leaf(random_tensor(4, 3, rng));
  Var tz = tape.leaf(random_tensor(1, 5, rng));
  Var zero_w = tape.leaf(Tensor::zeros(3, 6));
  Var zero_b = tape.leaf(Tensor::zeros(1, 6));
  Var zero_g = tape.leaf(Tensor::zeros(5, 6));
  Var out = gated_layer(h, tz, zero_w, zero_b, zero_g, zero_b, zero_g);
  CHECK(out.value() == Tensor::zeros(4, 6));

  Var w = tape.leaf(random_tensor(3, 6, rng));
  Var b = tape.leaf(random_tensor(1, 6, rng));
  Var wc = tape.leaf(random_tensor(5, 6, rng));
  Var gated = gated_layer(h, tz, w, b, zero_g, zero_b, wc);
  Var expected = add(scale(affine(h, w, b), 0.5), matmul(tz, wc));
  CHECK(caspr::testing::max_abs_diff(gated.value(), expected.value()) < 1e-15);
}

TEST_CASE("gated layer gradients") {
  std::mt19937_64 rng(2);
  ParamSet p;
  p.add("h", random_tensor(4, 3, rng));
  p.add("tz", random_tensor(1, 5, rng));
  p.add("w", random_tensor(3, 6, rng));
  p.add("b", random_tensor(1, 6, rng));
  p.add("wg", random_tensor(5, 6, rng));
  p.add("bg", random_tensor(1, 6, rng));
  p.add("wc", random_tensor(5, 6, rng));
  auto fn = [](Tape&, const BoundParams& v) {
    return reduce_sum(square(gated_layer(v["h"], v["tz"], v["w"], v["b"], v["wg"], v["bg"], v["wc"])));
  };
  CHECK(grad_check(fn, p).max_relative_error < 1e-5);
}

TEST_CASE("divergence of analytic fields") {
  Tape tape;
  std::mt19937_64 rng(3);
  Var y = tape.leaf(random_tensor(5, 3, rng));
  Var t = tape.constant(Tensor::scalar(0.2));
  Var ctx;
  caspr::testing::AffineField diag(diag3(1, 2, 3), Tensor::row({0, 0, 0}));
  Tensor div = divergence(diag, y, t, ctx, {}).value();
  for (std::size_t i = 0; i < 5; ++i) CHECK(div[i] == 6.0);

  caspr::testing::AffineField constant(Tensor::zeros(3, 3), Tensor::row({1, -2, 0.5}));
  Tensor zero = divergence(constant, y, t, ctx, {}).value();
  for (std::size_t i = 0; i < 5; ++i) CHECK(zero[i] == 0.0);

  Tensor probe = Tensor::matrix(5, 3, {1, -1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1});
  Tensor hutch = divergence(diag, y, t, ctx, {}, Divergence::hutchinson, &probe).value();
  for (std::size_t i = 0; i < 5; ++i) CHECK(hutch[i] == 6.0);
}

TEST_CASE("exact divergence matches a finite-difference Jacobian") {
  RandomFlow f = random_flow(4, 16, 5);
  std::mt19937_64 rng(5);
  Tensor y = random_tensor(6, 3, rng);
  const double tval = 0.37;
  auto velocity = [&](const Tensor& pts) {
    Tape tape(false);
    FlowBinding b = bind(tape, f.model, f.params);
    return b.field->evaluate(tape.leaf_ref(pts), tape.constant(Tensor::scalar(tval)), tape.leaf_ref(f.ctx), b.params, {})
        .velocity.value();
  };
  Tape tape(false);
  FlowBinding b = bind(tape, f.model, f.params);
  Tensor div = divergence(*b.field, tape.leaf_ref(y), tape.constant(Tensor::scalar(tval)), tape.leaf_ref(f.ctx),
                          b.params)
                   .value();
  const double h = 1e-6;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double trace = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      Tensor up = y, down = y;
      up.at(r, i) += h;
      down.at(r, i) -= h;
      trace += (velocity(up).at(r, i) - velocity(down).at(r, i)) / (2 * h);
    }
    CHECK(std::abs(trace - div[r]) < 1e-5);
  }
}

TEST_CASE("identity flow at initialization") {
  FlowConfig cfg;
  cfg.hidden = 8;
  cfg.context_dim = 4;
  FlowModel model = FlowModel::concat_squash(cfg);
  ParamSet params;
  std::mt19937_64 rng(6);
  static_cast<const ConcatSquashField&>(*model.field).init_params(params, rng);
  CHECK(params.at("cnf.sqrt_T").item() == 1.0);
  Tensor ctx = random_tensor(1, 4, rng);
  Sample s = flow_sample(model, params, ctx, 32, 9);
  CHECK(s.points == s.noise);
  Tensor x = random_tensor(10, 3, rng);
  Tensor lp = flow_logprob(model, params, x, ctx);
  Tensor ref = standard_normal_logpdf(x);
  CHECK(caspr::testing::max_abs_diff(lp, ref) < 1e-9);
}

TEST_CASE("log-density examples") {
  FlowModel zero = affine_model(Tensor::zeros(3, 3), Tensor::row({0, 0, 0}), 1.0);
  ParamSet none;
  Tensor origin = Tensor::zeros(1, 3);
  CHECK(std::abs(flow_logprob(zero, none, origin, Tensor::zeros(1, 0)).item() - (-1.5 * kLog2Pi)) < 1e-6);
  CHECK(std::abs(-1.5 * kLog2Pi - (-2.756815)) < 1e-6);

  FlowModel expand = affine_model(diag3(1, 1, 1), Tensor::row({0, 0, 0}), std::log(2.0));
  const double lp = flow_logprob(expand, none, origin, Tensor::zeros(1, 0)).item();
  CHECK(std::abs(lp - (-1.5 * kLog2Pi - 3 * std::log(2.0))) < 1e-4);

  // Off-origin points against the N(0, 4I) density.
  Tensor x = Tensor::matrix(2, 3, {1.0, -0.5, 2.0, 0.3, 0.1, -1.2});
  Tensor got = flow_logprob(expand, none, x, Tensor::zeros(1, 0));
  for (std::size_t r = 0; r < 2; ++r) {
    double sq = 0;
    for (std::size_t c = 0; c < 3; ++c) sq += x.at(r, c) * x.at(r, c);
    const double want = -1.5 * std::log(2 * std::numbers::pi * 4.0) - sq / 8.0;
    CHECK(std::abs(got[r] - want) < 1e-4);
  }
}

TEST_CASE("sampling examples") {
  ParamSet none;
  FlowModel zero = affine_model(Tensor::zeros(3, 3), Tensor::row({0, 0, 0}), 1.0);
  Sample s = flow_sample(zero, none, Tensor::zeros(1, 0), 20, 3);
  CHECK(s.points == s.noise);

  FlowModel shift = affine_model(Tensor::zeros(3, 3), Tensor::row({0.5, -1, 2}), 1.0);
  Sample moved = flow_sample(shift, none, Tensor::zeros(1, 0), 20, 3);
  for (std::size_t r = 0; r < 20; ++r) {
    CHECK(std::abs(moved.points.at(r, 0) - moved.noise.at(r, 0) - 0.5) < 1e-9);
    CHECK(std::abs(moved.points.at(r, 1) - moved.noise.at(r, 1) + 1.0) < 1e-9);
    CHECK(std::abs(moved.points.at(r, 2) - moved.noise.at(r, 2) - 2.0) < 1e-9);
  }

  RandomFlow f = random_flow(7, 16, 6);
  Sample a = flow_sample(f.model, f.params, f.ctx, 50, 123);
  Sample b = flow_sample(f.model, f.params, f.ctx, 50, 123);
  CHECK(a.points == b.points);
  CHECK(a.noise == b.noise);
  CHECK(flow_sample(f.model, f.params, f.ctx, 0, 1).points.rows() == 0);
}

TEST_CASE("sample then inverse recovers the noise") {
  RandomFlow f = random_flow(8, 16, 6);
  Sample s = flow_sample(f.model, f.params, f.ctx, 64, 77);
  CHECK(caspr::testing::max_abs_diff(s.points, s.noise) > 1e-2);
  Tensor inv = flow_inverse(f.model, f.params, s.points, f.ctx);
  double worst = 0;
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 3; ++c) worst = std::max(worst, std::abs(inv.at(r, c) - s.noise.at(r, c)));
  CHECK(worst < 1e-4);
}

TEST_CASE("coarse grid mass of a random flow") {
  RandomFlow f = random_flow(9, 8, 3, 0.3);
  const std::size_t m = 24;
  const double lo = -6.0, hi = 6.0;
  const double step = (hi - lo) / static_cast<double>(m);
  Tensor grid = Tensor::zeros(m * m * m, 3);
  std::size_t k = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t l = 0; l < m; ++l, ++k) {
        grid.at(k, 0) = lo + (i + 0.5) * step;
        grid.at(k, 1) = lo + (j + 0.5) * step;
        grid.at(k, 2) = lo + (l + 0.5) * step;
      }
  FlowOptions opts;
  opts.ode.rtol = opts.ode.atol = 1e-6;
  Tensor lp = flow_logprob(f.model, f.params, grid, f.ctx, opts);
  double mass = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) mass += std::exp(lp[i]);
  mass *= step * step * step;
  CHECK(mass > 0.95);
  CHECK(mass < 1.05);
}

TEST_CASE("log-likelihood gradients through the solver") {
  RandomFlow f = random_flow(10, 6, 3, 0.3);
  f.params.add("ctx", f.ctx);
  std::mt19937_64 rng(11);
  Tensor x = random_tensor(4, 3, rng, -1, 1);
  FlowOptions opts;
  opts.ode.fixed_step = 0.25;
  auto fn = [&](Tape& tape, const BoundParams& b) {
    FlowBinding fb = bind(tape, f.model, b);
    return reduce_sum(logprob_on_tape(tape, fb, tape.leaf_ref(x), b["ctx"], opts));
  };
  CHECK(grad_check(fn, f.params).max_relative_error < 1e-5);
}

TEST_CASE("context changes the density") {
  RandomFlow f = random_flow(12, 16, 4);
  std::mt19937_64 rng(13);
  Tensor x = random_tensor(16, 3, rng, -1, 1);
  Tensor other = random_tensor(1, 4, rng, -1, 1);
  Tensor a = flow_logprob(f.model, f.params, x, f.ctx);
  Tensor b = flow_logprob(f.model, f.params, x, other);
  CHECK(caspr::testing::max_abs_diff(a, b) > 1e-6);
}
