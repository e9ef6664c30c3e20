#include "acceptance_checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "caspr/ops.hpp"
#include "caspr/pipeline.hpp"

namespace caspr::accept {
namespace {

namespace fs = std::filesystem;
using clock = std::chrono::steady_clock;

// Desk-scale experiment constants.
constexpr std::size_t kDeskEpochs = 20;
constexpr std::size_t kDeskDataPoints = 2048;
constexpr std::size_t kEvalPoints = 1024;
constexpr std::size_t kCorrespondencePoints = 256;
constexpr double kTrainBudgetSeconds = 2.0 * 3600.0;

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

// Collects named measurements against thresholds.
class Checklist {
 public:
  void below(const std::string& what, double value, double limit) {
    add(what + " " + num(value) + " < " + num(limit), value < limit);
  }
  void at_most(const std::string& what, double value, double limit) {
    add(what + " " + num(value) + " <= " + num(limit), value <= limit);
  }
  void at_least(const std::string& what, double value, double limit) {
    add(what + " " + num(value) + " >= " + num(limit), value >= limit);
  }
  void within(const std::string& what, double value, double lo, double hi) {
    add(what + " " + num(value) + " in [" + num(lo) + ", " + num(hi) + "]", value >= lo && value <= hi);
  }
  void above(const std::string& what, double value, double limit) {
    add(what + ": " + num(value) + " > " + num(limit), value > limit);
  }
  void that(const std::string& what, bool ok) { add(what, ok); }

  bool pass() const { return failed_.empty(); }
  std::string detail() const {
    std::string s;
    for (const auto& f : failed_) s += (s.empty() ? "FAILED " : "; ") + f;
    for (const auto& p : passed_) s += (s.empty() ? "" : "; ") + p;
    return s;
  }

 private:
  void add(const std::string& text, bool ok) { (ok ? passed_ : failed_).push_back(text); }
  std::vector<std::string> passed_, failed_;
};

// ---------------------------------------------------------------- 1: autodiff

Var weighted_sum(Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(v.rows(), v.cols(), rng, 0.5, 1.5);
  return reduce_sum(mul(v, v.tape->constant(std::move(w))));
}

void autodiff(Checklist& c) {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  std::string worst_op;
  auto op_check = [&](const char* name, ParamSet p, const std::function<Var(const BoundParams&)>& op) {
    auto fn = [&](Tape&, const BoundParams& b) { return weighted_sum(op(b), 99); };
    const double e = grad_check(fn, p).max_relative_error;
    if (e >= worst) {
      worst = e;
      worst_op = name;
    }
  };
  auto two = [&](std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
    ParamSet p;
    p.add("a", random_tensor(r1, c1, rng));
    p.add("b", random_tensor(r2, c2, rng));
    return p;
  };
  op_check("add", two(3, 4, 3, 4), [](const BoundParams& b) { return add(b["a"], b["b"]); });
  op_check("sub", two(3, 4, 1, 4), [](const BoundParams& b) { return sub(b["b"], b["a"]); });
  op_check("mul", two(3, 4, 3, 4), [](const BoundParams& b) { return mul(b["a"], b["b"]); });
  op_check("mul_row", two(3, 4, 1, 4), [](const BoundParams& b) { return mul(b["a"], b["b"]); });
  op_check("mul_scalar", two(3, 4, 1, 1), [](const BoundParams& b) { return mul(b["b"], b["a"]); });
  op_check("matmul", two(3, 4, 4, 5), [](const BoundParams& b) { return matmul(b["a"], b["b"]); });
  op_check("concat_rows", two(3, 4, 2, 4), [](const BoundParams& b) { return concat({b["a"], b["b"]}, 0); });
  op_check("concat_cols", two(3, 4, 3, 2), [](const BoundParams& b) { return concat({b["a"], b["b"]}, 1); });
  op_check("slice", two(3, 4, 1, 1), [](const BoundParams& b) { return slice(b["a"], 1, 1, 3); });
  const std::pair<const char*, std::function<Var(Var)>> unary_ops[] = {
      {"relu", [](Var x) { return relu(x); }},
      {"tanh", [](Var x) { return tanh(x); }},
      {"sigmoid", [](Var x) { return sigmoid(x); }},
      {"softplus", [](Var x) { return softplus(x); }},
      {"abs", [](Var x) { return abs(x); }},
      {"square", [](Var x) { return square(x); }},
      {"exp", [](Var x) { return exp(x); }},
      {"scale_shift", [](Var x) { return scale(shift(x, 0.3), -1.7); }},
      {"neg", [](Var x) { return neg(x); }},
      {"max_over_points", [](Var x) { return reduce_max_over_points(x); }},
      {"mean", [](Var x) { return reduce_mean(x); }},
      {"sum", [](Var x) { return reduce_sum(x); }},
      {"mean_rows", [](Var x) { return mean_rows(x); }},
      {"sum_cols", [](Var x) { return sum_cols(x); }},
      {"segment_max", [](Var x) { return segment_max(x, 2); }},
  };
  for (const auto& [name, f] : unary_ops) {
    ParamSet p;
    p.add("a", random_tensor(6, 4, rng));
    op_check(name, p, [&](const BoundParams& b) { return f(b["a"]); });
  }
  const std::vector<std::uint32_t> idx = {0, 2, 5, 5, 1, 3};
  const std::vector<double> w = {0.2, 0.8, 0.5, 0.5, 0.1, 0.9};
  op_check("broadcast_rows", two(1, 4, 1, 1), [](const BoundParams& b) { return broadcast_rows(b["a"], 3); });
  op_check("gather_rows", two(6, 3, 1, 1), [&](const BoundParams& b) { return gather_rows(b["a"], idx); });
  op_check("interpolate_rows", two(6, 3, 1, 1),
           [&](const BoundParams& b) { return interpolate_rows(b["a"], idx, w, 2); });
  {
    ParamSet p;
    p.add("x", random_tensor(5, 8, rng));
    p.add("g", random_tensor(1, 8, rng));
    p.add("b", random_tensor(1, 8, rng));
    op_check("group_norm", p, [](const BoundParams& b) { return group_norm(b["x"], 4, b["g"], b["b"]); });
  }
  {
    ParamSet p;
    p.add("x", random_tensor(5, 3, rng));
    p.add("w", random_tensor(3, 4, rng));
    p.add("b", random_tensor(1, 4, rng));
    op_check("affine", p, [](const BoundParams& b) { return affine(b["x"], b["w"], b["b"]); });
  }
  c.below("worst op error (" + worst_op + ")", worst, 1e-5);

  // Full objective on a toy batch: 2 frames x 8 points, small widths.
  pipe::TrainConfig cfg;
  cfg.enc_point_dim = 8;
  cfg.enc_global_dim = 16;
  cfg.enc_local_dim = 8;
  cfg.enc_fusion_hidden = 8;
  cfg.enc_groups = 2;
  cfg.enc_centroids = 6;
  cfg.st_dim = 5;
  cfg.dyn_dim = 3;
  cfg.ode_hidden = 8;
  cfg.ode_layers = 1;
  cfg.cnf_hidden = 8;
  cfg.cnf_layers = 1;
  cfg.w_r = 0.5;
  cfg.w_c = 2.0;
  cfg.latent_rtol = cfg.latent_atol = 1e-9;
  cfg.cnf_rtol = cfg.cnf_atol = 1e-9;
  pipe::Model model = pipe::Model::create(cfg, 11);
  std::mt19937_64 prng(12);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (std::size_t i = 0; i < model.params().size(); ++i)
    for (std::size_t j = 0; j < model.params().value(i).size(); ++j) model.params().value(i)[j] += u(prng);
  synth::DatasetOptions dopts;
  dopts.count = 1;
  dopts.seed = 6;
  dopts.sequence.n_points = 64;
  const auto data = synth::generate_dataset(dopts);
  const synth::TrainingView view = synth::subsample_training_view(data[0], 2, 8, 13);
  const ScalarFn fn = [&](Tape& tape, const BoundParams& p) {
    return pipe::sequence_loss(tape, model, p, view.raw, view.gt).total;
  };
  ParamSet params = model.params();
  const GradCheckResult r = grad_check(fn, params, {1e-5, 1e-6});
  c.below("encoder+ODE+CNF loss error", r.max_relative_error, 1e-4);
}

// ---------------------------------------------------------------- 2: ODE

struct Decay : ode::Dynamics {
  Var evaluate(Tape&, Var z, double, std::span<const Var>) const override { return neg(z); }
};

struct TanhMlp : ode::Dynamics {
  Var evaluate(Tape&, Var z, double t, std::span<const Var> in) const override {
    Var h = tanh(affine(z, in[0], in[1]));
    return scale(matmul(h, in[2]), 1.0 + 0.3 * std::sin(t));
  }
};

void ode_solver(Checklist& c) {
  Decay decay;
  auto error = [&](double h) {
    ode::OdeConfig cfg;
    cfg.fixed_step = h;
    return std::abs(ode::integrate(decay, Tensor::scalar(1.0), 0.0, 1.0, cfg).state.item() - std::exp(-1.0));
  };
  c.within("convergence order", std::log2(error(0.25) / error(0.125)), 4.5, 5.5);
  const double adaptive =
      std::abs(ode::integrate(decay, Tensor::scalar(1.0), 0.0, 1.0, ode::OdeConfig{}).state.item() - std::exp(-1.0));
  c.below("|z(1) - e^-1| at default tolerances", adaptive, 1e-4);

  std::mt19937_64 rng(17);
  const Tensor w1 = random_tensor(3, 10, rng, -1, 1), b1 = random_tensor(1, 10, rng, -1, 1),
               w2 = random_tensor(10, 3, rng, -1, 1);
  const Tensor* in[] = {&w1, &b1, &w2};
  TanhMlp f;
  const Tensor z0 = random_tensor(5, 3, rng), cot = random_tensor(5, 3, rng);
  ode::OdeConfig cfg;
  cfg.rtol = cfg.atol = 1e-8;
  const auto adj = ode::adjoint_gradients(f, z0, 0.0, 1.0, cot, cfg, in);
  const auto disc = ode::discrete_gradients(f, z0, 0.0, 1.0, cot, cfg, in);
  auto rel = [](const Tensor& a, const Tensor& b) {
    double n = 0, d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      n = std::max(n, std::abs(a[i] - b[i]));
      d = std::max(d, std::abs(b[i]));
    }
    return n / d;
  };
  double worst = rel(adj.dz0, disc.dz0);
  for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, rel(adj.dinputs[i], disc.dinputs[i]));
  c.below("adjoint vs backprop relative difference", worst, 1e-4);
}

// ---------------------------------------------------------------- 3: CNF

// g(y) = y A^T with A fixed.
class LinearField final : public flow::FlowField {
 public:
  explicit LinearField(const Eigen::Matrix3d& a) : a_t_(Tensor::zeros(3, 3)) {
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) a_t_.at(k, r) = a(r, k);
  }
  Eval evaluate(Var y, Var, Var, std::span<const Var>, std::span<const Var> tangents) const override {
    Var at = y.tape->leaf_ref(a_t_);
    Eval e;
    e.velocity = matmul(y, at);
    for (Var d : tangents) e.jvps.push_back(matmul(d, at));
    return e;
  }

 private:
  Tensor a_t_;
};

void cnf(Checklist& c) {
  std::mt19937_64 rng(6);
  flow::FlowConfig fc;
  fc.hidden = 16;
  fc.hidden_layers = 2;
  fc.context_dim = 4;
  const flow::FlowModel model = flow::FlowModel::concat_squash(fc);
  ParamSet params;
  static_cast<const flow::ConcatSquashField&>(*model.field).init_params(params, rng);
  const Tensor ctx = random_tensor(1, 4, rng, -1, 1);
  const Tensor x = random_tensor(50, 3, rng);
  c.below("identity flow log-prob error",
          max_abs_diff(flow::flow_logprob(model, params, x, ctx), flow::standard_normal_logpdf(x)), 1e-9);

  // Symmetric A: x = exp(AT) y0, so log p(x) = log N(exp(-AT) x) - tr(A) T.
  Eigen::Matrix3d a;
  a << 0.4, 0.1, -0.2, 0.1, -0.3, 0.05, -0.2, 0.05, 0.2;
  const double T = 0.8;
  flow::FlowModel linear;
  linear.field = std::make_shared<LinearField>(a);
  linear.end_time = T;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(a);
  const Eigen::Matrix3d back =
      eig.eigenvectors() * (-T * eig.eigenvalues()).array().exp().matrix().asDiagonal() * eig.eigenvectors().transpose();
  const Tensor lp = flow::flow_logprob(linear, {}, x, Tensor::zeros(1, 0));
  double worst = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const Eigen::Vector3d y0 = back * Eigen::Vector3d(x.at(i, 0), x.at(i, 1), x.at(i, 2));
    const double want = -1.5 * std::log(2.0 * std::numbers::pi) - 0.5 * y0.squaredNorm() - a.trace() * T;
    worst = std::max(worst, std::abs(lp[i] - want));
  }
  c.below("linear flow log-prob error", worst, 1e-4);

  // Random (non-identity) flow for the round trip and the mass check.
  auto randomize_last = [&](double amp) {
    const std::size_t last = fc.hidden_layers;
    for (const char* part : {".W", ".b", ".Wc"}) {
      Tensor& t = params.at("cnf.l" + std::to_string(last) + part);
      t = random_tensor(t.rows(), t.cols(), rng, -amp, amp);
    }
  };
  randomize_last(0.5);
  const flow::Sample s = flow::flow_sample(model, params, ctx, 64, 77);
  const Tensor inv = flow::flow_inverse(model, params, s.points, ctx);
  c.that("random flow is not the identity", max_abs_diff(s.points, s.noise) > 1e-2);
  double round_trip = 0.0;
  for (std::size_t r = 0; r < s.noise.rows(); ++r)
    for (std::size_t k = 0; k < 3; ++k) round_trip = std::max(round_trip, std::abs(inv.at(r, k) - s.noise.at(r, k)));
  c.below("sample -> inverse noise error", round_trip, 1e-4);

  flow::FlowConfig small = fc;
  small.hidden = 8;
  small.context_dim = 3;
  const flow::FlowModel mass_model = flow::FlowModel::concat_squash(small);
  params = ParamSet{};
  static_cast<const flow::ConcatSquashField&>(*mass_model.field).init_params(params, rng);
  fc = small;
  randomize_last(0.3);
  const Tensor mctx = random_tensor(1, 3, rng, -1, 1);
  const std::size_t m = 24;
  const double lo = -6.0, step = 12.0 / m;
  Tensor grid = Tensor::zeros(m * m * m, 3);
  for (std::size_t i = 0, k = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t l = 0; l < m; ++l, ++k) {
        grid.at(k, 0) = lo + (i + 0.5) * step;
        grid.at(k, 1) = lo + (j + 0.5) * step;
        grid.at(k, 2) = lo + (l + 0.5) * step;
      }
  flow::FlowOptions o;
  o.ode.rtol = o.ode.atol = 1e-6;
  const Tensor glp = flow::flow_logprob(mass_model, params, grid, mctx, o);
  double mass = 0.0;
  for (std::size_t i = 0; i < glp.size(); ++i) mass += std::exp(glp[i]);
  c.within("coarse-grid mass", mass * step * step * step, 0.95, 1.05);
}

// ---------------------------------------------------------------- 4: metrics

double brute_chamfer(const Tensor& a, const Tensor& b) {
  auto one_way = [](const Tensor& x, const Tensor& y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double best = INFINITY;
      for (std::size_t j = 0; j < y.rows(); ++j) {
        double d = 0.0;
        for (int k = 0; k < 3; ++k) d += (x.at(i, k) - y.at(j, k)) * (x.at(i, k) - y.at(j, k));
        best = std::min(best, d);
      }
      acc += best;
    }
    return acc / static_cast<double>(x.rows());
  };
  return one_way(a, b) + one_way(b, a);
}

void metrics(Checklist& c) {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (std::size_t n : {1, 7, 64, 200, 256}) {
    const Tensor a = random_tensor(n, 3, rng, 0, 1), b = random_tensor(n + n % 3, 3, rng, -0.2, 1.2);
    worst = std::max(worst, std::abs(geo::chamfer(a, b) - brute_chamfer(a, b)));
  }
  c.at_most("chamfer vs brute force", worst, 1e-12);

  double ratio = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor(64, 3, rng), b = random_tensor(64, 3, rng, -1, 2);
    std::vector<double> cost(64 * 64);
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j) {
        double d = 0.0;
        for (int k = 0; k < 3; ++k) d += std::pow(a.at(i, k) - b.at(j, k), 2);
        cost[i * 64 + j] = d;
      }
    const auto assign = geo::hungarian(cost, 64);
    double exact = 0.0;
    for (std::size_t i = 0; i < 64; ++i) exact += cost[i * 64 + assign[i]];
    exact /= 64.0;
    ratio = std::max(ratio, std::abs(geo::emd(a, b, geo::EmdMode::auction) / exact - 1.0));
  }
  c.at_most("auction EMD relative gap to Hungarian", ratio, 0.01);
  const Tensor x = random_tensor(128, 3, rng);
  c.that("CD and EMD zero on identical clouds", geo::chamfer(x, x) == 0.0 && geo::emd(x, x) == 0.0);
}

// ---------------------------------------------------------------- 5: pose

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized().toRotationMatrix();
}

void pose(Checklist& c) {
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor src = random_tensor(20 + trial, 3, rng);
    geo::SimilarityPose truth;
    truth.scale = 0.5 + trial * 0.2;
    truth.rotation = random_rotation(rng);
    truth.translation = {trial * 0.1, -1.0, 2.0};
    const geo::SimilarityPose fit = geo::umeyama_fit(src, truth.apply(src));
    worst = std::max({worst, std::abs(fit.scale - truth.scale), (fit.rotation - truth.rotation).cwiseAbs().maxCoeff(),
                      (fit.translation - truth.translation).cwiseAbs().maxCoeff()});
  }
  c.below("Umeyama parameter error", worst, 1e-9);

  double rot = 0.0, trans = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor canon = random_tensor(300, 3, rng, 0, 1);
    geo::SimilarityPose truth;
    truth.scale = 1.3;
    truth.rotation = random_rotation(rng);
    truth.translation = {0.2, -0.4, 1.5};
    Tensor world = truth.apply(canon);
    std::normal_distribution<double> noise(0.0, 0.002);
    std::uniform_real_distribution<double> u(-1.0, 2.0);
    for (std::size_t i = 0; i < world.size(); ++i) world[i] += noise(rng);
    for (std::size_t r = 0; r < 90; ++r)
      for (int k = 0; k < 3; ++k) world.at(r * 3 + 1, k) = u(rng);
    geo::RansacOptions opts;
    opts.seed = 3 + trial;
    const geo::RansacResult fit = geo::ransac_pose(world, canon, opts);
    rot = std::max(rot, geo::rotation_angle_deg(fit.pose.rotation, truth.rotation));
    trans = std::max(trans, (fit.pose.translation - truth.translation).norm());
  }
  c.below("RANSAC rotation error (deg, 30% outliers)", rot, 1.0);
  c.below("RANSAC translation error", trans, 0.01);
}

// ---------------------------------------------------------------- 6: data

void data_integrity(Checklist& c) {
  double pose_err = 0.0;
  bool times_exact = true, disjoint = true, counts = true;
  for (synth::ShapeKind kind : {synth::ShapeKind::box_composite, synth::ShapeKind::superellipsoid,
                                synth::ShapeKind::winged, synth::ShapeKind::legged}) {
    synth::DatasetOptions opts;
    opts.kind = kind;
    const auto records = synth::generate_dataset(opts);
    std::map<std::string, std::set<std::string>> splits;
    for (const auto& rec : records) {
      const double last = rec.raw_times.back();
      for (std::size_t k = 0; k < rec.frame_count(); ++k) {
        pose_err = std::max(pose_err, max_abs_diff(rec.poses[k].apply(rec.nocs[k]), rec.world[k]));
        times_exact = times_exact && rec.canon_times[k] == rec.raw_times[k] / last;
        counts = counts && rec.world[k].rows() == opts.sequence.n_points;
      }
      splits[rec.split].insert(rec.instance_id);
    }
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& [name, ids] : splits) {
      total += ids.size();
      seen.insert(ids.begin(), ids.end());
    }
    disjoint = disjoint && total == records.size() && seen.size() == records.size() && splits["train"].size() == 160 &&
               splits["val"].size() == 20 && splits["test"].size() == 20;
  }
  c.at_most("max |pose(NOCS) - world| over 4 x 200 sequences", pose_err, 1e-12);
  c.that("canonical times equal s/s_K exactly", times_exact);
  c.that("4096 points in every frame", counts);
  c.that("splits 160/20/20 and disjoint by instance", disjoint);
}

// ---------------------------------------------------------------- 7-10: trained models

// Desk-scale settings shared by every trained model.
pipe::TrainConfig desk_config() {
  pipe::TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 2;
  c.epochs = kDeskEpochs;
  c.points = 512;
  c.flow_points = 128;
  c.enc_global_dim = 128;
  c.enc_fusion_hidden = 128;
  c.cnf_hidden = 32;
  c.ode_hidden = 64;
  c.cnf_rtol = 1e-4;
  c.cnf_atol = 1e-4;
  c.val_sequences = 8;
  c.val_points = 256;
  // w_c = 100 on the mean L1 rather than the sum keeps both terms comparable.
  c.w_c = 100.0 / static_cast<double>(c.points * c.frames * 4);
  return c;
}

synth::DatasetOptions desk_data(synth::ShapeKind kind, std::uint64_t seed) {
  synth::DatasetOptions d;
  d.kind = kind;
  d.seed = seed;
  d.sequence.n_points = kDeskDataPoints;
  return d;
}

std::vector<synth::SequenceRecord> split_of(const std::vector<synth::SequenceRecord>& all, const std::string& name) {
  std::vector<synth::SequenceRecord> out;
  for (const auto& r : all)
    if (r.split == name) out.push_back(r);
  return out;
}

struct Trained {
  pipe::Model model;
  double train_seconds = 0.0;
  bool cached = false;
};

std::string describe(const synth::DatasetOptions& d) {
  std::ostringstream os;
  os << "kind " << synth::kind_name(d.kind) << " count " << d.count << " seed " << d.seed << " points "
     << d.sequence.n_points << " directional " << d.directional << " deforming " << d.deforming
     << " single_shape " << d.single_shape << '\n';
  return os.str();
}

fs::path work_root(const Options& opts) {
  return opts.work_dir.empty() ? fs::temp_directory_path() / "caspr_acceptance" : opts.work_dir;
}

// Trains on the train/val splits, or reloads a checkpoint trained with the
// same configuration and data.
Trained train_or_load(const std::string& name, const pipe::TrainConfig& cfg, const synth::DatasetOptions& data,
                      const std::vector<synth::SequenceRecord>& records, const Options& opts) {
  const fs::path dir = work_root(opts) / name;
  const std::string stamp = "version 1\n" + describe(data) + cfg.to_text();
  auto read_file = [](const fs::path& p) {
    std::ifstream is(p);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  if (!opts.fresh && fs::exists(dir / "best.ckpt") && read_file(dir / "stamp.txt") == stamp) {
    Trained t{pipe::Model::load(dir / "best.ckpt"), 0.0, true};
    std::istringstream(read_file(dir / "train_seconds.txt")) >> t.train_seconds;
    return t;
  }
  fs::remove_all(dir);
  fs::create_directories(dir);
  Trained t{pipe::Model::create(cfg, cfg.seed), 0.0, false};
  pipe::TrainOptions to;
  to.out_dir = dir;
  to.log = opts.log;
  const auto start = clock::now();
  const pipe::TrainResult r = pipe::train(t.model, split_of(records, "train"), split_of(records, "val"), to);
  t.train_seconds = std::chrono::duration<double>(clock::now() - start).count();
  if (r.diverged) throw Error("training " + name + " diverged");
  t.model.save(dir / "best.ckpt");
  std::ofstream(dir / "train_seconds.txt") << t.train_seconds << '\n';
  std::ofstream(dir / "stamp.txt") << stamp;
  return t;
}

void training_time(Checklist& c, const std::string& name, const Trained& t) {
  c.at_most(name + " training seconds" + (t.cached ? " (cached)" : ""), t.train_seconds, kTrainBudgetSeconds);
}

pipe::EvalProtocol protocol(bool three) {
  pipe::EvalProtocol p = three ? pipe::EvalProtocol::three_observed(kEvalPoints) : pipe::EvalProtocol::all_frames(kEvalPoints);
  p.seed = 2024;
  return p;
}

double median(const geo::MetricReport& r, const char* metric) { return r.summary(metric).median; }

void end_to_end(const Options& opts, Checklist& c) {
  for (synth::ShapeKind kind : {synth::ShapeKind::box_composite, synth::ShapeKind::superellipsoid,
                                synth::ShapeKind::winged, synth::ShapeKind::legged}) {
    const std::string name = synth::kind_name(kind);
    const synth::DatasetOptions data = desk_data(kind, 100);
    const auto records = synth::generate_dataset(data);
    const auto test = split_of(records, "test");
    const Trained t = train_or_load("rigid_" + name, desk_config(), data, records, opts);
    training_time(c, name, t);

    const geo::MetricReport all = pipe::evaluate(t.model, test, protocol(false));
    const geo::MetricReport copy = pipe::evaluate_copy_baseline(test, protocol(false));
    c.at_most(name + " (a) canon error / copy baseline", median(all, pipe::kCanonSpatial) / median(copy, pipe::kCanonSpatial),
              0.5);

    const pipe::Model untrained = pipe::Model::create(t.model.config(), t.model.config().seed);
    const geo::MetricReport base = pipe::evaluate(untrained, test, protocol(false));
    c.at_most(name + " (b) observed EMD / untrained (" + num(median(all, pipe::kEmdObserved)) + " vs " +
                  num(median(base, pipe::kEmdObserved)) + ")",
              median(all, pipe::kEmdObserved) / median(base, pipe::kEmdObserved), 0.5);

    const geo::MetricReport three = pipe::evaluate(t.model, test, protocol(true));
    c.at_most(name + " (c) unobserved / observed EMD, 3 observed",
              median(three, pipe::kEmdUnobserved) / median(three, pipe::kEmdObserved), 1.5);
  }
}

void arrow(const Options& opts, Checklist& c) {
  synth::DatasetOptions data = desk_data(synth::ShapeKind::box_composite, 200);
  data.directional = true;
  data.single_shape = true;
  const auto records = synth::generate_dataset(data);
  const Trained t = train_or_load("directional_box_composite", desk_config(), data, records, opts);
  training_time(c, "directional", t);
  const pipe::ArrowReport r = pipe::arrow_of_time(t.model, split_of(records, "test"), protocol(false));
  const double fwd = median(r.forward, pipe::kEmdObserved), rev = median(r.reversed, pipe::kEmdObserved);
  c.at_least("reversed / forward median EMD (" + num(rev) + " vs " + num(fwd) + ")", rev / fwd, 1.5);
}

void correspondence(const Options& opts, Checklist& c) {
  synth::DatasetOptions data = desk_data(synth::ShapeKind::superellipsoid, 300);
  data.deforming = true;
  const auto records = synth::generate_dataset(data);
  const Trained t = train_or_load("deforming_superellipsoid", desk_config(), data, records, opts);
  training_time(c, "deforming", t);

  std::vector<std::size_t> instance_of;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == "test") instance_of.push_back(i);
  bool consistent = true;
  std::vector<double> ratio;
  double bound_sum = 0.0;
  for (std::size_t j = 0; j < instance_of.size(); ++j) {
    const synth::SequenceRecord& rec = records[instance_of[j]];
    std::vector<std::size_t> all(rec.frame_count());
    std::iota(all.begin(), all.end(), 0);
    const synth::TrainingView view = synth::select_view(rec, all, kEvalPoints, synth::sequence_seed(7, j, 0));
    const pipe::Reconstruction recon =
        pipe::reconstruct(t.model, view.raw, rec.canon_times, kCorrespondencePoints, true, synth::sequence_seed(7, j, 1));

    // Exported trajectories must reproduce the in-memory samples id by id.
    const fs::path dir = work_root(opts) / "correspondence" / rec.instance_id;
    fs::remove_all(dir);
    pipe::export_reconstruction(dir, recon);
    const pipe::Reconstruction back = pipe::read_trajectories(dir / "trajectories.txt");
    consistent = consistent && back.clouds.size() == recon.clouds.size();
    for (std::size_t k = 0; consistent && k < recon.clouds.size(); ++k) {
      std::vector<std::size_t> ids = back.noise_ids[k];
      std::sort(ids.begin(), ids.end());
      consistent = back.times[k] == recon.times[k] && back.noise_ids[k] == recon.noise_ids[k] &&
                   std::adjacent_find(ids.begin(), ids.end()) == ids.end() && ids == recon.noise_ids[0] &&
                   max_abs_diff(back.clouds[k], recon.clouds[k]) == 0.0;
    }

    // The warp is the identity at t = 0, so the sample at t = 0 is its own
    // rest position; its ground-truth path is warp(x0, t).
    const synth::WarpParams warp = synth::dataset_warp(data, instance_of[j]);
    const double bound = warp.displacement_bound();
    bound_sum += bound;
    for (std::size_t k = 1; k < recon.times.size(); ++k) {
      const Tensor expected = synth::warp_points(recon.clouds[0], warp, recon.times[k]);
      for (std::size_t i = 0; i < expected.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t d = 0; d < 3; ++d) sq += std::pow(recon.clouds[k].at(i, d) - expected.at(i, d), 2);
        ratio.push_back(std::sqrt(sq) / bound);
      }
    }
  }
  c.that("exported trajectories consistent by noise id", consistent);
  c.below("median drift / amplitude bound (mean bound " + num(bound_sum / instance_of.size()) + ")",
          geo::summarize(ratio).median, 1.0);
}

void labels(const Options& opts, Checklist& c) {
  const synth::DatasetOptions data = desk_data(synth::ShapeKind::box_composite, 100);
  const auto records = synth::generate_dataset(data);
  const auto test = split_of(records, "test");

  // Ground-truth canonical points: random half labeled, half held out.
  bool equal = true;
  std::size_t correct = 0, oracle_correct = 0, total = 0;
  std::mt19937_64 rng(5);
  for (const auto& rec : test) {
    const TNocsSequence gt = rec.gt();
    for (std::size_t k = 0; k < rec.frame_count(); ++k) {
      const Tensor pts = gt.spatial(k);
      std::vector<std::size_t> order(pts.rows());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      const std::size_t half = order.size() / 2;
      Tensor labeled = Tensor::zeros(half, 3), target = Tensor::zeros(order.size() - half, 3);
      std::vector<int> lab(half), truth(order.size() - half);
      for (std::size_t i = 0; i < order.size(); ++i) {
        Tensor& dst = i < half ? labeled : target;
        const std::size_t row = i < half ? i : i - half;
        for (std::size_t d = 0; d < 3; ++d) dst.at(row, d) = pts.at(order[i], d);
        (i < half ? lab[row] : truth[row]) = rec.labels[k][order[i]];
      }
      const auto fast = geo::propagate_labels(labeled, lab, target);
      const auto brute = geo::propagate_labels_brute(labeled, lab, target);
      equal = equal && fast == brute;
      for (std::size_t i = 0; i < truth.size(); ++i) {
        correct += fast[i] == truth[i];
        oracle_correct += brute[i] == truth[i];
      }
      total += truth.size();
    }
  }
  c.that("propagated labels identical to brute force (accuracy " + num(static_cast<double>(correct) / total) + " vs " +
             num(static_cast<double>(oracle_correct) / total) + ")",
         equal && correct == oracle_correct);

  // Trained canonicalizer: labels of frame 0 carried to the other frames.
  const Trained t = train_or_load("rigid_box_composite", desk_config(), data, records, opts);
  double known_correct = 0.0, known = 0.0, majority = 0.0, targets = 0.0;
  for (std::size_t j = 0; j < test.size(); ++j) {
    const synth::SequenceRecord& rec = test[j];
    std::vector<std::size_t> all(rec.frame_count());
    std::iota(all.begin(), all.end(), 0);
    const synth::TrainingView view = synth::select_view(rec, all, kEvalPoints, synth::sequence_seed(11, j, 0));
    const enc::Canonicalized pred = enc::canonicalize(t.model.encoder(), t.model.params(), view.raw);
    const Tensor source = pred.pred.spatial(0);
    for (std::size_t k = 1; k < all.size(); ++k) {
      const auto out = geo::propagate_labels(source, view.labels[0], pred.pred.spatial(k));
      const pipe::LabelScore s = pipe::score_labels(out, view.labels[k]);
      const double n = static_cast<double>(out.size());
      known += static_cast<double>(s.known);
      known_correct += s.known_accuracy * static_cast<double>(s.known);
      majority += s.majority * n;
      targets += n;
    }
  }
  c.that("trained canonicalizer labels some points", known > 0);
  c.above("known-point accuracy vs majority baseline " + num(majority / targets), known_correct / std::max(known, 1.0),
          majority / targets);
}

void run_trained(int criterion, const Options& opts, Checklist& c) {
  switch (criterion) {
    case 7:
      end_to_end(opts, c);
      break;
    case 8:
      arrow(opts, c);
      break;
    case 9:
      correspondence(opts, c);
      break;
    case 10:
      labels(opts, c);
      break;
  }
}

}  // namespace

std::string format(const Outcome& o) {
  std::ostringstream os;
  os << "criterion " << o.criterion << " [" << (o.pass ? "PASS" : "FAIL") << "] " << o.title << " ("
     << std::fixed << std::setprecision(1) << o.seconds << " s): " << o.detail;
  return os.str();
}

Outcome run(int criterion, const Options& opts) {
  static const std::map<int, std::pair<std::string, double>> info = {
      {1, {"autodiff soundness", 60}},    {2, {"ODE solver", 60}},
      {3, {"CNF correctness", 300}},      {4, {"metrics", 60}},
      {5, {"pose", 60}},                  {6, {"data integrity", 120}},
      {7, {"end-to-end training", 0}},    {8, {"arrow of time", 0}},
      {9, {"correspondence", 0}},         {10, {"label propagation", 0}},
  };
  const auto it = info.find(criterion);
  if (it == info.end()) throw Error("no such criterion: " + std::to_string(criterion));
  Outcome o;
  o.criterion = criterion;
  o.title = it->second.first;
  Checklist c;
  const auto start = clock::now();
  try {
    switch (criterion) {
      case 1:
        autodiff(c);
        break;
      case 2:
        ode_solver(c);
        break;
      case 3:
        cnf(c);
        break;
      case 4:
        metrics(c);
        break;
      case 5:
        pose(c);
        break;
      case 6:
        data_integrity(c);
        break;
      default:
        run_trained(criterion, opts, c);
        break;
    }
  } catch (const std::exception& e) {
    c.that(std::string("exception: ") + e.what(), false);
  }
  o.seconds = std::chrono::duration<double>(clock::now() - start).count();
  if (it->second.second > 0) c.below("runtime (s)", o.seconds, it->second.second);
  o.pass = c.pass();
  o.detail = c.detail();
  return o;
}

}  // namespace caspr::accept
