#include "caspr/encoder.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "caspr/ops.hpp"

namespace caspr::enc {
namespace {

constexpr std::size_t kGroupInputs = 3 + kLocalInputs;

bool lex_less(const Tensor& p, std::size_t a, std::size_t b) {
  for (std::size_t c = 0; c < 3; ++c) {
    if (p.at(a, c) != p.at(b, c)) return p.at(a, c) < p.at(b, c);
  }
  return false;
}

bool same_point(const Tensor& p, std::size_t a, std::size_t b) { return !lex_less(p, a, b) && !lex_less(p, b, a); }

double sq_dist(const Tensor& p, std::size_t a, std::size_t b) {
  double d = 0.0;
  for (std::size_t c = 0; c < 3; ++c) d += (p.at(a, c) - p.at(b, c)) * (p.at(a, c) - p.at(b, c));
  return d;
}

// Centered on the bounding-box middle and scaled into the unit sphere.
Tensor normalize_frame(const Tensor& points) {
  const std::size_t n = points.rows();
  std::array<double, 3> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], points.at(i, c));
      hi[c] = std::max(hi[c], points.at(i, c));
    }
  }
  Tensor q = Tensor::zeros(n, 3);
  double radius = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      q.at(i, c) = points.at(i, c) - 0.5 * (lo[c] + hi[c]);
      r += q.at(i, c) * q.at(i, c);
    }
    radius = std::max(radius, std::sqrt(r));
  }
  if (radius > 0.0) {
    for (std::size_t i = 0; i < q.size(); ++i) q[i] /= radius;
  }
  return q;
}

}  // namespace

void EncoderConfig::validate() const {
  for (std::size_t w : {point_dim, global_dim / 2, global_dim, local_dim / 2, local_dim, fusion_hidden}) {
    if (w == 0 || groups == 0 || w % groups != 0) {
      throw Error("encoder widths must be nonzero multiples of the group count");
    }
  }
  if (global_dim % 2 != 0 || local_dim % 2 != 0) throw Error("encoder global and local widths must be even");
  if (fusion_layers == 0) throw Error("encoder needs at least one fusion layer");
  if (dyn_dim == 0) throw Error("encoder needs a nonempty dynamic code");
  if (centroids == 0 || group_size == 0 || interp_k == 0) throw Error("invalid set-abstraction sizes");
  if (!(radius > 0.0)) throw Error("set-abstraction radius must be positive");
}

std::vector<std::uint32_t> farthest_point_sample(const Tensor& points, std::size_t count) {
  const std::size_t n = points.rows();
  std::vector<std::uint32_t> out;
  if (n == 0 || count == 0) return out;
  std::size_t first = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t c = 0; c < 3; ++c) r += points.at(i, c) * points.at(i, c);
    if (r > best || (r == best && lex_less(points, i, first))) {
      best = r;
      first = i;
    }
  }
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t next = first;
  while (out.size() < count) {
    out.push_back(static_cast<std::uint32_t>(next));
    double far = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq_dist(points, i, next));
      if (dist[i] > far || (dist[i] == far && lex_less(points, i, arg))) {
        far = dist[i];
        arg = i;
      }
    }
    if (far <= 0.0) break;
    next = arg;
  }
  return out;
}

FrameStructure frame_structure(const Tensor& points, const EncoderConfig& cfg) {
  if (points.rank() != 2 || points.cols() != 3) throw ShapeError("frame points must be n x 3");
  const std::size_t n = points.rows();
  if (n == 0) throw Error("cannot encode an empty frame");
  const Tensor q = normalize_frame(points);
  FrameStructure fs;
  fs.inputs = Tensor::zeros(n, kLocalInputs);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = q.at(i, 0), y = q.at(i, 1), z = q.at(i, 2);
    const double v[kLocalInputs] = {x, y, z, x * x, y * y, z * z, x * y, y * z, x * z};
    for (std::size_t c = 0; c < kLocalInputs; ++c) fs.inputs.at(i, c) = v[c];
  }
  fs.centroids = farthest_point_sample(q, std::min(cfg.centroids, n));
  const std::size_t C = fs.centroids.size();

  fs.group_inputs = Tensor::zeros(C * cfg.group_size, kGroupInputs);
  const double r2 = cfg.radius * cfg.radius;
  std::vector<std::pair<double, std::uint32_t>> cand;
  for (std::size_t g = 0; g < C; ++g) {
    const std::size_t c = fs.centroids[g];
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      const double d = sq_dist(q, j, c);
      if (d < r2) cand.emplace_back(d, static_cast<std::uint32_t>(j));
    }
    std::sort(cand.begin(), cand.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return lex_less(q, a.second, b.second);
    });
    std::vector<std::uint32_t> members;
    for (const auto& [d, j] : cand) {
      if (members.size() == cfg.group_size) break;
      bool dup = false;
      for (auto m : members) dup = dup || same_point(q, m, j);
      if (!dup) members.push_back(j);
    }
    for (std::size_t s = 0; s < cfg.group_size; ++s) {
      const std::size_t j = members[s < members.size() ? s : 0];
      const std::size_t row = g * cfg.group_size + s;
      for (std::size_t k = 0; k < 3; ++k) fs.group_inputs.at(row, k) = q.at(j, k) - q.at(c, k);
      for (std::size_t k = 0; k < kLocalInputs; ++k) fs.group_inputs.at(row, 3 + k) = fs.inputs.at(j, k);
    }
  }

  const std::size_t k = cfg.interp_k;
  const std::size_t used = std::min(k, C);
  fs.interp_index.assign(n * k, 0);
  fs.interp_weight.assign(n * k, 0.0);
  std::vector<std::pair<double, std::uint32_t>> near(C);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < C; ++g) near[g] = {sq_dist(q, i, fs.centroids[g]), static_cast<std::uint32_t>(g)};
    std::partial_sort(near.begin(), near.begin() + used, near.end());
    double total = 0.0;
    for (std::size_t s = 0; s < used; ++s) {
      const double w = 1.0 / (std::sqrt(near[s].first) + 1e-8);
      fs.interp_index[i * k + s] = near[s].second;
      fs.interp_weight[i * k + s] = w;
      total += w;
    }
    for (std::size_t s = 0; s < used; ++s) fs.interp_weight[i * k + s] /= total;
  }
  return fs;
}

Encoder::Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& c = cfg_;
  auto add = [&](const std::string& name, std::size_t in, std::size_t out, bool norm) {
    layers_.push_back({c.prefix + name, in, out, norm});
  };
  add("global.p0", 4, c.point_dim, true);
  add("global.p1", c.point_dim, c.point_dim, true);
  global_point_end_ = layers_.size();
  add("global.g0", c.point_dim, c.global_dim / 2, true);
  add("global.g1", c.global_dim / 2, c.global_dim, true);
  global_end_ = layers_.size();
  add("local.sa0", kGroupInputs, c.local_dim / 2, true);
  add("local.sa1", c.local_dim / 2, c.local_dim, true);
  group_end_ = layers_.size();
  add("local.fp0", c.local_dim + kLocalInputs, c.local_dim, true);
  propagate_end_ = layers_.size();
  for (std::size_t l = 0; l < c.fusion_layers; ++l) {
    add("fusion.f" + std::to_string(l), l == 0 ? c.point_dim + c.local_dim + c.global_dim : c.fusion_hidden,
        c.fusion_hidden, true);
  }
  fusion_end_ = layers_.size();
  add("head.tnocs", c.fusion_hidden, 4, false);
  add("head.latent", c.fusion_hidden, c.latent_dim(), false);
}

std::vector<std::string> Encoder::param_names() const {
  std::vector<std::string> names;
  for (const auto& l : layers_) {
    names.push_back(l.name + ".W");
    names.push_back(l.name + ".b");
    if (l.norm) {
      names.push_back(l.name + ".gamma");
      names.push_back(l.name + ".beta");
    }
  }
  return names;
}

void Encoder::init_params(ParamSet& params, std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (const auto& l : layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    Tensor w = Tensor::zeros(l.in, l.out), b = Tensor::zeros(1, l.out);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = bound * u(rng);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = bound * u(rng);
    params.add(l.name + ".W", std::move(w));
    params.add(l.name + ".b", std::move(b));
    if (l.norm) {
      Tensor gamma = Tensor::zeros(1, l.out);
      for (std::size_t i = 0; i < gamma.size(); ++i) gamma[i] = 1.0;
      params.add(l.name + ".gamma", std::move(gamma));
      params.add(l.name + ".beta", Tensor::zeros(1, l.out));
    }
  }
}

Var Encoder::mlp(Var x, const BoundParams& params, std::size_t first, std::size_t end) const {
  for (std::size_t i = first; i < end; ++i) {
    const Layer& l = layers_[i];
    x = affine(x, params[l.name + ".W"], params[l.name + ".b"]);
    if (l.norm) x = relu(group_norm(x, cfg_.groups, params[l.name + ".gamma"], params[l.name + ".beta"]));
  }
  return x;
}

Encoder::Output Encoder::encode(Tape& tape, const BoundParams& params, const RawSequence& input) const {
  const RawSequence seq = input.shifted();
  seq.validate();
  const std::size_t M = seq.total_points();
  const std::size_t k = cfg_.interp_k;

  Output out;
  Tensor x4 = Tensor::zeros(M, 4);
  std::vector<Tensor> local_inputs, group_inputs;
  std::vector<std::uint32_t> interp_index;
  std::vector<double> interp_weight;
  std::size_t row = 0, centroid_offset = 0;
  for (const auto& frame : seq.frames) {
    out.offsets.push_back(row);
    for (std::size_t i = 0; i < frame.points.rows(); ++i, ++row) {
      for (std::size_t c = 0; c < 3; ++c) x4.at(row, c) = frame.points.at(i, c);
      x4.at(row, 3) = frame.time;
    }
    FrameStructure fs = frame_structure(frame.points, cfg_);
    for (std::size_t i = 0; i < fs.interp_index.size(); ++i) {
      interp_index.push_back(static_cast<std::uint32_t>(fs.interp_index[i] + centroid_offset));
      interp_weight.push_back(fs.interp_weight[i]);
    }
    centroid_offset += fs.centroids.size();
    local_inputs.push_back(std::move(fs.inputs));
    group_inputs.push_back(std::move(fs.group_inputs));
  }
  out.offsets.push_back(M);

  Var points = tape.constant(std::move(x4));
  Var point_feat = mlp(points, params, 0, global_point_end_);
  Var global = reduce_max_over_points(mlp(point_feat, params, global_point_end_, global_end_));

  Var groups = tape.constant(stack_rows(group_inputs, kGroupInputs));
  Var centroid_feat = segment_max(mlp(groups, params, global_end_, group_end_), cfg_.group_size);
  Var propagated = interpolate_rows(centroid_feat, interp_index, interp_weight, k);
  Var local_in = tape.constant(stack_rows(local_inputs, kLocalInputs));
  Var local = mlp(concat({propagated, local_in}, 1), params, group_end_, propagate_end_);

  Var fused = mlp(concat({point_feat, local, broadcast_rows(global, M)}, 1), params, propagate_end_, fusion_end_);
  const Layer& tnocs = layers_[fusion_end_];
  const Layer& latent = layers_[fusion_end_ + 1];
  out.tnocs = sigmoid(affine(fused, params[tnocs.name + ".W"], params[tnocs.name + ".b"]));
  out.latent = reduce_max_over_points(affine(fused, params[latent.name + ".W"], params[latent.name + ".b"]));
  return out;
}

LatentCode split_latent(const Tensor& z, std::size_t st_dim) {
  if (z.rank() != 2 || z.rows() != 1) throw ShapeError("latent code must be a 1 x D row");
  if (st_dim > z.cols()) throw ShapeError("static dimension exceeds the code size");
  LatentCode code;
  code.full = z;
  code.st = Tensor::zeros(1, st_dim);
  code.dyn = Tensor::zeros(1, z.cols() - st_dim);
  for (std::size_t i = 0; i < z.cols(); ++i) {
    if (i < st_dim) {
      code.st[i] = z[i];
    } else {
      code.dyn[i - st_dim] = z[i];
    }
  }
  return code;
}

LatentDynamics::LatentDynamics(LatentOdeConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.dim == 0 || cfg_.hidden == 0) throw Error("latent dynamics needs nonzero widths");
  dims_.push_back(cfg_.dim);
  for (std::size_t i = 0; i < cfg_.hidden_layers; ++i) dims_.push_back(cfg_.hidden);
  dims_.push_back(cfg_.dim);
}

std::vector<std::string> LatentDynamics::param_names() const {
  std::vector<std::string> names;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    names.push_back(cfg_.prefix + "l" + std::to_string(l) + ".W");
    names.push_back(cfg_.prefix + "l" + std::to_string(l) + ".b");
  }
  return names;
}

void LatentDynamics::init_params(ParamSet& params, std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto names = param_names();
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
    Tensor w = Tensor::zeros(dims_[l], dims_[l + 1]), b = Tensor::zeros(1, dims_[l + 1]);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = bound * u(rng);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = bound * u(rng);
    params.add(names[2 * l], std::move(w));
    params.add(names[2 * l + 1], std::move(b));
  }
}

Var LatentDynamics::evaluate(Tape&, Var state, double, std::span<const Var> in) const {
  const std::size_t layers = dims_.size() - 1;
  if (in.size() != 2 * layers) throw ShapeError("latent dynamics: wrong parameter count");
  if (state.cols() != cfg_.dim) throw ShapeError("latent dynamics: state width mismatch");
  Var h = state;
  for (std::size_t l = 0; l < layers; ++l) {
    h = affine(h, in[2 * l], in[2 * l + 1]);
    if (l + 1 < layers) h = tanh(h);
  }
  return h;
}

Var advect(Tape& tape, const std::shared_ptr<const LatentDynamics>& dyn, const BoundParams& params, Var z_dyn,
           std::span<const double> times, const ode::OdeConfig& cfg, ode::GradMode mode, ode::SolveStats* stats) {
  std::vector<Var> inputs;
  for (const auto& name : dyn->param_names()) inputs.push_back(params[name]);
  return ode::solve(tape, dyn, z_dyn, inputs, 0.0, times, cfg, mode, stats);
}

std::vector<Tensor> advect(const LatentDynamics& dyn, const ParamSet& params, const Tensor& z_dyn,
                           std::span<const double> times, const ode::OdeConfig& cfg) {
  std::vector<const Tensor*> inputs;
  for (const auto& name : dyn.param_names()) inputs.push_back(&params.at(name));
  return ode::integrate_dense(dyn, z_dyn, times, cfg, inputs).states;
}

Representation represent(Tape& tape, const Encoder& encoder, const std::shared_ptr<const LatentDynamics>& dyn,
                         const BoundParams& params, const RawSequence& seq, std::span<const double> times,
                         const ode::OdeConfig& cfg, ode::GradMode mode, ode::SolveStats* stats) {
  const EncoderConfig& ec = encoder.config();
  if (dyn->config().dim != ec.dyn_dim) throw ShapeError("latent dynamics width differs from the dynamic code");
  Representation rep;
  rep.encoded = encoder.encode(tape, params, seq);
  Var latent = rep.encoded.latent;
  Var z_dyn = slice(latent, 1, ec.st_dim, ec.latent_dim());
  Var z_t = advect(tape, dyn, params, z_dyn, times, cfg, mode, stats);
  if (ec.st_dim == 0) {
    rep.codes = z_t;
  } else {
    rep.codes = concat({broadcast_rows(slice(latent, 1, 0, ec.st_dim), times.size()), z_t}, 1);
  }
  return rep;
}

Canonicalized canonicalize(const Encoder& encoder, const ParamSet& params, const RawSequence& seq) {
  Tape tape(false);
  BoundParams bound(tape, params, false);
  const Encoder::Output out = encoder.encode(tape, bound, seq);
  Canonicalized result;
  const Tensor& all = out.tnocs.value();
  for (std::size_t f = 0; f + 1 < out.offsets.size(); ++f) {
    const std::size_t begin = out.offsets[f], end = out.offsets[f + 1];
    Tensor frame = Tensor::zeros(end - begin, 4);
    std::copy(all.data() + begin * 4, all.data() + end * 4, frame.data());
    result.pred.frames.push_back(std::move(frame));
  }
  result.code = split_latent(out.latent.value(), encoder.config().st_dim);
  return result;
}

}  // namespace caspr::enc
