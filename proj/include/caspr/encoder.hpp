#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "caspr/odeint.hpp"
#include "caspr/params.hpp"
#include "caspr/sequence.hpp"

namespace caspr::enc {

struct EncoderConfig {
  std::size_t point_dim = 64;    // global-branch per-point features
  std::size_t global_dim = 256;  // max-pooled global feature
  std::size_t local_dim = 64;
  std::size_t fusion_hidden = 256;
  std::size_t fusion_layers = 2;
  std::size_t st_dim = 96;
  std::size_t dyn_dim = 32;
  std::size_t groups = 4;  // group-norm groups; every width must be divisible
  // Local branch: per-frame set abstraction on points scaled into the unit sphere.
  std::size_t centroids = 128;
  std::size_t group_size = 16;
  double radius = 0.2;
  std::size_t interp_k = 3;
  std::string prefix = "enc.";

  std::size_t latent_dim() const { return st_dim + dyn_dim; }
  void validate() const;
};

// Nine per-point local inputs: x, y, z and x², y², z², xy, yz, xz.
inline constexpr std::size_t kLocalInputs = 9;

/// Parameter-free neighborhood structure of one frame's local branch.
struct FrameStructure {
  Tensor inputs;                         // M x 9, normalized coordinates and pairwise terms
  std::vector<std::uint32_t> centroids;  // farthest-point samples (distinct positions)
  Tensor group_inputs;                   // (C * group_size) x 12: offset to centroid, then the 9 inputs
  std::vector<std::uint32_t> interp_index;  // M * interp_k, indices into centroids
  std::vector<double> interp_weight;
};

/// Farthest-point sampling that starts from the point farthest from the
/// origin and breaks distance ties by lexicographic coordinate order, so the
/// chosen positions do not depend on point order. Stops early once every
/// distinct position is taken.
std::vector<std::uint32_t> farthest_point_sample(const Tensor& points, std::size_t count);

FrameStructure frame_structure(const Tensor& points, const EncoderConfig& cfg);

/// Desk-scale spatiotemporal point encoder: a global pointwise branch over
/// (x, y, z, s), a per-frame local set-abstraction branch, a fusion MLP and two
/// heads (sigmoid T-NOCS per point, max-pooled latent code).
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg);

  struct Output {
    Var tnocs;   // M x 4, frames stacked in order
    Var latent;  // 1 x D
    std::vector<std::size_t> offsets;  // first row of each frame, plus M
  };

  Output encode(Tape& tape, const BoundParams& params, const RawSequence& seq) const;
  std::vector<std::string> param_names() const;
  void init_params(ParamSet& params, std::mt19937_64& rng) const;
  const EncoderConfig& config() const noexcept { return cfg_; }

 private:
  struct Layer {
    std::string name;
    std::size_t in, out;
    bool norm;
  };
  Var mlp(Var x, const BoundParams& params, std::size_t first, std::size_t count) const;

  EncoderConfig cfg_;
  std::vector<Layer> layers_;
  std::size_t global_point_end_ = 0, global_end_ = 0, group_end_ = 0, propagate_end_ = 0, fusion_end_ = 0;
};

struct LatentCode {
  Tensor full;
  Tensor st;
  Tensor dyn;
};

/// Prefix of st_dim entries and the remaining suffix.
LatentCode split_latent(const Tensor& z, std::size_t st_dim);

struct LatentOdeConfig {
  std::size_t dim = 32;
  std::size_t hidden = 128;
  std::size_t hidden_layers = 3;
  std::string prefix = "ode.";
};

/// Autonomous tanh MLP dynamics dz/dt = f(z) over the dynamic latent code.
/// Solver inputs are the parameters in param_names() order.
class LatentDynamics final : public ode::Dynamics {
 public:
  explicit LatentDynamics(LatentOdeConfig cfg);
  Var evaluate(Tape& tape, Var state, double t, std::span<const Var> inputs) const override;
  std::vector<std::string> param_names() const;
  void init_params(ParamSet& params, std::mt19937_64& rng) const;
  const LatentOdeConfig& config() const noexcept { return cfg_; }

 private:
  LatentOdeConfig cfg_;
  std::vector<std::size_t> dims_;
};

/// z_t at every query time (rows), from one chained solve starting at t = 0.
Var advect(Tape& tape, const std::shared_ptr<const LatentDynamics>& dyn, const BoundParams& params, Var z_dyn,
           std::span<const double> times, const ode::OdeConfig& cfg = ode::OdeConfig::latent(),
           ode::GradMode mode = ode::GradMode::discretize, ode::SolveStats* stats = nullptr);
std::vector<Tensor> advect(const LatentDynamics& dyn, const ParamSet& params, const Tensor& z_dyn,
                           std::span<const double> times, const ode::OdeConfig& cfg = ode::OdeConfig::latent());

struct Representation {
  Encoder::Output encoded;
  Var codes;  // one row [z_st, z_t] per query time
};

Representation represent(Tape& tape, const Encoder& encoder, const std::shared_ptr<const LatentDynamics>& dyn,
                         const BoundParams& params, const RawSequence& seq, std::span<const double> times,
                         const ode::OdeConfig& cfg = ode::OdeConfig::latent(),
                         ode::GradMode mode = ode::GradMode::discretize, ode::SolveStats* stats = nullptr);

/// Value-level canonicalization: per-frame T-NOCS predictions and the code.
struct Canonicalized {
  TNocsSequence pred;
  LatentCode code;
};
Canonicalized canonicalize(const Encoder& encoder, const ParamSet& params, const RawSequence& seq);

}  // namespace caspr::enc
