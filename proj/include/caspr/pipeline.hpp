#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "caspr/encoder.hpp"
#include "caspr/flow.hpp"
#include "caspr/geometry.hpp"
#include "caspr/synthdata.hpp"

namespace caspr::pipe {

/// Training and model hyperparameters. Read from flat "key = value" text;
/// '#' starts a comment. Keys are the field names below.
struct TrainConfig {
  double w_r = 0.01;
  double w_c = 100.0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t epochs = 50;
  std::size_t frames = 5;
  std::size_t points = 1024;
  // Points per frame scored by the reconstruction term (0 = all).
  std::size_t flow_points = 0;
  // Stops after this many optimizer steps when nonzero.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;

  std::size_t enc_point_dim = 64;
  std::size_t enc_global_dim = 256;
  std::size_t enc_local_dim = 64;
  std::size_t enc_fusion_hidden = 256;
  std::size_t enc_groups = 4;
  std::size_t enc_centroids = 128;
  std::size_t st_dim = 96;
  std::size_t dyn_dim = 32;
  std::size_t ode_hidden = 128;
  std::size_t ode_layers = 3;
  std::size_t cnf_hidden = 64;
  std::size_t cnf_layers = 3;

  double latent_rtol = 1e-3;
  double latent_atol = 1e-4;
  double cnf_rtol = 1e-5;
  double cnf_atol = 1e-5;
  std::string grad_mode = "discretize";  // or "adjoint"

  // Validation sequences scored per epoch (0 = all) and their point count.
  std::size_t val_sequences = 0;
  std::size_t val_points = 1024;

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;
  static TrainConfig parse(std::istream& is);
  static TrainConfig load(const std::filesystem::path& path);

  enc::EncoderConfig encoder() const;
  enc::LatentOdeConfig latent_ode() const;
  flow::FlowConfig flow() const;
  ode::OdeConfig latent_solver() const;
  ode::OdeConfig cnf_solver() const;
  ode::GradMode gradient_mode() const;
};

/// Encoder, latent dynamics and flow with their parameters. Checkpoints hold
/// the parameters plus "meta.*" entries recording the architecture.
class Model {
 public:
  explicit Model(const TrainConfig& cfg);
  static Model create(const TrainConfig& cfg, std::uint64_t seed);

  const TrainConfig& config() const noexcept { return cfg_; }
  const enc::Encoder& encoder() const noexcept { return encoder_; }
  const std::shared_ptr<const enc::LatentDynamics>& dynamics() const noexcept { return dyn_; }
  const flow::FlowModel& flow() const noexcept { return flow_; }
  flow::FlowOptions flow_options() const;
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  TrainConfig cfg_;
  enc::Encoder encoder_;
  std::shared_ptr<const enc::LatentDynamics> dyn_;
  flow::FlowModel flow_;
  ParamSet params_;
};

struct LossTerms {
  Var total;
  Var recon;  // L_r: negative log-likelihood summed over points and frames
  Var canon;  // L_c: L1 T-NOCS error summed over points and coordinates
  ode::SolveStats latent_stats;
  ode::SolveStats flow_stats;
};

/// Objective for one sequence with ground truth. The flow is conditioned at
/// each frame's ground-truth canonical time.
LossTerms sequence_loss(Tape& tape, const Model& model, const BoundParams& params, const RawSequence& raw,
                        const TNocsSequence& gt);

/// Mean of per-sequence losses (no gradients).
struct LossValues {
  double total = 0.0, recon = 0.0, canon = 0.0;
};
LossValues evaluate_loss(const Model& model, const std::vector<synth::TrainingView>& views);

class Adam {
 public:
  Adam(const ParamSet& params, double lr, double beta1, double beta2, double eps);
  void step(ParamSet& params, const ParamSet& grads);
  long steps() const noexcept { return t_; }

 private:
  ParamSet m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

struct TrainResult {
  std::size_t steps = 0;
  std::size_t epochs = 0;
  double best_val = 0.0;
  std::size_t best_epoch = 0;
  bool diverged = false;
  std::vector<double> first_epoch_losses;
};

struct TrainOptions {
  // Output directory for best.ckpt, last.ckpt and train_log.jsonl; empty
  // keeps everything in memory.
  std::filesystem::path out_dir;
  std::ostream* log = nullptr;  // line-delimited JSON records, also written to the file
  std::function<void(const std::string&)> progress;
};

/// Adam over random training views; after every epoch the validation loss
/// selects the best parameters, which are left in `model` on return.
TrainResult train(Model& model, const std::vector<synth::SequenceRecord>& train_set,
                  const std::vector<synth::SequenceRecord>& val_set, const TrainOptions& opts = {});

struct EvalProtocol {
  std::string name = "all";
  std::vector<std::size_t> observed;  // empty = every frame
  std::size_t points = 2048;
  std::uint64_t seed = 0;

  static EvalProtocol all_frames(std::size_t points = 2048);
  // First, middle (index 4 of 10) and last frame.
  static EvalProtocol three_observed(std::size_t points = 2048);
  static EvalProtocol parse(const std::string& spec, std::size_t points = 2048);
  std::vector<std::size_t> observed_frames(std::size_t K) const;
};

// Metric names in evaluation reports.
inline constexpr const char* kCanonSpatial = "canon_spatial";
inline constexpr const char* kCanonTime = "canon_time";
inline constexpr const char* kCdObserved = "cd_observed";
inline constexpr const char* kEmdObserved = "emd_observed";
inline constexpr const char* kCdUnobserved = "cd_unobserved";
inline constexpr const char* kEmdUnobserved = "emd_unobserved";
// Reported CD/EMD are the raw metrics times 1000.
inline constexpr double kMetricScale = 1000.0;

/// Per-frame canonicalization errors on observed frames and CD/EMD between
/// flow samples and ground-truth canonical points at every frame.
geo::MetricReport evaluate(const Model& model, const std::vector<synth::SequenceRecord>& records,
                           const EvalProtocol& protocol);
/// Same bookkeeping with ground truth standing in for every prediction.
geo::MetricReport evaluate_oracle(const std::vector<synth::SequenceRecord>& records, const EvalProtocol& protocol);
/// Baseline that copies the raw input points as the canonical prediction.
geo::MetricReport evaluate_copy_baseline(const std::vector<synth::SequenceRecord>& records,
                                         const EvalProtocol& protocol);

struct Reconstruction {
  std::vector<double> times;
  std::vector<Tensor> clouds;                     // n x 3 per time
  std::vector<std::vector<std::size_t>> noise_ids;  // per time, per point
};

/// Flow samples at each query time. With `correspond` every time reuses the
/// same noise, so point i at every time has noise id i.
Reconstruction reconstruct(const Model& model, const RawSequence& seq, const std::vector<double>& times,
                           std::size_t n, bool correspond, std::uint64_t seed);
/// Static code of A with the dynamics of B.
Reconstruction transfer_motion(const Model& model, const RawSequence& a, const RawSequence& b,
                               const std::vector<double>& times, std::size_t n, bool correspond, std::uint64_t seed);

/// One PLY per time ("cloud_<k>.ply") and trajectories.txt with lines
/// "<noise id> <time index> <time> <x> <y> <z>".
void export_reconstruction(const std::filesystem::path& dir, const Reconstruction& rec);
Reconstruction read_trajectories(const std::filesystem::path& path);

struct ArrowReport {
  geo::MetricReport forward;
  geo::MetricReport reversed;
};
ArrowReport arrow_of_time(const Model& model, const std::vector<synth::SequenceRecord>& records,
                          const EvalProtocol& protocol);

/// RANSAC similarity fit from raw points to predicted canonical points per
/// frame, scored against the stored poses.
geo::MetricReport evaluate_pose(const Model& model, const std::vector<synth::SequenceRecord>& records,
                                std::size_t points, std::uint64_t seed);

/// Label propagation from `source` canonical points to `target` canonical points.
struct LabelScore {
  double accuracy = 0.0;        // over all target points, unknown counts as wrong
  double known_accuracy = 0.0;  // over points that received a label
  double majority = 0.0;        // most frequent target label fraction
  std::size_t known = 0;
};
LabelScore score_labels(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace caspr::pipe
