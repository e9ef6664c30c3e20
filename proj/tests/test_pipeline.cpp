#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "caspr/ops.hpp"
#include "caspr/pipeline.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace caspr;
using namespace caspr::pipe;
using caspr::testing::max_abs_diff;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.enc_point_dim = 8;
  c.enc_global_dim = 16;
  c.enc_local_dim = 8;
  c.enc_fusion_hidden = 8;
  c.enc_groups = 2;
  c.enc_centroids = 6;
  c.st_dim = 5;
  c.dyn_dim = 3;
  c.ode_hidden = 8;
  c.ode_layers = 1;
  c.cnf_hidden = 8;
  c.cnf_layers = 1;
  c.frames = 2;
  c.points = 8;
  c.val_points = 8;
  c.batch_size = 2;
  c.epochs = 1;
  c.cnf_rtol = 1e-7;
  c.cnf_atol = 1e-7;
  return c;
}

std::vector<synth::SequenceRecord> small_dataset(std::size_t count, std::uint64_t seed, std::size_t points = 64) {
  synth::DatasetOptions o;
  o.count = count;
  o.seed = seed;
  o.sequence.n_points = points;
  return synth::generate_dataset(o);
}

// Random nonzero values for every parameter, including the zero-initialized
// last flow layer.
void randomize(ParamSet& params, std::uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params.value(i).size(); ++j) params.value(i)[j] += u(rng);
}

double scalar(const Var& v) { return v.value()[0]; }

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("caspr_pipeline_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config text round trip and errors") {
  TrainConfig c = tiny_config();
  c.w_r = 0.125;
  c.grad_mode = "adjoint";
  c.seed = 77;
  std::istringstream is(c.to_text() + "# trailing comment\n\n");
  const TrainConfig back = TrainConfig::parse(is);
  CHECK(back.to_text() == c.to_text());
  CHECK(back.gradient_mode() == ode::GradMode::adjoint);

  TrainConfig d;
  CHECK(d.w_r == 0.01);
  CHECK(d.w_c == 100.0);
  CHECK(d.lr == 1e-4);
  CHECK(d.frames == 5);
  CHECK(d.points == 1024);
  CHECK_THROWS_AS(d.set("nope", "1"), Error);
  CHECK_THROWS_AS(d.set("points", "-3"), Error);
  CHECK_THROWS_AS(d.set("lr", "fast"), Error);
  std::istringstream bad("grad_mode = sideways\n");
  CHECK_THROWS_AS(TrainConfig::parse(bad), Error);
}

TEST_CASE("checkpoint round trip keeps architecture and parameters") {
  const TrainConfig c = tiny_config();
  Model m = Model::create(c, 3);
  randomize(m.params(), 4);
  const auto dir = temp_dir("ckpt");
  m.save(dir / "m.ckpt");
  const Model back = Model::load(dir / "m.ckpt");
  CHECK(back.config().to_text() == c.to_text());
  REQUIRE(back.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params().name(i) == m.params().name(i));
    CHECK(max_abs_diff(back.params().value(i), m.params().value(i)) == 0.0);
  }
}

TEST_CASE("loss terms: perfect canonicalization and identity flow") {
  const TrainConfig c = tiny_config();
  const Model m = Model::create(c, 1);
  const auto data = small_dataset(1, 5);
  const synth::TrainingView view = synth::subsample_training_view(data[0], 2, 8, 9);

  Tape tape(false);
  BoundParams bound(tape, m.params(), false);
  const LossTerms t = sequence_loss(tape, m, bound, view.raw, view.gt);
  CHECK(scalar(t.total) == doctest::Approx(c.w_r * scalar(t.recon) + c.w_c * scalar(t.canon)).epsilon(1e-15));

  // Untrained flow is the identity: L_r is the summed standard normal NLL.
  double nll = 0.0;
  for (std::size_t k = 0; k < view.gt.frames.size(); ++k) {
    const Tensor x = view.gt.spatial(k);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < 3; ++j) sq += x.at(i, j) * x.at(i, j);
      nll += 0.5 * sq + 1.5 * std::log(2.0 * std::numbers::pi);
    }
  }
  CHECK(scalar(t.recon) == doctest::Approx(nll).epsilon(1e-9));

  // L_c against the encoder's own prediction is zero (one frame, so the
  // predicted time is a valid query).
  const synth::TrainingView one = synth::subsample_training_view(data[0], 1, 8, 9);
  const enc::Canonicalized pred = enc::canonicalize(m.encoder(), m.params(), one.raw);
  Tape tape2(false);
  BoundParams bound2(tape2, m.params(), false);
  const LossTerms t2 = sequence_loss(tape2, m, bound2, one.raw, pred.pred);
  CHECK(scalar(t2.canon) < 1e-12);
}

TEST_CASE("loss gradient matches finite differences on a toy batch") {
  TrainConfig c = tiny_config();
  c.w_r = 0.5;
  c.w_c = 2.0;
  c.latent_rtol = c.latent_atol = 1e-9;
  c.cnf_rtol = c.cnf_atol = 1e-9;
  Model m = Model::create(c, 11);
  randomize(m.params(), 12, 0.2);
  const auto data = small_dataset(1, 6);
  const synth::TrainingView view = synth::subsample_training_view(data[0], 2, 8, 13);
  const ScalarFn fn = [&](Tape& tape, const BoundParams& p) {
    return sequence_loss(tape, m, p, view.raw, view.gt).total;
  };
  ParamSet params = m.params();
  const GradCheckResult r = grad_check(fn, params, {1e-5, 1e-6});
  INFO(r.worst_param, " analytic ", r.analytic, " numeric ", r.numeric);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("zero reconstruction weight leaves the flow untouched") {
  TrainConfig c = tiny_config();
  c.w_r = 0.0;
  Model m = Model::create(c, 2);
  randomize(m.params(), 3, 0.2);
  const auto data = small_dataset(1, 7);
  const synth::TrainingView view = synth::subsample_training_view(data[0], 2, 8, 1);
  Tape tape;
  BoundParams bound(tape, m.params());
  const LossTerms t = sequence_loss(tape, m, bound, view.raw, view.gt);
  tape.backward(t.total);
  const ParamSet g = bound.gradients();
  double flow_norm = 0.0, encoder_norm = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < g.value(i).size(); ++j) s += std::abs(g.value(i)[j]);
    (g.name(i).rfind("cnf.", 0) == 0 ? flow_norm : encoder_norm) += s;
  }
  CHECK(flow_norm == 0.0);
  CHECK(encoder_norm > 0.0);
}

TEST_CASE("Adam first step moves every parameter by the learning rate") {
  ParamSet p;
  p.add("a", Tensor::zeros(1, 3));
  ParamSet g = p.zeros_like();
  g.value(0)[0] = 2.0;
  g.value(0)[1] = -1e-3;
  Adam adam(p, 0.1, 0.9, 0.999, 1e-12);
  adam.step(p, g);
  CHECK(p.value(0)[0] == doctest::Approx(-0.1).epsilon(1e-9));
  CHECK(p.value(0)[1] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(p.value(0)[2] == 0.0);
  CHECK(adam.steps() == 1);
}

TEST_CASE("training is deterministic and logs epochs") {
  TrainConfig c = tiny_config();
  c.seed = 21;
  c.epochs = 2;
  const auto data = small_dataset(10, 8);
  std::vector<synth::SequenceRecord> train_set, val_set;
  for (const auto& r : data) (r.split == "val" ? val_set : train_set).push_back(r);
  std::vector<double> first;
  for (int run = 0; run < 2; ++run) {
    Model m = Model::create(c, 5);
    const auto dir = temp_dir("train" + std::to_string(run));
    TrainOptions opts;
    opts.out_dir = dir;
    const TrainResult r = train(m, train_set, val_set, opts);
    CHECK_FALSE(r.diverged);
    CHECK(r.epochs == 2);
    CHECK(std::filesystem::exists(dir / "best.ckpt"));
    CHECK(std::filesystem::exists(dir / "last.ckpt"));
    std::ifstream log(dir / "train_log.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) {
      ++lines;
      CHECK(line.find("\"val_loss\"") != std::string::npos);
      CHECK(line.find("\"nfe_flow\"") != std::string::npos);
    }
    CHECK(lines == 2);
    if (run == 0) {
      first = r.first_epoch_losses;
    } else {
      REQUIRE(first.size() == r.first_epoch_losses.size());
      for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i] == r.first_epoch_losses[i]);
    }
  }
}

TEST_CASE("single-sequence overfit reduces the canonicalization loss tenfold") {
  TrainConfig c = tiny_config();
  c.lr = 1e-2;
  c.epochs = 500;
  c.batch_size = 1;
  c.points = 32;
  c.flow_points = 4;
  c.cnf_rtol = c.cnf_atol = 1e-5;
  c.seed = 4;
  const auto data = small_dataset(1, 9, 32);
  Model m = Model::create(c, 6);
  const std::vector<synth::TrainingView> view = {synth::subsample_training_view(data[0], 2, 32, 0)};
  const double before = evaluate_loss(m, view).canon;
  // Fixed view: every step sees the same two frames and points.
  synth::SequenceRecord fixed = data[0];
  fixed.world = {fixed.world[view[0].frames[0]], fixed.world[view[0].frames[1]]};
  fixed.nocs = {fixed.nocs[view[0].frames[0]], fixed.nocs[view[0].frames[1]]};
  fixed.labels = {fixed.labels[view[0].frames[0]], fixed.labels[view[0].frames[1]]};
  fixed.poses = {fixed.poses[view[0].frames[0]], fixed.poses[view[0].frames[1]]};
  fixed.raw_times = {fixed.raw_times[view[0].frames[0]], fixed.raw_times[view[0].frames[1]]};
  fixed.canon_times = {fixed.canon_times[view[0].frames[0]], fixed.canon_times[view[0].frames[1]]};
  const TrainResult r = train(m, {fixed}, {});
  CHECK(r.steps == 500);
  const double after = evaluate_loss(m, {synth::subsample_training_view(fixed, 2, 32, 0)}).canon;
  INFO("L_c before ", before, " after ", after);
  CHECK(after * 10.0 <= before);
}

TEST_CASE("protocols: observed patterns and oracle evaluation") {
  CHECK(EvalProtocol::three_observed().observed_frames(10) == std::vector<std::size_t>{0, 4, 9});
  CHECK(EvalProtocol::all_frames().observed_frames(3) == std::vector<std::size_t>{0, 1, 2});
  CHECK(EvalProtocol::parse("2,0,2").observed_frames(3) == std::vector<std::size_t>{0, 2});
  CHECK_THROWS_AS(EvalProtocol::parse("1,x"), Error);
  CHECK_THROWS_AS(EvalProtocol::parse("12").observed_frames(10), Error);

  const auto data = small_dataset(2, 10, 48);
  const geo::MetricReport all = evaluate_oracle(data, EvalProtocol::all_frames(32));
  CHECK(all.values(kCdObserved).size() == 20);
  CHECK(all.values(kCdUnobserved).empty());
  for (const char* name : {kCanonSpatial, kCanonTime, kCdObserved, kEmdObserved})
    for (double v : all.values(name)) CHECK(v == 0.0);

  const geo::MetricReport three = evaluate_oracle(data, EvalProtocol::three_observed(32));
  CHECK(three.values(kCdObserved).size() == 6);
  CHECK(three.values(kCdUnobserved).size() == 14);
  CHECK(three.values(kCanonSpatial).size() == 6);

  const geo::MetricReport copy = evaluate_copy_baseline(data, EvalProtocol::all_frames(32));
  CHECK(copy.values(kCanonSpatial).size() == 20);
  CHECK(copy.values(kCdObserved).empty());
  for (double v : copy.values(kCanonSpatial)) CHECK(v > 0.0);
}

TEST_CASE("model evaluation is deterministic and arrow flip is an involution") {
  TrainConfig c = tiny_config();
  c.cnf_rtol = c.cnf_atol = 1e-5;
  Model m = Model::create(c, 8);
  randomize(m.params(), 9, 0.2);
  const auto data = small_dataset(2, 11, 40);
  EvalProtocol p = EvalProtocol::three_observed(24);
  const geo::MetricReport a = evaluate(m, data, p);
  const geo::MetricReport b = evaluate(m, data, p);
  CHECK(a.values(kEmdUnobserved) == b.values(kEmdUnobserved));
  CHECK(a.values(kCanonSpatial) == b.values(kCanonSpatial));

  const ArrowReport arrow = arrow_of_time(m, data, p);
  for (double v : arrow.reversed.values(kEmdObserved)) CHECK(std::isfinite(v));
  std::vector<synth::SequenceRecord> reversed;
  for (const auto& r : data) reversed.push_back(synth::time_reversed(r));
  const ArrowReport twice = arrow_of_time(m, reversed, p);
  CHECK(twice.reversed.values(kEmdObserved) == arrow.forward.values(kEmdObserved));
  CHECK(twice.reversed.values(kCanonSpatial) == arrow.forward.values(kCanonSpatial));
}

TEST_CASE("reconstruction bookkeeping, export and transfer") {
  TrainConfig c = tiny_config();
  c.cnf_rtol = c.cnf_atol = 1e-6;
  Model m = Model::create(c, 12);
  randomize(m.params(), 13, 0.2);
  const auto data = small_dataset(2, 12, 40);
  const RawSequence a = data[0].raw();
  const RawSequence b = data[1].raw();
  const std::vector<double> times = {0.0, 0.25, 1.0};

  const Reconstruction empty = reconstruct(m, a, times, 0, true, 1);
  REQUIRE(empty.clouds.size() == 3);
  for (const Tensor& cloud : empty.clouds) CHECK(cloud.rows() == 0);
  const auto dir0 = temp_dir("empty");
  export_reconstruction(dir0, empty);
  CHECK(std::filesystem::exists(dir0 / "cloud_2.ply"));
  CHECK(read_trajectories(dir0 / "trajectories.txt").clouds.empty());

  const Reconstruction rec = reconstruct(m, a, times, 16, true, 5);
  for (std::size_t k = 0; k < times.size(); ++k) {
    REQUIRE(rec.clouds[k].rows() == 16);
    for (std::size_t i = 0; i < 16; ++i) CHECK(rec.noise_ids[k][i] == i);
  }
  const auto dir = temp_dir("recon");
  export_reconstruction(dir, rec);
  const Reconstruction back = read_trajectories(dir / "trajectories.txt");
  REQUIRE(back.clouds.size() == 3);
  for (std::size_t k = 0; k < times.size(); ++k) {
    CHECK(back.times[k] == times[k]);
    CHECK(back.noise_ids[k] == rec.noise_ids[k]);
    CHECK(max_abs_diff(back.clouds[k], rec.clouds[k]) == 0.0);
  }

  const Reconstruction loose = reconstruct(m, a, times, 16, false, 5);
  CHECK(loose.noise_ids[1][0] == 16);
  CHECK(max_abs_diff(loose.clouds[0], rec.clouds[0]) > 0.0);

  const Reconstruction same = transfer_motion(m, a, a, times, 16, true, 5);
  for (std::size_t k = 0; k < times.size(); ++k) CHECK(max_abs_diff(same.clouds[k], rec.clouds[k]) == 0.0);
  const Reconstruction mixed = transfer_motion(m, a, b, times, 16, true, 5);
  CHECK(mixed.clouds[0].cols() == 3);
  CHECK(max_abs_diff(mixed.clouds[2], rec.clouds[2]) > 0.0);
}

TEST_CASE("label scores") {
  const LabelScore s = score_labels({0, 1, geo::kUnknownLabel, 1}, {0, 0, 1, 1});
  CHECK(s.accuracy == doctest::Approx(0.5));
  CHECK(s.known == 3);
  CHECK(s.known_accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(s.majority == doctest::Approx(0.5));
  CHECK_THROWS_AS(score_labels({0}, {0, 1}), ShapeError);
}
