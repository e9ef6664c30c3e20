// Command-line driver: dataset generation, training, evaluation and the
// reconstruction experiments.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "acceptance_checks.hpp"
#include "caspr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace caspr;

namespace {

// CASPR_SEED replaces any seed given on the command line.
std::uint64_t master_seed(std::uint64_t given) {
  if (const char* env = std::getenv("CASPR_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw Error(std::string("CASPR_SEED is not an unsigned integer: ") + env);
    }
  }
  return given;
}

std::vector<double> parse_times(const std::string& spec) {
  std::vector<double> out;
  if (spec.rfind("grid:", 0) == 0) {
    const std::size_t n = std::stoul(spec.substr(5));
    if (n == 0) throw Error("grid needs at least one time");
    for (std::size_t i = 0; i < n; ++i) out.push_back(n == 1 ? 0.0 : static_cast<double>(i) / (n - 1));
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw Error("no query times given");
  return out;
}

RawSequence load_input(const fs::path& path, std::size_t points, std::uint64_t seed) {
  const synth::SequenceRecord rec = synth::read_sequence(path);
  std::vector<std::size_t> all(rec.frame_count());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  return synth::select_view(rec, all, points, seed).raw;
}

void write_report(const geo::MetricReport& report, const fs::path& out, const std::string& name) {
  report.write_table(std::cout);
  if (out.empty()) return;
  fs::create_directories(out);
  std::ofstream os(out / name);
  report.write(os);
  std::cout << "records written to " << (out / name).string() << '\n';
}

void print_reconstruction(const pipe::Reconstruction& rec, const fs::path& out) {
  for (std::size_t k = 0; k < rec.times.size(); ++k)
    std::cout << "t=" << rec.times[k] << " points=" << rec.clouds[k].rows() << '\n';
  if (!out.empty()) {
    pipe::export_reconstruction(out, rec);
    std::cout << "clouds and trajectories written to " << out.string() << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Canonical spatiotemporal point cloud representations"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string kind = "box_composite";
  std::size_t count = 200, gen_points = 4096;
  std::uint64_t seed = 0;
  fs::path out;
  bool directional = false, deforming = false, single_shape = false;
  gen->add_option("--kind", kind, "box_composite | superellipsoid | winged | legged");
  gen->add_option("--count", count, "number of instances");
  gen->add_option("--seed", seed, "master seed");
  gen->add_option("--points", gen_points, "points per frame");
  gen->add_option("--out", out, "dataset root")->required();
  gen->add_flag("--directional", directional, "rotate the camera in one direction only");
  gen->add_flag("--deforming", deforming, "non-rigid sequences without camera motion");
  gen->add_flag("--single-shape", single_shape, "one shape for every instance, camera at fixed distance and height");

  auto* train = app.add_subcommand("train", "train a model");
  fs::path config, data;
  train->add_option("--config", config, "key = value configuration file");
  train->add_option("--data", data, "dataset root")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  fs::path ckpt;
  std::string protocol = "all", split = "test", baseline = "none";
  std::size_t points = 2048;
  eval->add_option("--ckpt", ckpt, "checkpoint");
  eval->add_option("--data", data, "dataset root")->required();
  eval->add_option("--protocol", protocol, "all | three | comma-separated observed frames");
  eval->add_option("--split", split, "dataset split");
  eval->add_option("--points", points, "points per frame");
  eval->add_option("--baseline", baseline, "none | copy | oracle");
  eval->add_option("--seed", seed, "evaluation seed");
  eval->add_option("--out", out, "report directory");

  auto* recon = app.add_subcommand("recon", "reconstruct a sequence at query times");
  fs::path seq, seq_b;
  std::string times = "grid:10";
  std::size_t n = 2048;
  bool correspond = false;
  recon->add_option("--ckpt", ckpt, "checkpoint")->required();
  recon->add_option("--seq", seq, "sequence file")->required();
  recon->add_option("--times", times, "comma-separated canonical times or grid:N");
  recon->add_option("--n", n, "points per query time");
  recon->add_option("--points", points, "input points per frame");
  recon->add_flag("--correspond", correspond, "share noise across times");
  recon->add_option("--seed", seed, "sampling seed");
  recon->add_option("--out", out, "export directory");

  auto* pose = app.add_subcommand("pose", "pose estimation from predicted canonical points");
  pose->add_option("--ckpt", ckpt, "checkpoint")->required();
  pose->add_option("--data", data, "dataset root")->required();
  pose->add_option("--split", split, "dataset split");
  pose->add_option("--points", points, "points per frame");
  pose->add_option("--seed", seed, "evaluation seed");
  pose->add_option("--out", out, "report directory");

  auto* props = app.add_subcommand("props", "run the invariant suites");

  auto* arrow = app.add_subcommand("arrow", "forward and time-reversed evaluation");
  arrow->add_option("--ckpt", ckpt, "checkpoint")->required();
  arrow->add_option("--data", data, "dataset root")->required();
  arrow->add_option("--split", split, "dataset split");
  arrow->add_option("--points", points, "points per frame");
  arrow->add_option("--seed", seed, "evaluation seed");
  arrow->add_option("--out", out, "report directory");

  auto* transfer = app.add_subcommand("transfer", "static code of A with the motion of B");
  transfer->add_option("--ckpt", ckpt, "checkpoint")->required();
  transfer->add_option("--seq-a", seq, "shape sequence")->required();
  transfer->add_option("--seq-b", seq_b, "motion sequence")->required();
  transfer->add_option("--times", times, "comma-separated canonical times or grid:N");
  transfer->add_option("--n", n, "points per query time");
  transfer->add_option("--points", points, "input points per frame");
  transfer->add_flag("--correspond", correspond, "share noise across times");
  transfer->add_option("--seed", seed, "sampling seed");
  transfer->add_option("--out", out, "export directory");

  CLI11_PARSE(app, argc, argv);

  try {
    seed = master_seed(seed);
    if (*gen) {
      synth::DatasetOptions opts;
      opts.kind = synth::parse_kind(kind);
      opts.count = count;
      opts.seed = seed;
      opts.sequence.n_points = gen_points;
      opts.directional = directional;
      opts.deforming = deforming;
      opts.single_shape = single_shape;
      synth::write_dataset(out, synth::generate_dataset(opts));
      std::cout << "wrote " << count << " sequences to " << out.string() << '\n';
    } else if (*train) {
      pipe::TrainConfig cfg = config.empty() ? pipe::TrainConfig{} : pipe::TrainConfig::load(config);
      if (std::getenv("CASPR_SEED")) cfg.seed = seed;
      cfg.validate();
      const auto train_set = synth::read_split(data, "train");
      const auto val_set = synth::read_split(data, "val");
      pipe::Model model = pipe::Model::create(cfg, cfg.seed);
      pipe::TrainOptions opts;
      opts.out_dir = out;
      opts.log = &std::cout;
      const pipe::TrainResult r = pipe::train(model, train_set, val_set, opts);
      std::cout << "steps " << r.steps << " epochs " << r.epochs << " best epoch " << r.best_epoch << " best val "
                << r.best_val << (r.diverged ? " (diverged)" : "") << '\n';
      return r.diverged ? 2 : 0;
    } else if (*eval) {
      const auto records = synth::read_split(data, split);
      pipe::EvalProtocol p = pipe::EvalProtocol::parse(protocol, points);
      p.seed = seed;
      geo::MetricReport report;
      if (baseline == "copy") {
        report = pipe::evaluate_copy_baseline(records, p);
      } else if (baseline == "oracle") {
        report = pipe::evaluate_oracle(records, p);
      } else if (baseline == "none") {
        if (ckpt.empty()) throw Error("eval needs --ckpt unless a baseline is chosen");
        report = pipe::evaluate(pipe::Model::load(ckpt), records, p);
      } else {
        throw Error("unknown baseline: " + baseline);
      }
      write_report(report, out, "eval_" + p.name + ".txt");
    } else if (*recon) {
      const pipe::Model model = pipe::Model::load(ckpt);
      print_reconstruction(
          pipe::reconstruct(model, load_input(seq, points, seed), parse_times(times), n, correspond, seed), out);
    } else if (*pose) {
      const pipe::Model model = pipe::Model::load(ckpt);
      write_report(pipe::evaluate_pose(model, synth::read_split(data, split), points, seed), out, "pose.txt");
    } else if (*props) {
      bool ok = true;
      for (int c = 1; c <= 6; ++c) {
        const accept::Outcome o = accept::run(c, {});
        std::cout << accept::format(o) << '\n';
        ok = ok && o.pass;
      }
      return ok ? 0 : 1;
    } else if (*arrow) {
      const pipe::Model model = pipe::Model::load(ckpt);
      pipe::EvalProtocol p = pipe::EvalProtocol::all_frames(points);
      p.seed = seed;
      const pipe::ArrowReport r = pipe::arrow_of_time(model, synth::read_split(data, split), p);
      std::cout << "forward\n";
      write_report(r.forward, out, "arrow_forward.txt");
      std::cout << "reversed\n";
      write_report(r.reversed, out, "arrow_reversed.txt");
      const double fwd = r.forward.summary(pipe::kEmdObserved).median;
      std::cout << "median EMD reversed / forward = " << r.reversed.summary(pipe::kEmdObserved).median / fwd << '\n';
    } else if (*transfer) {
      const pipe::Model model = pipe::Model::load(ckpt);
      print_reconstruction(pipe::transfer_motion(model, load_input(seq, points, seed), load_input(seq_b, points, seed),
                                                 parse_times(times), n, correspond, seed),
                           out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
