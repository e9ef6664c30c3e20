#include "caspr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <variant>

#include "caspr/ops.hpp"
#include "json.hpp"

namespace caspr::pipe {
namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>);
using Field = std::variant<double*, std::size_t*, std::string*>;

std::vector<std::pair<std::string, Field>> fields(TrainConfig& c) {
  return {
      {"w_r", &c.w_r},
      {"w_c", &c.w_c},
      {"lr", &c.lr},
      {"beta1", &c.beta1},
      {"beta2", &c.beta2},
      {"adam_eps", &c.adam_eps},
      {"batch_size", &c.batch_size},
      {"epochs", &c.epochs},
      {"frames", &c.frames},
      {"points", &c.points},
      {"flow_points", &c.flow_points},
      {"max_steps", &c.max_steps},
      {"seed", &c.seed},
      {"enc_point_dim", &c.enc_point_dim},
      {"enc_global_dim", &c.enc_global_dim},
      {"enc_local_dim", &c.enc_local_dim},
      {"enc_fusion_hidden", &c.enc_fusion_hidden},
      {"enc_groups", &c.enc_groups},
      {"enc_centroids", &c.enc_centroids},
      {"st_dim", &c.st_dim},
      {"dyn_dim", &c.dyn_dim},
      {"ode_hidden", &c.ode_hidden},
      {"ode_layers", &c.ode_layers},
      {"cnf_hidden", &c.cnf_hidden},
      {"cnf_layers", &c.cnf_layers},
      {"latent_rtol", &c.latent_rtol},
      {"latent_atol", &c.latent_atol},
      {"cnf_rtol", &c.cnf_rtol},
      {"cnf_atol", &c.cnf_atol},
      {"grad_mode", &c.grad_mode},
      {"val_sequences", &c.val_sequences},
      {"val_points", &c.val_points},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool finite(double v) { return std::isfinite(v); }

constexpr const char* kMetaConfig = "meta.config";

Tensor encode_text(const std::string& text) {
  Tensor t = Tensor::zeros(1, text.size());
  for (std::size_t i = 0; i < text.size(); ++i) t[i] = static_cast<unsigned char>(text[i]);
  return t;
}

std::string decode_text(const Tensor& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) s[i] = static_cast<char>(static_cast<int>(t[i]));
  return s;
}

std::vector<double> frame_times(const TNocsSequence& gt) {
  std::vector<double> times;
  for (const Tensor& f : gt.frames) {
    if (f.rows() == 0) throw Error("ground-truth frame is empty");
    times.push_back(f.at(0, 3));
  }
  return times;
}

Tensor first_rows(const Tensor& t, std::size_t n) {
  if (n == 0 || n >= t.rows()) return t;
  Tensor out = Tensor::zeros(n, t.cols());
  std::copy(t.data(), t.data() + n * t.cols(), out.data());
  return out;
}

Tensor row_of(const Tensor& t, std::size_t r) {
  Tensor out = Tensor::zeros(1, t.cols());
  std::copy(t.data() + r * t.cols(), t.data() + (r + 1) * t.cols(), out.data());
  return out;
}

// Conditioning codes [z_st, z_t] at each time from a static and a dynamic code.
Tensor codes_for(const Model& model, const Tensor& z_st, const Tensor& z_dyn, const std::vector<double>& times) {
  const auto zt = enc::advect(*model.dynamics(), model.params(), z_dyn, times, model.config().latent_solver());
  const std::size_t st = z_st.cols();
  Tensor codes = Tensor::zeros(times.size(), st + z_dyn.cols());
  for (std::size_t k = 0; k < times.size(); ++k) {
    for (std::size_t j = 0; j < st; ++j) codes.at(k, j) = z_st[j];
    for (std::size_t j = 0; j < z_dyn.cols(); ++j) codes.at(k, st + j) = zt[k][j];
  }
  return codes;
}

Reconstruction sample_codes(const Model& model, const Tensor& codes, const std::vector<double>& times, std::size_t n,
                            bool correspond, std::uint64_t seed) {
  Reconstruction rec;
  rec.times = times;
  const Tensor shared = flow::gaussian_noise(n, seed);
  for (std::size_t k = 0; k < times.size(); ++k) {
    const Tensor noise = correspond ? shared : flow::gaussian_noise(n, synth::mix_seed(seed, k + 1));
    rec.clouds.push_back(flow::flow_from_noise(model.flow(), model.params(), row_of(codes, k), noise,
                                               model.flow_options()));
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), correspond ? 0 : k * n);
    rec.noise_ids.push_back(std::move(ids));
  }
  return rec;
}

enum class EvalMode { model, oracle, copy };

geo::MetricReport evaluate_impl(const Model* model, const std::vector<synth::SequenceRecord>& records,
                                const EvalProtocol& protocol, EvalMode mode) {
  geo::MetricReport report;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const synth::SequenceRecord& rec = records[r];
    const std::size_t K = rec.frame_count();
    const auto observed = protocol.observed_frames(K);
    const synth::TrainingView view =
        synth::select_view(rec, observed, protocol.points, synth::sequence_seed(protocol.seed, r, 1));

    TNocsSequence pred;
    Tensor codes;
    if (mode == EvalMode::model) {
      const enc::Canonicalized c = enc::canonicalize(model->encoder(), model->params(), view.raw);
      pred = c.pred;
      codes = codes_for(*model, c.code.st, c.code.dyn, rec.canon_times);
    } else if (mode == EvalMode::oracle) {
      pred = view.gt;
    } else {
      for (const RawFrame& f : view.raw.frames) {
        Tensor p = Tensor::zeros(f.points.rows(), 4);
        for (std::size_t i = 0; i < p.rows(); ++i) {
          for (std::size_t c = 0; c < 3; ++c) p.at(i, c) = f.points.at(i, c);
          p.at(i, 3) = f.time;
        }
        pred.frames.push_back(std::move(p));
      }
    }
    const geo::CanonError err = geo::canonicalization_error(pred, view.gt);
    for (std::size_t j = 0; j < observed.size(); ++j) {
      report.add(rec.instance_id, static_cast<int>(observed[j]), kCanonSpatial, err.spatial[j]);
      report.add(rec.instance_id, static_cast<int>(observed[j]), kCanonTime, err.temporal[j]);
    }
    if (mode == EvalMode::copy) continue;

    std::vector<std::size_t> all(K);
    std::iota(all.begin(), all.end(), 0);
    const synth::TrainingView full =
        synth::select_view(rec, all, protocol.points, synth::sequence_seed(protocol.seed, r, 2));
    for (std::size_t k = 0; k < K; ++k) {
      const Tensor gt = full.gt.spatial(k);
      Tensor sample = gt;
      if (mode == EvalMode::model) {
        const Tensor noise = flow::gaussian_noise(gt.rows(), synth::sequence_seed(protocol.seed, r, 100 + k));
        sample = flow::flow_from_noise(model->flow(), model->params(), row_of(codes, k), noise, model->flow_options());
      }
      const bool seen = std::find(observed.begin(), observed.end(), k) != observed.end();
      report.add(rec.instance_id, static_cast<int>(k), seen ? kCdObserved : kCdUnobserved,
                 kMetricScale * geo::chamfer(sample, gt));
      report.add(rec.instance_id, static_cast<int>(k), seen ? kEmdObserved : kEmdUnobserved,
                 kMetricScale * geo::emd(sample, gt));
    }
  }
  return report;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (auto& [name, field] : fields(*this)) {
    if (name != key) continue;
    try {
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
              *p = value;
            } else if constexpr (std::is_same_v<T, double>) {
              std::size_t used = 0;
              *p = std::stod(value, &used);
              if (used != value.size()) throw std::invalid_argument(value);
            } else {
              if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
              std::size_t used = 0;
              *p = static_cast<T>(std::stoull(value, &used));
              if (used != value.size()) throw std::invalid_argument(value);
            }
          },
          field);
    } catch (const std::logic_error&) {
      throw Error("config: invalid value for " + key + ": '" + value + "'");
    }
    return;
  }
  throw Error("config: unknown key '" + key + "'");
}

void TrainConfig::validate() const {
  for (double v : {w_r, w_c, lr, adam_eps, latent_rtol, latent_atol, cnf_rtol, cnf_atol}) {
    if (!(v >= 0.0) || !finite(v)) throw Error("config: weights, rates and tolerances must be finite and >= 0");
  }
  if (!(lr > 0.0) || !(latent_rtol > 0) || !(latent_atol > 0) || !(cnf_rtol > 0) || !(cnf_atol > 0)) {
    throw Error("config: learning rate and tolerances must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error("config: Adam betas must be in [0, 1)");
  if (batch_size == 0 || frames == 0 || points == 0 || val_points == 0) {
    throw Error("config: batch size, frames and points must be positive");
  }
  if (grad_mode != "discretize" && grad_mode != "adjoint") throw Error("config: grad_mode must be discretize or adjoint");
  encoder().validate();
}

std::string TrainConfig::to_text() const {
  TrainConfig copy = *this;
  std::ostringstream os;
  os << std::setprecision(17);
  for (auto& [name, field] : fields(copy)) {
    os << name << " = ";
    std::visit([&](auto* p) { os << *p; }, field);
    os << '\n';
  }
  return os.str();
}

TrainConfig TrainConfig::parse(std::istream& is) {
  TrainConfig cfg;
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(number) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config file: " + path.string());
  return parse(is);
}

enc::EncoderConfig TrainConfig::encoder() const {
  enc::EncoderConfig e;
  e.point_dim = enc_point_dim;
  e.global_dim = enc_global_dim;
  e.local_dim = enc_local_dim;
  e.fusion_hidden = enc_fusion_hidden;
  e.groups = enc_groups;
  e.centroids = enc_centroids;
  e.st_dim = st_dim;
  e.dyn_dim = dyn_dim;
  return e;
}

enc::LatentOdeConfig TrainConfig::latent_ode() const {
  enc::LatentOdeConfig o;
  o.dim = dyn_dim;
  o.hidden = ode_hidden;
  o.hidden_layers = ode_layers;
  return o;
}

flow::FlowConfig TrainConfig::flow() const {
  flow::FlowConfig f;
  f.hidden = cnf_hidden;
  f.hidden_layers = cnf_layers;
  f.context_dim = st_dim + dyn_dim;
  return f;
}

ode::OdeConfig TrainConfig::latent_solver() const {
  ode::OdeConfig c;
  c.rtol = latent_rtol;
  c.atol = latent_atol;
  return c;
}

ode::OdeConfig TrainConfig::cnf_solver() const {
  ode::OdeConfig c;
  c.rtol = cnf_rtol;
  c.atol = cnf_atol;
  return c;
}

ode::GradMode TrainConfig::gradient_mode() const {
  return grad_mode == "adjoint" ? ode::GradMode::adjoint : ode::GradMode::discretize;
}

Model::Model(const TrainConfig& cfg)
    : cfg_(cfg),
      encoder_((cfg.validate(), cfg.encoder())),
      dyn_(std::make_shared<enc::LatentDynamics>(cfg.latent_ode())),
      flow_(flow::FlowModel::concat_squash(cfg.flow())) {}

Model Model::create(const TrainConfig& cfg, std::uint64_t seed) {
  Model m(cfg);
  std::mt19937_64 rng(seed);
  m.encoder_.init_params(m.params_, rng);
  m.dyn_->init_params(m.params_, rng);
  static_cast<const flow::ConcatSquashField&>(*m.flow_.field).init_params(m.params_, rng);
  return m;
}

flow::FlowOptions Model::flow_options() const {
  flow::FlowOptions o;
  o.ode = cfg_.cnf_solver();
  o.grad_mode = cfg_.gradient_mode();
  return o;
}

void Model::save(const std::filesystem::path& path) const {
  ParamSet all = params_;
  all.add(kMetaConfig, encode_text(cfg_.to_text()));
  save_checkpoint(path, all);
}

Model Model::load(const std::filesystem::path& path) {
  const ParamSet all = load_checkpoint(path);
  if (!all.contains(kMetaConfig)) throw Error("checkpoint has no model configuration: " + path.string());
  std::istringstream text(decode_text(all.at(kMetaConfig)));
  Model m = create(TrainConfig::parse(text), 0);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    const std::string& name = m.params_.name(i);
    if (!all.contains(name)) throw Error("checkpoint is missing parameter " + name);
    if (all.at(name).shape() != m.params_.value(i).shape()) throw ShapeError("checkpoint shape mismatch for " + name);
    m.params_.value(i) = all.at(name);
  }
  return m;
}

LossTerms sequence_loss(Tape& tape, const Model& model, const BoundParams& params, const RawSequence& raw,
                        const TNocsSequence& gt) {
  const TrainConfig& cfg = model.config();
  if (gt.frames.size() != raw.frames.size()) throw ShapeError("loss: ground truth and input frame counts differ");
  const std::vector<double> times = frame_times(gt);
  LossTerms terms;
  const enc::Representation rep = enc::represent(tape, model.encoder(), model.dynamics(), params, raw, times,
                                                 cfg.latent_solver(), cfg.gradient_mode(), &terms.latent_stats);
  Var target = tape.constant(stack_rows(gt.frames, 4));
  if (target.rows() != rep.encoded.tnocs.rows()) throw ShapeError("loss: ground truth is not aligned with the input");
  terms.canon = reduce_sum(abs(sub(rep.encoded.tnocs, target)));

  const flow::FlowBinding binding = flow::bind(tape, model.flow(), params);
  const flow::FlowOptions opts = model.flow_options();
  for (std::size_t k = 0; k < gt.frames.size(); ++k) {
    Var x = tape.constant(first_rows(gt.spatial(k), cfg.flow_points));
    Var ctx = slice(rep.codes, 0, k, k + 1);
    ode::SolveStats stats;
    Var nll = neg(reduce_sum(flow::logprob_on_tape(tape, binding, x, ctx, opts, &stats)));
    terms.flow_stats += stats;
    terms.recon = k == 0 ? nll : add(terms.recon, nll);
  }
  terms.total = add(scale(terms.recon, cfg.w_r), scale(terms.canon, cfg.w_c));
  return terms;
}

LossValues evaluate_loss(const Model& model, const std::vector<synth::TrainingView>& views) {
  LossValues sum;
  for (const auto& v : views) {
    Tape tape(false);
    BoundParams bound(tape, model.params(), false);
    const LossTerms t = sequence_loss(tape, model, bound, v.raw, v.gt);
    sum.total += t.total.value()[0];
    sum.recon += t.recon.value()[0];
    sum.canon += t.canon.value()[0];
  }
  if (!views.empty()) {
    const double n = static_cast<double>(views.size());
    sum.total /= n;
    sum.recon /= n;
    sum.canon /= n;
  }
  return sum;
}

Adam::Adam(const ParamSet& params, double lr, double beta1, double beta2, double eps)
    : m_(params.zeros_like()), v_(params.zeros_like()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamSet& params, const ParamSet& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params.value(i);
    const Tensor& g = grads.at(params.name(i));
    Tensor& m = m_.value(i);
    Tensor& v = v_.value(i);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

TrainResult train(Model& model, const std::vector<synth::SequenceRecord>& train_set,
                  const std::vector<synth::SequenceRecord>& val_set, const TrainOptions& opts) {
  const TrainConfig& cfg = model.config();
  if (train_set.empty()) throw Error("train: no training sequences");
  std::ofstream log_file;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir / "train_log.jsonl");
  }
  auto emit = [&](const nlohmann::json& j) {
    const std::string line = j.dump();
    if (log_file) log_file << line << '\n' << std::flush;
    if (opts.log) *opts.log << line << '\n' << std::flush;
  };

  std::vector<synth::TrainingView> val_views;
  const std::size_t n_val = cfg.val_sequences == 0 ? val_set.size() : std::min(cfg.val_sequences, val_set.size());
  for (std::size_t i = 0; i < n_val; ++i) {
    const std::size_t frames = std::min(cfg.frames, val_set[i].frame_count());
    val_views.push_back(synth::subsample_training_view(val_set[i], frames, cfg.val_points,
                                                       synth::sequence_seed(cfg.seed, i, 0xa11d)));
  }

  Adam adam(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  std::mt19937_64 rng(synth::mix_seed(cfg.seed, 0x7a1e));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  ParamSet best = model.params();
  const auto start = std::chrono::steady_clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  auto save = [&](const std::string& name, const ParamSet& params) {
    if (opts.out_dir.empty()) return;
    Model copy = model;
    copy.params() = params;
    copy.save(opts.out_dir / name);
  };

  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossValues epoch_sum;
    std::size_t epoch_items = 0;
    ode::SolveStats latent_nfe, flow_nfe;
    for (std::size_t b = 0; b < order.size() && !stop; b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      ParamSet grads = model.params().zeros_like();
      double batch_total = 0.0;
      bool bad = false;
      try {
        for (std::size_t i = b; i < end; ++i) {
          const synth::SequenceRecord& rec = train_set[order[i]];
          const std::size_t frames = std::min(cfg.frames, rec.frame_count());
          const synth::TrainingView view = synth::subsample_training_view(
              rec, frames, cfg.points, synth::sequence_seed(cfg.seed, epoch, order[i]));
          Tape tape;
          BoundParams bound(tape, model.params());
          LossTerms terms = sequence_loss(tape, model, bound, view.raw, view.gt);
          const double total = terms.total.value()[0];
          if (!finite(total)) {
            bad = true;
            break;
          }
          tape.backward(terms.total);
          grads.axpy(1.0 / static_cast<double>(end - b), bound.gradients());
          batch_total += total;
          epoch_sum.total += total;
          epoch_sum.recon += terms.recon.value()[0];
          epoch_sum.canon += terms.canon.value()[0];
          latent_nfe += terms.latent_stats;
          flow_nfe += terms.flow_stats;
          ++epoch_items;
        }
      } catch (const NumericError&) {
        bad = true;
      } catch (const ode::SolverError&) {
        bad = true;
      }
      if (bad) {
        result.diverged = true;
        emit({{"event", "diverged"}, {"epoch", epoch}, {"step", result.steps}});
        save("last.ckpt", model.params());
        stop = true;
        break;
      }
      adam.step(model.params(), grads);
      ++result.steps;
      if (epoch == 0) result.first_epoch_losses.push_back(batch_total / static_cast<double>(end - b));
      if (opts.progress) {
        opts.progress("epoch " + std::to_string(epoch) + " step " + std::to_string(result.steps) + " loss " +
                      std::to_string(batch_total / static_cast<double>(end - b)));
      }
      if (cfg.max_steps != 0 && result.steps >= cfg.max_steps) stop = true;
    }
    if (result.diverged) break;
    result.epochs = epoch + 1;

    nlohmann::json rec = {{"epoch", epoch}, {"step", result.steps}, {"seconds", seconds()}};
    if (epoch_items > 0) {
      const double n = static_cast<double>(epoch_items);
      rec["loss"] = epoch_sum.total / n;
      rec["loss_r"] = epoch_sum.recon / n;
      rec["loss_c"] = epoch_sum.canon / n;
      rec["nfe_latent"] = static_cast<double>(latent_nfe.nfe) / n;
      rec["nfe_flow"] = static_cast<double>(flow_nfe.nfe) / n;
    }
    double val = epoch_items > 0 ? epoch_sum.total / static_cast<double>(epoch_items) : 0.0;
    if (!val_views.empty()) {
      const LossValues v = evaluate_loss(model, val_views);
      rec["val_loss"] = v.total;
      rec["val_loss_r"] = v.recon;
      rec["val_loss_c"] = v.canon;
      val = v.total;
    }
    if (finite(val) && val < result.best_val) {
      result.best_val = val;
      result.best_epoch = epoch;
      best = model.params();
      save("best.ckpt", best);
    }
    rec["best_epoch"] = result.best_epoch;
    emit(rec);
  }
  if (!result.diverged) save("last.ckpt", model.params());
  if (std::isfinite(result.best_val)) model.params() = best;
  return result;
}

EvalProtocol EvalProtocol::all_frames(std::size_t points) {
  EvalProtocol p;
  p.name = "all";
  p.points = points;
  return p;
}

EvalProtocol EvalProtocol::three_observed(std::size_t points) {
  EvalProtocol p;
  p.name = "three";
  p.observed = {0, 4, 9};
  p.points = points;
  return p;
}

EvalProtocol EvalProtocol::parse(const std::string& spec, std::size_t points) {
  if (spec == "all" || spec == "all-10") return all_frames(points);
  if (spec == "three" || spec == "3-observed") return three_observed(points);
  EvalProtocol p;
  p.name = spec;
  p.points = points;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw Error("protocol must be all, three or a comma-separated frame list: " + spec);
    }
    p.observed.push_back(std::stoul(item));
  }
  std::sort(p.observed.begin(), p.observed.end());
  p.observed.erase(std::unique(p.observed.begin(), p.observed.end()), p.observed.end());
  if (p.observed.empty()) throw Error("protocol has no observed frames");
  return p;
}

std::vector<std::size_t> EvalProtocol::observed_frames(std::size_t K) const {
  std::vector<std::size_t> out;
  if (observed.empty()) {
    out.resize(K);
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  for (std::size_t f : observed) {
    if (f >= K) throw Error("protocol frame " + std::to_string(f) + " exceeds the sequence length");
    out.push_back(f);
  }
  return out;
}

geo::MetricReport evaluate(const Model& model, const std::vector<synth::SequenceRecord>& records,
                           const EvalProtocol& protocol) {
  return evaluate_impl(&model, records, protocol, EvalMode::model);
}

geo::MetricReport evaluate_oracle(const std::vector<synth::SequenceRecord>& records, const EvalProtocol& protocol) {
  return evaluate_impl(nullptr, records, protocol, EvalMode::oracle);
}

geo::MetricReport evaluate_copy_baseline(const std::vector<synth::SequenceRecord>& records,
                                         const EvalProtocol& protocol) {
  return evaluate_impl(nullptr, records, protocol, EvalMode::copy);
}

Reconstruction reconstruct(const Model& model, const RawSequence& seq, const std::vector<double>& times,
                           std::size_t n, bool correspond, std::uint64_t seed) {
  const enc::Canonicalized c = enc::canonicalize(model.encoder(), model.params(), seq);
  return sample_codes(model, codes_for(model, c.code.st, c.code.dyn, times), times, n, correspond, seed);
}

Reconstruction transfer_motion(const Model& model, const RawSequence& a, const RawSequence& b,
                               const std::vector<double>& times, std::size_t n, bool correspond, std::uint64_t seed) {
  const enc::Canonicalized ca = enc::canonicalize(model.encoder(), model.params(), a);
  const enc::Canonicalized cb = enc::canonicalize(model.encoder(), model.params(), b);
  return sample_codes(model, codes_for(model, ca.code.st, cb.code.dyn, times), times, n, correspond, seed);
}

void export_reconstruction(const std::filesystem::path& dir, const Reconstruction& rec) {
  std::filesystem::create_directories(dir);
  std::ofstream traj(dir / "trajectories.txt");
  if (!traj) throw Error("cannot write trajectories in " + dir.string());
  traj << std::setprecision(17);
  for (std::size_t k = 0; k < rec.clouds.size(); ++k) {
    const Tensor& cloud = rec.clouds[k];
    Tensor colors = Tensor::zeros(cloud.rows(), 3);
    for (std::size_t i = 0; i < cloud.size(); ++i) colors[i] = cloud[i];
    synth::write_ply(dir / ("cloud_" + std::to_string(k) + ".ply"), cloud, colors);
    for (std::size_t i = 0; i < cloud.rows(); ++i) {
      traj << rec.noise_ids[k][i] << ' ' << k << ' ' << rec.times[k];
      for (std::size_t c = 0; c < 3; ++c) traj << ' ' << cloud.at(i, c);
      traj << '\n';
    }
  }
  if (rec.clouds.empty()) traj.flush();
}

Reconstruction read_trajectories(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open trajectory file: " + path.string());
  struct Row {
    std::size_t id, k;
    double t;
    double p[3];
  };
  std::vector<Row> rows;
  Row r{};
  while (is >> r.id >> r.k >> r.t >> r.p[0] >> r.p[1] >> r.p[2]) rows.push_back(r);
  Reconstruction rec;
  std::size_t K = 0;
  for (const Row& row : rows) K = std::max(K, row.k + 1);
  rec.times.assign(K, 0.0);
  rec.noise_ids.resize(K);
  std::vector<std::vector<const Row*>> per(K);
  for (const Row& row : rows) per[row.k].push_back(&row);
  for (std::size_t k = 0; k < K; ++k) {
    Tensor cloud = Tensor::zeros(per[k].size(), 3);
    for (std::size_t i = 0; i < per[k].size(); ++i) {
      for (std::size_t c = 0; c < 3; ++c) cloud.at(i, c) = per[k][i]->p[c];
      rec.noise_ids[k].push_back(per[k][i]->id);
      rec.times[k] = per[k][i]->t;
    }
    rec.clouds.push_back(std::move(cloud));
  }
  return rec;
}

ArrowReport arrow_of_time(const Model& model, const std::vector<synth::SequenceRecord>& records,
                          const EvalProtocol& protocol) {
  std::vector<synth::SequenceRecord> reversed;
  for (const auto& r : records) reversed.push_back(synth::time_reversed(r));
  return {evaluate(model, records, protocol), evaluate(model, reversed, protocol)};
}

geo::MetricReport evaluate_pose(const Model& model, const std::vector<synth::SequenceRecord>& records,
                                std::size_t points, std::uint64_t seed) {
  geo::MetricReport report;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const synth::SequenceRecord& rec = records[r];
    std::vector<std::size_t> all(rec.frame_count());
    std::iota(all.begin(), all.end(), 0);
    const synth::TrainingView view = synth::select_view(rec, all, points, synth::sequence_seed(seed, r, 3));
    const enc::Canonicalized c = enc::canonicalize(model.encoder(), model.params(), view.raw);
    for (std::size_t k = 0; k < all.size(); ++k) {
      const Tensor& world = view.raw.frames[k].points;
      geo::RansacOptions ro;
      ro.seed = synth::sequence_seed(seed, r, 200 + k);
      geo::PoseError e;
      try {
        const geo::RansacResult fit = geo::ransac_pose(world, c.pred.spatial(k), ro);
        e = geo::pose_error(fit.pose, rec.poses[k], view.gt.spatial(k), world);
      } catch (const Error&) {
        e.translation = e.rotation_deg = e.point = std::numeric_limits<double>::infinity();
      }
      report.add(rec.instance_id, static_cast<int>(k), "pose_translation", e.translation);
      report.add(rec.instance_id, static_cast<int>(k), "pose_rotation_deg", e.rotation_deg);
      report.add(rec.instance_id, static_cast<int>(k), "pose_point", e.point);
    }
  }
  return report;
}

LabelScore score_labels(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("score_labels: size mismatch");
  LabelScore s;
  if (truth.empty()) return s;
  std::size_t correct = 0;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= 0) {
      if (static_cast<std::size_t>(truth[i]) >= counts.size()) counts.resize(truth[i] + 1, 0);
      ++counts[truth[i]];
    }
    if (predicted[i] == geo::kUnknownLabel) continue;
    ++s.known;
    if (predicted[i] == truth[i]) ++correct;
  }
  const double n = static_cast<double>(truth.size());
  s.accuracy = static_cast<double>(correct) / n;
  s.known_accuracy = s.known ? static_cast<double>(correct) / static_cast<double>(s.known) : 0.0;
  s.majority = counts.empty() ? 0.0 : static_cast<double>(*std::max_element(counts.begin(), counts.end())) / n;
  return s;
}

}  // namespace caspr::pipe
