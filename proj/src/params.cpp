#include "caspr/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace caspr {

Tensor& ParamSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw Error("duplicate parameter name: " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return entries_[it->second].second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return entries_[it->second].second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : entries_) out.add(name, Tensor(t.shape(), 0.0));
  return out;
}

void ParamSet::axpy(double factor, const ParamSet& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    Tensor& dst = at(other.name(i));
    const Tensor& src = other.value(i);
    if (dst.shape() != src.shape()) throw ShapeError("axpy shape mismatch for " + other.name(i));
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += factor * src[k];
  }
}

ParamSet ParamSet::with_prefix(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, t] : entries_) {
    if (name.rfind(prefix, 0) == 0) out.add(name, t);
  }
  return out;
}

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool requires_grad)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars_.push_back(tape.leaf_ref(params.value(i), requires_grad));
    index_[params.name(i)] = i;
  }
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("parameter not bound: " + name);
  return vars_[it->second];
}

ParamSet BoundParams::gradients() const {
  ParamSet out;
  for (std::size_t i = 0; i < vars_.size(); ++i) out.add(params_->name(i), tape_->grad(vars_[i]));
  return out;
}

GradCheckResult grad_check(const ScalarFn& fn, ParamSet& params, GradCheckOptions options) {
  if (!(options.eps > 0.0 && options.eps <= 1e-2)) throw Error("grad_check: eps must lie in (0, 1e-2]");
  ParamSet analytic;
  double f0 = 0.0;
  {
    Tape tape;
    BoundParams bound(tape, params);
    Var loss = fn(tape, bound);
    f0 = loss.value().item();
    tape.backward(loss);
    analytic = bound.gradients();
  }
  auto evaluate = [&]() {
    Tape tape(false);
    BoundParams bound(tape, params, false);
    const double v = fn(tape, bound).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function produced a non-finite value");
    return v;
  };
  const double floor = options.floor * std::max(1.0, std::abs(f0));
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& value = params.value(p);
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double saved = value[k];
      value[k] = saved + options.eps;
      const double fp = evaluate();
      value[k] = saved - options.eps;
      const double fm = evaluate();
      value[k] = saved;
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double a = analytic.value(p)[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = std::abs(a - numeric) / denom;
      if (err > result.max_relative_error) {
        result = GradCheckResult{err, params.name(p), k, a, numeric};
      }
    }
  }
  return result;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'A', 'S', 'P', 'R', 'C', 'K', 'P'};

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("truncated checkpoint file");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& t = params.value(i);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw Error("failed writing checkpoint: " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw Error("not a checkpoint file: " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto count = get<std::uint64_t>(is);
  ParamSet params;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw Error("truncated checkpoint record: " + name);
    params.add(name, std::move(t));
  }
  return params;
}

}  // namespace caspr
