#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "caspr/tape.hpp"

namespace caspr {

/// Named parameter tensors. Iteration order is insertion order, which keeps
/// serialization and optimizer state deterministic.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor& value(std::size_t i) { return entries_[i].second; }
  const Tensor& value(std::size_t i) const { return entries_[i].second; }
  std::size_t scalar_count() const;

  // Zero tensors with the same names and shapes.
  ParamSet zeros_like() const;
  // this += factor * other, matched by name.
  void axpy(double factor, const ParamSet& other);
  // Subset whose names start with `prefix`.
  ParamSet with_prefix(const std::string& prefix) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters bound as leaves on one tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad = true);

  Var operator[](const std::string& name) const;
  Tape& tape() const noexcept { return *tape_; }
  const ParamSet& source() const noexcept { return *params_; }
  Var var(std::size_t i) const { return vars_[i]; }

  // Gradients after tape.backward(); unreached parameters get zeros.
  ParamSet gradients() const;

 private:
  Tape* tape_;
  const ParamSet* params_;
  std::vector<Var> vars_;
  std::map<std::string, std::size_t> index_;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor for the per-entry relative error, scaled by max(1, |f|).
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ScalarFn = std::function<Var(Tape&, const BoundParams&)>;

/// Compares reverse-mode gradients with central differences for every entry
/// of every parameter and reports the worst relative error.
GradCheckResult grad_check(const ScalarFn& fn, ParamSet& params, GradCheckOptions options = {});

// Checkpoint file: "CASPRCKP" magic, uint32 format version, uint64 record
// count, then per record: uint32 name length, name bytes, uint32 rank,
// uint64 dims, little-endian float64 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace caspr
