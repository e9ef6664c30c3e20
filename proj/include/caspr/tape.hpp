#pragma once

#include <functional>
#include <span>
#include <vector>

#include "caspr/tensor.hpp"

namespace caspr {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

struct BackwardArgs {
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const Tensor* const> in;
  // Null for inputs that do not require a gradient.
  std::span<Tensor* const> in_grad;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Define-by-run reverse-mode recording. Nodes only ever reference earlier
/// nodes, so a reverse sweep over the node list is a valid topological order.
/// A tape is single-threaded and may be differentiated once.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  // The referenced tensor must outlive the tape.
  Var leaf_ref(const Tensor& value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op result. The backward closure is dropped when no input needs
  // a gradient or when the tape is not recording.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void backward(Var loss);
  void backward(Var output, const Tensor& seed);
  // Seeds several outputs at once before the single reverse sweep.
  void backward(std::span<const Var> outputs, std::span<const Tensor> seeds);

  // Gradient of the last backward pass; zeros for nodes that were not reached.
  Tensor grad(Var v) const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;

    const Tensor& value() const { return borrowed ? *borrowed : owned; }
  };

  void check(Var v) const;
  void sweep();

  std::vector<Node> nodes_;
  bool recording_;
  bool consumed_ = false;
};

}  // namespace caspr
