#include "caspr/tape.hpp"

namespace caspr {

const Tensor& Var::value() const {
  if (!valid()) throw Error("use of an unbound Var");
  return tape->value(*this);
}

void Tape::check(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw Error("Var does not belong to this tape");
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf_ref(const Tensor& value, bool requires_grad) {
  Node node;
  node.borrowed = &value;
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by a forward op");
  Node node;
  node.owned = std::move(value);
  bool needs = false;
  if (recording_) {
    node.inputs.reserve(inputs.size());
    for (Var in : inputs) {
      check(in);
      node.inputs.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
  }
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value();
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

void Tape::backward(Var loss) {
  check(loss);
  if (nodes_[loss.id].value().size() != 1) {
    throw ShapeError("backward(loss) requires a scalar, got " + shape_string(nodes_[loss.id].value().shape()));
  }
  Tensor seed(nodes_[loss.id].value().shape(), 1.0);
  backward(loss, seed);
}

void Tape::backward(Var output, const Tensor& seed) {
  std::span<const Var> outs(&output, 1);
  std::span<const Tensor> seeds(&seed, 1);
  backward(outs, seeds);
}

void Tape::backward(std::span<const Var> outputs, std::span<const Tensor> seeds) {
  if (!recording_) throw Error("backward on a non-recording tape");
  if (consumed_) throw Error("tape already consumed by a previous backward pass");
  if (outputs.size() != seeds.size()) throw Error("backward: outputs and seeds differ in count");
  consumed_ = true;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    check(outputs[i]);
    Node& node = nodes_[outputs[i].id];
    if (seeds[i].shape() != node.value().shape()) {
      throw ShapeError("backward seed shape " + shape_string(seeds[i].shape()) + " != output shape " +
                       shape_string(node.value().shape()));
    }
    if (node.grad.empty()) node.grad = Tensor(node.value().shape(), 0.0);
    auto& g = node.grad.storage();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += seeds[i][k];
  }
  sweep();
}

void Tape::sweep() {
  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    Node& node = nodes_[idx];
    if (!node.backward || node.grad.empty()) continue;
    in_values.clear();
    in_grads.clear();
    for (int in : node.inputs) {
      Node& src = nodes_[in];
      in_values.push_back(&src.value());
      if (src.requires_grad) {
        if (src.grad.empty()) src.grad = Tensor(src.value().shape(), 0.0);
        in_grads.push_back(&src.grad);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardArgs{node.grad, node.value(), in_values, in_grads});
    // Intermediate gradients are not needed once propagated.
    if (!node.inputs.empty()) node.grad = Tensor();
    node.backward = nullptr;
  }
}

Tensor Tape::grad(Var v) const {
  check(v);
  const Node& node = nodes_[v.id];
  if (node.grad.empty()) return Tensor(node.value().shape(), 0.0);
  return node.grad;
}

}  // namespace caspr
