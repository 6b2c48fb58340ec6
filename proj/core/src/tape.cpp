#include "vitscope/tape.hpp"

#include <unordered_set>

namespace vitscope {

void Tape::record(std::string_view op, std::vector<Tensor> inputs,
                  Tensor output, std::function<void()> rule) {
  if (!recording()) return;
  nodes_.push_back(
      Node{op, std::move(inputs), std::move(output), std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  // Intermediate gradients from an earlier backward on this tape would be
  // counted twice.
  for (auto& node : nodes_) node.output.clear_grad();

  last_visits_ = 0;
  if (!loss.requires_grad()) return;

  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->rule();
    ++last_visits_;
  }
}

bool Tape::topologically_ordered() const {
  // Tensors are identified by their data buffer, which is stable while the
  // node holds a reference.
  std::unordered_set<const void*> produced_later;
  for (const auto& node : nodes_) {
    produced_later.insert(node.output.data().data());
  }
  for (const auto& node : nodes_) {
    for (const auto& in : node.inputs) {
      if (produced_later.count(in.data().data()) > 0) return false;
    }
    produced_later.erase(node.output.data().data());
  }
  return true;
}

std::vector<std::string_view> Tape::op_names() const {
  std::vector<std::string_view> names;
  names.reserve(nodes_.size());
  for (const auto& node : nodes_) names.push_back(node.op);
  return names;
}

}  // namespace vitscope
