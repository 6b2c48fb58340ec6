#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "vitscope/tensor.hpp"

namespace vitscope {

/// Records differentiable ops in execution order and replays their local
/// gradient rules in reverse on backward().
///
/// Recording order is a topological order by construction. A tape in
/// inference mode records nothing, which is what evaluation and the
/// finite-difference probes use. One tape belongs to one thread.
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape inference() { return Tape(Mode::inference); }

  bool recording() const { return mode_ == Mode::record; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends a node. `rule` reads output.grad() and accumulates into the
  /// inputs' gradients.
  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> rule);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad
  /// ancestor. Nodes outside the loss ancestry are skipped, so gradients of
  /// unrelated tensors stay untouched.
  void backward(const Tensor& loss);

  /// Nodes whose rule ran during the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

  /// True when every node input is either a leaf or produced by an earlier
  /// node.
  bool topologically_ordered() const;

  std::vector<std::string_view> op_names() const;

 private:
  struct Node {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> rule;
  };

  Mode mode_;
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

}  // namespace vitscope
