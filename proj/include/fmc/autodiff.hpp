#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fmc/tensor.hpp"

namespace fmc {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Receives the output gradient and one accumulator per input. An accumulator
/// is null when that input does not need a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

/// Reverse-mode tape. Nodes are appended in execution order, so every node's
/// inputs precede it and a single reverse sweep visits a valid topological
/// order. One tape per training step; not thread-safe.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  /// Appends a primitive's result. `op` must point at static storage.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(int id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() target w.r.t. `v`; zeros if unreachable.
  Tensor grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(int id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const char* op = "";
  };
  Tensor& accumulator(int id);

  std::deque<Node> nodes_;  // stable references across appends
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates probed per input tensor; 0 probes every coordinate.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of a scalar-valued f against central
/// differences. Error per coordinate is |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace fmc
