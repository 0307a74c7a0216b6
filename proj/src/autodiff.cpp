#include "fmc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fmc/rng.hpp"

namespace fmc {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  value.ensure_finite("constant");
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Tensor value) {
  value.ensure_finite("parameter");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.op = "parameter";
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op) {
  value.ensure_finite(op);
  Node n;
  n.value = std::move(value);
  for (int in : inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size())) {
      throw std::logic_error(std::string(op) + ": input does not precede node");
    }
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  n.op = op;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::accumulator(int id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
  if (value(loss).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(value(loss).shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  accumulator(loss.id).fill(1.0);
  std::vector<Tensor*> grads;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad || !n.backward) continue;
    grads.clear();
    for (int in : n.inputs) {
      grads.push_back(nodes_[in].requires_grad ? &accumulator(in) : nullptr);
    }
    n.backward(n.grad, grads);
  }
}

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options) {
  if (!(options.step >= 1e-6 && options.step <= 1e-3)) {
    throw std::invalid_argument("grad_check: step must lie in [1e-6, 1e-3]");
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].ensure_finite("grad_check input " + std::to_string(i));
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.parameter(t));
    Var loss = f(tape, vars);
    tape.backward(loss);
    for (auto v : vars) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    return f(tape, vars).value()[0];
  };

  GradCheckResult result;
  SplitMix64 rng(options.seed);
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<std::size_t> coords(inputs[k].size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      // Partial Fisher-Yates: deterministic subset for the given seed.
      for (std::size_t i = 0; i < options.max_coords_per_input; ++i) {
        const std::size_t j = i + rng.next() % (coords.size() - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(options.max_coords_per_input);
    }
    for (std::size_t idx : coords) {
      const double orig = probe[k][idx];
      double plus = 0.0;
      double minus = 0.0;
      try {
        probe[k][idx] = orig + options.step;
        plus = evaluate(probe);
        probe[k][idx] = orig - options.step;
        minus = evaluate(probe);
      } catch (const NumericError& e) {
        throw NumericError("grad_check: input " + std::to_string(k) + " index " +
                           std::to_string(idx) + ": " + e.what());
      }
      probe[k][idx] = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      if (!std::isfinite(numeric)) {
        throw NumericError("grad_check: non-finite difference at input " + std::to_string(k) +
                           " index " + std::to_string(idx));
      }
      const double a = analytic[k][idx];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_rel_error || result.coords_checked == 0) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_index = idx;
        result.analytic = a;
        result.numeric = numeric;
      }
      ++result.coords_checked;
    }
  }
  return result;
}

}  // namespace fmc
