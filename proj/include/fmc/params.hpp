#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>

#include "fmc/autodiff.hpp"
#include "fmc/tensor.hpp"

namespace fmc {

enum class Init {
  zeros,
  ones,
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  fan_in_uniform,
  /// A_log[c, n] = log(n + 1), the usual selective-scan start.
  ssm_a_log,
};

/// Named parameter tensors, ordered by name.
using ParamStore = std::map<std::string, Tensor>;

std::size_t parameter_count(const ParamStore& store);
void fill_all(ParamStore& store, double value);

/// Binds named parameters from a store onto one tape. Parameters are created
/// on first use with a deterministic initializer seeded from (seed, full name),
/// so initial values do not depend on creation order. Repeated lookups of the
/// same name within one binding return the same tape leaf.
class ParamScope {
 public:
  ParamScope(Tape& tape, ParamStore& store, std::uint64_t seed);

  ParamScope sub(std::string_view name) const;

  Var get(std::string_view name, const Shape& shape, Init init, std::size_t fan_in = 0);

  /// Pre-binds a full parameter name to an existing tape value, overriding
  /// the store for this binding (used to probe parameters in gradient checks).
  void bind(const std::string& full_name, Var v);

  Tape& tape() const { return *tape_; }
  const std::string& prefix() const { return prefix_; }

  /// Gradients of every parameter bound so far, keyed by full name.
  std::map<std::string, Tensor> gradients() const;

 private:
  Tape* tape_;
  ParamStore* store_;
  std::uint64_t seed_;
  std::string prefix_;
  std::shared_ptr<std::map<std::string, Var>> bound_;
};

Tensor init_tensor(const Shape& shape, Init init, std::size_t fan_in, std::uint64_t seed);

}  // namespace fmc
