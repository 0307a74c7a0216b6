#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fmc/autodiff.hpp"
#include "fmc/params.hpp"
#include "fmc/tensor.hpp"

namespace fmc::verify {

/// Outcome of one invariant check.
struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      ///< measured quantity (error, ratio, ...)
  double threshold = 0.0;  ///< bound the value was compared against
  std::string detail;
  double seconds = 0.0;
};

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0);

/// Max relative gradient error of `op`, probed through a fixed random weighting
/// of its output.
double op_grad_error(const std::function<Var(std::span<const Var>)>& op, const std::vector<Tensor>& inputs,
                     std::uint64_t seed = 99, std::size_t max_coords = 0);

/// Gradient check of a parameterized module w.r.t. its inputs and every
/// parameter it creates. Parameters are materialized once from `seed`, then
/// optionally edited by `prepare` before probing.
double module_grad_error(const std::function<Var(ParamScope&, std::span<const Var>)>& module,
                         const std::vector<Tensor>& inputs, std::uint64_t seed = 5, std::size_t max_coords = 0,
                         const std::function<void(ParamStore&)>& prepare = {});

/// idwt3(dwt3(x)) == x on `volumes` random shapes up to [4,16,16,16].
CheckResult perfect_reconstruction(std::size_t volumes, std::uint64_t seed);
/// Band energy equals input energy on the same corpus.
CheckResult energy_conservation(std::size_t volumes, std::uint64_t seed);
/// selective_scan against the step-by-step recurrence.
CheckResult scan_oracle(const std::vector<std::size_t>& lengths);
/// Blocked prefix scan against the sequential loop for L = 2^k up to max_length.
CheckResult blocked_scan(std::size_t max_length, std::size_t block);
/// One result per differentiable operation and composed module. Large
/// modules probe at most `module_coords` coordinates per tensor.
std::vector<CheckResult> gradient_checks(std::size_t module_coords);
/// Attention maps in (0,1), channel softmax sums to 1, zero bands -> zero.
CheckResult hfr_properties(std::size_t trials);
/// dsc / hd95 against brute-force set counts and all-pairs distances.
CheckResult metric_oracles(std::size_t pairs, std::size_t max_extent, std::uint64_t seed);
CheckResult volume_roundtrip();
CheckResult checkpoint_roundtrip();

/// Folds several results into one named result (passes iff all pass; value is
/// the max value).
CheckResult combine(const std::string& name, const std::vector<CheckResult>& parts);

}  // namespace fmc::verify
