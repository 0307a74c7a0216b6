#pragma once

#include <array>
#include <cstddef>

#include "fmc/ops.hpp"
#include "fmc/params.hpp"

namespace fmc {

/// Parameters of one selective-scan branch over C channels with N states.
///
/// The continuous state matrix is diag(-exp(a_log)), strictly negative, and the
/// step size softplus(proj_delta u + delta_bias) is strictly positive, so every
/// discretized decay exp(-delta * exp(a_log)) lies in (0, 1).
struct SsmParams {
  Tensor a_log;       ///< [C,N]
  Tensor d_skip;      ///< [C]
  Tensor proj_b;      ///< [N,C]
  Tensor proj_c;      ///< [N,C]
  Tensor proj_delta;  ///< [C,C]
  Tensor delta_bias;  ///< [C]

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state_dim() const { return a_log.dim(1); }

  /// Shape and finiteness checks; throws before any scanning happens.
  void validate() const;

  static SsmParams random(std::size_t channels, std::size_t state_dim, std::uint64_t seed);
};

/// Discretized inputs of the scan: h_t = a_t * h_{t-1} + b_t * u_t,
/// y_t = <c_t, h_t> + d * u_t, with h before t = 0 equal to 0.
struct DiscreteScan {
  Tensor a_bar;  ///< [L,C,N]
  Tensor b_bar;  ///< [L,C,N]
  Tensor c;      ///< [L,N]
  Tensor u;      ///< [L,C]
  Tensor d;      ///< [C]
};

DiscreteScan discretize(const Tensor& u, const SsmParams& params);

/// Sequential evaluation of the discretized recurrence.
Tensor scan_sequential(const DiscreteScan& s);

/// Same recurrence through blocked parallel-prefix composition of the affine
/// maps h -> a h + b. With block >= L this is the sequential loop.
Tensor scan_blocked(const DiscreteScan& s, std::size_t block);

/// y = SSM(u) for u [L,C].
Tensor selective_scan(const Tensor& u, const SsmParams& params);
Tensor selective_scan_blocked(const Tensor& u, const SsmParams& params, std::size_t block);

/// Differentiable scan core over precomputed step sizes and projections:
/// u [L,C], delta [L,C], a_log [C,N], b [L,N], c [L,N], d [C].
Var ssm_scan(Var u, Var delta, Var a_log, Var b, Var c, Var d);

/// Differentiable selective scan. Parameters (see SsmParams): a_log, d_skip,
/// proj_b, proj_c, proj_delta, delta_bias.
Var selective_scan(Var u, std::size_t state_dim, ParamScope params);

/// Reads the scan parameters of a scope into a plain SsmParams.
SsmParams ssm_params_from(const ParamStore& store, const std::string& prefix);

struct MgSsmConfig {
  std::array<std::size_t, 3> dilations{1, 2, 3};
  std::size_t state_dim = 8;
  std::size_t norm_groups = 0;  ///< 0: largest divisor of C not above 4

  void validate() const;
};

std::size_t default_norm_groups(std::size_t channels);

/// x + f(x), f = conv3 -> group_norm -> silu -> conv3 -> group_norm.
Var res_block(Var x, std::size_t norm_groups, ParamScope params);

/// Flatten to [L,C] in raster order, layer norm, linear, silu, selective scan,
/// reshape back.
Var vssm_branch(Var f, std::size_t state_dim, ParamScope params);

struct MgSsmTrace {
  Var local;                  ///< residual block output
  std::array<Var, 3> scales;  ///< depthwise dilated features F_dj
  std::array<Var, 3> scans;   ///< X_1(dj)
  Var gate;                   ///< X_2, shared by all branches
  std::array<Var, 3> branch;  ///< X_o(dj)
};

/// Multi-granularity block on the low band; output has `out_channels`.
Var mg_ssm(Var f_lll, const MgSsmConfig& cfg, std::size_t out_channels, ParamScope params,
           MgSsmTrace* trace = nullptr);

/// Number of gate (X_2) evaluations since process start.
std::size_t mg_ssm_gate_evaluations();

}  // namespace fmc
