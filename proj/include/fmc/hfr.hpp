#pragma once

#include <array>
#include <cstddef>

#include "fmc/ops.hpp"
#include "fmc/params.hpp"

namespace fmc {

/// High-frequency refinement settings for one encoder stage.
struct HfrConfig {
  std::size_t stage_index = 0;
  std::size_t channels = 1;
  /// 0 selects the default: the largest divisor of C not above min(2^i, C).
  std::size_t group_count = 0;

  std::size_t groups() const;
};

using HighBands = std::array<Var, 7>;

/// Intermediates of one attention path.
struct AttentionPath {
  Var logits;   ///< F_Max / F_Avg, [C,D,H,W]
  Var weights;  ///< softmax over channels of the logits
  Var map;      ///< sigmoid(weights * logits), entries in (0,1)
};

/// Group-pool each band (g channels), lift g -> C with a pointwise map shared
/// across bands, concatenate the seven results and reduce 7C -> C with a
/// 3x3x3 convolution. Parameters: proj.{weight,bias}, conv.{weight,bias}.
AttentionPath attention_path(const HighBands& bands, const HfrConfig& cfg, PoolMode mode,
                             ParamScope params);

/// Max-path and avg-path maps each gate all seven bands; the 14 gated bands
/// are concatenated (14C) and projected to `out_channels` (out.{weight,bias}).
/// Sub-scopes: "max", "avg", "out".
Var hfr_refine(const HighBands& bands, const HfrConfig& cfg, std::size_t out_channels,
               ParamScope params, std::array<AttentionPath, 2>* paths = nullptr);

}  // namespace fmc
