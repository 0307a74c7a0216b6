#pragma once

#include <array>
#include <string_view>

#include "fmc/autodiff.hpp"
#include "fmc/params.hpp"
#include "fmc/tensor.hpp"

namespace fmc {

/// Two-tap analysis/synthesis filter pair. The built-in pair is orthonormal Haar:
/// low = [1/sqrt2, 1/sqrt2], high = [1/sqrt2, -1/sqrt2].
struct WaveletFilterPair {
  std::array<double, 2> low;
  std::array<double, 2> high;

  static WaveletFilterPair haar();
};

/// Band index bits are (z, y, x) from most to least significant, 0 = low and
/// 1 = high, so index 0 is lll, 1 is llh (high-pass along x), 4 is hll
/// (high-pass along z) and 7 is hhh.
inline constexpr std::array<std::string_view, 8> kBandNames = {"lll", "llh", "lhl", "lhh",
                                                               "hll", "hlh", "hhl", "hhh"};

/// The eight half-resolution subbands of one [C,D,H,W] feature map.
struct WaveletSubbands {
  std::array<Tensor, 8> bands;

  Tensor& lll() { return bands[0]; }
  const Tensor& lll() const { return bands[0]; }
  double energy() const;
};

/// Single-level separable DWT, applied along z, then y, then x with stride 2.
/// Odd extents are rejected.
WaveletSubbands dwt3(const Tensor& input);
/// Exact inverse of dwt3 (synthesis along x, then y, then z).
Tensor idwt3(const WaveletSubbands& bands);

std::array<Var, 8> dwt3(Var input);
Var idwt3(const std::array<Var, 8>& bands);

/// Fusion upsampling. The encoder feature's lll band is concatenated with the
/// decoder feature, projected back to C_e channels by a learned pointwise map
/// ("fuse.weight" [C_e, C_e+C_d], "fuse.bias" [C_e]), and inverted together
/// with the encoder's seven high bands. Output is [C_e, D, H, W].
Var wtu(Var encoder_feature, Var decoder_feature, ParamScope params);

/// Test hook: perturbs one analysis tap so dwt3 stops being invertible.
void inject_filter_fault(bool enabled);

}  // namespace fmc
