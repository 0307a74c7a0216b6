#include "fmc/hfr.hpp"

#include <algorithm>
#include <vector>

namespace fmc {

std::size_t HfrConfig::groups() const {
  if (channels == 0) throw ShapeError("hfr: channel count must be >= 1");
  if (group_count != 0) {
    if (channels % group_count != 0) {
      throw ShapeError("hfr: " + std::to_string(channels) + " channels not divisible into " +
                       std::to_string(group_count) + " groups");
    }
    return group_count;
  }
  std::size_t cap = 1;
  for (std::size_t i = 0; i < stage_index && cap < channels; ++i) cap *= 2;
  cap = std::min(cap, channels);
  while (channels % cap != 0) --cap;
  return cap;
}

namespace {

void check_bands(const HighBands& bands, std::size_t channels) {
  for (std::size_t k = 0; k < bands.size(); ++k) {
    if (!bands[k].valid()) throw std::invalid_argument("hfr: band " + std::to_string(k) + " unset");
    const Shape& s = bands[k].shape();
    if (s.size() != 4 || s[0] != channels) {
      throw ShapeError("hfr: band " + std::to_string(k) + " has shape " + to_string(s) + ", expected " +
                       std::to_string(channels) + " channels");
    }
    if (s != bands[0].shape()) {
      throw ShapeError("hfr: band " + std::to_string(k) + " shape " + to_string(s) +
                       " differs from band 0 " + to_string(bands[0].shape()));
    }
  }
}

}  // namespace

AttentionPath attention_path(const HighBands& bands, const HfrConfig& cfg, PoolMode mode,
                             ParamScope params) {
  const std::size_t c = cfg.channels;
  check_bands(bands, c);
  const std::size_t g = cfg.groups();
  Var pw = params.get("proj.weight", {c, g}, Init::fan_in_uniform, g);
  Var pb = params.get("proj.bias", {c}, Init::zeros);
  std::vector<Var> lifted;
  lifted.reserve(bands.size());
  for (const Var& b : bands) lifted.push_back(pointwise_linear(group_pool(b, g, mode), pw, pb));
  Var cat = concat_channels(lifted);
  Var cw = params.get("conv.weight", {c, 7 * c, 3, 3, 3}, Init::fan_in_uniform, 7 * c * 27);
  Var cb = params.get("conv.bias", {c}, Init::zeros);
  AttentionPath out;
  out.logits = conv3d(cat, cw, cb, Conv3dOptions{});
  out.weights = softmax_channels(out.logits);
  out.map = sigmoid(mul(out.weights, out.logits));
  return out;
}

Var hfr_refine(const HighBands& bands, const HfrConfig& cfg, std::size_t out_channels,
               ParamScope params, std::array<AttentionPath, 2>* paths) {
  const std::size_t c = cfg.channels;
  check_bands(bands, c);
  AttentionPath amp = attention_path(bands, cfg, PoolMode::max, params.sub("max"));
  AttentionPath den = attention_path(bands, cfg, PoolMode::avg, params.sub("avg"));
  std::vector<Var> gated;
  gated.reserve(14);
  for (const Var& b : bands) gated.push_back(mul(amp.map, b));
  for (const Var& b : bands) gated.push_back(mul(den.map, b));
  Var cat = concat_channels(gated);
  Var w = params.get("out.weight", {out_channels, 14 * c}, Init::fan_in_uniform, 14 * c);
  Var bias = params.get("out.bias", {out_channels}, Init::zeros);
  if (paths) *paths = {amp, den};
  return pointwise_linear(cat, w, bias);
}

}  // namespace fmc
