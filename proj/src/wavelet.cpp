#include "fmc/wavelet.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

#include "fmc/ops.hpp"
#include "fmc/parallel.hpp"

namespace fmc {

namespace {

std::atomic<bool> g_filter_fault{false};

WaveletFilterPair analysis_filters() {
  WaveletFilterPair f = WaveletFilterPair::haar();
  if (g_filter_fault.load()) f.low[0] *= 1.0 + 1e-3;
  return f;
}

void check_even(const Shape& s) {
  if (s.size() != 4) throw ShapeError("dwt3: expected [C,D,H,W], got " + to_string(s));
  static const char* names[] = {"", "1 (depth)", "2 (height)", "3 (width)"};
  for (std::size_t a = 1; a < 4; ++a) {
    if (s[a] < 2 || s[a] % 2 != 0) {
      throw ShapeError(std::string("dwt3: axis ") + names[a] + " extent " + std::to_string(s[a]) +
                       " must be even and >= 2");
    }
  }
}

// Visits every 2x2x2 block; the callback receives the eight input offsets in
// (dz, dy, dx) order and the flat output index of the block.
template <class F>
void for_blocks(std::size_t c, std::size_t d, std::size_t h, std::size_t w, F&& f) {
  const std::size_t hd = d / 2, hh = h / 2, hw = w / 2;
  parallel_for(c, [&](std::size_t ci) {
    std::array<std::size_t, 8> idx;
    for (std::size_t z = 0; z < hd; ++z)
      for (std::size_t y = 0; y < hh; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
          for (std::size_t k = 0; k < 8; ++k) {
            const std::size_t dz = k >> 2, dy = (k >> 1) & 1, dx = k & 1;
            idx[k] = ((ci * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
          }
          f(idx, ((ci * hd + z) * hh + y) * hw + x);
        }
  });
}

const std::array<double, 2>& taps(const WaveletFilterPair& f, std::size_t bit) {
  return bit ? f.high : f.low;
}

// Cascade along z, then y, then x.
std::array<double, 8> analyze_block(const std::array<double, 8>& v, const WaveletFilterPair& f) {
  std::array<double, 8> t1, t2, out;
  for (std::size_t bz = 0; bz < 2; ++bz)
    for (std::size_t r = 0; r < 4; ++r) {
      const auto& fz = taps(f, bz);
      t1[bz * 4 + r] = fz[0] * v[r] + fz[1] * v[4 + r];
    }
  for (std::size_t bz = 0; bz < 2; ++bz)
    for (std::size_t by = 0; by < 2; ++by)
      for (std::size_t dx = 0; dx < 2; ++dx) {
        const auto& fy = taps(f, by);
        t2[bz * 4 + by * 2 + dx] = fy[0] * t1[bz * 4 + dx] + fy[1] * t1[bz * 4 + 2 + dx];
      }
  for (std::size_t bz = 0; bz < 2; ++bz)
    for (std::size_t by = 0; by < 2; ++by)
      for (std::size_t bx = 0; bx < 2; ++bx) {
        const auto& fx = taps(f, bx);
        const std::size_t row = bz * 4 + by * 2;
        out[row + bx] = fx[0] * t2[row] + fx[1] * t2[row + 1];
      }
  return out;
}

// Transpose of analyze_block: along x, then y, then z.
std::array<double, 8> synthesize_block(const std::array<double, 8>& b, const WaveletFilterPair& f) {
  std::array<double, 8> t2, t1, v;
  for (std::size_t row = 0; row < 8; row += 2)
    for (std::size_t dx = 0; dx < 2; ++dx) t2[row + dx] = f.low[dx] * b[row] + f.high[dx] * b[row + 1];
  for (std::size_t bz = 0; bz < 2; ++bz)
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) {
        t1[bz * 4 + dy * 2 + dx] = f.low[dy] * t2[bz * 4 + dx] + f.high[dy] * t2[bz * 4 + 2 + dx];
      }
  for (std::size_t dz = 0; dz < 2; ++dz)
    for (std::size_t r = 0; r < 4; ++r) v[dz * 4 + r] = f.low[dz] * t1[r] + f.high[dz] * t1[4 + r];
  return v;
}

std::array<Tensor, 8> analyze(const Tensor& x, const WaveletFilterPair& f) {
  check_even(x.shape());
  const std::size_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::array<Tensor, 8> out;
  for (auto& b : out) b = Tensor({c, d / 2, h / 2, w / 2});
  for_blocks(c, d, h, w, [&](const std::array<std::size_t, 8>& idx, std::size_t o) {
    std::array<double, 8> v;
    for (std::size_t k = 0; k < 8; ++k) v[k] = x[idx[k]];
    const auto r = analyze_block(v, f);
    for (std::size_t k = 0; k < 8; ++k) out[k][o] = r[k];
  });
  return out;
}

Tensor synthesize(const std::array<const Tensor*, 8>& bands, const WaveletFilterPair& f) {
  const Shape& s = bands[0]->shape();
  if (s.size() != 4) throw ShapeError("idwt3: bands must be [C,D,H,W], got " + to_string(s));
  for (std::size_t k = 1; k < 8; ++k) {
    if (bands[k]->shape() != s) {
      throw ShapeError("idwt3: band " + std::string(kBandNames[k]) + " has shape " +
                       to_string(bands[k]->shape()) + ", expected " + to_string(s));
    }
  }
  const std::size_t c = s[0], d = 2 * s[1], h = 2 * s[2], w = 2 * s[3];
  Tensor x({c, d, h, w});
  for_blocks(c, d, h, w, [&](const std::array<std::size_t, 8>& idx, std::size_t o) {
    std::array<double, 8> b;
    for (std::size_t k = 0; k < 8; ++k) b[k] = (*bands[k])[o];
    const auto v = synthesize_block(b, f);
    for (std::size_t k = 0; k < 8; ++k) x[idx[k]] = v[k];
  });
  return x;
}

}  // namespace

WaveletFilterPair WaveletFilterPair::haar() {
  const double r = 1.0 / std::numbers::sqrt2;
  return {{r, r}, {r, -r}};
}

double WaveletSubbands::energy() const {
  double e = 0.0;
  for (const auto& b : bands) e += squared_norm(b);
  return e;
}

void inject_filter_fault(bool enabled) { g_filter_fault.store(enabled); }

WaveletSubbands dwt3(const Tensor& input) { return {analyze(input, analysis_filters())}; }

Tensor idwt3(const WaveletSubbands& bands) {
  std::array<const Tensor*, 8> ptrs;
  for (std::size_t k = 0; k < 8; ++k) ptrs[k] = &bands.bands[k];
  return synthesize(ptrs, WaveletFilterPair::haar());
}

std::array<Var, 8> dwt3(Var input) {
  if (!input.valid()) throw std::invalid_argument("dwt3 on an unset Var");
  Tape& tape = *input.tape;
  const WaveletFilterPair f = analysis_filters();
  // One node carries all eight bands stacked on the channel axis; the
  // per-band views are slices of it.
  std::array<Tensor, 8> parts = analyze(input.value(), f);
  const std::size_t c = parts[0].dim(0);
  const std::size_t n = parts[0].size();
  Tensor stacked({8 * c, parts[0].dim(1), parts[0].dim(2), parts[0].dim(3)});
  for (std::size_t k = 0; k < 8; ++k) {
    std::copy(parts[k].data().begin(), parts[k].data().end(), stacked.data().begin() + k * n);
  }
  Var all = tape.record(
      std::move(stacked), {input.id},
      [f, c](const Tensor& g, std::span<Tensor* const> gin) {
        std::array<Tensor, 8> gb;
        std::array<const Tensor*, 8> ptrs;
        const std::size_t n = g.size() / 8;
        for (std::size_t k = 0; k < 8; ++k) {
          gb[k] = Tensor({c, g.dim(1), g.dim(2), g.dim(3)},
                         std::vector<double>(g.data().begin() + k * n, g.data().begin() + (k + 1) * n));
          ptrs[k] = &gb[k];
        }
        *gin[0] += synthesize(ptrs, f);
      },
      "dwt3");
  std::array<Var, 8> out;
  for (std::size_t k = 0; k < 8; ++k) out[k] = slice_channels(all, k * c, c);
  return out;
}

Var idwt3(const std::array<Var, 8>& bands) {
  std::array<const Tensor*, 8> ptrs;
  std::vector<int> ids;
  for (std::size_t k = 0; k < 8; ++k) {
    if (!bands[k].valid() || bands[k].tape != bands[0].tape) {
      throw std::invalid_argument("idwt3: bands must live on one tape");
    }
    ptrs[k] = &bands[k].value();
    ids.push_back(bands[k].id);
  }
  const WaveletFilterPair f = WaveletFilterPair::haar();
  Tensor x = synthesize(ptrs, f);
  return bands[0].tape->record(
      std::move(x), std::move(ids),
      [f](const Tensor& g, std::span<Tensor* const> gin) {
        auto parts = analyze(g, f);
        for (std::size_t k = 0; k < 8; ++k)
          if (gin[k]) *gin[k] += parts[k];
      },
      "idwt3");
}

Var wtu(Var encoder_feature, Var decoder_feature, ParamScope params) {
  const Shape& es = encoder_feature.shape();
  const Shape& ds = decoder_feature.shape();
  if (es.size() != 4 || ds.size() != 4) throw ShapeError("wtu: features must be [C,D,H,W]");
  for (std::size_t a = 1; a < 4; ++a) {
    if (es[a] != 2 * ds[a]) {
      throw ShapeError("wtu: decoder axis " + std::to_string(a) + " extent " + std::to_string(ds[a]) +
                       " is not half the encoder extent " + std::to_string(es[a]));
    }
  }
  const std::size_t ce = es[0];
  const std::size_t cd = ds[0];
  std::array<Var, 8> bands = dwt3(encoder_feature);
  const Var fuse_parts[] = {bands[0], decoder_feature};
  Var fuse = concat_channels(fuse_parts);
  Var w = params.get("fuse.weight", {ce, ce + cd}, Init::fan_in_uniform, ce + cd);
  Var b = params.get("fuse.bias", {ce}, Init::zeros);
  bands[0] = pointwise_linear(fuse, w, b);
  return idwt3(bands);
}

}  // namespace fmc
