#pragma once

// Slow, direct reference implementations used as oracles by the self-check
// and the test suites. Nothing here is meant for production paths.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "fmc/metrics.hpp"
#include "fmc/rng.hpp"
#include "fmc/ssm.hpp"

namespace fmc::reference {

// Step-by-step recurrence straight from the parameter definitions.
inline Tensor scan_recurrence(const Tensor& u, const SsmParams& p) {
  const std::size_t L = u.dim(0), C = u.dim(1), N = p.state_dim();
  Tensor y({L, C});
  std::vector<double> h(C * N, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    std::vector<double> B(N, 0.0), Cv(N, 0.0), delta(C, 0.0);
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t i = 0; i < C; ++i) {
        B[k] += p.proj_b[k * C + i] * u[t * C + i];
        Cv[k] += p.proj_c[k * C + i] * u[t * C + i];
      }
    for (std::size_t c = 0; c < C; ++c) {
      double pre = p.delta_bias[c];
      for (std::size_t i = 0; i < C; ++i) pre += p.proj_delta[c * C + i] * u[t * C + i];
      delta[c] = std::log1p(std::exp(pre));
    }
    for (std::size_t c = 0; c < C; ++c) {
      double out = p.d_skip[c] * u[t * C + c];
      for (std::size_t k = 0; k < N; ++k) {
        const double abar = std::exp(-delta[c] * std::exp(p.a_log[c * N + k]));
        h[c * N + k] = abar * h[c * N + k] + delta[c] * B[k] * u[t * C + c];
        out += Cv[k] * h[c * N + k];
      }
      y[t * C + c] = out;
    }
  }
  return y;
}

inline double dsc(const LabelMask& p, const LabelMask& g, std::uint8_t k) {
  std::size_t np = 0, ng = 0, both = 0;
  for (std::size_t z = 0; z < p.depth; ++z)
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x) {
        const bool a = p.at(z, y, x) == k, b = g.at(z, y, x) == k;
        np += a;
        ng += b;
        both += a && b;
      }
  return np + ng == 0 ? 1.0 : 2.0 * double(both) / double(np + ng);
}

struct Voxel {
  long z, y, x;
};

inline std::vector<Voxel> boundary(const LabelMask& m, std::uint8_t k) {
  auto inside = [&](long z, long y, long x) {
    return z >= 0 && y >= 0 && x >= 0 && z < long(m.depth) && y < long(m.height) && x < long(m.width) &&
           m.at(z, y, x) == k;
  };
  std::vector<Voxel> out;
  for (long z = 0; z < long(m.depth); ++z)
    for (long y = 0; y < long(m.height); ++y)
      for (long x = 0; x < long(m.width); ++x)
        if (inside(z, y, x) && !(inside(z - 1, y, x) && inside(z + 1, y, x) && inside(z, y - 1, x) &&
                                 inside(z, y + 1, x) && inside(z, y, x - 1) && inside(z, y, x + 1))) {
          out.push_back({z, y, x});
        }
  return out;
}

// Directed 95th percentile, nearest rank, by exhaustive pairing.
inline double directed95(const std::vector<Voxel>& from, const std::vector<Voxel>& to,
                         const std::array<double, 3>& s) {
  std::vector<double> d;
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dz = double(a.z - b.z), dy = double(a.y - b.y), dx = double(a.x - b.x);
      best = std::min(best, (dz * dz) * (s[0] * s[0]) + (dy * dy) * (s[1] * s[1]) + (dx * dx) * (s[2] * s[2]));
    }
    d.push_back(std::sqrt(best));
  }
  std::sort(d.begin(), d.end());
  const std::size_t rank = (95 * d.size() + 99) / 100;  // ceil(0.95 n)
  return d[std::max<std::size_t>(rank, 1) - 1];
}

inline std::optional<double> hd95(const LabelMask& p, const LabelMask& g, std::uint8_t k) {
  const auto bp = boundary(p, k), bg = boundary(g, k);
  if (bp.empty() || bg.empty()) return std::nullopt;
  return std::max(directed95(bp, bg, p.spacing), directed95(bg, bp, p.spacing));
}

/// Random mask made of a few boxes of labels 1..classes over background.
inline LabelMask random_mask(SplitMix64& rng, std::size_t d, std::size_t h, std::size_t w, int classes) {
  LabelMask m(d, h, w);
  const int boxes = 1 + int(rng.next() % 4);
  for (int b = 0; b < boxes; ++b) {
    const auto label = static_cast<std::uint8_t>(1 + rng.next() % classes);
    std::size_t lo[3], hi[3];
    const std::size_t ext[3] = {d, h, w};
    for (int a = 0; a < 3; ++a) {
      lo[a] = rng.next() % ext[a];
      hi[a] = lo[a] + 1 + rng.next() % (ext[a] - lo[a]);
    }
    for (std::size_t z = lo[0]; z < hi[0]; ++z)
      for (std::size_t y = lo[1]; y < hi[1]; ++y)
        for (std::size_t x = lo[2]; x < hi[2]; ++x) m.at(z, y, x) = label;
  }
  // speckle so boundaries are irregular
  const std::size_t flips = m.size() / 20;
  for (std::size_t i = 0; i < flips; ++i) m.labels[rng.next() % m.size()] = static_cast<std::uint8_t>(rng.next() % (classes + 1));
  return m;
}

}  // namespace fmc::reference
