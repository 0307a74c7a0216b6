#include "fmc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace fmc {

LabelMask::LabelMask(std::size_t d, std::size_t h, std::size_t w, std::uint8_t fill)
    : depth(d), height(h), width(w), labels(d * h * w, fill) {}

void LabelMask::validate(std::size_t num_classes) const {
  if (labels.size() != depth * height * width) throw std::invalid_argument("label mask size mismatch");
  for (double s : spacing) {
    if (!(s > 0.0)) throw std::invalid_argument("voxel spacing must be strictly positive");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at voxel " + std::to_string(i) +
                                  " outside 0.." + std::to_string(num_classes - 1));
    }
  }
}

namespace {

void require_same_grid(const LabelMask& a, const LabelMask& b, const char* what) {
  if (!a.same_grid(b)) {
    throw std::invalid_argument(std::string(what) + ": mask shapes differ (" + std::to_string(a.depth) + "x" +
                                std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                                std::to_string(b.depth) + "x" + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + ")");
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact 1-D squared distance transform (lower envelope of parabolas) over
// `n` samples spaced `step` apart; f holds the incoming squared distances.
void edt_1d(const double* f, double* out, std::size_t n, double step, std::vector<std::size_t>& v,
            std::vector<double>& zb) {
  const double s2 = step * step;
  v.clear();
  zb.clear();
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + s2 * double(q) * double(q);
    while (!v.empty()) {
      const std::size_t p = v.back();
      const double fp = f[p] + s2 * double(p) * double(p);
      const double x = (fq - fp) / (2.0 * s2 * double(q - p));
      if (x <= zb.back()) {
        v.pop_back();
        zb.pop_back();
      } else {
        v.push_back(q);
        zb.push_back(x);
        break;
      }
    }
    if (v.empty()) {
      v.push_back(q);
      zb.push_back(-kInf);
    }
  }
  if (v.empty()) {
    std::fill(out, out + n, kInf);
    return;
  }
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (k + 1 < v.size() && zb[k + 1] < double(q)) ++k;
    const double d = double(q) - double(v[k]);
    out[q] = f[v[k]] + d * d * s2;
  }
}

// Squared distance (mm^2) from every voxel to the nearest feature voxel.
std::vector<double> squared_edt(const LabelMask& grid, const std::vector<std::size_t>& features) {
  const std::size_t d = grid.depth, h = grid.height, w = grid.width;
  std::vector<double> f(d * h * w, kInf);
  for (std::size_t i : features) f[i] = 0.0;
  std::vector<double> line_in, line_out;
  std::vector<std::size_t> v;
  std::vector<double> zb;
  auto pass = [&](std::size_t n, std::size_t stride, double step, auto&& starts) {
    line_in.resize(n);
    line_out.resize(n);
    for (std::size_t base : starts) {
      for (std::size_t q = 0; q < n; ++q) line_in[q] = f[base + q * stride];
      edt_1d(line_in.data(), line_out.data(), n, step, v, zb);
      for (std::size_t q = 0; q < n; ++q) f[base + q * stride] = line_out[q];
    }
  };
  std::vector<std::size_t> starts;
  // z lines
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) starts.push_back(y * w + x);
  pass(d, h * w, grid.spacing[0], starts);
  starts.clear();
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t x = 0; x < w; ++x) starts.push_back(z * h * w + x);
  pass(h, w, grid.spacing[1], starts);
  starts.clear();
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y) starts.push_back((z * h + y) * w);
  pass(w, 1, grid.spacing[2], starts);
  return f;
}

std::vector<double> directed_distances(const LabelMask& grid, const std::vector<std::size_t>& from,
                                       const std::vector<std::size_t>& to) {
  const std::vector<double> sq = squared_edt(grid, to);
  std::vector<double> out;
  out.reserve(from.size());
  for (std::size_t i : from) out.push_back(std::sqrt(sq[i]));
  return out;
}

}  // namespace

double dsc(const LabelMask& pred, const LabelMask& gt, std::uint8_t k) {
  require_same_grid(pred, gt, "dsc");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_p = pred.labels[i] == k;
    const bool in_g = gt.labels[i] == k;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

std::vector<std::size_t> boundary_voxels(const LabelMask& m, std::uint8_t k) {
  std::vector<std::size_t> out;
  const long d = m.depth, h = m.height, w = m.width;
  static const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (long z = 0; z < d; ++z)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        if (m.at(z, y, x) != k) continue;
        bool edge = false;
        for (const auto& o : off) {
          const long zz = z + o[0], yy = y + o[1], xx = x + o[2];
          if (zz < 0 || yy < 0 || xx < 0 || zz >= d || yy >= h || xx >= w || m.at(zz, yy, xx) != k) {
            edge = true;
            break;
          }
        }
        if (edge) out.push_back((z * h + y) * w + x);
      }
  return out;
}

double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty list");
  std::sort(values.begin(), values.end());
  const double rank = std::ceil(q / 100.0 * double(values.size()));
  const std::size_t idx = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
  return values[std::min(idx, values.size() - 1)];
}

std::optional<double> hd95(const LabelMask& pred, const LabelMask& gt, std::uint8_t k) {
  require_same_grid(pred, gt, "hd95");
  if (pred.spacing != gt.spacing) throw std::invalid_argument("hd95: masks have different spacing");
  const auto bp = boundary_voxels(pred, k);
  const auto bg = boundary_voxels(gt, k);
  if (bp.empty() || bg.empty()) return std::nullopt;
  const double a = nearest_rank_percentile(directed_distances(pred, bp, bg), 95.0);
  const double b = nearest_rank_percentile(directed_distances(pred, bg, bp), 95.0);
  return std::max(a, b);
}

std::vector<ClassScore> score_classes(const LabelMask& pred, const LabelMask& gt, std::uint8_t first,
                                      std::uint8_t last) {
  std::vector<ClassScore> out;
  for (unsigned k = first; k <= last; ++k) {
    const auto label = static_cast<std::uint8_t>(k);
    out.push_back({label, dsc(pred, gt, label), hd95(pred, gt, label)});
  }
  return out;
}

nlohmann::json evaluation_report(const std::vector<std::vector<ClassScore>>& per_sample,
                                 const std::array<double, 3>& spacing) {
  struct Acc {
    double dsc = 0.0;
    std::size_t n = 0;
    double hd = 0.0;
    std::size_t n_hd = 0;
  };
  std::map<int, Acc> acc;
  nlohmann::json undefined = nlohmann::json::array();
  for (std::size_t s = 0; s < per_sample.size(); ++s) {
    for (const auto& c : per_sample[s]) {
      Acc& a = acc[c.label];
      a.dsc += c.dsc;
      ++a.n;
      if (c.hd95) {
        a.hd += *c.hd95;
        ++a.n_hd;
      } else {
        undefined.push_back({{"sample", s}, {"class", c.label}});
      }
    }
  }
  nlohmann::json classes = nlohmann::json::array();
  double dsc_total = 0.0, hd_total = 0.0;
  std::size_t hd_count = 0;
  for (const auto& [label, a] : acc) {
    const double md = a.dsc / double(a.n);
    nlohmann::json entry{{"class", label}, {"dsc", md}};
    if (a.n_hd) {
      const double mh = a.hd / double(a.n_hd);
      entry["hd95"] = mh;
      hd_total += mh;
      ++hd_count;
    } else {
      entry["hd95"] = nullptr;
    }
    dsc_total += md;
    classes.push_back(entry);
  }
  nlohmann::json report;
  report["samples"] = per_sample.size();
  report["per_class"] = classes;
  report["mean_dsc"] = acc.empty() ? 0.0 : dsc_total / double(acc.size());
  report["mean_hd95"] = hd_count ? nlohmann::json(hd_total / double(hd_count)) : nlohmann::json(nullptr);
  report["undefined_hd95"] = undefined;
  report["spacing"] = spacing;
  return report;
}

double mean_dsc(const std::vector<std::vector<ClassScore>>& per_sample) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : per_sample)
    for (const auto& c : s) {
      total += c.dsc;
      ++n;
    }
  return n ? total / double(n) : 0.0;
}

}  // namespace fmc
