#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "json.hpp"

namespace fmc {

/// Integer label volume [D,H,W] with voxel spacing (sz, sy, sx) in mm.
struct LabelMask {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  LabelMask() = default;
  LabelMask(std::size_t d, std::size_t h, std::size_t w, std::uint8_t fill = 0);

  std::size_t size() const { return labels.size(); }
  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[(z * height + y) * width + x]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return labels[(z * height + y) * width + x];
  }
  bool same_grid(const LabelMask& other) const {
    return depth == other.depth && height == other.height && width == other.width;
  }
  /// Throws if any label >= num_classes or spacing is not strictly positive.
  void validate(std::size_t num_classes) const;
};

/// 2|P n G| / (|P| + |G|) for class k; 1 when both sets are empty.
double dsc(const LabelMask& pred, const LabelMask& gt, std::uint8_t k);

/// Face-connected (6-neighbour) boundary voxels of class k, as flat indices.
/// Voxels on the volume border count as boundary.
std::vector<std::size_t> boundary_voxels(const LabelMask& mask, std::uint8_t k);

/// Symmetric 95th-percentile boundary distance in mm, using an exact Euclidean
/// distance transform and nearest-rank percentiles per direction. Empty when
/// either class-k set is empty.
std::optional<double> hd95(const LabelMask& pred, const LabelMask& gt, std::uint8_t k);

/// Nearest-rank percentile of an unsorted list (q in (0, 100]).
double nearest_rank_percentile(std::vector<double> values, double q);

struct ClassScore {
  std::uint8_t label = 0;
  double dsc = 0.0;
  std::optional<double> hd95;
};

/// Per-class scores for labels first..last (inclusive).
std::vector<ClassScore> score_classes(const LabelMask& pred, const LabelMask& gt, std::uint8_t first,
                                      std::uint8_t last);

/// Evaluation report: per-class mean DSC/HD95 over samples, overall means of
/// the per-class entries, the (sample, class) pairs whose HD95 was undefined,
/// and the voxel spacing.
nlohmann::json evaluation_report(const std::vector<std::vector<ClassScore>>& per_sample,
                                 const std::array<double, 3>& spacing);

/// Mean DSC over all classes and samples in the list.
double mean_dsc(const std::vector<std::vector<ClassScore>>& per_sample);

}  // namespace fmc
