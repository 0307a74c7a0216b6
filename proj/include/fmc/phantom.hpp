#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmc/metrics.hpp"
#include "fmc/tensor.hpp"
#include "json.hpp"

namespace fmc {

struct PhantomConfig {
  std::array<std::size_t, 3> extents{24, 24, 24};  // (D, H, W)
  std::size_t classes = 4;                         // bodies; labels 1..classes
  std::size_t stages = 3;                          // extents must divide by 2^stages
  double spacing_jitter = 0.1;                     // fraction of the free z room per body
  double size_jitter = 0.03;                       // per-axis fraction on lateral semi-axes
  double blur_sigma = 1.0;                         // voxels
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  /// Smallest depth that fits `classes` bodies with gaps.
  std::size_t min_depth() const { return 4 * classes; }
  void validate() const;
};

nlohmann::json to_json(const PhantomConfig& cfg);
/// Unknown keys are rejected; missing keys keep defaults.
PhantomConfig phantom_config_from_json(const nlohmann::json& j);

struct PhantomSample {
  Tensor intensity;  // [1, D, H, W], values representable in 32-bit
  LabelMask labels;
};

/// Stacked near-identical ellipsoids along z, blurred and noised.
PhantomSample generate(const PhantomConfig& cfg);

/// Per-sample seed for sample `index` of a dataset seeded with `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

// ---------------------------------------------------------------------------
// Volume files: one-line JSON header, '\n', little-endian payload.

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class VolumeKind { intensity, labels };

struct Volume {
  VolumeKind kind = VolumeKind::intensity;
  std::array<std::size_t, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> intensity;        // kind == intensity
  std::vector<std::uint8_t> labels;    // kind == labels

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
};

/// Accepts [D,H,W] or [1,D,H,W]; values are rounded to 32-bit.
Volume intensity_volume(const Tensor& t, const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});
Volume label_volume(const LabelMask& mask);
Tensor to_tensor(const Volume& v);  // [1, D, H, W]
LabelMask to_mask(const Volume& v);

std::string encode_volume(const Volume& v);
/// `declared_classes`, when given, bounds label values.
Volume decode_volume(const std::string& bytes, std::optional<std::size_t> declared_classes = std::nullopt);

void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path, std::optional<std::size_t> declared_classes = std::nullopt);

// ---------------------------------------------------------------------------
// Dataset directories: NNN_img.vvol / NNN_lbl.vvol pairs plus dataset.json.

struct Dataset {
  PhantomConfig config;
  std::vector<PhantomSample> samples;
};

std::vector<PhantomSample> generate_dataset(const PhantomConfig& cfg, std::size_t count);

/// Writes into a fresh directory; nothing is left behind on failure.
void write_dataset(const std::filesystem::path& dir, const PhantomConfig& cfg, std::size_t count);
Dataset read_dataset(const std::filesystem::path& dir);

/// Writes `bytes` to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace fmc
