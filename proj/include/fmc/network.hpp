#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fmc/metrics.hpp"
#include "fmc/params.hpp"
#include "fmc/phantom.hpp"
#include "json.hpp"

namespace fmc {

/// fmc: wavelet down/upsampling with HFR + MG-SSM encoder stages.
/// baseline: max-pool / trilinear upsampling with plain convolution stages
/// sized to match the fmc stage parameter counts.
enum class Variant { fmc, baseline };

struct NetworkConfig {
  std::size_t stages = 3;
  std::size_t base_channels = 8;
  std::size_t in_channels = 1;
  std::size_t num_classes = 5;  ///< including background
  std::size_t state_dim = 8;
  std::array<std::size_t, 3> dilations{1, 2, 3};
  Variant variant = Variant::fmc;
  /// One weight per head, full resolution first. Empty: 1, 1/2, 1/4, ...
  /// normalized to sum 1.
  std::vector<double> supervision_weights;

  std::size_t channels(std::size_t stage) const { return base_channels << stage; }
  std::size_t divisor() const { return std::size_t{1} << stages; }
  std::vector<double> head_weights() const;
  void validate() const;
  /// Rejects volumes whose extents are not multiples of 2^stages.
  void check_volume(const Shape& volume) const;
};

nlohmann::json to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);

/// Intermediate features: encoder[i] is F^i (encoder[0] = stem output),
/// decoder[s] is the output of decoder stage s.
struct ForwardTrace {
  std::vector<Var> encoder;
  std::vector<Var> decoder;
};

/// dwt3, then mg_ssm on lll and hfr_refine on the seven high bands, each to
/// C_{i+1}/2 channels, concatenated. Scopes "mgssm" and "hfr".
Var encoder_stage(Var f, std::size_t stage_index, const NetworkConfig& cfg, ParamScope params);

/// max_pool2, conv3 -> group_norm -> silu -> conv3 with `hidden` channels.
Var baseline_encoder_stage(Var f, std::size_t stage_index, std::size_t hidden, const NetworkConfig& cfg,
                           ParamScope params);

/// Hidden widths making each baseline stage's parameter count match the fmc
/// stage as closely as possible.
std::vector<std::size_t> baseline_hidden_widths(const NetworkConfig& cfg);

/// Logits per decoder stage, full resolution first: one [K, D/2^s, H/2^s,
/// W/2^s] tensor for s = 0..S-1.
std::vector<Var> forward(Var volume, const NetworkConfig& cfg, ParamScope params, ForwardTrace* trace = nullptr);

/// All parameters of the architecture, initialized deterministically.
ParamStore init_params(const NetworkConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Loss

/// Nearest-neighbour downsampling: output voxel (z,y,x) takes (z f, y f, x f).
LabelMask downsample_labels(const LabelMask& labels, std::size_t factor);

/// Weighted cross-entropy (normalized by the summed voxel weights) plus soft
/// Dice loss 1 - mean_k (2 I_k + eps) / (S_k + G_k + eps) over classes present
/// in `labels`, on softmax probabilities of logits [K,D,H,W].
Var segmentation_loss(Var logits, const LabelMask& labels, const std::vector<double>& class_weights,
                      double dice_eps = 1e-5);

/// sum_s w_s * segmentation_loss(logits[s], labels downsampled by 2^s).
Var deep_supervision_loss(const std::vector<Var>& logits, const LabelMask& labels,
                          const std::vector<double>& class_weights, const std::vector<double>& head_weights);

/// Inverse class frequency over a training set, total / (K count_k), clipped
/// to [0.2, 5]. Absent classes get 5.
std::vector<double> class_weights_from(const std::vector<LabelMask>& labels, std::size_t num_classes);

// ---------------------------------------------------------------------------
// Inference and evaluation

LabelMask argmax_labels(const Tensor& logits, const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});
LabelMask predict(const ParamStore& params, const NetworkConfig& cfg, const Tensor& volume);

/// Foreground scores (classes 1..K-1) per sample.
std::vector<std::vector<ClassScore>> evaluate(const ParamStore& params, const NetworkConfig& cfg,
                                              const std::vector<PhantomSample>& samples);

/// Rounds every parameter to 32-bit precision.
void quantize_params(ParamStore& params);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 1;  ///< samples accumulated per optimizer step
  double learning_rate = 0.01;
  double momentum = 0.9;
  double poly_power = 0.9;
  double grad_clip = 12.0;  ///< global L2 norm; 0 disables
  std::uint64_t seed = 7;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;  ///< optimizer steps completed
  double loss = 0.0;     ///< mean step loss over the epoch
  double train_dsc = 0.0;  ///< foreground DSC of the pre-update predictions
  double learning_rate = 0.0;
};

nlohmann::json to_json(const EpochLog& log);

/// Raised when a step produces a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& what);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainResult {
  ParamStore params;  ///< quantized to 32-bit after the last step
  std::size_t steps = 0;
  std::vector<double> step_losses;
  std::vector<EpochLog> log;
  std::vector<double> class_weights;
  double initial_dsc = 0.0;
  double final_dsc = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainResult train(const NetworkConfig& net, const TrainConfig& cfg, const std::vector<PhantomSample>& data,
                  const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Checkpoints: "FMCK", version byte, u32 LE manifest length, JSON manifest,
// little-endian float32 parameter data.

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkConfig config;
  ParamStore params;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json metrics = nlohmann::json::object();
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fmc
