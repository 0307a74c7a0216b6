#include "fmc/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "fmc/hfr.hpp"
#include "fmc/json_util.hpp"
#include "fmc/rng.hpp"
#include "fmc/ssm.hpp"
#include "fmc/wavelet.hpp"

namespace fmc {

// ---------------------------------------------------------------------------
// Config

std::vector<double> NetworkConfig::head_weights() const {
  if (!supervision_weights.empty()) return supervision_weights;
  std::vector<double> w(stages);
  double total = 0.0;
  for (std::size_t s = 0; s < stages; ++s) {
    w[s] = std::ldexp(1.0, -static_cast<int>(s));
    total += w[s];
  }
  for (double& v : w) v /= total;
  return w;
}

void NetworkConfig::validate() const {
  if (stages < 1 || stages > 6) throw ConfigError("network: stages must be in 1..6");
  if (base_channels < 1) throw ConfigError("network: base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("network: in_channels must be >= 1");
  if (num_classes < 2 || num_classes > 255) throw ConfigError("network: num_classes must be in 2..255");
  if (state_dim < 1) throw ConfigError("network: state_dim must be >= 1");
  for (std::size_t d : dilations) {
    if (d < 1) throw ConfigError("network: dilations must be >= 1");
  }
  if (!supervision_weights.empty()) {
    if (supervision_weights.size() != stages) {
      throw ConfigError("network: supervision_weights needs one weight per stage (" + std::to_string(stages) + ")");
    }
    double total = 0.0;
    for (double w : supervision_weights) {
      if (!(w > 0.0)) throw ConfigError("network: supervision weights must be > 0");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("network: supervision weights must sum to 1");
  }
}

void NetworkConfig::check_volume(const Shape& volume) const {
  if (volume.size() != 4 || volume[0] != in_channels) {
    throw ShapeError("network input must be [" + std::to_string(in_channels) + ",D,H,W], got " + to_string(volume));
  }
  static const char* axis[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (volume[a + 1] % divisor() != 0) {
      throw ShapeError("network input " + std::string(axis[a]) + " " + std::to_string(volume[a + 1]) +
                       " is not divisible by " + std::to_string(divisor()) + " (2^" + std::to_string(stages) + ")");
    }
  }
}

namespace {

const char* variant_name(Variant v) { return v == Variant::fmc ? "fmc" : "baseline"; }

}  // namespace

nlohmann::json to_json(const NetworkConfig& c) {
  nlohmann::json j{{"stages", c.stages},       {"base_channels", c.base_channels},
                   {"in_channels", c.in_channels}, {"num_classes", c.num_classes},
                   {"state_dim", c.state_dim}, {"dilations", c.dilations},
                   {"variant", variant_name(c.variant)}};
  j["supervision_weights"] = c.supervision_weights;
  return j;
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"stages", "base_channels", "in_channels", "num_classes", "state_dim", "dilations",
                          "variant", "supervision_weights"},
                      "network");
  NetworkConfig c;
  read_optional(j, "stages", c.stages, "network");
  read_optional(j, "base_channels", c.base_channels, "network");
  read_optional(j, "in_channels", c.in_channels, "network");
  read_optional(j, "num_classes", c.num_classes, "network");
  read_optional(j, "state_dim", c.state_dim, "network");
  read_optional(j, "dilations", c.dilations, "network");
  read_optional(j, "supervision_weights", c.supervision_weights, "network");
  std::string variant = variant_name(c.variant);
  read_optional(j, "variant", variant, "network");
  if (variant == "fmc") {
    c.variant = Variant::fmc;
  } else if (variant == "baseline") {
    c.variant = Variant::baseline;
  } else {
    throw ConfigError("network.variant: expected \"fmc\" or \"baseline\", got \"" + variant + "\"");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Architecture

Var encoder_stage(Var f, std::size_t stage_index, const NetworkConfig& cfg, ParamScope params) {
  require_rank(f.value(), 4, "encoder_stage");
  const std::size_t c = f.value().dim(0);
  const std::size_t half_out = c;  // C_{i+1} / 2 with C_{i+1} = 2 C_i
  const std::array<Var, 8> bands = dwt3(f);

  MgSsmConfig mg;
  mg.dilations = cfg.dilations;
  mg.state_dim = cfg.state_dim;
  Var low = mg_ssm(bands[0], mg, half_out, params.sub("mgssm"));

  HfrConfig hc;
  hc.stage_index = stage_index;
  hc.channels = c;
  HighBands high_bands;
  std::copy(bands.begin() + 1, bands.end(), high_bands.begin());
  Var high = hfr_refine(high_bands, hc, half_out, params.sub("hfr"));

  const Var parts[] = {low, high};
  return concat_channels(parts);
}

Var baseline_encoder_stage(Var f, std::size_t, std::size_t hidden, const NetworkConfig&, ParamScope params) {
  require_rank(f.value(), 4, "baseline_encoder_stage");
  const std::size_t c = f.value().dim(0);
  const std::size_t out = 2 * c;
  Var pooled = max_pool2(f);
  ParamScope c1 = params.sub("conv1"), n1 = params.sub("norm1"), c2 = params.sub("conv2");
  Var h = conv3d(pooled, c1.get("weight", {hidden, c, 3, 3, 3}, Init::fan_in_uniform, c * 27),
                 c1.get("bias", {hidden}, Init::zeros), Conv3dOptions{});
  h = channel_affine(group_norm(h, default_norm_groups(hidden)), n1.get("gamma", {hidden}, Init::ones),
                     n1.get("beta", {hidden}, Init::zeros));
  h = silu(h);
  return conv3d(h, c2.get("weight", {out, hidden, 3, 3, 3}, Init::fan_in_uniform, hidden * 27),
                c2.get("bias", {out}, Init::zeros), Conv3dOptions{});
}

std::vector<std::size_t> baseline_hidden_widths(const NetworkConfig& cfg) {
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < cfg.stages; ++i) {
    const std::size_t c = cfg.channels(i), out = 2 * c;
    Tape tape;
    ParamStore store;
    ParamScope scope(tape, store, 0);
    encoder_stage(tape.constant(Tensor({c, 2, 2, 2})), i, cfg, scope);
    const double target = double(parameter_count(store));
    // 27 c M + 3 M + 27 M out + out parameters
    const double m = (target - double(out)) / (27.0 * double(c + out) + 3.0);
    widths.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(m))));
  }
  return widths;
}

std::vector<Var> forward(Var volume, const NetworkConfig& cfg, ParamScope params, ForwardTrace* trace) {
  cfg.validate();
  cfg.check_volume(volume.shape());
  const std::size_t c0 = cfg.base_channels;

  ParamScope stem = params.sub("stem");
  std::vector<Var> enc;
  enc.push_back(conv3d(volume,
                       stem.get("weight", {c0, cfg.in_channels, 3, 3, 3}, Init::fan_in_uniform, cfg.in_channels * 27),
                       stem.get("bias", {c0}, Init::zeros), Conv3dOptions{}));

  std::vector<std::size_t> hidden;
  if (cfg.variant == Variant::baseline) hidden = baseline_hidden_widths(cfg);
  for (std::size_t i = 0; i < cfg.stages; ++i) {
    ParamScope ps = params.sub("enc" + std::to_string(i));
    enc.push_back(cfg.variant == Variant::fmc ? encoder_stage(enc.back(), i, cfg, ps)
                                              : baseline_encoder_stage(enc.back(), i, hidden[i], cfg, ps));
  }

  std::vector<Var> dec(cfg.stages + 1);
  std::vector<Var> logits(cfg.stages);
  dec[cfg.stages] = enc[cfg.stages];
  for (std::size_t s = cfg.stages; s-- > 0;) {
    ParamScope ds = params.sub("dec" + std::to_string(s));
    const std::size_t cs = cfg.channels(s);
    Var up;
    if (cfg.variant == Variant::fmc) {
      up = wtu(enc[s], dec[s + 1], ds.sub("wtu"));
    } else {
      const Var parts[] = {enc[s], upsample_trilinear2(dec[s + 1])};
      ParamScope fs = ds.sub("fuse");
      const std::size_t cin = cs + cfg.channels(s + 1);
      up = pointwise_linear(concat_channels(parts), fs.get("weight", {cs, cin}, Init::fan_in_uniform, cin),
                            fs.get("bias", {cs}, Init::zeros));
    }
    dec[s] = res_block(up, 0, ds.sub("res"));
    ParamScope hs = params.sub("head" + std::to_string(s));
    logits[s] = pointwise_linear(dec[s], hs.get("weight", {cfg.num_classes, cs}, Init::fan_in_uniform, cs),
                                 hs.get("bias", {cfg.num_classes}, Init::zeros));
  }
  if (trace) {
    trace->encoder = enc;
    trace->decoder.assign(dec.begin(), dec.begin() + cfg.stages);
  }
  return logits;
}

ParamStore init_params(const NetworkConfig& cfg, std::uint64_t seed) {
  const std::size_t n = cfg.divisor();
  Tape tape;
  ParamStore store;
  ParamScope scope(tape, store, seed);
  forward(tape.constant(Tensor({cfg.in_channels, n, n, n})), cfg, scope);
  return store;
}

// ---------------------------------------------------------------------------
// Loss

LabelMask downsample_labels(const LabelMask& labels, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("downsample factor must be >= 1");
  if (factor == 1) return labels;
  if (labels.depth % factor || labels.height % factor || labels.width % factor) {
    throw ShapeError("label mask extents are not divisible by " + std::to_string(factor));
  }
  LabelMask out(labels.depth / factor, labels.height / factor, labels.width / factor);
  for (std::size_t i = 0; i < 3; ++i) out.spacing[i] = labels.spacing[i] * double(factor);
  for (std::size_t z = 0; z < out.depth; ++z)
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) out.at(z, y, x) = labels.at(z * factor, y * factor, x * factor);
  return out;
}

Var segmentation_loss(Var logits, const LabelMask& labels, const std::vector<double>& class_weights,
                      double dice_eps) {
  const Tensor& z = logits.value();
  require_rank(z, 4, "segmentation_loss");
  const std::size_t K = z.dim(0);
  if (z.dim(1) != labels.depth || z.dim(2) != labels.height || z.dim(3) != labels.width) {
    throw ShapeError("segmentation_loss: logits " + to_string(z.shape()) + " do not match label mask " +
                     std::to_string(labels.depth) + "x" + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width));
  }
  if (class_weights.size() != K) {
    throw ShapeError("segmentation_loss: " + std::to_string(class_weights.size()) + " class weights for " +
                     std::to_string(K) + " classes");
  }
  labels.validate(K);
  const std::size_t V = labels.size();
  const std::vector<std::uint8_t>& y = labels.labels;

  auto prob = std::make_shared<std::vector<double>>(K * V);  // [K, V]
  std::vector<double>& p = *prob;
  double ce_num = 0.0, weight_total = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    double m = z[v];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k * V + v]);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      p[k * V + v] = std::exp(z[k * V + v] - m);
      s += p[k * V + v];
    }
    for (std::size_t k = 0; k < K; ++k) p[k * V + v] /= s;
    const double w = class_weights[y[v]];
    ce_num += w * (z[y[v] * V + v] - m - std::log(s));
    weight_total += w;
  }
  if (!(weight_total > 0.0)) throw std::invalid_argument("segmentation_loss: class weights sum to zero");
  const double ce = -ce_num / weight_total;

  std::vector<double> inter(K, 0.0), psum(K, 0.0), gcount(K, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t v = 0; v < V; ++v) {
      psum[k] += p[k * V + v];
      if (y[v] == k) {
        inter[k] += p[k * V + v];
        gcount[k] += 1.0;
      }
    }
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < K; ++k)
    if (gcount[k] > 0.0) present.push_back(k);
  double dice = 0.0;
  for (std::size_t k : present) dice += (2.0 * inter[k] + dice_eps) / (psum[k] + gcount[k] + dice_eps);
  dice /= double(present.size());

  // d(dice loss)/d p_k at a voxel: -(1/|P|) (2 [y=k] den - num) / den^2
  std::vector<double> dq_in(K, 0.0), dq_out(K, 0.0);
  for (std::size_t k : present) {
    const double num = 2.0 * inter[k] + dice_eps, den = psum[k] + gcount[k] + dice_eps;
    dq_in[k] = -(2.0 * den - num) / (den * den) / double(present.size());
    dq_out[k] = num / (den * den) / double(present.size());
  }

  auto backward = [prob, y, weights = class_weights, weight_total, dq_in, dq_out, K, V](
                      const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    const std::vector<double>& p = *prob;
    Tensor& gz = *grads[0];
    const double go = g[0];
    std::vector<double> q(K);
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t yv = y[v];
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        q[k] = k == yv ? dq_in[k] : dq_out[k];
        dot += p[k * V + v] * q[k];
      }
      const double wv = weights[yv] / weight_total;
      for (std::size_t k = 0; k < K; ++k) {
        const double pk = p[k * V + v];
        const double ce_grad = wv * (pk - (k == yv ? 1.0 : 0.0));
        gz[k * V + v] += go * (ce_grad + pk * (q[k] - dot));
      }
    }
  };
  return logits.tape->record(Tensor::scalar(ce + (1.0 - dice)), {logits.id}, backward, "segmentation_loss");
}

Var deep_supervision_loss(const std::vector<Var>& logits, const LabelMask& labels,
                          const std::vector<double>& class_weights, const std::vector<double>& head_weights) {
  if (logits.empty() || logits.size() != head_weights.size()) {
    throw std::invalid_argument("deep_supervision_loss: " + std::to_string(logits.size()) + " heads but " +
                                std::to_string(head_weights.size()) + " weights");
  }
  Var total;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    const Var term =
        scale(segmentation_loss(logits[s], downsample_labels(labels, std::size_t{1} << s), class_weights),
              head_weights[s]);
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

std::vector<double> class_weights_from(const std::vector<LabelMask>& labels, std::size_t num_classes) {
  std::vector<double> count(num_classes, 0.0);
  double total = 0.0;
  for (const auto& m : labels) {
    m.validate(num_classes);
    for (std::uint8_t v : m.labels) count[v] += 1.0;
    total += double(m.size());
  }
  std::vector<double> w(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double raw = count[k] > 0.0 ? total / (double(num_classes) * count[k]) : 5.0;
    w[k] = std::clamp(raw, 0.2, 5.0);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Inference

LabelMask argmax_labels(const Tensor& logits, const std::array<double, 3>& spacing) {
  require_rank(logits, 4, "argmax_labels");
  const std::size_t K = logits.dim(0);
  LabelMask out(logits.dim(1), logits.dim(2), logits.dim(3));
  out.spacing = spacing;
  const std::size_t V = out.size();
  for (std::size_t v = 0; v < V; ++v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[k * V + v] > logits[best * V + v]) best = k;
    out.labels[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

LabelMask predict(const ParamStore& params, const NetworkConfig& cfg, const Tensor& volume) {
  ParamStore local = params;
  Tape tape;
  ParamScope scope(tape, local, 0);
  const auto logits = forward(tape.constant(volume), cfg, scope);
  if (local.size() != params.size()) throw std::invalid_argument("parameter store does not match the network config");
  return argmax_labels(logits[0].value());
}

std::vector<std::vector<ClassScore>> evaluate(const ParamStore& params, const NetworkConfig& cfg,
                                              const std::vector<PhantomSample>& samples) {
  std::vector<std::vector<ClassScore>> out;
  for (const auto& s : samples) {
    LabelMask pred = predict(params, cfg, s.intensity);
    pred.spacing = s.labels.spacing;
    out.push_back(score_classes(pred, s.labels, 1, static_cast<std::uint8_t>(cfg.num_classes - 1)));
  }
  return out;
}

void quantize_params(ParamStore& params) {
  for (auto& [name, t] : params)
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------
// Training

namespace {

double foreground_dsc(const LabelMask& pred, const LabelMask& gt, std::size_t num_classes) {
  double total = 0.0;
  for (std::size_t k = 1; k < num_classes; ++k) total += dsc(pred, gt, static_cast<std::uint8_t>(k));
  return total / double(num_classes - 1);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
  if (!(poly_power >= 0.0)) throw ConfigError("train: poly_power must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},     {"poly_power", c.poly_power}, {"grad_clip", c.grad_clip},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"epochs", "batch_size", "learning_rate", "momentum", "poly_power", "grad_clip", "seed"},
                      "train");
  TrainConfig c;
  read_optional(j, "epochs", c.epochs, "train");
  read_optional(j, "batch_size", c.batch_size, "train");
  read_optional(j, "learning_rate", c.learning_rate, "train");
  read_optional(j, "momentum", c.momentum, "train");
  read_optional(j, "poly_power", c.poly_power, "train");
  read_optional(j, "grad_clip", c.grad_clip, "train");
  read_optional(j, "seed", c.seed, "train");
  c.validate();
  return c;
}

nlohmann::json to_json(const EpochLog& l) {
  return {{"epoch", l.epoch}, {"step", l.step}, {"loss", l.loss}, {"train_dsc", l.train_dsc},
          {"lr", l.learning_rate}};
}

DivergenceError::DivergenceError(std::size_t step, const std::string& what)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

TrainResult train(const NetworkConfig& net, const TrainConfig& cfg, const std::vector<PhantomSample>& data,
                  const EpochCallback& on_epoch) {
  net.validate();
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  std::vector<LabelMask> masks;
  for (const auto& s : data) {
    net.check_volume(s.intensity.shape());
    if (s.intensity.dim(1) != s.labels.depth || s.intensity.dim(2) != s.labels.height ||
        s.intensity.dim(3) != s.labels.width) {
      throw ShapeError("train: intensity and label extents differ");
    }
    masks.push_back(s.labels);
  }

  TrainResult result;
  result.class_weights = class_weights_from(masks, net.num_classes);
  result.params = init_params(net, cfg.seed);
  ParamStore initial = result.params;
  quantize_params(initial);
  result.initial_dsc = mean_dsc(evaluate(initial, net, data));

  const std::vector<double> head_w = net.head_weights();
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * per_epoch;
  ParamStore velocity;
  for (const auto& [name, t] : result.params) velocity.emplace(name, Tensor(t.shape()));

  SplitMix64 order_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.next() % i]);

    double epoch_loss = 0.0, epoch_dsc = 0.0;
    std::size_t dsc_samples = 0;
    double lr = cfg.learning_rate;
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t first = b * cfg.batch_size;
      const std::size_t last = std::min(first + cfg.batch_size, data.size());
      std::map<std::string, Tensor> grad;
      double step_loss = 0.0;
      try {
        for (std::size_t j = first; j < last; ++j) {
          const PhantomSample& s = data[order[j]];
          Tape tape;
          ParamScope scope(tape, result.params, cfg.seed);
          const auto logits = forward(tape.constant(s.intensity), net, scope);
          Var loss = deep_supervision_loss(logits, s.labels, result.class_weights, head_w);
          tape.backward(loss);
          step_loss += loss.value()[0];
          LabelMask pred = argmax_labels(logits[0].value(), s.labels.spacing);
          epoch_dsc += foreground_dsc(pred, s.labels, net.num_classes);
          ++dsc_samples;
          for (auto& [name, g] : scope.gradients()) {
            auto it = grad.find(name);
            if (it == grad.end()) {
              grad.emplace(name, std::move(g));
            } else {
              it->second += g;
            }
          }
        }
      } catch (const NumericError& e) {
        throw DivergenceError(step, e.what());
      }
      const double inv = 1.0 / double(last - first);
      step_loss *= inv;
      if (!std::isfinite(step_loss)) throw DivergenceError(step, "non-finite loss");
      double norm2 = 0.0;
      for (auto& [name, g] : grad) {
        g *= inv;
        norm2 += squared_norm(g);
      }
      if (!std::isfinite(norm2)) throw DivergenceError(step, "non-finite gradient");
      const double norm = std::sqrt(norm2);
      const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
      lr = cfg.learning_rate * std::pow(1.0 - double(step) / double(total_steps), cfg.poly_power);
      for (auto& [name, p] : result.params) {
        auto git = grad.find(name);
        if (git == grad.end()) continue;
        Tensor& v = velocity.at(name);
        auto vd = v.data();
        auto pd = p.data();
        auto gd = git->second.data();
        for (std::size_t i = 0; i < pd.size(); ++i) {
          vd[i] = cfg.momentum * vd[i] + clip * gd[i];
          pd[i] -= lr * vd[i];
        }
      }
      result.step_losses.push_back(step_loss);
      epoch_loss += step_loss;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = step;
    log.loss = epoch_loss / double(per_epoch);
    log.train_dsc = epoch_dsc / double(dsc_samples);
    log.learning_rate = lr;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.steps = step;
  quantize_params(result.params);
  result.final_dsc = mean_dsc(evaluate(result.params, net, data));
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= std::uint32_t(p[b]) << (8 * b);
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.params) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += 4 * t.size();
  }
  nlohmann::json manifest{{"config", to_json(ckpt.config)}, {"params", table}, {"step", ckpt.step},
                          {"seed", ckpt.seed}, {"metrics", ckpt.metrics}};
  const std::string text = manifest.dump();
  std::string out = "FMCK";
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : ckpt.params) {
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 9 || bytes.compare(0, 4, "FMCK") != 0) throw FormatError("checkpoint: bad magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(p[4]));
  }
  const std::size_t len = get_u32(p + 5);
  if (bytes.size() < 9 + len) throw FormatError("checkpoint: manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(9, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  reject_unknown_keys(manifest, {"config", "params", "step", "seed", "metrics"}, "checkpoint manifest");
  Checkpoint ckpt;
  ckpt.config = network_config_from_json(manifest.at("config"));
  ckpt.step = manifest.at("step").get<std::uint64_t>();
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  ckpt.metrics = manifest.value("metrics", nlohmann::json::object());

  const ParamStore expected = init_params(ckpt.config, 0);
  const std::size_t data_begin = 9 + len;
  const std::size_t data_size = bytes.size() - data_begin;
  std::size_t covered = 0;
  for (const auto& entry : manifest.at("params")) {
    reject_unknown_keys(entry, {"name", "shape", "offset"}, "checkpoint parameter");
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError("checkpoint: unknown parameter " + name);
    if (it->second.shape() != shape) {
      throw FormatError("checkpoint: parameter " + name + " has shape " + to_string(shape) + ", config needs " +
                        to_string(it->second.shape()));
    }
    if (ckpt.params.count(name)) throw FormatError("checkpoint: duplicate parameter " + name);
    const std::size_t n = numel(shape);
    if (offset + 4 * n > data_size) throw FormatError("checkpoint: data for " + name + " is truncated");
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t bits = get_u32(p + data_begin + offset + 4 * i);
      float f;
      std::memcpy(&f, &bits, 4);
      t[i] = f;
    }
    covered += 4 * n;
    ckpt.params.emplace(name, std::move(t));
  }
  if (ckpt.params.size() != expected.size()) {
    throw FormatError("checkpoint: " + std::to_string(expected.size() - ckpt.params.size()) +
                      " parameters missing");
  }
  if (covered != data_size) {
    throw FormatError("checkpoint: data section is " + std::to_string(data_size) + " bytes, parameters need " +
                      std::to_string(covered));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace fmc
