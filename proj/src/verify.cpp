#include "fmc/verify.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "fmc/hfr.hpp"
#include "fmc/network.hpp"
#include "fmc/reference.hpp"
#include "fmc/rng.hpp"
#include "fmc/ssm.hpp"
#include "fmc/wavelet.hpp"

namespace fmc::verify {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

Shape random_feature_shape(SplitMix64& rng) {
  // [C, D, H, W] with C in 1..4 and even spatial extents 2..16
  return {1 + rng.next() % 4, 2 * (1 + rng.next() % 8), 2 * (1 + rng.next() % 8), 2 * (1 + rng.next() % 8)};
}

void randomize_biases(ParamStore& st, std::uint64_t seed) {
  for (auto& [n, t] : st)
    if (n.find("bias") != std::string::npos || n.find("beta") != std::string::npos)
      t = random_tensor(t.shape(), seed++, -0.3, 0.3);
}

}  // namespace

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  SplitMix64 rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double op_grad_error(const std::function<Var(std::span<const Var>)>& op, const std::vector<Tensor>& inputs,
                     std::uint64_t seed, std::size_t max_coords) {
  Tensor weights;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    weights = random_tensor(op(vars).shape(), seed);
  }
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.max_coords_per_input = max_coords;
  opt.seed = seed;
  return grad_check([&](Tape&, std::span<const Var> xs) { return weighted_sum(op(xs), weights); }, inputs, opt)
      .max_rel_error;
}

double module_grad_error(const std::function<Var(ParamScope&, std::span<const Var>)>& module,
                         const std::vector<Tensor>& inputs, std::uint64_t seed, std::size_t max_coords,
                         const std::function<void(ParamStore&)>& prepare) {
  ParamStore store;
  Tensor weights;
  {
    Tape tape;
    ParamScope scope(tape, store, seed);
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    weights = random_tensor(module(scope, vars).shape(), seed + 1);
  }
  if (prepare) prepare(store);
  std::vector<std::string> names;
  std::vector<Tensor> all = inputs;
  for (const auto& [name, t] : store) {
    names.push_back(name);
    all.push_back(t);
  }
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.max_coords_per_input = max_coords;
  opt.seed = seed;
  const std::size_t n_in = inputs.size();
  return grad_check(
             [&](Tape& tape, std::span<const Var> xs) {
               ParamStore scratch = store;
               ParamScope scope(tape, scratch, seed);
               for (std::size_t k = 0; k < names.size(); ++k) scope.bind(names[k], xs[n_in + k]);
               return weighted_sum(module(scope, xs.first(n_in)), weights);
             },
             all, opt)
      .max_rel_error;
}

CheckResult perfect_reconstruction(std::size_t volumes, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SplitMix64 rng(seed);
  double worst = 0.0;
  Shape worst_shape;
  for (std::size_t i = 0; i < volumes; ++i) {
    const Tensor x = random_tensor(random_feature_shape(rng), rng.next(), -10, 10);
    const double err = max_abs_diff(idwt3(dwt3(x)), x);
    if (!(err <= worst)) {
      worst = err;
      worst_shape = x.shape();
    }
  }
  CheckResult r{"perfect-reconstruction", worst <= 1e-10, worst, 1e-10, "", since(t0)};
  r.detail = std::to_string(volumes) + " volumes, max |idwt(dwt(x)) - x| = " + fmt(worst) +
             (worst_shape.empty() ? "" : " at " + to_string(worst_shape));
  return r;
}

CheckResult energy_conservation(std::size_t volumes, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SplitMix64 rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < volumes; ++i) {
    const Tensor x = random_tensor(random_feature_shape(rng), rng.next(), -10, 10);
    const double e = squared_norm(x);
    const double rel = std::abs(dwt3(x).energy() - e) / e;
    if (!(rel <= worst)) worst = rel;
  }
  return {"energy-conservation", worst <= 1e-9, worst, 1e-9,
          std::to_string(volumes) + " volumes, max relative energy error " + fmt(worst), since(t0)};
}

CheckResult scan_oracle(const std::vector<std::size_t>& lengths) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::size_t L : lengths) {
    const SsmParams p = SsmParams::random(5, 8, 1000 + L);
    const Tensor u = random_tensor({L, 5}, 2000 + L, -2, 2);
    const double err = max_abs_diff(selective_scan(u, p), reference::scan_recurrence(u, p));
    if (!(err <= worst)) worst = err;
  }
  return {"scan-oracle", worst <= 1e-12, worst, 1e-12,
          std::to_string(lengths.size()) + " lengths, max |scan - recurrence| = " + fmt(worst), since(t0)};
}

CheckResult blocked_scan(std::size_t max_length, std::size_t block) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t L = 2; L <= max_length; L *= 2) {
    SsmParams p = SsmParams::random(4, 8, L);
    // half the states get near-unit decay so block carries matter
    for (std::size_t i = 0; i < p.a_log.size(); i += 2) p.a_log[i] = -6.0;
    const DiscreteScan s = discretize(random_tensor({L, 4}, L + 7, -2, 2), p);
    const double err = max_abs_diff(scan_blocked(s, block), scan_sequential(s));
    if (!(err <= worst)) worst = err;
    ++checked;
  }
  return {"blocked-scan", worst <= 1e-10, worst, 1e-10,
          std::to_string(checked) + " lengths up to " + std::to_string(max_length) + ", max |blocked - sequential| = " +
              fmt(worst),
          since(t0)};
}

std::vector<CheckResult> gradient_checks(std::size_t module_coords) {
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, const std::function<double()>& fn) {
    const auto t0 = Clock::now();
    double err;
    std::string detail;
    try {
      err = fn();
    } catch (const std::exception& e) {
      err = INFINITY;
      detail = e.what();
    }
    out.push_back({name, err <= 1e-4, err, 1e-4, detail.empty() ? "max relative error " + fmt(err) : detail,
                   since(t0)});
  };
  const Tensor fm = random_tensor({4, 4, 4, 4}, 20);
  const Tensor seq = random_tensor({6, 4}, 21);
  using Xs = std::span<const Var>;

  run("add", [&] { return op_grad_error([](Xs x) { return add(x[0], x[1]); }, {fm, random_tensor(fm.shape(), 1)}); });
  run("sub", [&] { return op_grad_error([](Xs x) { return sub(x[0], x[1]); }, {fm, random_tensor(fm.shape(), 2)}); });
  run("mul", [&] { return op_grad_error([](Xs x) { return mul(x[0], x[1]); }, {fm, random_tensor(fm.shape(), 3)}); });
  run("scale", [&] { return op_grad_error([](Xs x) { return scale(x[0], -1.7); }, {fm}); });
  run("sum", [&] { return op_grad_error([](Xs x) { return sum(x[0]); }, {fm}); });
  run("sigmoid", [&] { return op_grad_error([](Xs x) { return sigmoid(x[0]); }, {fm}); });
  run("silu", [&] { return op_grad_error([](Xs x) { return silu(x[0]); }, {fm}); });
  run("softplus", [&] { return op_grad_error([](Xs x) { return softplus(x[0]); }, {fm}); });
  run("softmax_channels", [&] { return op_grad_error([](Xs x) { return softmax_channels(x[0]); }, {fm}); });
  run("layer_norm_channels", [&] { return op_grad_error([](Xs x) { return layer_norm_channels(x[0]); }, {seq}); });
  run("group_norm", [&] { return op_grad_error([](Xs x) { return group_norm(x[0], 2); }, {fm}); });
  run("channel_affine", [&] {
    return op_grad_error([](Xs x) { return channel_affine(x[0], x[1], x[2]); },
                         {fm, random_tensor({4}, 4), random_tensor({4}, 5)});
  });
  run("pointwise_linear", [&] {
    return op_grad_error([](Xs x) { return pointwise_linear(x[0], x[1], x[2]); },
                         {fm, random_tensor({3, 4}, 6), random_tensor({3}, 7)});
  });
  run("conv3d", [&] {
    return op_grad_error([](Xs x) { return conv3d(x[0], x[1], x[2], Conv3dOptions{}); },
                         {fm, random_tensor({3, 4, 3, 3, 3}, 14), random_tensor({3}, 15)});
  });
  run("conv3d_depthwise_dilated", [&] {
    Conv3dOptions o;
    o.groups = 4;
    o.dilation = 2;
    return op_grad_error([o](Xs x) { return conv3d(x[0], x[1], x[2], o); },
                         {fm, random_tensor({4, 1, 3, 3, 3}, 10), random_tensor({4}, 11)});
  });
  run("conv3d_strided", [&] {
    Conv3dOptions o;
    o.stride = 2;
    return op_grad_error([o](Xs x) { return conv3d(x[0], x[1], x[2], o); },
                         {fm, random_tensor({2, 4, 3, 3, 3}, 12), random_tensor({2}, 13)});
  });
  run("concat_channels", [&] {
    return op_grad_error(
        [](Xs x) {
          const Var parts[] = {x[0], x[1]};
          return concat_channels(parts);
        },
        {fm, random_tensor({2, 4, 4, 4}, 16)});
  });
  run("slice_channels", [&] { return op_grad_error([](Xs x) { return slice_channels(x[0], 1, 2); }, {fm}); });
  run("to_sequence", [&] { return op_grad_error([](Xs x) { return to_sequence(x[0]); }, {fm}); });
  run("from_sequence", [&] { return op_grad_error([](Xs x) { return from_sequence(x[0], 2, 1, 3); }, {seq}); });
  run("group_pool_max", [&] { return op_grad_error([](Xs x) { return group_pool(x[0], 2, PoolMode::max); }, {fm}); });
  run("group_pool_avg", [&] { return op_grad_error([](Xs x) { return group_pool(x[0], 2, PoolMode::avg); }, {fm}); });
  run("max_pool2", [&] { return op_grad_error([](Xs x) { return max_pool2(x[0]); }, {fm}); });
  run("upsample_trilinear2",
      [&] { return op_grad_error([](Xs x) { return upsample_trilinear2(x[0]); }, {random_tensor({2, 2, 3, 2}, 17)}); });
  run("dwt3", [&] {
    return op_grad_error(
        [](Xs x) {
          const auto b = dwt3(x[0]);
          return concat_channels(std::span<const Var>(b.data(), b.size()));
        },
        {random_tensor({2, 4, 4, 4}, 18)});
  });
  run("idwt3", [&] {
    std::vector<Tensor> bs;
    for (std::size_t k = 0; k < 8; ++k) bs.push_back(random_tensor({2, 2, 2, 2}, 30 + k));
    return op_grad_error(
        [](Xs x) {
          std::array<Var, 8> b;
          for (std::size_t k = 0; k < 8; ++k) b[k] = x[k];
          return idwt3(b);
        },
        bs);
  });
  run("wtu", [&] {
    return module_grad_error([](ParamScope& p, Xs x) { return wtu(x[0], x[1], p); },
                             {random_tensor({3, 4, 4, 4}, 40), random_tensor({2, 2, 2, 2}, 41)}, 4, 0,
                             [](ParamStore& s) { randomize_biases(s, 42); });
  });
  run("selective_scan", [&] {
    return module_grad_error([](ParamScope& p, Xs x) { return selective_scan(x[0], 3, p); },
                             {random_tensor({12, 3}, 50)}, 51, 0, [](ParamStore& s) {
                               s.at("delta_bias") = random_tensor({3}, 52, -0.5, 0.5);
                               s.at("d_skip") = random_tensor({3}, 53);
                             });
  });
  run("res_block", [&] {
    return module_grad_error([](ParamScope& p, Xs x) { return res_block(x[0], 2, p); },
                             {random_tensor({2, 4, 4, 4}, 60)}, 61, module_coords,
                             [](ParamStore& s) { randomize_biases(s, 62); });
  });
  run("vssm_branch", [&] {
    return module_grad_error([](ParamScope& p, Xs x) { return vssm_branch(x[0], 3, p); },
                             {random_tensor({2, 4, 4, 4}, 70)}, 71, module_coords,
                             [](ParamStore& s) { randomize_biases(s, 72); });
  });
  run("mg_ssm", [&] {
    MgSsmConfig cfg;
    cfg.state_dim = 3;
    return module_grad_error([cfg](ParamScope& p, Xs x) { return mg_ssm(x[0], cfg, 4, p); },
                             {random_tensor({4, 4, 4, 4}, 80)}, 81, module_coords,
                             [](ParamStore& s) { randomize_biases(s, 82); });
  });
  run("hfr_refine", [&] {
    std::vector<Tensor> bands;
    for (std::size_t k = 0; k < 7; ++k) bands.push_back(random_tensor({4, 4, 4, 4}, 90 + k, -2, 2));
    return module_grad_error(
        [](ParamScope& p, Xs x) {
          HighBands b;
          for (std::size_t k = 0; k < 7; ++k) b[k] = x[k];
          return hfr_refine(b, HfrConfig{1, 4, 0}, 4, p);
        },
        bands, 97, module_coords, [](ParamStore& s) { randomize_biases(s, 98); });
  });
  NetworkConfig net;
  net.stages = 2;
  net.base_channels = 4;
  net.num_classes = 3;
  net.state_dim = 4;
  run("encoder_stage", [&] {
    return module_grad_error([&](ParamScope& p, Xs x) { return encoder_stage(x[0], 1, net, p); },
                             {random_tensor({4, 8, 8, 8}, 100)}, 101, module_coords,
                             [](ParamStore& s) { randomize_biases(s, 102); });
  });
  LabelMask labels(8, 8, 8);
  {
    SplitMix64 rng(110);
    for (auto& v : labels.labels) v = static_cast<std::uint8_t>(rng.next() % 3);
  }
  const std::vector<double> cw = {0.5, 1.0, 2.0};
  run("segmentation_loss", [&] {
    const LabelMask small = downsample_labels(labels, 2);
    return op_grad_error([&](Xs x) { return segmentation_loss(x[0], small, cw); },
                         {random_tensor({3, 4, 4, 4}, 111, -2, 2)});
  });
  run("end_to_end_network", [&] {
    return module_grad_error(
        [&](ParamScope& p, Xs x) { return deep_supervision_loss(forward(x[0], net, p), labels, cw, net.head_weights()); },
        {random_tensor({1, 8, 8, 8}, 120)}, 121, std::max<std::size_t>(1, module_coords / 4),
        [](ParamStore& s) { randomize_biases(s, 122); });
  });
  return out;
}

CheckResult hfr_properties(std::size_t trials) {
  const auto t0 = Clock::now();
  double lo = 1.0, hi = 0.0, sum_err = 0.0, zero_out = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t c = 1 + trial % 6;
    std::vector<Tensor> bands;
    for (std::size_t k = 0; k < 7; ++k) bands.push_back(random_tensor({c, 4, 4, 4}, 500 + 10 * trial + k, -3, 3));
    Tape tape;
    ParamStore store;
    ParamScope scope(tape, store, trial);
    HighBands hb;
    for (std::size_t k = 0; k < 7; ++k) hb[k] = tape.constant(bands[k]);
    std::array<AttentionPath, 2> paths;
    hfr_refine(hb, HfrConfig{trial % 4, c, 0}, c, scope, &paths);
    for (const auto& p : paths) {
      for (double v : p.map.value().data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const Tensor& w = p.weights.value();
      const std::size_t n = voxels(w);
      for (std::size_t q = 0; q < n; ++q) {
        double total = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) total += w[ch * n + q];
        sum_err = std::max(sum_err, std::abs(total - 1.0));
      }
    }
    for (auto& b : hb) b = tape.constant(Tensor({c, 4, 4, 4}));
    const Var zero = hfr_refine(hb, HfrConfig{trial % 4, c, 0}, c, scope);
    for (double v : zero.value().data()) zero_out = std::max(zero_out, std::abs(v));
  }
  const bool ok = lo > 0.0 && hi < 1.0 && sum_err <= 1e-12 && zero_out == 0.0;
  return {"hfr-properties", ok, sum_err, 1e-12,
          "maps in [" + fmt(lo) + ", " + fmt(hi) + "], softmax sum error " + fmt(sum_err) + ", zero-band output " +
              fmt(zero_out),
          since(t0)};
}

CheckResult metric_oracles(std::size_t pairs, std::size_t max_extent, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SplitMix64 rng(seed);
  const std::array<double, 3> spacings[] = {{1, 1, 1}, {0.5, 2, 1}, {1.5, 1, 0.5}};
  std::size_t mismatches = 0, compared = 0;
  std::string first;
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t d = 1 + rng.next() % max_extent, h = 1 + rng.next() % max_extent,
                      w = 1 + rng.next() % max_extent;
    LabelMask p = reference::random_mask(rng, d, h, w, 3), g = reference::random_mask(rng, d, h, w, 3);
    p.spacing = g.spacing = spacings[i % 3];
    for (std::uint8_t k = 1; k <= 3; ++k) {
      ++compared;
      const bool dsc_ok = dsc(p, g, k) == reference::dsc(p, g, k);
      const auto fast = hd95(p, g, k), slow = reference::hd95(p, g, k);
      const bool hd_ok = fast.has_value() == slow.has_value() && (!fast || *fast == *slow);
      if (!(dsc_ok && hd_ok)) {
        if (!mismatches) first = "pair " + std::to_string(i) + " class " + std::to_string(k);
        ++mismatches;
      }
    }
  }
  return {"metric-oracles", mismatches == 0, double(mismatches), 0.0,
          std::to_string(pairs) + " mask pairs, " + std::to_string(compared) + " class comparisons, " +
              std::to_string(mismatches) + " mismatches" + (first.empty() ? "" : " (first: " + first + ")"),
          since(t0)};
}

CheckResult volume_roundtrip() {
  const auto t0 = Clock::now();
  bool ok = true;
  const Volume iv = intensity_volume(random_tensor({1, 6, 4, 8}, 700, -50, 50), {0.5, 1.0, 2.0});
  const std::string ib = encode_volume(iv);
  const Volume ir = decode_volume(ib);
  ok = ok && ir.intensity == iv.intensity && encode_volume(ir) == ib;
  LabelMask m(5, 3, 4);
  SplitMix64 rng(701);
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.next() % 6);
  const std::string lb = encode_volume(label_volume(m));
  const Volume lr = decode_volume(lb, 6);
  ok = ok && lr.labels == m.labels && encode_volume(lr) == lb;
  bool truncation_caught = false;
  try {
    decode_volume(ib.substr(0, ib.size() - 5));
  } catch (const FormatError& e) {
    truncation_caught = std::string(e.what()).find("payload short by 5 bytes") != std::string::npos;
  }
  ok = ok && truncation_caught;
  return {"volume-roundtrip", ok, ok ? 0.0 : 1.0, 0.0,
          "float32 and uint8 volumes re-encode byte-identically; truncation reported", since(t0)};
}

CheckResult checkpoint_roundtrip() {
  const auto t0 = Clock::now();
  NetworkConfig cfg;
  cfg.stages = 2;
  cfg.base_channels = 4;
  cfg.num_classes = 3;
  Checkpoint ck;
  ck.config = cfg;
  ck.params = init_params(cfg, 800);
  ck.step = 3;
  ck.seed = 800;
  const std::string bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  const Tensor vol = random_tensor({1, 8, 8, 8}, 801);
  auto logits = [&](ParamStore store) {
    Tape tape;
    ParamScope scope(tape, store, 0);
    return forward(tape.constant(vol), cfg, scope)[0].value();
  };
  const Tensor a = logits(ck.params), b = logits(back.params);
  double rel = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) rel = std::max(rel, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i])));
  const bool ok = rel <= 1e-6 && encode_checkpoint(back) == bytes;
  return {"checkpoint-roundtrip", ok, rel, 1e-6,
          "logits after save/load differ by " + fmt(rel) + " (relative); re-encoding is byte-identical", since(t0)};
}

CheckResult combine(const std::string& name, const std::vector<CheckResult>& parts) {
  CheckResult r;
  r.name = name;
  r.passed = !parts.empty();
  std::string worst;
  for (const auto& p : parts) {
    r.passed = r.passed && p.passed;
    r.seconds += p.seconds;
    if (p.value >= r.value || worst.empty()) {
      r.value = std::max(r.value, p.value);
      worst = p.name;
    }
    r.threshold = p.threshold;
  }
  r.detail = std::to_string(parts.size()) + " checks, worst " + worst + " at " + fmt(r.value);
  for (const auto& p : parts)
    if (!p.passed) r.detail += "; FAILED " + p.name + " (" + p.detail + ")";
  return r;
}

}  // namespace fmc::verify
