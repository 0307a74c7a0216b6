#include "fmc/ssm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <vector>

#include "fmc/parallel.hpp"
#include "fmc/rng.hpp"

namespace fmc {

namespace {

std::atomic<std::size_t> g_gate_evaluations{0};

// Shared by every scan path so the sequential, blocked and differentiable
// kernels discretize bit-identically.
inline double decay(double delta, double rate) { return std::exp(-(delta * rate)); }

void require_shape(const Tensor& t, const Shape& want, const char* what) {
  if (t.shape() != want) {
    throw ShapeError(std::string(what) + ": expected " + to_string(want) + ", got " + to_string(t.shape()));
  }
}

}  // namespace

void SsmParams::validate() const {
  if (a_log.rank() != 2) throw ShapeError("ssm: a_log must be [C,N], got " + to_string(a_log.shape()));
  const std::size_t c = channels();
  const std::size_t n = state_dim();
  require_shape(d_skip, {c}, "ssm: d_skip");
  require_shape(proj_b, {n, c}, "ssm: proj_b");
  require_shape(proj_c, {n, c}, "ssm: proj_c");
  require_shape(proj_delta, {c, c}, "ssm: proj_delta");
  require_shape(delta_bias, {c}, "ssm: delta_bias");
  a_log.ensure_finite("ssm parameter a_log");
  d_skip.ensure_finite("ssm parameter d_skip");
  proj_b.ensure_finite("ssm parameter proj_b");
  proj_c.ensure_finite("ssm parameter proj_c");
  proj_delta.ensure_finite("ssm parameter proj_delta");
  delta_bias.ensure_finite("ssm parameter delta_bias");
}

SsmParams SsmParams::random(std::size_t channels, std::size_t state_dim, std::uint64_t seed) {
  SplitMix64 rng(seed);
  auto fill = [&rng](Shape s, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  };
  SsmParams p;
  p.a_log = fill({channels, state_dim}, -1.0, 1.5);
  p.d_skip = fill({channels}, -1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  p.proj_b = fill({state_dim, channels}, -bound, bound);
  p.proj_c = fill({state_dim, channels}, -bound, bound);
  p.proj_delta = fill({channels, channels}, -bound, bound);
  p.delta_bias = fill({channels}, -1.0, 0.5);
  return p;
}

DiscreteScan discretize(const Tensor& u, const SsmParams& params) {
  params.validate();
  require_rank(u, 2, "selective_scan input");
  const std::size_t l = u.dim(0);
  const std::size_t c = params.channels();
  const std::size_t n = params.state_dim();
  if (u.dim(1) != c) {
    throw ShapeError("selective_scan: input axis 1 has " + std::to_string(u.dim(1)) + " channels, parameters have " +
                     std::to_string(c));
  }
  Tensor delta = pointwise_linear(u, params.proj_delta, &params.delta_bias);
  for (auto& v : delta.data()) v = softplus(v);
  Tensor b = pointwise_linear(u, params.proj_b, nullptr);
  DiscreteScan s;
  s.c = pointwise_linear(u, params.proj_c, nullptr);
  s.u = u;
  s.d = params.d_skip;
  s.a_bar = Tensor({l, c, n});
  s.b_bar = Tensor({l, c, n});
  std::vector<double> rate(c * n);
  for (std::size_t i = 0; i < rate.size(); ++i) rate[i] = std::exp(params.a_log[i]);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double dt = delta[t * c + ci];
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = (t * c + ci) * n + k;
        s.a_bar[i] = decay(dt, rate[ci * n + k]);
        s.b_bar[i] = dt * b[t * n + k];
      }
    }
  return s;
}

Tensor scan_sequential(const DiscreteScan& s) {
  const std::size_t l = s.u.dim(0), c = s.u.dim(1), n = s.c.dim(1);
  Tensor y({l, c});
  std::vector<double> h(c * n, 0.0);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double ut = s.u[t * c + ci];
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = (t * c + ci) * n + k;
        double& hk = h[ci * n + k];
        hk = s.a_bar[i] * hk + s.b_bar[i] * ut;
        acc += s.c[t * n + k] * hk;
      }
      y[t * c + ci] = acc + s.d[ci] * ut;
    }
  return y;
}

Tensor scan_blocked(const DiscreteScan& s, std::size_t block) {
  if (block < 2) throw std::invalid_argument("scan_blocked: block must be >= 2");
  const std::size_t l = s.u.dim(0), c = s.u.dim(1), n = s.c.dim(1);
  const std::size_t cn = c * n;
  const std::size_t blocks = (l + block - 1) / block;

  // Phase 1: compose each block's affine maps, h_out = A h_in + B.
  std::vector<double> comp_a(blocks * cn, 1.0), comp_b(blocks * cn, 0.0);
  parallel_for(blocks, [&](std::size_t j) {
    double* A = comp_a.data() + j * cn;
    double* B = comp_b.data() + j * cn;
    const std::size_t end = std::min(l, (j + 1) * block);
    for (std::size_t t = j * block; t < end; ++t)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double ut = s.u[t * c + ci];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = (t * c + ci) * n + k;
          const std::size_t q = ci * n + k;
          A[q] = s.a_bar[i] * A[q];
          B[q] = s.a_bar[i] * B[q] + s.b_bar[i] * ut;
        }
      }
  });

  // Phase 2: exclusive scan of block maps gives each block's incoming state.
  std::vector<double> carry(blocks * cn, 0.0);
  for (std::size_t j = 1; j < blocks; ++j)
    for (std::size_t q = 0; q < cn; ++q) {
      carry[j * cn + q] = comp_a[(j - 1) * cn + q] * carry[(j - 1) * cn + q] + comp_b[(j - 1) * cn + q];
    }

  // Phase 3: replay each block from its carried-in state.
  Tensor y({l, c});
  parallel_for(blocks, [&](std::size_t j) {
    std::vector<double> h(carry.begin() + j * cn, carry.begin() + (j + 1) * cn);
    const std::size_t end = std::min(l, (j + 1) * block);
    for (std::size_t t = j * block; t < end; ++t)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double ut = s.u[t * c + ci];
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = (t * c + ci) * n + k;
          double& hk = h[ci * n + k];
          hk = s.a_bar[i] * hk + s.b_bar[i] * ut;
          acc += s.c[t * n + k] * hk;
        }
        y[t * c + ci] = acc + s.d[ci] * ut;
      }
  });
  return y;
}

// Streams the discretization through the recurrence: O(C N) working state
// instead of two [L,C,N] buffers, same arithmetic as discretize + scan_sequential.
Tensor selective_scan(const Tensor& u, const SsmParams& params) {
  params.validate();
  require_rank(u, 2, "selective_scan input");
  const std::size_t l = u.dim(0);
  const std::size_t c = params.channels();
  const std::size_t n = params.state_dim();
  if (u.dim(1) != c) {
    throw ShapeError("selective_scan: input axis 1 has " + std::to_string(u.dim(1)) + " channels, parameters have " +
                     std::to_string(c));
  }
  Tensor delta = pointwise_linear(u, params.proj_delta, &params.delta_bias);
  for (auto& v : delta.data()) v = softplus(v);
  const Tensor b = pointwise_linear(u, params.proj_b, nullptr);
  const Tensor cc = pointwise_linear(u, params.proj_c, nullptr);
  std::vector<double> rate(c * n);
  for (std::size_t i = 0; i < rate.size(); ++i) rate[i] = std::exp(params.a_log[i]);
  Tensor y({l, c});
  std::vector<double> h(c * n, 0.0);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double ut = u[t * c + ci];
      const double dt = delta[t * c + ci];
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        double& hk = h[ci * n + k];
        hk = decay(dt, rate[ci * n + k]) * hk + (dt * b[t * n + k]) * ut;
        acc += cc[t * n + k] * hk;
      }
      y[t * c + ci] = acc + params.d_skip[ci] * ut;
    }
  return y;
}

Tensor selective_scan_blocked(const Tensor& u, const SsmParams& params, std::size_t block) {
  return scan_blocked(discretize(u, params), block);
}

Var ssm_scan(Var u, Var delta, Var a_log, Var b, Var c, Var d) {
  const Tensor& uv = u.value();
  require_rank(uv, 2, "ssm_scan input");
  const std::size_t l = uv.dim(0), ch = uv.dim(1);
  const Tensor& al = a_log.value();
  require_rank(al, 2, "ssm_scan a_log");
  const std::size_t n = al.dim(1);
  require_shape(delta.value(), {l, ch}, "ssm_scan delta");
  require_shape(al, {ch, n}, "ssm_scan a_log");
  require_shape(b.value(), {l, n}, "ssm_scan b");
  require_shape(c.value(), {l, n}, "ssm_scan c");
  require_shape(d.value(), {ch}, "ssm_scan d");

  const Tensor& dv = delta.value();
  const Tensor& bv = b.value();
  const Tensor& cv = c.value();
  const Tensor& sk = d.value();
  std::vector<double> rate(ch * n);
  for (std::size_t i = 0; i < rate.size(); ++i) rate[i] = std::exp(al[i]);

  Tensor y({l, ch});
  std::vector<double> states(l * ch * n);
  std::vector<double> h(ch * n, 0.0);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ci = 0; ci < ch; ++ci) {
      const double ut = uv[t * ch + ci];
      const double dt = dv[t * ch + ci];
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        double& hk = h[ci * n + k];
        hk = decay(dt, rate[ci * n + k]) * hk + (dt * bv[t * n + k]) * ut;
        states[(t * ch + ci) * n + k] = hk;
        acc += cv[t * n + k] * hk;
      }
      y[t * ch + ci] = acc + sk[ci] * ut;
    }

  Tape& tape = *u.tape;
  return tape.record(
      std::move(y), {u.id, delta.id, a_log.id, b.id, c.id, d.id},
      [&tape, iu = u.id, idl = delta.id, ib = b.id, ic = c.id, id = d.id, rate = std::move(rate),
       states = std::move(states), l, ch, n](const Tensor& gy, std::span<Tensor* const> gin) {
        const Tensor& uv = tape.value(iu);
        const Tensor& dv = tape.value(idl);
        const Tensor& bv = tape.value(ib);
        const Tensor& cv = tape.value(ic);
        const Tensor& sk = tape.value(id);
        Tensor gu({l, ch}, 0.0), gdelta({l, ch}, 0.0), galog({ch, n}, 0.0);
        Tensor gb({l, n}, 0.0), gc({l, n}, 0.0), gd({ch}, 0.0);
        for (std::size_t ci = 0; ci < ch; ++ci) {
          for (std::size_t t = 0; t < l; ++t) {
            gu[t * ch + ci] += gy[t * ch + ci] * sk[ci];
            gd[ci] += gy[t * ch + ci] * uv[t * ch + ci];
          }
          for (std::size_t k = 0; k < n; ++k) {
            const double r = rate[ci * n + k];
            double gh = 0.0;
            double grate = 0.0;
            for (std::size_t tt = l; tt-- > 0;) {
              const std::size_t tc = tt * ch + ci;
              const double ht = states[tc * n + k];
              const double hp = tt > 0 ? states[((tt - 1) * ch + ci) * n + k] : 0.0;
              const double dt = dv[tc];
              const double ut = uv[tc];
              const double a = decay(dt, r);
              gh += gy[tc] * cv[tt * n + k];
              gc[tt * n + k] += gy[tc] * ht;
              const double ga = gh * hp;
              gdelta[tc] += ga * (-r * a) + gh * bv[tt * n + k] * ut;
              grate += ga * (-dt * a);
              gb[tt * n + k] += gh * dt * ut;
              gu[tc] += gh * dt * bv[tt * n + k];
              gh *= a;
            }
            galog[ci * n + k] += grate * r;
          }
        }
        if (gin[0]) *gin[0] += gu;
        if (gin[1]) *gin[1] += gdelta;
        if (gin[2]) *gin[2] += galog;
        if (gin[3]) *gin[3] += gb;
        if (gin[4]) *gin[4] += gc;
        if (gin[5]) *gin[5] += gd;
      },
      "ssm_scan");
}

Var selective_scan(Var u, std::size_t state_dim, ParamScope params) {
  require_rank(u.value(), 2, "selective_scan input");
  const std::size_t c = u.value().dim(1);
  const std::size_t n = state_dim;
  Var a_log = params.get("a_log", {c, n}, Init::ssm_a_log);
  Var d_skip = params.get("d_skip", {c}, Init::ones);
  Var proj_b = params.get("proj_b", {n, c}, Init::fan_in_uniform, c);
  Var proj_c = params.get("proj_c", {n, c}, Init::fan_in_uniform, c);
  Var proj_delta = params.get("proj_delta", {c, c}, Init::fan_in_uniform, c);
  Var delta_bias = params.get("delta_bias", {c}, Init::zeros);
  Var delta = softplus(pointwise_linear(u, proj_delta, delta_bias));
  Var b = pointwise_linear(u, proj_b);
  Var cm = pointwise_linear(u, proj_c);
  return ssm_scan(u, delta, a_log, b, cm, d_skip);
}

SsmParams ssm_params_from(const ParamStore& store, const std::string& prefix) {
  auto get = [&](const char* name) {
    const std::string key = prefix + "." + name;
    auto it = store.find(key);
    if (it == store.end()) throw std::out_of_range("missing parameter " + key);
    return it->second;
  };
  SsmParams p;
  p.a_log = get("a_log");
  p.d_skip = get("d_skip");
  p.proj_b = get("proj_b");
  p.proj_c = get("proj_c");
  p.proj_delta = get("proj_delta");
  p.delta_bias = get("delta_bias");
  return p;
}

void MgSsmConfig::validate() const {
  std::set<std::size_t> seen(dilations.begin(), dilations.end());
  if (seen.size() != dilations.size() || *seen.begin() < 1) {
    throw std::invalid_argument("mg_ssm: dilation rates must be distinct and >= 1");
  }
  if (state_dim < 1) throw std::invalid_argument("mg_ssm: state_dim must be >= 1");
}

std::size_t default_norm_groups(std::size_t channels) {
  std::size_t g = std::min<std::size_t>(4, channels);
  while (channels % g != 0) --g;
  return g;
}

Var res_block(Var x, std::size_t norm_groups, ParamScope params) {
  require_rank(x.value(), 4, "res_block");
  const std::size_t c = x.value().dim(0);
  if (norm_groups == 0) norm_groups = default_norm_groups(c);
  auto conv_norm = [&](Var in, const char* conv, const char* norm) {
    ParamScope cs = params.sub(conv);
    ParamScope ns = params.sub(norm);
    Var w = cs.get("weight", {c, c, 3, 3, 3}, Init::fan_in_uniform, c * 27);
    Var b = cs.get("bias", {c}, Init::zeros);
    Var gamma = ns.get("gamma", {c}, Init::ones);
    Var beta = ns.get("beta", {c}, Init::zeros);
    return channel_affine(group_norm(conv3d(in, w, b, Conv3dOptions{}), norm_groups), gamma, beta);
  };
  Var f = conv_norm(silu(conv_norm(x, "conv1", "norm1")), "conv2", "norm2");
  return add(x, f);
}

Var vssm_branch(Var f, std::size_t state_dim, ParamScope params) {
  const Tensor& fv = f.value();
  require_rank(fv, 4, "vssm_branch");
  const std::size_t c = fv.dim(0);
  Var seq = to_sequence(f);
  Var gamma = params.get("ln.gamma", {c}, Init::ones);
  Var beta = params.get("ln.beta", {c}, Init::zeros);
  Var normed = channel_affine(layer_norm_channels(seq), gamma, beta);
  Var w = params.get("linear.weight", {c, c}, Init::fan_in_uniform, c);
  Var b = params.get("linear.bias", {c}, Init::zeros);
  Var act = silu(pointwise_linear(normed, w, b));
  Var scanned = selective_scan(act, state_dim, params.sub("ssm"));
  return from_sequence(scanned, fv.dim(1), fv.dim(2), fv.dim(3));
}

Var mg_ssm(Var f_lll, const MgSsmConfig& cfg, std::size_t out_channels, ParamScope params,
           MgSsmTrace* trace) {
  cfg.validate();
  require_rank(f_lll.value(), 4, "mg_ssm");
  const std::size_t c = f_lll.value().dim(0);
  const std::size_t groups = cfg.norm_groups ? cfg.norm_groups : default_norm_groups(c);
  MgSsmTrace t;
  t.local = res_block(f_lll, groups, params.sub("res"));
  for (std::size_t j = 0; j < 3; ++j) {
    ParamScope dw = params.sub("dw" + std::to_string(j + 1));
    Var w = dw.get("weight", {c, 1, 3, 3, 3}, Init::fan_in_uniform, 27);
    Var b = dw.get("bias", {c}, Init::zeros);
    Conv3dOptions opt;
    opt.groups = c;
    opt.dilation = cfg.dilations[j];
    t.scales[j] = conv3d(t.local, w, b, opt);
    t.scans[j] = vssm_branch(t.scales[j], cfg.state_dim, params.sub("vssm" + std::to_string(j + 1)));
  }
  {
    ParamScope gs = params.sub("gate");
    Var w = gs.get("weight", {c, 3 * c}, Init::fan_in_uniform, 3 * c);
    Var b = gs.get("bias", {c}, Init::zeros);
    t.gate = silu(pointwise_linear(concat_channels(t.scales), w, b));
    g_gate_evaluations.fetch_add(1);
  }
  for (std::size_t j = 0; j < 3; ++j) {
    ParamScope bs = params.sub("branch" + std::to_string(j + 1));
    Var w = bs.get("weight", {c, c}, Init::fan_in_uniform, c);
    Var b = bs.get("bias", {c}, Init::zeros);
    t.branch[j] = pointwise_linear(mul(t.scans[j], t.gate), w, b);
  }
  ParamScope fs = params.sub("fuse");
  Var w = fs.get("weight", {out_channels, 3 * c}, Init::fan_in_uniform, 3 * c);
  Var b = fs.get("bias", {out_channels}, Init::zeros);
  Var out = pointwise_linear(concat_channels(t.branch), w, b);
  if (trace) *trace = t;
  return out;
}

std::size_t mg_ssm_gate_evaluations() { return g_gate_evaluations.load(); }

}  // namespace fmc
