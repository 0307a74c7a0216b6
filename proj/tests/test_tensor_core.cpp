#include <cmath>

#include "doctest.h"
#include "fmc/ops.hpp"
#include "test_util.hpp"

using namespace fmc;
using fmc::testing::op_grad_error;
using fmc::testing::random_tensor;

namespace {

// Direct nested-loop convolution: out = sum over (ci, kz, ky, kx), bias last.
Tensor reference_conv3d(const Tensor& in, const Tensor& k, const Tensor* bias, std::size_t stride,
                        std::size_t dil, bool same) {
  const long C = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
  const long CO = k.dim(0), K = k.dim(2);
  const long pad = same ? dil * (K - 1) / 2 : 0;
  const long span = dil * (K - 1) + 1;
  const long OD = (D + 2 * pad - span) / stride + 1;
  const long OH = (H + 2 * pad - span) / stride + 1;
  const long OW = (W + 2 * pad - span) / stride + 1;
  Tensor out({std::size_t(CO), std::size_t(OD), std::size_t(OH), std::size_t(OW)});
  for (long co = 0; co < CO; ++co)
    for (long oz = 0; oz < OD; ++oz)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (long ci = 0; ci < C; ++ci)
            for (long kz = 0; kz < K; ++kz)
              for (long ky = 0; ky < K; ++ky)
                for (long kx = 0; kx < K; ++kx) {
                  const long iz = oz * long(stride) - pad + kz * long(dil);
                  const long iy = oy * long(stride) - pad + ky * long(dil);
                  const long ix = ox * long(stride) - pad + kx * long(dil);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                  acc += k[(((co * C + ci) * K + kz) * K + ky) * K + kx] * in.at(ci, iz, iy, ix);
                }
          if (bias) acc += (*bias)[co];
          out.at(co, oz, oy, ox) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor rejects zero extents and mismatched data") {
  CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t[4] = std::nan("");
  CHECK_THROWS_AS(t.ensure_finite("probe"), NumericError);
}

TEST_CASE("conv3d identity kernel reproduces the input") {
  Tensor in = random_tensor({1, 3, 3, 3}, 1);
  Tensor k({1, 1, 3, 3, 3}, 0.0);
  k[13] = 1.0;
  Tensor out = conv3d(in, k, nullptr, {});
  CHECK(out.shape() == in.shape());
  CHECK(max_abs_diff(out, in) == 0.0);
}

TEST_CASE("conv3d all-ones 2^3 volume with all-ones kernel gives 8 at the corner") {
  Tensor in({1, 2, 2, 2}, 1.0);
  Tensor k({1, 1, 3, 3, 3}, 1.0);
  Tensor out = conv3d(in, k, nullptr, {});
  CHECK(out.at(0, 0, 0, 0) == 8.0);
  for (double v : out.data()) CHECK(v == 8.0);
}

TEST_CASE("depthwise conv3d keeps channels independent") {
  Tensor in = random_tensor({3, 4, 4, 4}, 2);
  Tensor k = random_tensor({3, 1, 3, 3, 3}, 3);
  Conv3dOptions opt;
  opt.groups = 3;
  opt.dilation = 2;
  Tensor a = conv3d(in, k, nullptr, opt);
  for (std::size_t i = 0; i < voxels(in); ++i) in[i] += 0.5;  // channel 0 only
  Tensor b = conv3d(in, k, nullptr, opt);
  const std::size_t n = voxels(a);
  bool ch0_changed = false;
  for (std::size_t i = 0; i < n; ++i) ch0_changed |= a[i] != b[i];
  CHECK(ch0_changed);
  for (std::size_t i = n; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("conv3d matches the nested-loop reference bit for bit") {
  struct Case {
    Shape in;
    std::size_t cout, k, stride, dil;
    bool same;
  };
  const Case cases[] = {
      {{2, 5, 4, 6}, 3, 3, 1, 1, true}, {{3, 6, 6, 6}, 2, 3, 2, 1, true},
      {{2, 7, 7, 7}, 2, 3, 1, 2, true}, {{2, 6, 5, 7}, 4, 3, 1, 1, false},
      {{1, 9, 9, 9}, 1, 5, 2, 1, false}, {{2, 8, 8, 8}, 2, 1, 1, 1, true},
  };
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    Tensor in = random_tensor(c.in, seed++);
    Tensor k = random_tensor({c.cout, c.in[0], c.k, c.k, c.k}, seed++);
    Tensor b = random_tensor({c.cout}, seed++);
    Conv3dOptions opt;
    opt.stride = c.stride;
    opt.dilation = c.dil;
    opt.padding = c.same ? Padding::same : Padding::valid;
    Tensor got = conv3d(in, k, &b, opt);
    Tensor want = reference_conv3d(in, k, &b, c.stride, c.dil, c.same);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_abs_diff(got, want) == 0.0);
  }
}

TEST_CASE("conv3d shape errors name the offending axis") {
  Tensor in({3, 4, 4, 4});
  Conv3dOptions opt;
  opt.groups = 2;
  try {
    conv3d(in, Tensor({2, 1, 3, 3, 3}), nullptr, opt);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("axis 0") != std::string::npos);
  }
  CHECK_THROWS_AS(conv3d(in, Tensor({2, 3, 2, 2, 2}), nullptr, {}), ShapeError);
  Conv3dOptions valid;
  valid.padding = Padding::valid;
  try {
    conv3d(Tensor({1, 2, 8, 8}), Tensor({1, 1, 3, 3, 3}), nullptr, valid);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
  }
}

TEST_CASE("pointwise_linear") {
  Tensor x = random_tensor({5, 3}, 4);
  Tensor eye({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tensor zero_b({3}, 0.0);
  CHECK(max_abs_diff(pointwise_linear(x, eye, &zero_b), x) == 0.0);

  Tensor zero_w({2, 3}, 0.0);
  Tensor b({2}, std::vector<double>{0.25, -1.5});
  Tensor y = pointwise_linear(x, zero_w, &b);
  for (std::size_t l = 0; l < 5; ++l) {
    CHECK(y[l * 2] == 0.25);
    CHECK(y[l * 2 + 1] == -1.5);
  }

  // Two-position sequence against explicit matrix-vector products.
  Tensor seq = random_tensor({2, 3}, 5);
  Tensor w = random_tensor({3, 3}, 6);
  Tensor out = pointwise_linear(seq, w, nullptr);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t o = 0; o < 3; ++o) {
      double mv = 0.0;
      for (std::size_t i = 0; i < 3; ++i) mv += w[o * 3 + i] * seq[l * 3 + i];
      CHECK(out[l * 3 + o] == doctest::Approx(mv).epsilon(1e-15));
    }

  // Channel-leading layout gives the same numbers as the sequence layout.
  Tape tape;
  Var fm = tape.constant(random_tensor({3, 2, 2, 2}, 7));
  Var as_seq = to_sequence(fm);
  Tensor a = pointwise_linear(fm.value(), w, nullptr);
  Tensor bseq = pointwise_linear(as_seq.value(), w, nullptr);
  Var back = from_sequence(tape.constant(bseq), 2, 2, 2);
  CHECK(max_abs_diff(a, back.value()) == 0.0);

  CHECK_THROWS_AS(pointwise_linear(x, Tensor({3, 4}), nullptr), ShapeError);
}

TEST_CASE("activation values") {
  CHECK(silu(0.0) == 0.0);
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(std::isfinite(softplus(800.0)));
  CHECK(sigmoid(-800.0) >= 0.0);

  Tape tape;
  Var eq = tape.constant(Tensor({4, 2, 2, 2}, 3.0));
  for (double v : softmax_channels(eq).value().data()) CHECK(v == doctest::Approx(0.25));

  Var r = tape.constant(random_tensor({5, 3, 2, 2}, 8, -4, 4));
  const Tensor& s = softmax_channels(r).value();
  for (std::size_t p = 0; p < 12; ++p) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(s[c * 12 + p] > 0.0);
      total += s[c * 12 + p];
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }

  // [1,2,3]: mean 2, population variance 2/3.
  Var ch = tape.constant(Tensor({1, 3}, std::vector<double>{1, 2, 3}));
  const Tensor& ln = layer_norm_channels(ch).value();
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(ln[0] == doctest::Approx(-1.0 / sd).epsilon(1e-14));
  CHECK(ln[1] == doctest::Approx(0.0));
  CHECK(ln[2] == doctest::Approx(1.0 / sd).epsilon(1e-14));
  CHECK(ln[0] < ln[1]);
  CHECK(ln[1] < ln[2]);
  CHECK((ln[0] + ln[1] + ln[2]) == doctest::Approx(0.0));

  CHECK_THROWS_AS(group_norm(tape.constant(Tensor({3, 2, 2, 2})), 2), ShapeError);
}

TEST_CASE("backward basics") {
  Tape tape;
  Tensor xv = random_tensor({2, 3, 4}, 11);
  Var x = tape.parameter(xv);
  Var unused = tape.parameter(Tensor({3}, 1.0));
  tape.backward(sum(x));
  const Tensor gx = tape.grad(x);
  const Tensor gu = tape.grad(unused);
  for (double g : gx.data()) CHECK(g == 1.0);
  for (double g : gu.data()) CHECK(g == 0.0);

  Tape t2;
  Var y = t2.parameter(xv);
  t2.backward(scale(sum(mul(y, y)), 0.5));
  CHECK(max_abs_diff(t2.grad(y), xv) == 0.0);

  CHECK_THROWS_AS(t2.backward(y), ShapeError);
}

TEST_CASE("grad_check reference cases") {
  GradCheckOptions opt;
  opt.step = 1e-5;
  auto sig = grad_check([](Tape&, std::span<const Var> xs) { return sum(sigmoid(xs[0])); },
                        {Tensor({1}, 0.0)}, opt);
  CHECK(sig.analytic == 0.25);
  CHECK(sig.max_rel_error < 1e-8);

  auto ident = grad_check([](Tape&, std::span<const Var> xs) { return sum(xs[0]); },
                          {random_tensor({3, 3}, 12)}, opt);
  CHECK(ident.max_rel_error < 1e-10);

  opt.step = 1e-2;
  CHECK_THROWS_AS(grad_check([](Tape&, std::span<const Var> xs) { return sum(xs[0]); },
                             {Tensor({1})}, opt),
                  std::invalid_argument);
}

TEST_CASE("grad_check reports non-finite intermediates with the coordinate") {
  GradCheckOptions opt;
  auto f = [](Tape& tape, std::span<const Var> xs) {
    // 1/x blows up only when the probe lands on x = 0 exactly.
    const Tensor& v = xs[0].value();
    Tensor y(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) y[i] = 1.0 / v[i];
    return sum(tape.record(std::move(y), {xs[0].id}, nullptr, "reciprocal"));
  };
  try {
    grad_check(f, {Tensor({2}, std::vector<double>{1.0, 1e-5})}, opt);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
}

TEST_CASE("every primitive passes the central-difference check") {
  const double tol = 1e-4;
  const Tensor fm = random_tensor({4, 4, 4, 4}, 20);
  const Tensor seq = random_tensor({6, 4}, 21);

  CHECK(op_grad_error([](auto xs) { return add(xs[0], xs[1]); }, {fm, random_tensor(fm.shape(), 1)}) < tol);
  CHECK(op_grad_error([](auto xs) { return sub(xs[0], xs[1]); }, {fm, random_tensor(fm.shape(), 2)}) < tol);
  CHECK(op_grad_error([](auto xs) { return mul(xs[0], xs[1]); }, {fm, random_tensor(fm.shape(), 3)}) < tol);
  CHECK(op_grad_error([](auto xs) { return scale(xs[0], -1.7); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return sigmoid(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return silu(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return softplus(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return softmax_channels(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return softmax_channels(xs[0]); }, {seq}) < tol);
  CHECK(op_grad_error([](auto xs) { return layer_norm_channels(xs[0]); }, {seq}) < tol);
  CHECK(op_grad_error([](auto xs) { return layer_norm_channels(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return group_norm(xs[0], 2); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return channel_affine(xs[0], xs[1], xs[2]); },
                      {fm, random_tensor({4}, 4), random_tensor({4}, 5)}) < tol);
  CHECK(op_grad_error([](auto xs) { return pointwise_linear(xs[0], xs[1], xs[2]); },
                      {fm, random_tensor({3, 4}, 6), random_tensor({3}, 7)}) < tol);
  CHECK(op_grad_error([](auto xs) { return pointwise_linear(xs[0], xs[1], xs[2]); },
                      {seq, random_tensor({5, 4}, 8), random_tensor({5}, 9)}) < tol);

  Conv3dOptions dw;
  dw.groups = 4;
  dw.dilation = 2;
  CHECK(op_grad_error([&](auto xs) { return conv3d(xs[0], xs[1], xs[2], dw); },
                      {fm, random_tensor({4, 1, 3, 3, 3}, 10), random_tensor({4}, 11)}) < tol);
  Conv3dOptions strided;
  strided.stride = 2;
  CHECK(op_grad_error([&](auto xs) { return conv3d(xs[0], xs[1], xs[2], strided); },
                      {fm, random_tensor({2, 4, 3, 3, 3}, 12), random_tensor({2}, 13)}) < tol);
  CHECK(op_grad_error([&](auto xs) { return conv3d(xs[0], xs[1], Var{}, Conv3dOptions{}); },
                      {fm, random_tensor({3, 4, 3, 3, 3}, 14)}) < tol);

  const Tensor other = random_tensor({2, 4, 4, 4}, 15);
  CHECK(op_grad_error(
            [](auto xs) {
              const Var parts[] = {xs[0], xs[1]};
              return concat_channels(parts);
            },
            {fm, other}) < tol);
  CHECK(op_grad_error([](auto xs) { return slice_channels(xs[0], 1, 2); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return to_sequence(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return from_sequence(xs[0], 2, 1, 3); }, {seq}) < tol);
  CHECK(op_grad_error([](auto xs) { return group_pool(xs[0], 2, PoolMode::max); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return group_pool(xs[0], 2, PoolMode::avg); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return max_pool2(xs[0]); }, {fm}) < tol);
  CHECK(op_grad_error([](auto xs) { return upsample_trilinear2(xs[0]); }, {random_tensor({2, 2, 3, 2}, 16)}) < tol);
  CHECK(op_grad_error([](auto xs) { return sum(xs[0]); }, {fm}) < tol);
}

TEST_CASE("upsample_trilinear2 preserves constants and interpolates at quarter offsets") {
  Tape tape;
  Var c = tape.constant(Tensor({1, 2, 2, 2}, 2.5));
  for (double v : upsample_trilinear2(c).value().data()) CHECK(v == 2.5);
  Tensor ramp({1, 1, 1, 2}, std::vector<double>{0.0, 4.0});
  const Tensor& up = upsample_trilinear2(tape.constant(ramp)).value();
  // width outputs: clamp, 0.25 -> 1, 0.75 -> 3, clamp
  CHECK(up[0] == 0.0);
  CHECK(up[1] == 1.0);
  CHECK(up[2] == 3.0);
  CHECK(up[3] == 4.0);
}

TEST_CASE("operations are deterministic") {
  Tensor in = random_tensor({3, 6, 6, 6}, 30);
  Tensor k = random_tensor({4, 3, 3, 3, 3}, 31);
  Tensor a = conv3d(in, k, nullptr, {});
  Tensor b = conv3d(in, k, nullptr, {});
  CHECK(max_abs_diff(a, b) == 0.0);
}
