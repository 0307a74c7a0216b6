#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fmc/wavelet.hpp"
#include "test_util.hpp"

using namespace fmc;
using fmc::testing::random_tensor;

namespace {

// Direct tensor-product form of one subband coefficient.
double band_coefficient(const Tensor& x, std::size_t band, std::size_t c, std::size_t z, std::size_t y,
                        std::size_t xx) {
  const double r = 1.0 / std::numbers::sqrt2;
  auto tap = [r](std::size_t high, std::size_t k) { return high && k == 1 ? -r : r; };
  const std::size_t bz = band >> 2, by = (band >> 1) & 1, bx = band & 1;
  double s = 0.0;
  for (std::size_t dz = 0; dz < 2; ++dz)
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx)
        s += tap(bz, dz) * tap(by, dy) * tap(bx, dx) * x.at(c, 2 * z + dz, 2 * y + dy, 2 * xx + dx);
  return s;
}

}  // namespace

TEST_CASE("constant volume: lll = 2*sqrt2, high bands exactly zero") {
  WaveletSubbands b = dwt3(Tensor({1, 2, 2, 2}, 1.0));
  CHECK(b.lll()[0] == doctest::Approx(2.0 * std::numbers::sqrt2).epsilon(1e-15));
  for (std::size_t k = 1; k < 8; ++k) CHECK(b.bands[k][0] == 0.0);

  WaveletSubbands big = dwt3(Tensor({3, 6, 4, 8}, -0.37));
  for (std::size_t k = 1; k < 8; ++k)
    for (double v : big.bands[k].data()) CHECK(v == 0.0);
}

TEST_CASE("z-ramp volume lands in lll and hll only") {
  Tensor x({1, 2, 2, 2});
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t xx = 0; xx < 2; ++xx) x.at(0, z, y, xx) = double(z);
  WaveletSubbands b = dwt3(x);
  CHECK(b.bands[0][0] == doctest::Approx(std::numbers::sqrt2).epsilon(1e-15));
  CHECK(b.bands[4][0] == doctest::Approx(-std::numbers::sqrt2).epsilon(1e-15));
  for (std::size_t k : {1, 2, 3, 5, 6, 7}) CHECK(std::abs(b.bands[k][0]) < 1e-15);
  CHECK(kBandNames[4] == "hll");
}

TEST_CASE("dwt3 agrees with the direct tensor-product formula") {
  Tensor x = random_tensor({2, 4, 6, 4}, 3);
  WaveletSubbands b = dwt3(x);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(b.bands[k].shape() == Shape{2, 2, 3, 2});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 3; ++y)
          for (std::size_t xx = 0; xx < 2; ++xx)
            CHECK(std::abs(b.bands[k].at(c, z, y, xx) - band_coefficient(x, k, c, z, y, xx)) < 1e-14);
  }
}

TEST_CASE("perfect reconstruction and energy conservation on random volumes") {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s{1 + rng.next() % 4, 2 * (1 + rng.next() % 8), 2 * (1 + rng.next() % 8),
                  2 * (1 + rng.next() % 8)};
    Tensor x = random_tensor(s, rng.next(), -3, 3);
    WaveletSubbands b = dwt3(x);
    CHECK(max_abs_diff(idwt3(b), x) <= 1e-10);
    const double e = squared_norm(x);
    CHECK(std::abs(e - b.energy()) / e <= 1e-9);
  }
}

TEST_CASE("inverse examples") {
  WaveletSubbands zero;
  for (auto& b : zero.bands) b = Tensor({2, 2, 2, 2}, 0.0);
  const Tensor rz = idwt3(zero);
  for (double v : rz.data()) CHECK(v == 0.0);

  WaveletSubbands c;
  for (auto& b : c.bands) b = Tensor({1, 1, 1, 1}, 0.0);
  c.lll()[0] = 2.0 * std::numbers::sqrt2;
  const Tensor rc = idwt3(c);
  for (double v : rc.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));

  Tensor x = random_tensor({1, 8, 8, 8}, 5);
  CHECK(max_abs_diff(idwt3(dwt3(x)), x) < 1e-10);
}

TEST_CASE("linearity") {
  Tensor x = random_tensor({2, 4, 4, 4}, 6);
  Tensor y = random_tensor({2, 4, 4, 4}, 7);
  const double a = 0.7, b = -1.9;
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  WaveletSubbands bx = dwt3(x), by = dwt3(y), bm = dwt3(mix);
  for (std::size_t k = 0; k < 8; ++k)
    for (std::size_t i = 0; i < bm.bands[k].size(); ++i)
      CHECK(std::abs(bm.bands[k][i] - (a * bx.bands[k][i] + b * by.bands[k][i])) <= 1e-12);
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(dwt3(Tensor({1, 3, 4, 4})), ShapeError);
  CHECK_THROWS_AS(dwt3(Tensor({1, 4, 4, 1})), ShapeError);
  CHECK_THROWS_AS(dwt3(Tensor({4, 4, 4})), ShapeError);
  WaveletSubbands bad;
  for (auto& b : bad.bands) b = Tensor({1, 2, 2, 2});
  bad.bands[5] = Tensor({1, 2, 3, 2});
  CHECK_THROWS_AS(idwt3(bad), ShapeError);
}

TEST_CASE("filter fault breaks reconstruction") {
  Tensor x = random_tensor({1, 4, 4, 4}, 8);
  inject_filter_fault(true);
  const double err = max_abs_diff(idwt3(dwt3(x)), x);
  inject_filter_fault(false);
  CHECK(err > 1e-6);
  CHECK(max_abs_diff(idwt3(dwt3(x)), x) < 1e-10);
}

TEST_CASE("differentiable dwt3/idwt3 match the plain transforms and pass grad checks") {
  Tensor x = random_tensor({2, 4, 4, 4}, 9);
  Tape tape;
  auto bands = dwt3(tape.constant(x));
  WaveletSubbands plain = dwt3(x);
  for (std::size_t k = 0; k < 8; ++k) CHECK(max_abs_diff(bands[k].value(), plain.bands[k]) == 0.0);
  CHECK(max_abs_diff(idwt3(bands).value(), idwt3(plain)) == 0.0);

  CHECK(fmc::testing::op_grad_error(
            [](auto xs) {
              auto b = dwt3(xs[0]);
              const Var parts[] = {b[0], b[3], b[7]};
              return concat_channels(parts);
            },
            {x}) < 1e-4);
  std::vector<Tensor> bs;
  for (std::size_t k = 0; k < 8; ++k) bs.push_back(random_tensor({2, 2, 2, 2}, 20 + k));
  CHECK(fmc::testing::op_grad_error(
            [](auto xs) {
              std::array<Var, 8> b;
              for (std::size_t k = 0; k < 8; ++k) b[k] = xs[k];
              return idwt3(b);
            },
            bs) < 1e-4);
}

TEST_CASE("wtu") {
  SUBCASE("identity projection with zero decoder reproduces the encoder feature") {
    Tensor enc = random_tensor({4, 8, 8, 8}, 10);
    Tape tape;
    ParamStore store;
    ParamScope scope(tape, store, 1);
    Var e = tape.constant(enc);
    Var d = tape.constant(Tensor({6, 4, 4, 4}, 0.0));
    wtu(e, d, scope.sub("up"));
    Tensor& w = store.at("up.fuse.weight");
    REQUIRE(w.shape() == Shape{4, 10});
    w.fill(0.0);
    for (std::size_t i = 0; i < 4; ++i) w[i * 10 + i] = 1.0;
    Tape tape2;
    ParamScope scope2(tape2, store, 1);
    Var out = wtu(tape2.constant(enc), tape2.constant(Tensor({6, 4, 4, 4}, 0.0)), scope2.sub("up"));
    CHECK(max_abs_diff(out.value(), enc) <= 1e-12);
  }
  SUBCASE("output shape follows the encoder feature") {
    Tape tape;
    ParamStore store;
    ParamScope scope(tape, store, 2);
    Var out = wtu(tape.constant(random_tensor({8, 8, 8, 8}, 11)),
                  tape.constant(random_tensor({16, 4, 4, 4}, 12)), scope);
    CHECK(out.shape() == Shape{8, 8, 8, 8});
  }
  SUBCASE("resolution mismatch is rejected") {
    Tape tape;
    ParamStore store;
    ParamScope scope(tape, store, 3);
    CHECK_THROWS_AS(wtu(tape.constant(Tensor({2, 8, 8, 8})), tape.constant(Tensor({2, 4, 4, 2})), scope),
                    ShapeError);
  }
  SUBCASE("gradient check through the whole fusion") {
    CHECK(fmc::testing::module_grad_error(
              [](ParamScope& p, std::span<const Var> xs) { return wtu(xs[0], xs[1], p.sub("up")); },
              {random_tensor({3, 4, 4, 4}, 13), random_tensor({2, 2, 2, 2}, 14)}, 4, 0,
              [](ParamStore& s) { s.at("up.fuse.bias") = random_tensor({3}, 15); }) < 1e-4);
  }
}
