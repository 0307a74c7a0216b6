#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "fmc/metrics.hpp"
#include "fmc/reference.hpp"

using namespace fmc;

namespace {

LabelMask with_voxels(std::size_t n, std::initializer_list<std::array<std::size_t, 3>> voxels, std::uint8_t k = 1) {
  LabelMask m(n, n, n);
  for (const auto& v : voxels) m.at(v[0], v[1], v[2]) = k;
  return m;
}

}  // namespace

TEST_CASE("dsc examples") {
  const LabelMask a = with_voxels(4, {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}});
  const LabelMask b = with_voxels(4, {{0, 0, 0}, {0, 0, 1}, {3, 3, 2}, {3, 3, 3}});
  const LabelMask c = with_voxels(4, {{2, 2, 2}});
  CHECK(dsc(a, a, 1) == 1.0);
  CHECK(dsc(a, c, 1) == 0.0);
  CHECK(dsc(a, b, 1) == 0.5);
  CHECK(dsc(a, b, 2) == 1.0);                // both empty
  CHECK(dsc(a, LabelMask(4, 4, 4), 1) == 0.0);  // one empty
  CHECK_THROWS_AS(dsc(a, LabelMask(4, 4, 5), 1), std::invalid_argument);
}

TEST_CASE("hd95 examples") {
  const LabelMask a = with_voxels(8, {{1, 2, 2}});
  const LabelMask b = with_voxels(8, {{4, 2, 2}});
  CHECK(hd95(a, a, 1).value() == 0.0);
  CHECK(hd95(a, b, 1).value() == 3.0);
  CHECK_FALSE(hd95(a, LabelMask(8, 8, 8), 1).has_value());

  LabelMask cube(10, 10, 10), shifted(10, 10, 10);
  for (std::size_t z = 2; z < 6; ++z)
    for (std::size_t y = 2; y < 6; ++y)
      for (std::size_t x = 2; x < 6; ++x) {
        cube.at(z, y, x) = 1;
        shifted.at(z, y, x + 1) = 1;
      }
  CHECK(hd95(cube, shifted, 1).value() == reference::hd95(cube, shifted, 1).value());
  CHECK(hd95(cube, shifted, 1).value() == 1.0);
}

TEST_CASE("anisotropic spacing scales distances") {
  LabelMask a = with_voxels(6, {{1, 1, 1}}), b = with_voxels(6, {{1, 1, 4}});
  a.spacing = b.spacing = {1.0, 1.0, 2.5};
  CHECK(hd95(a, b, 1).value() == 7.5);
  b.spacing = {1.0, 1.0, 1.0};
  CHECK_THROWS(hd95(a, b, 1));
}

TEST_CASE("boundary uses face neighbours and the volume border") {
  LabelMask full(3, 3, 3, 1);
  CHECK(boundary_voxels(full, 1).size() == 26);  // all but the centre
  LabelMask big(5, 5, 5);
  for (std::size_t z = 1; z < 4; ++z)
    for (std::size_t y = 1; y < 4; ++y)
      for (std::size_t x = 1; x < 4; ++x) big.at(z, y, x) = 1;
  CHECK(boundary_voxels(big, 1).size() == 26);
}

TEST_CASE("nearest-rank percentile") {
  std::vector<double> v(20);
  std::iota(v.begin(), v.end(), 1.0);
  CHECK(nearest_rank_percentile(v, 95.0) == 19.0);
  CHECK(nearest_rank_percentile({4.0}, 95.0) == 4.0);
  CHECK(nearest_rank_percentile({3.0, 1.0}, 50.0) == 1.0);
  CHECK_THROWS(nearest_rank_percentile({}, 95.0));
}

TEST_CASE("metrics match brute-force oracles on random masks") {
  SplitMix64 rng(2024);
  const std::array<double, 3> spacings[] = {{1, 1, 1}, {0.5, 2, 1}, {1.5, 1, 0.5}};
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t d = 1 + rng.next() % 12, h = 1 + rng.next() % 12, w = 1 + rng.next() % 12;
    LabelMask p = reference::random_mask(rng, d, h, w, 3), g = reference::random_mask(rng, d, h, w, 3);
    p.spacing = g.spacing = spacings[trial % 3];
    for (std::uint8_t k = 1; k <= 3; ++k) {
      CHECK(dsc(p, g, k) == reference::dsc(p, g, k));
      const auto fast = hd95(p, g, k), slow = reference::hd95(p, g, k);
      REQUIRE(fast.has_value() == slow.has_value());
      if (fast) CHECK(*fast == *slow);
    }
  }
}

TEST_CASE("metric symmetry, ranges and permutation invariance") {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const LabelMask p = reference::random_mask(rng, 7, 6, 5, 2), g = reference::random_mask(rng, 7, 6, 5, 2);
    for (std::uint8_t k = 1; k <= 2; ++k) {
      const double d = dsc(p, g, k);
      CHECK(d >= 0.0);
      CHECK(d <= 1.0);
      CHECK(d == dsc(g, p, k));
      const auto h1 = hd95(p, g, k), h2 = hd95(g, p, k);
      REQUIRE(h1.has_value() == h2.has_value());
      if (h1) {
        CHECK(*h1 == *h2);
        CHECK(*h1 >= 0.0);
      }
      // same permutation of voxel order in both masks; dsc only counts voxels
      std::vector<std::size_t> perm(p.size());
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.next() % i]);
      LabelMask pp = p, gg = g;
      for (std::size_t i = 0; i < perm.size(); ++i) {
        pp.labels[i] = p.labels[perm[i]];
        gg.labels[i] = g.labels[perm[i]];
      }
      CHECK(dsc(pp, gg, k) == d);
    }
    // coinciding boundary sets give zero
    const auto self = hd95(p, p, 1);
    if (self) CHECK(*self == 0.0);
  }
}

TEST_CASE("label mask validation") {
  LabelMask m(2, 2, 2);
  m.labels[3] = 4;
  CHECK_NOTHROW(m.validate(5));
  CHECK_THROWS_WITH_AS(m.validate(4), doctest::Contains("label 4"), std::invalid_argument);
  m.labels[3] = 0;
  m.spacing[1] = 0.0;
  CHECK_THROWS_AS(m.validate(4), std::invalid_argument);
}

TEST_CASE("evaluation report") {
  std::vector<std::vector<ClassScore>> scores = {
      {{1, 0.8, 2.0}, {2, 0.6, std::nullopt}},
      {{1, 1.0, 4.0}, {2, 0.4, 1.0}},
  };
  const auto r = evaluation_report(scores, {1.0, 2.0, 1.0});
  CHECK(r["samples"] == 2);
  REQUIRE(r["per_class"].size() == 2);
  CHECK(r["per_class"][0]["dsc"].get<double>() == doctest::Approx(0.9));
  CHECK(r["per_class"][0]["hd95"].get<double>() == doctest::Approx(3.0));
  CHECK(r["per_class"][1]["hd95"].get<double>() == doctest::Approx(1.0));
  CHECK(r["mean_dsc"].get<double>() == doctest::Approx(0.7));
  CHECK(r["mean_hd95"].get<double>() == doctest::Approx(2.0));
  REQUIRE(r["undefined_hd95"].size() == 1);
  CHECK(r["undefined_hd95"][0]["sample"] == 0);
  CHECK(r["undefined_hd95"][0]["class"] == 2);
  CHECK(r["spacing"][1].get<double>() == 2.0);
  CHECK(mean_dsc(scores) == doctest::Approx(0.7));
}
