#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "stm/erf.hpp"
#include "stm/image_io.hpp"
#include "stm/testing/oracles.hpp"

using namespace stm;

namespace {

Tensor random(Shape s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Rng rng(seed);
  return rng.uniform(std::move(s), lo, hi);
}

double mass(const Tensor& t) {
  double s = 0;
  for (float v : t.data()) s += v;
  return s;
}

}  // namespace

TEST(Erf50Test, DeltaMap) {
  Tensor m({224, 224});
  m[112 * 224 + 112] = 1.0f;
  EXPECT_DOUBLE_EQ(erf_at_50(m), 1.0 / 224.0);
}

TEST(Erf50Test, UniformNineByNine) {
  EXPECT_DOUBLE_EQ(erf_at_50(Tensor({9, 9}, 1.0f)), 7.0 / 9.0);
}

TEST(Erf50Test, ThreeByThreeSupport) {
  Tensor m({224, 224});
  for (std::size_t y = 111; y <= 113; ++y)
    for (std::size_t x = 111; x <= 113; ++x) m[y * 224 + x] = 1.0f / 9.0f;
  EXPECT_DOUBLE_EQ(erf_at_50(m), 3.0 / 224.0);
}

TEST(Erf50Test, MonotoneUnderOutsideMass) {
  Tensor m = random({31, 31}, 1, 0.0f, 1.0f);
  for (std::size_t y = 10; y <= 20; ++y)
    for (std::size_t x = 10; x <= 20; ++x) m[y * 31 + x] += 5.0f;
  const double r0 = erf_at_50(m);
  const long half = std::lround(r0 * 31) / 2;
  Tensor more = m;
  for (std::size_t y = 0; y < 31; ++y)
    for (std::size_t x = 0; x < 31; ++x)
      if (std::abs(long(y) - 15) > half || std::abs(long(x) - 15) > half) more[y * 31 + x] += 0.3f;
  EXPECT_GE(erf_at_50(more), r0);
}

TEST(Erf50Test, ZeroMapIsAnError) {
  EXPECT_THROW(erf_at_50(Tensor({5, 5})), ErfError);
  EXPECT_THROW(normalize_mass(Tensor({5, 5})), ErfError);
}

TEST(GradientMapTest, IdentityModelGivesDelta) {
  const ConvStack id = ConvStack::ones(3, 0, 3);
  const auto rep = erf_suite(feature_probe(id), {random({3, 224, 224}, 2)}, {0});
  ASSERT_EQ(rep.size(), 1u);
  EXPECT_DOUBLE_EQ(rep[0].erf50, 1.0 / 224.0);
  EXPECT_FLOAT_EQ(rep[0].map[112 * 224 + 112], 1.0f);
  EXPECT_FLOAT_EQ(rep[0].raw_map[112 * 224 + 112], 3.0f);
}

TEST(GradientMapTest, SingleOnesConvHasThreeByThreeSupport) {
  const ConvStack s = ConvStack::ones(3, 1, 3);
  const Tensor g = gradient_map(feature_probe(s), random({3, 224, 224}, 3), 0);
  for (std::size_t y = 0; y < 224; ++y)
    for (std::size_t x = 0; x < 224; ++x) {
      const bool inside = y >= 111 && y <= 113 && x >= 111 && x <= 113;
      EXPECT_EQ(g[y * 224 + x], inside ? 3.0f : 0.0f);
    }
  EXPECT_DOUBLE_EQ(erf_at_50(normalize_mass(g)), 3.0 / 224.0);
}

TEST(GradientMapTest, TwoOnesConvsAreTriangular) {
  const Tensor g = gradient_map(feature_probe(ConvStack::ones(1, 2, 3)), random({1, 15, 15}, 4), 0);
  const float tri[5] = {1, 2, 3, 2, 1};
  for (std::size_t y = 0; y < 15; ++y)
    for (std::size_t x = 0; x < 15; ++x) {
      const long dy = long(y) - 7, dx = long(x) - 7;
      const float want = std::abs(dy) <= 2 && std::abs(dx) <= 2 ? tri[dy + 2] * tri[dx + 2] : 0.0f;
      EXPECT_EQ(g[y * 15 + x], want);
    }
}

// Signed random kernels, checked against central differences of the same
// stack evaluated in double.
TEST(GradientMapTest, StackedConvMatchesFiniteDifferences) {
  const std::size_t C = 2, S = 15;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ConvStack s = ConvStack::random(C, 2, 3, 10 + seed);
    const Tensor img = random({C, S, S}, 20 + seed);
    const Tensor g = gradient_map(feature_probe(s), img, 0);
    const auto objective = [&](const oracle::Buf& x) {
      oracle::Buf h = x;
      for (const auto& k : s.kernels) h = oracle::depthwise(h, k, Tensor({C}), 1, 1);
      double o = 0;
      for (std::size_t c = 0; c < C; ++c) o += h.v[(c * S + S / 2) * S + S / 2];
      return o;
    };
    oracle::Buf x(img.reshaped({1, C, S, S}));
    const oracle::Buf d = oracle::finite_difference(objective, x, 1e-3);
    Tensor fd({S, S});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S * S; ++i) fd[i] += static_cast<float>(std::abs(d.v[c * S * S + i]));
    EXPECT_LE(oracle::relative_error(g, fd), 1e-3) << "seed " << seed;
  }
}

TEST(GradientMapTest, ErrorContracts) {
  const ConvStack s = ConvStack::ones(3, 1, 3);
  EXPECT_THROW(gradient_map(feature_probe(s), random({3, 8, 8}, 5), 1), ErfError);
  EXPECT_THROW(erf_suite(feature_probe(s), {}, {0}), ErfError);
  EXPECT_THROW(gradient_map(feature_probe(s), random({2, 3, 8, 8}, 5), 0), ShapeError);
}

TEST(SuiteTest, SingletonAndDuplicates) {
  const ConvStack s = ConvStack::random(3, 3, 3, 6);
  const Tensor img = random({3, 33, 33}, 7);
  const auto one = erf_suite(feature_probe(s), {img}, {0});
  const auto two = erf_suite(feature_probe(s), {img, img}, {0});
  const Tensor direct = normalize_mass(gradient_map(feature_probe(s), img, 0));
  EXPECT_EQ(one[0].map, direct);
  EXPECT_DOUBLE_EQ(one[0].erf50, erf_at_50(direct));
  EXPECT_LE(max_abs_diff(one[0].map, two[0].map), 1e-7f);
  EXPECT_DOUBLE_EQ(one[0].erf50, two[0].erf50);
  EXPECT_EQ(two[0].n_images, 2u);
  EXPECT_NEAR(mass(one[0].map), 1.0, 1e-6);
  for (float v : one[0].map.data()) EXPECT_GE(v, 0.0f);
}

TEST(SupportTest, ConvStackWithinTheoreticalField) {
  const ConvStack s = ConvStack::random(2, 3, 5, 8);
  const Tensor g = gradient_map(feature_probe(s), random({2, 32, 32}, 9), 0);
  const Interval iv = receptive_interval(conv_geometry(s), 16);
  EXPECT_EQ(iv.lo, 10);
  EXPECT_EQ(iv.hi, 22);
  for (long y = 0; y < 32; ++y)
    for (long x = 0; x < 32; ++x)
      if (y < iv.lo || y > iv.hi || x < iv.lo || x > iv.hi) {
        EXPECT_EQ(g[y * 32 + x], 0.0f);
      }
}

// Random-init models: the depthwise-conv model's gradient support stays inside
// its analytic receptive field; global spatial-reduction attention reaches
// beyond that bound.
TEST(SupportTest, DwConvBoundedAttentionNot) {
  auto cfg = preset(StmKind::DWConv, Scale::Micro);
  for (auto& st : cfg.stages) st.depth = 1;
  const Model dw = build_model(cfg, 11);
  const Tensor img = noise_images(1, 3, 64, 12, Normalization{})[0];
  const std::size_t stage = 0;
  const Tensor g = gradient_map(feature_probe(dw), img, stage);
  const auto geo = conv_geometry(dw, stage);
  ASSERT_TRUE(geo.has_value());
  const long centre = 64 / 4 / 2;  // stage-0 map is 16x16
  const Interval iv = receptive_interval(*geo, centre);
  ASSERT_TRUE(iv.lo > 0 || iv.hi < 63);
  std::size_t outside_dw = 0;
  for (long y = 0; y < 64; ++y)
    for (long x = 0; x < 64; ++x)
      if ((y < iv.lo || y > iv.hi || x < iv.lo || x > iv.hi) && g[y * 64 + x] != 0.0f) ++outside_dw;
  EXPECT_EQ(outside_dw, 0u);

  auto pcfg = preset(StmKind::SRAttn, Scale::Micro);
  for (auto& st : pcfg.stages) st.depth = 1;
  pcfg.layer_scale_init = 1.0f;
  const Model pvt = build_model(pcfg, 11);
  EXPECT_FALSE(conv_geometry(pvt, stage).has_value());
  const Tensor gp = gradient_map(feature_probe(pvt), img, stage);
  std::size_t outside_pvt = 0;
  for (long y = 0; y < 64; ++y)
    for (long x = 0; x < 64; ++x)
      if ((y < iv.lo || y > iv.hi || x < iv.lo || x > iv.hi) && gp[y * 64 + x] != 0.0f) ++outside_pvt;
  EXPECT_GT(outside_pvt, 0u);
}

TEST(OutputTest, PgmAndCsv) {
  Tensor m({2, 3});
  m[5] = 2.0f;
  m[0] = 1.0f;
  std::ostringstream os;
  write_pgm(os, m);
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, 11), "P5\n3 2\n255\n");
  ASSERT_EQ(s.size(), 11u + 6u);
  EXPECT_EQ(static_cast<unsigned char>(s[11 + 5]), 255);
  EXPECT_EQ(static_cast<unsigned char>(s[11 + 0]), 128);
  std::ostringstream lg;
  write_pgm(lg, m, true);
  EXPECT_GT(static_cast<unsigned char>(lg.str()[11]), 128);

  ErfReport r;
  r.stage = 2;
  r.erf50 = 0.25;
  r.n_images = 4;
  std::ostringstream csv;
  write_erf_csv(csv, {r});
  EXPECT_EQ(csv.str(), "stage,erf50,n_images\n2,0.25,4\n");
}
