#include <gtest/gtest.h>

#include "gpm/data_io.hpp"
#include "gpm/dvae.hpp"

using namespace gpm;
using TD = nn::Tensor<double>;

namespace {

DVAEConfig tiny_config() {
  DVAEConfig c;
  c.num_groups = 8;
  c.group_size = 9;
  c.embed_dim = 8;
  c.code_dim = 8;
  c.codebook_size = 16;
  c.conv_width = 8;
  c.fold_hidden = 8;
  c.graph_k = 3;
  return c;
}

PointCloud shape(std::size_t n, std::uint64_t seed) {
  SyntheticShapeSpec s;
  s.points = n;
  Rng rng = make_rng(seed);
  return synth_shape(s, rng);
}

}  // namespace

TEST(Quantize, HardPicksArgmaxCode) {
  auto lg = TD::from(2, 3, {0.1, 2.0, -1.0, 5.0, 0.0, 4.9});
  auto cb = TD::from(3, 2, {1, 2, 3, 4, 5, 6});
  auto q = quantize(lg, cb, 1.0, QuantizeMode::hard, nullptr);
  EXPECT_EQ(q.tokens, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(q.code_inputs(0, 0), 3.0);
  EXPECT_EQ(q.code_inputs(1, 1), 2.0);
}

TEST(Quantize, SoftDominantLogitNearCode) {
  auto lg = TD::from(1, 3, {25.0, 0.0, 5.0});
  auto cb = TD::from(3, 2, {1, 2, 3, 4, 5, 6});
  auto q = quantize(lg, cb, 0.0625, QuantizeMode::soft, nullptr);
  EXPECT_NEAR(q.code_inputs(0, 0), 1.0, 1e-3);
  EXPECT_NEAR(q.code_inputs(0, 1), 2.0, 1e-3);
}

TEST(Quantize, UniformLogitsGiveCodebookMean) {
  auto lg = TD::zeros(1, 3);
  auto cb = TD::from(3, 2, {1, 2, 3, 4, 5, 9});
  auto q = quantize(lg, cb, 0.3, QuantizeMode::soft, nullptr);
  EXPECT_NEAR(q.code_inputs(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(q.code_inputs(0, 1), 5.0, 1e-12);
}

TEST(Quantize, SoftOutputIsConvexCombination) {
  Rng rng = make_rng(3);
  std::vector<double> v(4 * 6);
  for (auto& x : v) x = normal01(rng);
  auto lg = TD::from(4, 6, v);
  std::vector<double> c(6 * 3);
  for (auto& x : c) x = normal01(rng);
  auto cb = TD::from(6, 3, c);
  Rng nr = make_rng(4);
  auto q = quantize(lg, cb, 0.5, QuantizeMode::soft, &nr);
  for (std::size_t r = 0; r < 4; ++r) {
    double wsum = 0;
    for (std::size_t s = 0; s < 6; ++s) {
      EXPECT_GE(q.assignments(r, s), 0.0);
      wsum += q.assignments(r, s);
    }
    EXPECT_NEAR(wsum, 1.0, 1e-12);
    for (std::size_t d = 0; d < 3; ++d) {
      double rec = 0;
      for (std::size_t s = 0; s < 6; ++s) rec += q.assignments(r, s) * cb(s, d);
      EXPECT_NEAR(rec, q.code_inputs(r, d), 1e-5);
    }
  }
}

TEST(Quantize, BadTauThrows) {
  EXPECT_THROW(quantize(TD::zeros(1, 2), TD::zeros(2, 2), 0.0, QuantizeMode::soft, nullptr), InvalidArgument);
}

TEST(KlToUniform, KnownValues) {
  EXPECT_NEAR(kl_to_uniform(TD::from(1, 4, {0.25, 0.25, 0.25, 0.25})).item(), 0.0, 1e-15);
  EXPECT_NEAR(kl_to_uniform(TD::from(1, 4, {1, 0, 0, 0})).item(), std::log(4.0), 1e-15);
  Rng rng = make_rng(5);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> q(3 * 7);
    for (std::size_t r = 0; r < 3; ++r) {
      double z = 0;
      for (std::size_t s = 0; s < 7; ++s) z += q[r * 7 + s] = uniform01(rng);
      for (std::size_t s = 0; s < 7; ++s) q[r * 7 + s] /= z;
    }
    double want = 0;
    for (std::size_t i = 0; i < q.size(); ++i) want += q[i] * std::log(q[i] * 7.0) / 3.0;
    const double got = kl_to_uniform(TD::from(3, 7, q)).item();
    EXPECT_NEAR(got, want, 1e-10);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, std::log(7.0));
  }
}

TEST(DvaeLoss, SumOfTerms) {
  PointCloud in{{{0, 0, 0}, {1, 0, 0}}};
  auto recon = TD::from(2, 3, {0, 0, 0.5, 1, 0, 0});
  auto q = TD::from(2, 2, {0.9, 0.1, 0.2, 0.8});
  auto zero = dvae_loss(in, recon, q, 0.0);
  EXPECT_EQ(zero.total.item(), chamfer_l1(to_cloud(recon), in));
  auto l = dvae_loss(in, recon, q, 0.3);
  EXPECT_NEAR(l.total.item(), chamfer_l1(to_cloud(recon), in) + 0.3 * kl_to_uniform(q).item(), 1e-12);
  auto exact = dvae_loss(in, TD::from(2, 3, {0, 0, 0, 1, 0, 0}), TD::from(2, 2, {0.5, 0.5, 0.5, 0.5}), 0.1);
  EXPECT_NEAR(exact.total.item(), 0.0, 1e-15);
  EXPECT_THROW(dvae_loss(in, recon, q, -1.0), InvalidArgument);
}

TEST(FoldingGrid, PerfectSquareAndTruncation) {
  auto g = folding_grid(16);
  ASSERT_EQ(g.size(), 16u);
  EXPECT_EQ(g.front()[0], -0.5);
  EXPECT_EQ(g.back()[1], 0.5);
  auto t = folding_grid(10);
  ASSERT_EQ(t.size(), 10u);
  EXPECT_EQ(t[0], folding_grid(16)[0]);
}

TEST(Decoder, OutputSizeAndTranslationEquivariance) {
  DVAE<double> model(tiny_config(), 1);
  Rng rng = make_rng(6);
  std::vector<double> c(8 * 8);
  for (auto& x : c) x = normal01(rng);
  auto codes = TD::from(8, 8, c);
  std::vector<Point3> centers;
  for (int i = 0; i < 8; ++i) centers.push_back({normal01(rng), normal01(rng), normal01(rng)});
  auto a = to_cloud(model.decode(codes, centers));
  ASSERT_EQ(a.size(), 8u * 9u);
  const Point3 t{0.25, -1.5, 3.0};
  auto moved = centers;
  for (auto& p : moved)
    for (int d = 0; d < 3; ++d) p[d] += t[d];
  auto b = to_cloud(model.decode(codes, moved));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(b[i][d], a[i][d] + t[d], 1e-12);
}

TEST(Decoder, ExactEquivarianceWithoutGeometryContext) {
  auto cfg = tiny_config();
  cfg.decoder_geometry = false;
  DVAE<double> model(cfg, 1);
  Rng rng = make_rng(7);
  std::vector<double> c(8 * 8);
  for (auto& x : c) x = normal01(rng);
  auto codes = TD::from(8, 8, c);
  std::vector<Point3> centers, moved;
  for (int i = 0; i < 8; ++i) centers.push_back({normal01(rng), normal01(rng), normal01(rng)});
  moved = centers;
  for (auto& p : moved) p[0] += 2.0;
  auto off_a = model.decoder().offsets(codes, centers), off_b = model.decoder().offsets(codes, moved);
  for (std::size_t i = 0; i < off_a.size(); ++i) EXPECT_EQ(off_a.value()[i], off_b.value()[i]);
}

TEST(Dvae, TokenizeRequiresReadyWeights) {
  DVAE<float> model(tiny_config(), 1);
  auto cloud = shape(256, 1);
  EXPECT_THROW(model.tokenize(cloud, 0), NotReady);
  EXPECT_THROW(model.reconstruct(cloud, 0), NotReady);
  model.mark_ready();
  auto [a, pa] = model.tokenize(cloud, 4);
  auto [b, pb] = model.tokenize(cloud, 4);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.tokens.size(), 8u);
  for (auto t : a.tokens) EXPECT_LT(t, 16u);
  EXPECT_EQ(model.reconstruct(cloud, 4).size(), 72u);
}

TEST(Dvae, CodebookReceivesGradientInSoftMode) {
  DVAE<double> model(tiny_config(), 2);
  auto cloud = shape(128, 2);
  Rng rng = make_rng(8);
  auto st = model.train_step(cloud, 1, 0.8, 0.1, rng);
  st.loss.total.backward();
  double norm = 0;
  for (double g : model.codebook().grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Dvae, PermutationInvariantEmbedding) {
  DVAE<double> model(tiny_config(), 3);
  auto cloud = shape(200, 3);
  auto ps = build_patches(cloud, 8, 9, 1);
  auto e1 = model.embed(ps);
  for (std::size_t p = 0; p < ps.m; ++p) std::reverse(ps.patches.begin() + p * 9, ps.patches.begin() + (p + 1) * 9);
  auto e2 = model.embed(ps);
  for (std::size_t i = 0; i < e1.size(); ++i) EXPECT_NEAR(e1.value()[i], e2.value()[i], 1e-12);
}

TEST(Dvae, PerPatchChamferOption) {
  auto cfg = tiny_config();
  cfg.per_patch_chamfer = true;
  DVAE<float> model(cfg, 4);
  auto cloud = shape(128, 4);
  Rng rng = make_rng(9);
  auto st = model.train_step(cloud, 1, 1.0f, 0.0, rng);
  EXPECT_TRUE(std::isfinite(st.loss.total.item()));
  EXPECT_GT(st.loss.chamfer.item(), 0.0f);
}
