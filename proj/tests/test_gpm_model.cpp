#include <gtest/gtest.h>

#include "flow_checks.hpp"
#include "gpm/gpm_model.hpp"

using namespace gpm;
using TF = nn::Tensor<float>;

namespace {

GPMConfig small_config() {
  GPMConfig c;
  c.input_dim = 8;
  c.vocab = 10;
  c.num_groups = 6;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  return c;
}

struct Fixture {
  TF emb, codebook;
  std::vector<Point3> centers;
  std::vector<std::size_t> tokens{3, 1, 4, 1, 5, 9};
};

Fixture fixture(std::uint64_t seed) {
  Rng rng = make_rng(seed);
  Fixture f;
  f.emb = checks::noise_rows(6, 8, rng);
  f.codebook = checks::noise_rows(10, 8, rng);
  f.centers = checks::random_centers(6, rng);
  return f;
}

}  // namespace

TEST(MaskCount, RoundingAndClamp) {
  EXPECT_EQ(mask_count(0.25, 64), 16u);
  EXPECT_EQ(mask_count(0.45, 64), 29u);
  EXPECT_EQ(mask_count(0.35, 10), 4u);  // 3.5 rounds up
  EXPECT_EQ(mask_count(0.0, 10), 1u);
  EXPECT_EQ(mask_count(1.0, 10), 9u);
}

TEST(MaskRegion, NearestNeighbourhoodSorted) {
  std::vector<Point3> c{{0, 0, 0}, {10, 0, 0}, {1, 0, 0}, {2, 0, 0}, {11, 0, 0}};
  EXPECT_EQ(mask_region_around(c, 0, 3), (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(mask_region_around(c, 4, 2), (std::vector<std::size_t>{1, 4}));
  EXPECT_THROW(mask_region_around(c, 5, 2), InvalidArgument);
}

TEST(MaskRegion, SizeRangeAndContiguity) {
  auto st = checks::mask_statistics(500, 64, 1);
  EXPECT_GE(st.min_size, 16u);
  EXPECT_LE(st.max_size, 29u);
  EXPECT_TRUE(st.all_nearest);
  EXPECT_NEAR(st.mean_ratio, 0.35, 0.02);
}

TEST(MaskRegion, TooFewCenters) {
  Rng rng = make_rng(1);
  std::vector<Point3> c{{0, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(select_mask_region(c, 0.25, 0.45, rng), InvalidArgument);
}

TEST(AttentionMask, Layout) {
  auto m = build_attention_mask(3, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(m(r, c));
    for (std::size_t c = 3; c < 5; ++c) EXPECT_FALSE(m(r, c));
  }
  EXPECT_TRUE(m(3, 0) && m(3, 2) && m(3, 3));
  EXPECT_FALSE(m(3, 4));
  EXPECT_TRUE(m(4, 4));
  auto s = build_swapped_attention_mask(3, 2);
  EXPECT_TRUE(s(0, 0));
  EXPECT_FALSE(s(0, 1));
  EXPECT_FALSE(s(0, 2));
  EXPECT_TRUE(s(1, 0) && s(1, 1));
  EXPECT_FALSE(s(2, 0));
  EXPECT_TRUE(s(4, 2) && s(4, 4));
  EXPECT_THROW(build_attention_mask(0, 2), InvalidArgument);
}

TEST(AttentionFlow, BitExactInvariants) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto t = checks::attention_flow_trial(s);
    EXPECT_TRUE(t.part_a_isolated) << "seed " << s;
    EXPECT_TRUE(t.part_b_causal) << "seed " << s;
  }
}

TEST(Gpm, PartBStartTokenAndShift) {
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(2);
  auto in = model.assemble(f.emb, f.centers, f.tokens, {1, 2}, f.codebook);
  EXPECT_EQ(in.part_a.rows(), 7u);
  EXPECT_EQ(in.part_b.rows(), 6u);
  // Row 1 of PartB carries token 0's code plus position 1.
  auto codes = model.embed_codes(f.codebook, f.tokens);
  for (std::size_t d = 0; d < 16; ++d) EXPECT_FLOAT_EQ(in.part_b(1, d), codes(0, d) + in.positions(1, d));
  auto start = model.parameters().get("gpm.start_token");
  for (std::size_t d = 0; d < 16; ++d) EXPECT_FLOAT_EQ(in.part_b(0, d), start(0, d) + in.positions(0, d));
}

TEST(Gpm, MaskedSlotsUseMaskToken) {
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(3);
  auto pos = model.positions(f.centers);
  auto a = model.build_part_a(f.emb, pos, {4});
  auto mt = model.parameters().get("gpm.mask_token");
  for (std::size_t d = 0; d < 16; ++d) EXPECT_FLOAT_EQ(a(5, d), mt(0, d) + pos(4, d));
  auto cls = model.parameters().get("gpm.cls");
  for (std::size_t d = 0; d < 16; ++d) EXPECT_EQ(a(0, d), cls(0, d));
}

TEST(Gpm, InvalidMaskSetsAreContractViolations) {
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(4);
  EXPECT_THROW(model.assemble(f.emb, f.centers, f.tokens, {6}, f.codebook), ContractViolation);
  EXPECT_THROW(model.assemble(f.emb, f.centers, f.tokens, {1, 1}, f.codebook), ContractViolation);
  auto bad = f.tokens;
  bad[0] = 10;
  EXPECT_THROW(model.assemble(f.emb, f.centers, bad, {1}, f.codebook), ContractViolation);
}

TEST(Gpm, OutputShapesAndEncoderPath) {
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(5);
  auto in = model.assemble(f.emb, f.centers, f.tokens, {0, 3}, f.codebook);
  auto out = model.forward(in, false, nullptr);
  EXPECT_EQ(out.ae_logits.rows(), 6u);
  EXPECT_EQ(out.ae_logits.cols(), 10u);
  EXPECT_EQ(out.ar_logits.rows(), 6u);
  const auto built = model.partb_constructions();
  auto enc = model.forward(model.assemble_encoder(f.emb, f.centers), false, nullptr);
  EXPECT_EQ(model.partb_constructions(), built);
  EXPECT_FALSE(enc.part_b.defined());
  // Without a PartB the encoder sees exactly what PartA sees in a full pass.
  auto in_nomask = model.assemble(f.emb, f.centers, f.tokens, {}, f.codebook);
  auto full = model.forward(in_nomask, false, nullptr);
  EXPECT_TRUE(checks::same_bits(enc.part_a.value(), full.part_a.value()));
}

TEST(Gpm, OrderSwapPreservesAEOutputs) {
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(6);
  auto in = model.assemble(f.emb, f.centers, f.tokens, {2, 5}, f.codebook);
  auto ab = model.forward(in, false, nullptr);
  auto ba = model.forward(order_swap(in), false, nullptr);
  for (std::size_t i = 0; i < ab.ae_logits.size(); ++i) EXPECT_NEAR(ab.ae_logits.value()[i], ba.ae_logits.value()[i], 1e-5);
  // PartB first: the causal rows have no PartA context at all.
  auto sw = order_swap(in);
  Rng rng = make_rng(3);
  sw.part_a = checks::noise_rows(sw.part_a.rows(), sw.part_a.cols(), rng);
  auto moved = model.forward(sw, false, nullptr);
  EXPECT_TRUE(checks::same_bits(ba.ar_logits.value(), moved.ar_logits.value()));
}

TEST(Gpm, PatchPermutationPermutesAELogits) {
  // Permuting patches (with their centers) permutes the AE logits.
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(7);
  auto base = model.forward(model.assemble_encoder(f.emb, f.centers), false, nullptr);
  const std::vector<std::size_t> perm{5, 2, 0, 1, 4, 3};
  auto emb2 = nn::gather_rows(f.emb, perm);
  std::vector<Point3> c2;
  for (auto p : perm) c2.push_back(f.centers[p]);
  auto out = model.forward(model.assemble_encoder(emb2, c2), false, nullptr);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t s = 0; s < 10; ++s) EXPECT_NEAR(out.ae_logits(i, s), base.ae_logits(perm[i], s), 1e-5);
}

TEST(Gpm, StochasticDepthTrainingNeedsGenerator) {
  GPMTransformer<float> model(small_config(), 1);
  auto f = fixture(8);
  auto in = model.assemble(f.emb, f.centers, f.tokens, {1}, f.codebook);
  EXPECT_THROW(model.forward(in, true, nullptr), InvalidArgument);
  Rng a = make_rng(1), b = make_rng(1);
  auto x = model.forward(in, true, &a), y = model.forward(in, true, &b);
  EXPECT_TRUE(checks::same_bits(x.ae_logits.value(), y.ae_logits.value()));
}

TEST(Losses, MaskedPositionsOnly) {
  auto logits = TF::zeros(4, 5);
  std::vector<float> v(20, 0.f);
  v[0 * 5 + 2] = 10.f;  // row 0 confidently right, not masked
  auto lg = TF::from(4, 5, v);
  const std::vector<std::size_t> labels{2, 1, 0, 3};
  EXPECT_NEAR(loss_ae(logits, labels, {1, 3}).item(), std::log(5.0f), 1e-6);
  EXPECT_NEAR(loss_ar(lg, labels, {1, 2}).item(), std::log(5.0f), 1e-6);
  EXPECT_LT(loss_ar(lg, labels, {1, 2}, true).item(), std::log(5.0f));
  EXPECT_THROW(loss_ae(logits, labels, {}), InvalidArgument);
}

TEST(Losses, TotalWeights) {
  auto ae = TF::scalar(2.f), ar = TF::scalar(3.f);
  EXPECT_FLOAT_EQ(loss_total(ae, ar).item(), 5.f);
  EXPECT_FLOAT_EQ(loss_total(ae, ar, 1.0, 0.0).item(), 2.f);
  EXPECT_FLOAT_EQ(loss_total(ae, ar, 0.5, 2.0).item(), 7.f);
  EXPECT_THROW(loss_total(ae, ar, -1.0, 1.0), InvalidArgument);
}

TEST(GpmConfig, Validation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(GPMTransformer<float>(c, 0), InvalidArgument);
  c = small_config();
  c.mask_ratio_min = 0.5;
  c.mask_ratio_max = 0.4;
  EXPECT_THROW(c.validate(), InvalidArgument);
}
