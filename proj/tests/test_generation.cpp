#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gpm/generation.hpp"

using namespace gpm;

namespace {

DVAEConfig tiny_dvae() {
  DVAEConfig c;
  c.num_groups = 8;
  c.group_size = 9;
  c.embed_dim = 8;
  c.code_dim = 8;
  c.codebook_size = 12;
  c.conv_width = 8;
  c.fold_hidden = 8;
  c.graph_k = 3;
  return c;
}

struct Models {
  DVAE<float> dvae{tiny_dvae(), 1};
  GPMTransformer<float> gpm;
  PointCloud cloud;
  explicit Models(PartBSource src = PartBSource::codebook) : gpm(make_cfg(src), 2) {
    dvae.mark_ready();
    SyntheticShapeSpec s;
    s.points = 200;
    Rng rng = make_rng(3);
    cloud = synth_shape(s, rng);
  }
  static GPMConfig make_cfg(PartBSource src) {
    GPMConfig g;
    g.input_dim = 8;
    g.vocab = 12;
    g.num_groups = 8;
    g.depth = 2;
    g.dim = 16;
    g.heads = 2;
    g.partb_source = src;
    return g;
  }
};

}  // namespace

TEST(SampleToken, GreedyTopKTemperature) {
  std::vector<float> lg{0.f, 3.f, 1.f, 3.f, -2.f};
  Rng rng = make_rng(1);
  EXPECT_EQ(sample_token<float>(lg, SamplingPolicy::greedy(), rng), 1u);
  SamplingPolicy top1{SamplingMode::top_k, 1, 1.0, 0};
  EXPECT_EQ(sample_token<float>(lg, top1, rng), 1u);
  SamplingPolicy top2{SamplingMode::top_k, 2, 1.0, 0};
  std::set<std::size_t> seen;
  for (int i = 0; i < 200; ++i) seen.insert(sample_token<float>(lg, top2, rng));
  EXPECT_EQ(seen, (std::set<std::size_t>{1, 3}));
  SamplingPolicy cold{SamplingMode::temperature, 0, 1e-3, 0};
  for (int i = 0; i < 50; ++i) {
    auto t = sample_token<float>(lg, cold, rng);
    EXPECT_TRUE(t == 1 || t == 3);
  }
}

TEST(SampleToken, InvalidPolicies) {
  std::vector<float> lg{0.f, 1.f};
  Rng rng = make_rng(2);
  EXPECT_THROW(sample_token<float>(lg, {SamplingMode::top_k, 0, 1.0, 0}, rng), ContractViolation);
  EXPECT_THROW(sample_token<float>(lg, {SamplingMode::top_k, 3, 1.0, 0}, rng), ContractViolation);
  EXPECT_THROW(sample_token<float>(lg, {SamplingMode::temperature, 1, 0.0, 0}, rng), InvalidArgument);
  EXPECT_THROW(sample_token<float>(std::span<const float>(), SamplingPolicy::greedy(), rng), ContractViolation);
}

TEST(Generation, EmptyMaskReproducesReconstruction) {
  Models m;
  auto g = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {}, SamplingPolicy::greedy());
  auto r = m.dvae.reconstruct(m.cloud, 5);
  ASSERT_EQ(g.cloud.size(), r.size());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(g.cloud[i], r[i]);
  EXPECT_TRUE(g.trace.empty());
}

TEST(Generation, GreedyIsBitDeterministic) {
  Models m;
  auto a = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {1, 2, 6}, SamplingPolicy::greedy());
  auto b = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {6, 2, 1}, SamplingPolicy::greedy());
  EXPECT_EQ(a.tokens, b.tokens);
  for (std::size_t i = 0; i < a.cloud.size(); ++i) EXPECT_EQ(a.cloud[i], b.cloud[i]);
  ASSERT_EQ(a.trace.size(), 3u);
  EXPECT_EQ(a.trace[0].position, 1u);
  EXPECT_EQ(a.trace[2].position, 6u);
}

TEST(Generation, UnmaskedTokensKept) {
  Models m;
  auto [ts, ps] = m.dvae.tokenize(m.cloud, 5);
  SamplingPolicy p{SamplingMode::top_k, 4, 1.0, 9};
  auto g = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {0, 3}, p);
  for (std::size_t i = 0; i < 8; ++i)
    if (i != 0 && i != 3) EXPECT_EQ(g.tokens[i], ts.tokens[i]);
}

TEST(Generation, PrefixStableUnderFixedSeed) {
  // Fixing a later position's token does not alter earlier samples.
  Models m;
  SamplingPolicy p{SamplingMode::top_k, 6, 1.0, 11};
  auto a = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {2, 4, 7}, p);
  auto b = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {2, 4}, p);
  EXPECT_EQ(a.tokens[2], b.tokens[2]);
  EXPECT_EQ(a.tokens[4], b.tokens[4]);
}

TEST(Generation, PatchSourceVariant) {
  Models m(PartBSource::patch);
  auto a = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {1, 5}, SamplingPolicy::greedy());
  auto e = generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {}, SamplingPolicy::greedy());
  EXPECT_EQ(a.cloud.size(), e.cloud.size());
}

TEST(Generation, UnconditionalShapeAndReproducible) {
  Models m;
  auto centers = canonical_centers(8, 4);
  SamplingPolicy p{SamplingMode::top_k, 8, 1.0, 21};
  auto a = generate_unconditional(m.dvae, m.gpm, centers, p);
  auto b = generate_unconditional(m.dvae, m.gpm, centers, p);
  EXPECT_EQ(a.cloud.size(), 8u * 9u);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.trace.size(), 8u);
  std::vector<std::vector<std::size_t>> seqs;
  for (std::uint64_t s = 0; s < 20; ++s) {
    p.seed = s;
    seqs.push_back(generate_unconditional(m.dvae, m.gpm, centers, p).tokens);
  }
  EXPECT_GT(token_entropy(seqs), 0.0);
}

TEST(Generation, NotReadyDvae) {
  Models m;
  m.dvae.mark_ready(false);
  EXPECT_THROW(generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {1}, SamplingPolicy::greedy()), NotReady);
  EXPECT_THROW(generate_unconditional(m.dvae, m.gpm, canonical_centers(8, 1), SamplingPolicy::greedy()), NotReady);
}

TEST(Generation, BadMaskSet) {
  Models m;
  EXPECT_THROW(generate_masked_region(m.dvae, m.gpm, m.cloud, 5, {8}, SamplingPolicy::greedy()), ContractViolation);
}

TEST(TokenEntropy, PointMassIsZero) {
  EXPECT_EQ(token_entropy({{1, 1, 1}, {1, 1}}), 0.0);
  EXPECT_NEAR(token_entropy({{0, 1}}), std::log(2.0), 1e-15);
}

TEST(TokenTrace, WritesHeaderAndRows) {
  const auto path = (std::filesystem::temp_directory_path() / "gpm_trace.tsv").string();
  write_token_trace(path, {{3, 7, 1.5}, {5, 2, -0.25}});
  std::ifstream in(path);
  std::string h, r1, r2;
  std::getline(in, h);
  std::getline(in, r1);
  std::getline(in, r2);
  EXPECT_EQ(h, "step\tposition\ttoken\tlogit");
  EXPECT_EQ(r1, "0\t3\t7\t1.5");
  EXPECT_EQ(r2, "1\t5\t2\t-0.25");
  std::filesystem::remove(path);
}
