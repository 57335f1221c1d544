#include <gtest/gtest.h>

#include "gpm/config.hpp"

using namespace gpm;

TEST(KeyValues, ParsesCommentsAndWhitespace) {
  auto kv = KeyValues::parse("# top\n a = 1 \nb=two # trailing\n\n", "cfg");
  ASSERT_NE(kv.find("a"), nullptr);
  EXPECT_EQ(kv.find("a")->value, "1");
  EXPECT_EQ(kv.find("b")->value, "two");
  EXPECT_EQ(kv.find("b")->origin, "cfg:3");
}

TEST(KeyValues, ErrorsNameTheLine) {
  try {
    KeyValues::parse("a = 1\nnot a pair\n", "f.cfg");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos);
  }
  EXPECT_THROW(KeyValues::parse("= 3\n", "f"), ParseError);
  EXPECT_THROW(KeyValues::parse("a = 1\na = 2\n", "f"), ParseError);
}

TEST(KeyValues, OverridesWin) {
  auto kv = KeyValues::parse("dvae.train.steps = 10\n", "f");
  kv.set_override("dvae.train.steps=20");
  auto cfg = resolve_config(kv);
  EXPECT_EQ(cfg.dvae_train.total_steps, 20u);
  EXPECT_THROW(kv.set_override("novalue"), ParseError);
}

TEST(ResolveConfig, DefaultsAndPresets) {
  auto desk = resolve_config(KeyValues{});
  EXPECT_EQ(desk.dvae.num_groups, 32u);
  EXPECT_EQ(desk.dvae.codebook_size, 256u);
  EXPECT_EQ(desk.dvae_train.total_steps, 3000u);
  EXPECT_EQ(desk.gpm_train.total_steps, 2000u);
  EXPECT_EQ(desk.dvae_train.optim.lr.base, 1e-3);
  EXPECT_EQ(desk.dvae_train.kl.flat_steps, 0u);
  EXPECT_EQ(desk.dvae_train.kl.final_weight, 0.1);
  EXPECT_EQ(desk.dvae_train.tau.decay_steps, 2000u);
  EXPECT_EQ(desk.dvae.fold_hidden, 128u);
  EXPECT_EQ(desk.dvae_train.optim.weight_decay, 0.05);
  EXPECT_EQ(desk.classify.batch_size, 32u);
  EXPECT_EQ(desk.classify.dropout, 0.5);
  EXPECT_EQ(desk.gpm.drop_path, 0.1);
  EXPECT_EQ(desk.gpm.mask_ratio_min, 0.25);
  EXPECT_EQ(desk.gpm.mask_ratio_max, 0.45);
  auto paper = resolve_config(KeyValues::parse("preset = paper\n", "f"));
  EXPECT_EQ(paper.dvae.codebook_size, 8192u);
  EXPECT_EQ(paper.gpm.depth, 12u);
  EXPECT_EQ(paper.gpm.dim, 384u);
  EXPECT_EQ(paper.dvae_train.optim.lr.base, 5e-4);
  EXPECT_EQ(paper.dvae_train.kl.flat_steps, 10000u);
  EXPECT_EQ(paper.gpm.heads, 6u);
  EXPECT_EQ(paper.dvae_train.total_steps, 150000u);
  EXPECT_EQ(paper.dvae_train.batch_size, 64u);
  EXPECT_EQ(paper.dvae_train.optim.lr.span, 60000u);
  EXPECT_EQ(paper.gpm.vocab, 8192u);
}

TEST(ResolveConfig, UnknownKeysAndBadValues) {
  EXPECT_THROW(resolve_config(KeyValues::parse("dvae.bogus = 1\n", "f")), ParseError);
  EXPECT_THROW(resolve_config(KeyValues::parse("dvae.groups = many\n", "f")), ParseError);
  EXPECT_THROW(resolve_config(KeyValues::parse("gpm.positional = sinus\n", "f")), ParseError);
  EXPECT_THROW(resolve_config(KeyValues::parse("preset = huge\n", "f")), ParseError);
  EXPECT_THROW(resolve_config(KeyValues::parse("dvae.code_dim = 32\n", "f")), InvalidArgument);
  try {
    resolve_config(KeyValues::parse("x = 1\ny.z = 2\n", "my.cfg"));
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("my.cfg:1"), std::string::npos);
  }
}

TEST(ResolveConfig, SnapshotRoundTrips) {
  auto kv = KeyValues::parse("gpm.depth = 3\ngeneration.mode = greedy\ndvae.decoder_geometry = false\n", "f");
  auto cfg = resolve_config(kv);
  KeyValues back;
  for (const auto& [k, v] : config_snapshot(cfg)) back.set(k, v, "snapshot");
  auto again = resolve_config(back);
  EXPECT_EQ(config_snapshot(again), config_snapshot(cfg));
  EXPECT_EQ(again.gpm.depth, 3u);
  EXPECT_EQ(again.generation.mode, SamplingMode::greedy);
  EXPECT_FALSE(again.dvae.decoder_geometry);
}
