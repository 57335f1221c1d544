#include <gtest/gtest.h>

#include <filesystem>

#include "gpm/nn/checkpoint.hpp"
#include "gpm/nn/layers.hpp"
#include "gpm/nn/optim.hpp"
#include "gpm/gradient_suite.hpp"

using namespace gpm;
using namespace gpm::nn;

class Gradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Gradients, MatchFiniteDifferences) {
  const auto cases = checks::gradient_cases();
  const auto& c = cases.at(GetParam());
  const auto r = c.run();
  EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " worst input " << r.worst_input;
}

INSTANTIATE_TEST_SUITE_P(All, Gradients, ::testing::Range<std::size_t>(0, checks::gradient_cases().size()),
                         [](const auto& info) { return checks::gradient_cases()[info.param].name; });

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(Tensor<float>::from(2, 2, {1, 2, 3}), InvalidArgument);
  auto a = Tensor<float>::zeros(2, 3), b = Tensor<float>::zeros(3, 3);
  EXPECT_THROW(add(a, b), InvalidArgument);
  EXPECT_THROW(matmul(a, a), InvalidArgument);
}

TEST(Tensor, GradientsAccumulateOnLeaves) {
  auto a = Tensor<double>::from(1, 2, {1.0, 2.0}, true);
  sum_all(a).backward();
  sum_all(a).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 2.0);
  a.zero_grad();
  EXPECT_DOUBLE_EQ(a.grad()[1], 0.0);
}

TEST(Tensor, NoGradGuardBuildsNoGraph) {
  auto a = Tensor<double>::from(1, 2, {1.0, 2.0}, true);
  NoGradGuard g;
  auto y = scale(a, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Softmax, HiddenKeysGetExactZero) {
  auto a = Tensor<float>::from(2, 3, {1, 50, 2, 3, 4, 5});
  const auto m = std::vector<float>{0, hidden_logit<float>(), 0, 0, 0, hidden_logit<float>()};
  auto p = softmax_with_additive_mask(a, m);
  EXPECT_EQ(p(0, 1), 0.0f);
  EXPECT_EQ(p(1, 2), 0.0f);
  EXPECT_NEAR(p(0, 0) + p(0, 2), 1.0f, 1e-6f);
}

TEST(Softmax, FullyHiddenRowIsNumericFailure) {
  auto a = Tensor<float>::from(1, 2, {1, 2});
  EXPECT_THROW(softmax_with_additive_mask(a, {hidden_logit<float>(), hidden_logit<float>()}), NumericFailure);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  auto a = Tensor<double>::zeros(3, 8);
  EXPECT_NEAR(cross_entropy(a, {0, 5, -1}).item(), std::log(8.0), 1e-12);
  EXPECT_THROW(cross_entropy(a, {-1, -1, -1}), InvalidArgument);
  EXPECT_THROW(cross_entropy(a, {8, 0, 0}), InvalidArgument);
}

TEST(Dropout, IdentityInEvalAndScaledInTraining) {
  Rng rng = make_rng(1);
  auto a = Tensor<double>::from(1, 1000, std::vector<double>(1000, 1.0));
  auto e = dropout(a, 0.5, rng, false);
  EXPECT_EQ(e.node(), a.node());
  auto t = dropout(a, 0.5, rng, true);
  std::size_t zeros = 0;
  for (double v : t.value()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    zeros += v == 0.0;
  }
  EXPECT_GT(zeros, 400u);
  EXPECT_LT(zeros, 600u);
}

TEST(Gelu, KnownValues) {
  auto a = Tensor<double>::from(1, 3, {0.0, 1.0, -1.0});
  auto g = gelu(a);
  EXPECT_NEAR(g(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(g(0, 1), 0.8413447460685429, 1e-3);
  EXPECT_NEAR(g(0, 2), -0.15865525393145707, 1e-3);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng = make_rng(2);
  auto x = checks::rand_tensor(4, 16, rng, 3.0, false);
  auto g = Tensor<double>::from(1, 16, std::vector<double>(16, 1.0));
  auto b = Tensor<double>::zeros(1, 16);
  auto y = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y(r, c) / 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y(r, c) - m) * (y(r, c) - m) / 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Matmul, RowPositionIndependent) {
  // A row's result must not depend on which other rows share the call.
  Rng rng = make_rng(3);
  auto a = checks::rand_tensor(7, 33, rng, 1.0, false);
  auto b = checks::rand_tensor(33, 19, rng, 1.0, false);
  auto full = matmul(a, b);
  for (std::size_t r = 0; r < 7; ++r) {
    auto one = matmul(slice_rows(a, r, 1), b);
    for (std::size_t c = 0; c < 19; ++c) EXPECT_EQ(one(0, c), full(r, c));
  }
}

TEST(AdamW, FirstStepMovesByLr) {
  ParameterSet<double> ps;
  auto w = ps.add("w", 1, 2, {1.0, -1.0});
  auto opt = AdamW<double>::over(ps, {0.1, 0.9, 0.999, 1e-8, 0.0});
  sum_all(mul(w, Tensor<double>::from(1, 2, {3.0, -2.0}))).backward();
  opt.step();
  EXPECT_NEAR(w(0, 0), 0.9, 1e-6);
  EXPECT_NEAR(w(0, 1), -0.9, 1e-6);
}

TEST(AdamW, DecoupledDecaySkipsFlaggedParams) {
  ParameterSet<double> ps;
  auto w = ps.add("w", 1, 1, {2.0}, true);
  auto b = ps.add("b", 1, 1, {2.0}, false);
  auto opt = AdamW<double>::over(ps, {0.1, 0.9, 0.999, 1e-8, 0.5});
  w.grad_storage().assign(1, 0.0);
  b.grad_storage().assign(1, 0.0);
  opt.step();
  EXPECT_NEAR(w(0, 0), 2.0 * (1 - 0.05), 1e-12);
  EXPECT_EQ(b(0, 0), 2.0);
}

TEST(AdamW, MissingGradientIsContractViolation) {
  ParameterSet<double> ps;
  ps.add("w", 1, 1, {1.0});
  auto opt = AdamW<double>::over(ps, {});
  EXPECT_THROW(opt.step(), ContractViolation);
}

TEST(ClipGradNorm, ScalesToMax) {
  ParameterSet<double> ps;
  auto w = ps.add("w", 1, 2, {0, 0});
  w.grad_storage() = {3.0, 4.0};
  std::vector<Parameter<double>*> p{&ps.all()[0]};
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 1.0), 5.0);
  EXPECT_NEAR(w.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(w.grad()[1], 0.8, 1e-12);
}

TEST(CosineSchedule, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_schedule(0, 100, 5e-4, 1e-6), 5e-4);
  EXPECT_DOUBLE_EQ(cosine_schedule(100, 100, 5e-4, 1e-6), 1e-6);
  EXPECT_NEAR(cosine_schedule(50, 100, 5e-4, 1e-6), (5e-4 + 1e-6) / 2, 1e-15);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng = make_rng(4);
  ParameterSet<float> a, b;
  Linear<float> la(a, "l", 5, 7, rng), lb(b, "l", 5, 7, rng);
  auto opt = AdamW<float>::over(a, {});
  sum_all(la(Tensor<float>::from(1, 5, {1, 2, 3, 4, 5}))).backward();
  opt.step();
  const auto path = (std::filesystem::temp_directory_path() / "gpm_ck_test.ckpt").string();
  std::vector<std::pair<std::string, CheckpointRecord>> recs;
  append_parameters(recs, a);
  append_optimizer(recs, opt);
  write_checkpoint(path, recs);
  auto ck = read_checkpoint(path);
  load_parameters(ck, b);
  EXPECT_EQ(a.checksum(), b.checksum());
  auto opt2 = AdamW<float>::over(b, {});
  load_optimizer(ck, opt2);
  EXPECT_EQ(opt2.state().step, 1u);
  EXPECT_EQ(opt2.state().first_moment, opt.state().first_moment);
  EXPECT_EQ(opt2.state().second_moment, opt.state().second_moment);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchAndBadFileAreErrors) {
  Rng rng = make_rng(5);
  ParameterSet<float> a, b;
  Linear<float> la(a, "l", 5, 7, rng), lb(b, "l", 5, 6, rng);
  const auto path = (std::filesystem::temp_directory_path() / "gpm_ck_bad.ckpt").string();
  std::vector<std::pair<std::string, CheckpointRecord>> recs;
  append_parameters(recs, a);
  write_checkpoint(path, recs);
  EXPECT_THROW(load_parameters(read_checkpoint(path), b), DataError);
  { std::ofstream(path) << "not a checkpoint"; }
  EXPECT_THROW(read_checkpoint(path), Error);
  std::filesystem::remove(path);
  EXPECT_THROW(read_checkpoint(path), NotReady);
}

TEST(Parameters, DuplicateNamesRejected) {
  ParameterSet<float> ps;
  ps.add_constant("x", 1, 1, 0.f);
  EXPECT_THROW(ps.add_constant("x", 1, 1, 0.f), InvalidArgument);
}
