#pragma once

// Finite-difference checks for every differentiable piece, in double.
// Shared by the tests and the gradcheck subcommand.

#include <functional>
#include <string>
#include <vector>

#include "gpm/dvae.hpp"
#include "gpm/gpm_model.hpp"
#include "gpm/nn/gradcheck.hpp"

namespace gpm::checks {

using D = double;
using TD = nn::Tensor<D>;

struct GradCase {
  std::string name;
  std::function<nn::GradCheckResult()> run;
};

inline TD rand_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0, bool grad = true) {
  std::vector<D> v(r * c);
  for (auto& x : v) x = scale * normal01(rng);
  return TD::from(r, c, std::move(v), grad);
}

// Random linear functional, so every output element reaches the loss.
inline TD probe(const TD& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x9B0BEULL});
  return nn::sum_all(nn::mul(y, rand_tensor(y.rows(), y.cols(), rng, 1.0, false)));
}

inline std::vector<std::pair<std::string, TD>> param_inputs(nn::ParameterSet<D>& ps) {
  std::vector<std::pair<std::string, TD>> in;
  for (auto& p : ps.all()) in.emplace_back(p.name, p.tensor);
  return in;
}

inline nn::GradCheckResult check(const std::function<TD()>& fn, std::vector<std::pair<std::string, TD>> in) {
  return nn::gradcheck<D>(fn, std::move(in), 1e-6, 1e-7);
}

inline std::vector<GradCase> gradient_cases() {
  using namespace nn;
  std::vector<GradCase> cases;
  auto unary = [&cases](std::string name, std::function<TD(const TD&)> f, std::size_t r, std::size_t c) {
    cases.push_back({name, [f, r, c, name] {
                       Rng rng = make_rng(std::hash<std::string>{}(name));
                       TD a = rand_tensor(r, c, rng);
                       return check([&] { return probe(f(a), 1); }, {{"a", a}});
                     }});
  };
  auto binary = [&cases](std::string name, std::function<TD(const TD&, const TD&)> f, std::size_t ra, std::size_t ca,
                         std::size_t rb, std::size_t cb) {
    cases.push_back({name, [=] {
                       Rng rng = make_rng(std::hash<std::string>{}(name));
                       TD a = rand_tensor(ra, ca, rng), b = rand_tensor(rb, cb, rng);
                       return check([&] { return probe(f(a, b), 2); }, {{"a", a}, {"b", b}});
                     }});
  };

  binary("matmul", [](const TD& a, const TD& b) { return matmul(a, b); }, 4, 5, 5, 3);
  binary("matmul_nt", [](const TD& a, const TD& b) { return matmul_nt(a, b); }, 4, 5, 3, 5);
  unary("transpose", [](const TD& a) { return transpose(a); }, 3, 4);
  binary("add", [](const TD& a, const TD& b) { return add(a, b); }, 3, 4, 3, 4);
  binary("sub", [](const TD& a, const TD& b) { return sub(a, b); }, 3, 4, 3, 4);
  binary("mul", [](const TD& a, const TD& b) { return mul(a, b); }, 3, 4, 3, 4);
  binary("add_row", [](const TD& a, const TD& b) { return add_row(a, b); }, 3, 4, 1, 4);
  unary("scale", [](const TD& a) { return scale(a, 0.7); }, 3, 4);
  unary("relu", [](const TD& a) { return relu(a); }, 4, 5);
  unary("leaky_relu", [](const TD& a) { return leaky_relu(a, 0.2); }, 4, 5);
  unary("gelu", [](const TD& a) { return gelu(a); }, 4, 5);
  binary("concat_cols", [](const TD& a, const TD& b) { return concat_cols<D>({a, b}); }, 3, 2, 3, 4);
  binary("concat_rows", [](const TD& a, const TD& b) { return concat_rows<D>({a, b}); }, 2, 3, 4, 3);
  unary("slice_rows", [](const TD& a) { return slice_rows(a, 1, 3); }, 5, 3);
  unary("slice_cols", [](const TD& a) { return slice_cols(a, 1, 2); }, 3, 5);
  unary("gather_rows", [](const TD& a) { return gather_rows(a, {2, 0, 2, 1}); }, 3, 4);
  unary("max_pool_over_set", [](const TD& a) { return max_pool_over_set(a, 3); }, 6, 4);
  unary("mean_pool_over_set", [](const TD& a) { return mean_pool_over_set(a, 3); }, 6, 4);
  unary("mean_all", [](const TD& a) { return mean_all(a); }, 3, 4);
  unary("softmax_rows", [](const TD& a) { return softmax_rows(a); }, 3, 5);
  unary("log_softmax_rows", [](const TD& a) { return log_softmax_rows(a); }, 3, 5);
  unary("masked_softmax", [](const TD& a) {
    const auto m = build_attention_mask(2, 2).additive<D>();
    return softmax_with_additive_mask(a, m);
  }, 4, 4);
  unary("cross_entropy", [](const TD& a) { return cross_entropy(a, {1, -1, 3, 0}); }, 4, 5);
  unary("dropout", [](const TD& a) {
    Rng r = make_rng(5);
    return dropout(a, 0.5, r, true);
  }, 4, 6);
  cases.push_back({"layer_norm", [] {
                     Rng rng = make_rng(21);
                     TD a = rand_tensor(3, 6, rng), g = rand_tensor(1, 6, rng), b = rand_tensor(1, 6, rng);
                     return check([&] { return probe(layer_norm(a, g, b), 3); }, {{"a", a}, {"gain", g}, {"bias", b}});
                   }});
  cases.push_back({"gumbel_softmax_soft", [] {
                     Rng rng = make_rng(22);
                     TD a = rand_tensor(3, 6, rng);
                     Rng nr = make_rng(23);
                     const auto noise = gumbel_noise<D>(3, 6, nr);
                     return check([&] { return probe(gumbel_softmax_with_noise(a, 0.5, false, noise), 4); }, {{"logits", a}});
                   }});
  cases.push_back({"quantize_soft", [] {
                     Rng rng = make_rng(24);
                     TD lg = rand_tensor(3, 5, rng), cb = rand_tensor(5, 4, rng);
                     return check([&] {
                       Rng nr = make_rng(25);
                       return probe(quantize(lg, cb, 0.7, QuantizeMode::soft, &nr).code_inputs, 5);
                     }, {{"logits", lg}, {"codebook", cb}});
                   }});
  cases.push_back({"kl_to_uniform", [] {
                     Rng rng = make_rng(26);
                     TD a = rand_tensor(3, 5, rng);
                     return check([&] { return kl_to_uniform(softmax_rows(a)); }, {{"logits", a}});
                   }});
  cases.push_back({"chamfer_loss", [] {
                     Rng rng = make_rng(27);
                     TD a = rand_tensor(7, 3, rng);
                     std::vector<Point3> t;
                     for (int i = 0; i < 9; ++i) t.push_back({normal01(rng), normal01(rng), normal01(rng)});
                     return check([&] { return chamfer_loss(a, std::span<const Point3>(t)); }, {{"pred", a}});
                   }});
  cases.push_back({"mini_pointnet", [] {
                     Rng rng = make_rng(28);
                     ParameterSet<D> ps;
                     MiniPointNet<D> net(ps, "pn", 6, rng);
                     TD pts = rand_tensor(3 * 4, 3, rng, 0.3);
                     auto in = param_inputs(ps);
                     in.emplace_back("points", pts);
                     return check([&] { return probe(net(pts, 4), 6); }, in);
                   }});
  cases.push_back({"edgeconv_stack", [] {
                     Rng rng = make_rng(29);
                     ParameterSet<D> ps;
                     EdgeConvStack<D> net(ps, "ec", 4, 5, 3, 3, rng);
                     TD x = rand_tensor(6, 4, rng);
                     auto in = param_inputs(ps);
                     in.emplace_back("x", x);
                     return check([&] { return probe(net(x), 7); }, in);
                   }});
  cases.push_back({"edgeconv_stack_geometry", [] {
                     Rng rng = make_rng(30);
                     ParameterSet<D> ps;
                     EdgeConvStack<D> net(ps, "ec", 4, 5, 3, 3, rng, 4, true);
                     TD x = rand_tensor(6, 4, rng);
                     std::vector<Point3> c;
                     for (int i = 0; i < 6; ++i) c.push_back({normal01(rng), normal01(rng), normal01(rng)});
                     auto in = param_inputs(ps);
                     in.emplace_back("x", x);
                     return check([&] { return probe(net(x, c), 8); }, in);
                   }});
  cases.push_back({"folding_decoder", [] {
                     Rng rng = make_rng(31);
                     DVAEConfig cfg;
                     cfg.group_size = 5;
                     cfg.code_dim = 4;
                     cfg.conv_width = 6;
                     cfg.fold_hidden = 7;
                     cfg.graph_k = 2;
                     ParameterSet<D> ps;
                     FoldingDecoder<D> dec(ps, "dec", cfg, rng);
                     TD codes = rand_tensor(4, 4, rng);
                     std::vector<Point3> c;
                     for (int i = 0; i < 4; ++i) c.push_back({normal01(rng), normal01(rng), normal01(rng)});
                     auto in = param_inputs(ps);
                     in.emplace_back("codes", codes);
                     return check([&] { return probe(dec(codes, c), 9); }, in);
                   }});
  cases.push_back({"transformer_block", [] {
                     Rng rng = make_rng(32);
                     ParameterSet<D> ps;
                     AttentionBlock<D> blk(ps, "blk", 8, 2, rng);
                     TD x = rand_tensor(5, 8, rng);
                     const auto mask = build_attention_mask(3, 2).additive<D>();
                     auto in = param_inputs(ps);
                     in.emplace_back("x", x);
                     return check([&] { return probe(blk(x, mask, 0.9, -1), 10); }, in);
                   }});
  cases.push_back({"gpm_losses", [] {
                     GPMConfig cfg;
                     cfg.input_dim = 4;
                     cfg.vocab = 6;
                     cfg.num_groups = 4;
                     cfg.depth = 2;
                     cfg.dim = 8;
                     cfg.heads = 2;
                     GPMTransformer<D> model(cfg, 33);
                     Rng rng = make_rng(34);
                     TD emb = rand_tensor(4, 4, rng, 1.0, false), cb = rand_tensor(6, 4, rng, 1.0, false);
                     std::vector<Point3> c;
                     for (int i = 0; i < 4; ++i) c.push_back({normal01(rng), normal01(rng), normal01(rng)});
                     const std::vector<std::size_t> tok{1, 5, 0, 3}, mask{1, 2};
                     return check([&] {
                       auto in = model.assemble(emb, c, tok, mask, cb);
                       return gpm_losses(model, in, model.forward(in, false, nullptr)).total;
                     }, param_inputs(model.parameters()));
                   }});
  return cases;
}

}  // namespace gpm::checks
