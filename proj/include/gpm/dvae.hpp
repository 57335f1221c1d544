#pragma once

// Discrete VAE point tokenizer: mini-PointNet patch embedding, DGCNN
// tokenizer over a learnable codebook with Gumbel-softmax relaxation, and a
// DGCNN + FoldingNet decoder that rebuilds the whole cloud from codes.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/geometry.hpp"
#include "gpm/nn/layers.hpp"
#include "gpm/nn/ops.hpp"
#include "gpm/nn/parameters.hpp"

namespace gpm {

struct DVAEConfig {
  std::size_t num_groups = 32;      // patches per cloud (m)
  std::size_t group_size = 16;      // points per patch (k)
  std::size_t embed_dim = 64;       // mini-PointNet output width (d_h)
  std::size_t codebook_size = 256;  // vocabulary size (S)
  std::size_t code_dim = 64;        // codebook vector width (d_z)
  std::size_t graph_k = 4;          // feature-space neighbours per EdgeConv layer
  std::size_t conv_width = 64;
  std::size_t fold_hidden = 128;
  ChamferNorm chamfer_norm = ChamferNorm::euclidean;
  bool per_patch_chamfer = false;
  bool decoder_geometry = true;  // decoder context graph over centers, with relative offsets

  void validate() const {
    if (num_groups < 1 || group_size < 1) throw InvalidArgument("dvae: num_groups and group_size must be positive");
    if (codebook_size < 2) throw InvalidArgument("dvae: codebook_size must be at least 2");
    if (embed_dim < 2 || embed_dim % 2 != 0) throw InvalidArgument("dvae: embed_dim must be even and >= 2");
    if (code_dim < 1 || graph_k < 1 || conv_width < 1 || fold_hidden < 1)
      throw InvalidArgument("dvae: widths must be positive");
  }
};

struct TokenSequence {
  std::vector<std::size_t> tokens;
  std::size_t vocab = 0;
  /// m x S row-major probabilities; filled only on training paths.
  std::vector<double> soft_assignments;
};

/// Fixed 2D folding grid: the smallest side x side lattice over
/// [-0.5, 0.5]^2 with side*side >= k, truncated to its first k points.
inline std::vector<std::array<double, 2>> folding_grid(std::size_t k) {
  std::size_t side = 1;
  while (side * side < k) ++side;
  std::vector<std::array<double, 2>> grid;
  grid.reserve(side * side);
  for (std::size_t a = 0; a < side; ++a)
    for (std::size_t b = 0; b < side; ++b) {
      const double u = side == 1 ? 0.0 : -0.5 + static_cast<double>(a) / static_cast<double>(side - 1);
      const double v = side == 1 ? 0.0 : -0.5 + static_cast<double>(b) / static_cast<double>(side - 1);
      grid.push_back({u, v});
    }
  grid.resize(k);
  return grid;
}

/// Shared per-point MLP, max-pool, concat pooled feature back onto every
/// point, second shared MLP, final max-pool. Permutation invariant within a patch.
/// Each hidden layer is layer-normalised before its ReLU.
template <class T>
struct MiniPointNet {
  nn::Linear<T> first_a, first_b, second_a, second_b;
  nn::LayerNorm<T> first_norm, second_norm;

  MiniPointNet() = default;
  MiniPointNet(nn::ParameterSet<T>& ps, const std::string& name, std::size_t out_dim, Rng& rng) {
    const std::size_t half = out_dim / 2;
    first_a = nn::Linear<T>(ps, name + ".first.0", 3, half, rng, nn::LinearInit::he);
    first_norm = nn::LayerNorm<T>(ps, name + ".first.norm", half);
    first_b = nn::Linear<T>(ps, name + ".first.1", half, half, rng);
    second_a = nn::Linear<T>(ps, name + ".second.0", 2 * half, out_dim, rng, nn::LinearInit::he);
    second_norm = nn::LayerNorm<T>(ps, name + ".second.norm", out_dim);
    second_b = nn::Linear<T>(ps, name + ".second.1", out_dim, out_dim, rng);
  }

  /// points: (m*k) x 3, grouped by patch. Returns m x out_dim.
  nn::Tensor<T> operator()(const nn::Tensor<T>& points, std::size_t k) const {
    using namespace nn;
    const std::size_t m = points.rows() / k;
    Tensor<T> f = first_b(relu(first_norm(first_a(points))));
    Tensor<T> pooled = max_pool_over_set(f, k);
    std::vector<std::size_t> owner(m * k);
    for (std::size_t i = 0; i < m * k; ++i) owner[i] = i / k;
    Tensor<T> g = concat_cols<T>({gather_rows(pooled, owner), f});
    g = second_b(relu(second_norm(second_a(g))));
    return max_pool_over_set(g, k);
  }
};

template <class T>
nn::Tensor<T> patches_tensor(const PatchSet& ps) {
  std::vector<T> v(ps.patches.size() * 3);
  for (std::size_t i = 0; i < ps.patches.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) v[3 * i + c] = static_cast<T>(ps.patches[i][c]);
  return nn::Tensor<T>::from(ps.patches.size(), 3, std::move(v));
}

/// DGCNN over patch embeddings, producing S logits per patch.
template <class T>
struct Tokenizer {
  nn::EdgeConvStack<T> net;

  Tokenizer() = default;
  Tokenizer(nn::ParameterSet<T>& ps, const std::string& name, const DVAEConfig& cfg, Rng& rng)
      : net(ps, name, cfg.embed_dim, cfg.conv_width, cfg.codebook_size, cfg.graph_k, rng) {}

  nn::Tensor<T> operator()(const nn::Tensor<T>& embeddings) const { return net(embeddings); }
};

enum class QuantizeMode { soft, hard };

template <class T>
struct Quantized {
  std::vector<std::size_t> tokens;  // argmax of (logits + noise) per patch
  nn::Tensor<T> assignments;        // m x S sample (soft or one-hot)
  nn::Tensor<T> code_inputs;        // m x d_z
};

template <class T>
std::vector<std::size_t> argmax_rows(std::span<const T> v, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    out[r] = best;
  }
  return out;
}

/// Soft: code_inputs = gumbel_softmax(logits, tau) * codebook (a convex
/// combination of codes). Hard: the code row of argmax(logits + noise).
/// A null generator disables the Gumbel noise.
template <class T>
Quantized<T> quantize(const nn::Tensor<T>& logits, const nn::Tensor<T>& codebook, T tau, QuantizeMode mode, Rng* rng) {
  using namespace nn;
  if (!(tau > T(0))) throw InvalidArgument("quantize: tau must be positive");
  if (logits.cols() != codebook.rows()) throw InvalidArgument("quantize: logits width must equal codebook size");
  std::vector<T> noise;
  if (rng) noise = gumbel_noise<T>(logits.rows(), logits.cols(), *rng);
  std::vector<T> perturbed(logits.value().begin(), logits.value().end());
  for (std::size_t i = 0; i < noise.size(); ++i) perturbed[i] += noise[i];
  Quantized<T> q;
  q.tokens = argmax_rows<T>(perturbed, logits.rows(), logits.cols());
  if (mode == QuantizeMode::soft) {
    q.assignments = gumbel_softmax_with_noise(logits, tau, false, noise);
    q.code_inputs = matmul(q.assignments, codebook);
  } else {
    std::vector<T> onehot(logits.size(), T(0));
    for (std::size_t r = 0; r < q.tokens.size(); ++r) onehot[r * logits.cols() + q.tokens[r]] = T(1);
    q.assignments = Tensor<T>::from(logits.rows(), logits.cols(), std::move(onehot));
    q.code_inputs = gather_rows(codebook, q.tokens);
  }
  return q;
}

/// Mean over rows of KL(q || uniform(S)) = sum_s q_s (ln q_s + ln S), with
/// 0 ln 0 = 0. Differentiable in q.
template <class T>
nn::Tensor<T> kl_to_uniform(const nn::Tensor<T>& q) {
  const std::size_t R = q.rows(), S = q.cols();
  const double log_s = std::log(static_cast<double>(S));
  auto v = q.value();
  double total = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    double row = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      const double p = static_cast<double>(v[r * S + s]);
      if (p > 0.0) row += p * (std::log(p) + log_s);
    }
    total += row;
  }
  const double value = std::max(0.0, total / static_cast<double>(R));
  return nn::detail::make_result<T>(1, 1, {static_cast<T>(value)}, "kl_to_uniform", {q}, [R, S, log_s](nn::Node<T>& self) {
    if (auto* g = nn::detail::parent_grad(self, 0)) {
      const auto& Q = self.parents[0]->value;
      const double tiny = static_cast<double>(std::numeric_limits<T>::min());
      for (std::size_t i = 0; i < R * S; ++i) {
        const double p = std::max(static_cast<double>(Q[i]), tiny);
        (*g)[i] += static_cast<T>(static_cast<double>(self.grad[0]) * (std::log(p) + 1.0 + log_s) / static_cast<double>(R));
      }
    }
  });
}

/// DGCNN over code vectors for global context, then a two-stage folding
/// head per patch: [feature, grid] -> 3D, then [feature, 3D] -> 3D offsets.
/// Output patch = offsets + center; the cloud is all m*k points.
template <class T>
struct FoldingDecoder {
  nn::EdgeConvStack<T> context;
  nn::Linear<T> fold1_a, fold1_b, fold1_c;
  nn::Linear<T> fold2_a, fold2_b, fold2_c;
  std::size_t group_size = 0;

  FoldingDecoder() = default;
  FoldingDecoder(nn::ParameterSet<T>& ps, const std::string& name, const DVAEConfig& cfg, Rng& rng)
      : context(ps, name + ".context", cfg.code_dim, cfg.conv_width, cfg.conv_width, cfg.graph_k, rng, 4,
                cfg.decoder_geometry),
        group_size(cfg.group_size) {
    const std::size_t F = cfg.conv_width, H = cfg.fold_hidden;
    fold1_a = nn::Linear<T>(ps, name + ".fold1.0", F + 2, H, rng);
    fold1_b = nn::Linear<T>(ps, name + ".fold1.1", H, H, rng);
    fold1_c = nn::Linear<T>(ps, name + ".fold1.2", H, 3, rng);
    fold2_a = nn::Linear<T>(ps, name + ".fold2.0", F + 3, H, rng);
    fold2_b = nn::Linear<T>(ps, name + ".fold2.1", H, H, rng);
    fold2_c = nn::Linear<T>(ps, name + ".fold2.2", H, 3, rng);
  }

  /// Center-relative offsets, (m*k) x 3.
  nn::Tensor<T> offsets(const nn::Tensor<T>& code_inputs, const std::vector<Point3>& centers) const {
    using namespace nn;
    const std::size_t m = code_inputs.rows(), k = group_size;
    Tensor<T> feat = context(code_inputs, centers);
    std::vector<std::size_t> owner(m * k);
    for (std::size_t i = 0; i < m * k; ++i) owner[i] = i / k;
    Tensor<T> rep = gather_rows(feat, owner);
    const auto grid = folding_grid(k);
    std::vector<T> g(m * k * 2);
    for (std::size_t i = 0; i < m * k; ++i) {
      g[2 * i] = static_cast<T>(grid[i % k][0]);
      g[2 * i + 1] = static_cast<T>(grid[i % k][1]);
    }
    Tensor<T> fold1 = fold1_c(relu(fold1_b(relu(fold1_a(concat_cols<T>({rep, Tensor<T>::from(m * k, 2, std::move(g))}))))));
    return fold2_c(relu(fold2_b(relu(fold2_a(concat_cols<T>({rep, fold1}))))));
  }

  nn::Tensor<T> operator()(const nn::Tensor<T>& code_inputs, const std::vector<Point3>& centers) const {
    if (centers.size() != code_inputs.rows()) throw InvalidArgument("decoder: one center per code input required");
    const std::size_t k = group_size;
    std::vector<T> c(centers.size() * k * 3);
    for (std::size_t i = 0; i < centers.size() * k; ++i)
      for (std::size_t d = 0; d < 3; ++d) c[3 * i + d] = static_cast<T>(centers[i / k][d]);
    return nn::add(offsets(code_inputs, centers), nn::Tensor<T>::from(centers.size() * k, 3, std::move(c)));
  }
};

template <class T>
PointCloud to_cloud(const nn::Tensor<T>& points) {
  if (points.cols() != 3) throw InvalidArgument("to_cloud: expected N x 3");
  PointCloud pc;
  pc.points.resize(points.rows());
  auto v = points.value();
  for (std::size_t i = 0; i < points.rows(); ++i)
    pc.points[i] = {double(v[3 * i]), double(v[3 * i + 1]), double(v[3 * i + 2])};
  return pc;
}

template <class T>
struct DVAELoss {
  nn::Tensor<T> total;
  nn::Tensor<T> chamfer;
  nn::Tensor<T> kl;
};

/// chamfer_l1(recon, input) + kl_weight * kl_to_uniform(soft_assignments).
template <class T>
DVAELoss<T> dvae_loss(const PointCloud& input, const nn::Tensor<T>& recon, const nn::Tensor<T>& soft_assignments,
                      double kl_weight, ChamferNorm norm = ChamferNorm::euclidean) {
  if (kl_weight < 0) throw InvalidArgument("dvae_loss: kl_weight must be non-negative");
  DVAELoss<T> l;
  l.chamfer = nn::chamfer_loss(recon, std::span<const Point3>(input.points), norm);
  l.kl = kl_to_uniform(soft_assignments);
  l.total = kl_weight == 0.0 ? l.chamfer : nn::add(l.chamfer, nn::scale(l.kl, static_cast<T>(kl_weight)));
  return l;
}

/// Everything a dVAE training step produces for one cloud.
template <class T>
struct DVAEStep {
  DVAELoss<T> loss;
  nn::Tensor<T> recon;
  std::vector<std::size_t> tokens;
};

/// Frozen-tokenizer view of one cloud.
template <class T>
struct Encoded {
  PatchSet patches;
  nn::Tensor<T> embeddings;  // m x d_h
  std::vector<std::size_t> tokens;
};

template <class T>
class DVAE {
 public:
  explicit DVAE(DVAEConfig cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = make_rng(init_seed, {0xD7AEULL});
    embed_ = MiniPointNet<T>(params_, "dvae.embed", cfg_.embed_dim, rng);
    tokenizer_ = Tokenizer<T>(params_, "dvae.tokenizer", cfg_, rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.code_dim));
    codebook_ = params_.add_uniform("dvae.codebook", cfg_.codebook_size, cfg_.code_dim, bound, rng, false);
    decoder_ = FoldingDecoder<T>(params_, "dvae.decoder", cfg_, rng);
  }

  DVAE(const DVAE&) = delete;
  DVAE& operator=(const DVAE&) = delete;

  const DVAEConfig& config() const { return cfg_; }
  nn::ParameterSet<T>& parameters() { return params_; }
  const nn::ParameterSet<T>& parameters() const { return params_; }
  const nn::Tensor<T>& codebook() const { return codebook_; }
  const MiniPointNet<T>& embedder() const { return embed_; }
  const Tokenizer<T>& tokenizer() const { return tokenizer_; }
  const FoldingDecoder<T>& decoder() const { return decoder_; }

  /// Marks weights as trained or loaded; tokenize refuses to run before.
  void mark_ready(bool ready = true) { ready_ = ready; }
  bool ready() const { return ready_; }

  /// Checksum over the parameters that must stay fixed during GPM training.
  std::uint64_t tokenizer_checksum() const { return params_.checksum(); }

  nn::Tensor<T> embed(const PatchSet& ps) const { return embed_(patches_tensor<T>(ps), ps.k); }
  nn::Tensor<T> logits(const nn::Tensor<T>& embeddings) const { return tokenizer_(embeddings); }
  nn::Tensor<T> decode(const nn::Tensor<T>& code_inputs, const std::vector<Point3>& centers) const {
    return decoder_(code_inputs, centers);
  }

  /// Soft-relaxed forward pass and loss for one cloud.
  DVAEStep<T> train_step(const PointCloud& cloud, std::uint64_t patch_seed, T tau, double kl_weight, Rng& noise_rng) const {
    PatchSet ps = build_patches(cloud, cfg_.num_groups, cfg_.group_size, patch_seed);
    nn::Tensor<T> lg = logits(embed(ps));
    Quantized<T> q = quantize(lg, codebook_, tau, QuantizeMode::soft, &noise_rng);
    DVAEStep<T> out;
    out.recon = decode(q.code_inputs, ps.centers);
    out.tokens = q.tokens;
    // The KL term uses the noise-free categorical posterior softmax(logits).
    nn::Tensor<T> posterior = nn::softmax_rows(lg);
    if (cfg_.per_patch_chamfer) {
      out.loss = per_patch_loss(ps, out.recon, posterior, kl_weight);
    } else {
      out.loss = dvae_loss(cloud, out.recon, posterior, kl_weight, cfg_.chamfer_norm);
    }
    return out;
  }

  /// Deterministic tokenization: patches, embedding, tokenizer logits, argmax.
  std::pair<TokenSequence, PatchSet> tokenize(const PointCloud& cloud, std::uint64_t seed) const {
    require_ready("tokenize");
    Encoded<T> e = encode_unchecked(cloud, seed);
    TokenSequence ts;
    ts.vocab = cfg_.codebook_size;
    ts.tokens = std::move(e.tokens);
    return {std::move(ts), std::move(e.patches)};
  }

  /// Tokenization that also keeps the patch embeddings (frozen front-end use).
  Encoded<T> encode(const PointCloud& cloud, std::uint64_t seed) const {
    require_ready("encode");
    return encode_unchecked(cloud, seed);
  }

  /// Decodes a token sequence over the given centers (hard codes).
  PointCloud decode_tokens(const std::vector<std::size_t>& tokens, const std::vector<Point3>& centers) const {
    nn::NoGradGuard guard;
    for (auto t : tokens)
      if (t >= cfg_.codebook_size) throw ContractViolation("decode_tokens: token out of range");
    return to_cloud(decode(nn::gather_rows(codebook_, tokens), centers));
  }

  /// tokenize followed by decode_tokens.
  PointCloud reconstruct(const PointCloud& cloud, std::uint64_t seed) const {
    require_ready("reconstruct");
    return reconstruct_unchecked(cloud, seed);
  }

  /// Hard-path reconstruction Chamfer under the current weights, trained or not.
  double eval_chamfer(const PointCloud& cloud, std::uint64_t seed) const {
    return chamfer_l1(reconstruct_unchecked(cloud, seed), cloud, cfg_.chamfer_norm);
  }

 private:
  void require_ready(const char* who) const {
    if (!ready_) throw NotReady(std::string(who) + ": dVAE weights are not trained or loaded");
  }

  Encoded<T> encode_unchecked(const PointCloud& cloud, std::uint64_t seed) const {
    nn::NoGradGuard guard;
    Encoded<T> e;
    e.patches = build_patches(cloud, cfg_.num_groups, cfg_.group_size, seed);
    e.embeddings = embed(e.patches);
    nn::Tensor<T> lg = logits(e.embeddings);
    e.tokens = argmax_rows<T>(lg.value(), lg.rows(), lg.cols());
    return e;
  }

  PointCloud reconstruct_unchecked(const PointCloud& cloud, std::uint64_t seed) const {
    Encoded<T> e = encode_unchecked(cloud, seed);
    return decode_tokens(e.tokens, e.patches.centers);
  }

  DVAELoss<T> per_patch_loss(const PatchSet& ps, const nn::Tensor<T>& recon, const nn::Tensor<T>& posterior,
                             double kl_weight) const {
    // Mean over patches of Chamfer(recon patch, source patch), both absolute.
    std::vector<nn::Tensor<T>> terms;
    for (std::size_t p = 0; p < ps.m; ++p) {
      std::vector<Point3> truth(ps.k);
      for (std::size_t j = 0; j < ps.k; ++j)
        for (std::size_t d = 0; d < 3; ++d) truth[j][d] = ps.patch(p)[j][d] + ps.centers[p][d];
      terms.push_back(nn::chamfer_loss(nn::slice_rows(recon, p * ps.k, ps.k), std::span<const Point3>(truth), cfg_.chamfer_norm));
    }
    DVAELoss<T> l;
    l.chamfer = nn::mean_all(nn::concat_rows(terms));
    l.kl = kl_to_uniform(posterior);
    l.total = nn::add(l.chamfer, nn::scale(l.kl, static_cast<T>(kl_weight)));
    return l;
  }

  DVAEConfig cfg_;
  nn::ParameterSet<T> params_;
  MiniPointNet<T> embed_;
  Tokenizer<T> tokenizer_;
  nn::Tensor<T> codebook_;
  FoldingDecoder<T> decoder_;
  bool ready_ = false;
};

}  // namespace gpm
