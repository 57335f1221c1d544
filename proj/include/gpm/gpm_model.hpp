#pragma once

// The dual-objective transformer. One sequence holds PartA ([CLS] plus the m
// patch slots, masked slots replaced by [M]) and PartB ([S] plus the first
// m-1 patch tokens, teacher forced). PartA attends bidirectionally within
// itself; PartB row j sees all of PartA and PartB rows <= j.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/random.hpp"
#include "gpm/geometry.hpp"
#include "gpm/nn/layers.hpp"
#include "gpm/nn/ops.hpp"
#include "gpm/nn/parameters.hpp"

namespace gpm {

enum class PositionalMode { mlp, table };
enum class PartBSource { codebook, patch };

struct GPMConfig {
  std::size_t input_dim = 64;   // patch embedding / code width fed to the input projection
  std::size_t vocab = 256;      // S
  std::size_t num_groups = 32;  // m, needed by the table positional mode
  std::size_t depth = 4;
  std::size_t dim = 128;
  std::size_t heads = 4;
  double drop_path = 0.1;
  PositionalMode positional = PositionalMode::mlp;
  PartBSource partb_source = PartBSource::codebook;
  double mask_ratio_min = 0.25;
  double mask_ratio_max = 0.45;
  double w_ae = 1.0;
  double w_ar = 1.0;
  bool ar_all_positions = false;

  void validate() const {
    if (depth < 1 || dim < 1 || heads < 1) throw InvalidArgument("gpm: depth, dim and heads must be positive");
    if (dim % heads != 0) throw InvalidArgument("gpm: dim must be divisible by heads");
    if (vocab < 2 || input_dim < 1 || num_groups < 1) throw InvalidArgument("gpm: vocab, input_dim, num_groups invalid");
    if (drop_path < 0.0 || drop_path >= 1.0) throw InvalidArgument("gpm: drop_path must be in [0, 1)");
    if (!(mask_ratio_min > 0.0 && mask_ratio_min <= mask_ratio_max && mask_ratio_max < 1.0))
      throw InvalidArgument("gpm: mask ratio range must satisfy 0 < min <= max < 1");
    if (w_ae < 0.0 || w_ar < 0.0) throw InvalidArgument("gpm: loss weights must be non-negative");
  }
};

// ------------------------------------------------------------ masking

/// b = round-half-up(ratio * m) clamped to [1, m-1].
inline std::size_t mask_count(double ratio, std::size_t m) {
  const auto b = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(m) + 0.5));
  return std::clamp<std::size_t>(b, 1, m - 1);
}

/// The b centers nearest to centers[seed_center] (itself included), sorted.
inline std::vector<std::size_t> mask_region_around(const std::vector<Point3>& centers, std::size_t seed_center,
                                                   std::size_t b) {
  if (seed_center >= centers.size() || b > centers.size()) throw InvalidArgument("mask_region_around: out of range");
  auto set = k_smallest(centers.size(), b, [&](std::size_t j) { return distance(centers[seed_center], centers[j]); });
  std::sort(set.begin(), set.end());
  return set;
}

/// Uniform ratio in [ratio_min, ratio_max], uniform seed center, nearest-b region.
inline std::vector<std::size_t> select_mask_region(const std::vector<Point3>& centers, double ratio_min,
                                                   double ratio_max, Rng& rng) {
  const std::size_t m = centers.size();
  if (m < 3) throw InvalidArgument("select_mask_region: need at least 3 centers");
  if (!(ratio_min >= 0.0 && ratio_min <= ratio_max && ratio_max <= 1.0))
    throw InvalidArgument("select_mask_region: bad ratio range");
  const double r = ratio_min + (ratio_max - ratio_min) * uniform01(rng);
  const std::size_t seed_center = uniform_index(rng, m);
  return mask_region_around(centers, seed_center, mask_count(r, m));
}

// ------------------------------------------------------------ attention mask

/// L x L visibility; true means the query row may attend to the key column.
struct AttentionMask {
  std::size_t part_a = 0, part_b = 0;
  bool b_first = false;
  std::vector<std::uint8_t> visible;

  std::size_t size() const { return part_a + part_b; }
  bool operator()(std::size_t row, std::size_t col) const { return visible[row * size() + col] != 0; }

  /// Additive form: 0 for visible, hidden_logit() for hidden.
  template <class T>
  std::vector<T> additive() const {
    std::vector<T> out(visible.size());
    for (std::size_t i = 0; i < visible.size(); ++i) out[i] = visible[i] ? T(0) : nn::hidden_logit<T>();
    return out;
  }
};

inline AttentionMask build_attention_mask(std::size_t la, std::size_t lb) {
  if (la < 1 || lb < 1) throw InvalidArgument("build_attention_mask: both parts must be non-empty");
  AttentionMask m{la, lb, false, {}};
  const std::size_t L = la + lb;
  m.visible.assign(L * L, 0);
  for (std::size_t r = 0; r < la; ++r)
    for (std::size_t c = 0; c < la; ++c) m.visible[r * L + c] = 1;
  for (std::size_t j = 0; j < lb; ++j)
    for (std::size_t c = 0; c <= la + j; ++c) m.visible[(la + j) * L + c] = 1;
  return m;
}

/// Layout PartB then PartA: PartB rows causal within PartB and blind to
/// PartA, PartA rows see PartA only.
inline AttentionMask build_swapped_attention_mask(std::size_t la, std::size_t lb) {
  if (la < 1 || lb < 1) throw InvalidArgument("build_attention_mask: both parts must be non-empty");
  AttentionMask m{la, lb, true, {}};
  const std::size_t L = la + lb;
  m.visible.assign(L * L, 0);
  for (std::size_t j = 0; j < lb; ++j)
    for (std::size_t c = 0; c <= j; ++c) m.visible[j * L + c] = 1;
  for (std::size_t r = lb; r < L; ++r)
    for (std::size_t c = lb; c < L; ++c) m.visible[r * L + c] = 1;
  return m;
}

// ------------------------------------------------------------ model input

template <class T>
struct GPMInput {
  nn::Tensor<T> part_a;  // (m + 1) x dim
  nn::Tensor<T> part_b;  // m x dim; undefined for encoder-only inputs
  nn::Tensor<T> positions;  // m x dim
  std::vector<std::size_t> mask_set;
  std::vector<std::size_t> labels;
  bool b_first = false;

  std::size_t num_patches() const { return part_a.rows() - 1; }
  bool has_part_b() const { return part_b.defined(); }
};

/// Same content, other concatenation order.
template <class T>
GPMInput<T> order_swap(GPMInput<T> in) {
  in.b_first = !in.b_first;
  return in;
}

template <class T>
struct GPMOutput {
  nn::Tensor<T> ae_logits;  // m x S, PartA patch slots
  nn::Tensor<T> ar_logits;  // m x S, PartB slots
  nn::Tensor<T> part_a;     // (m + 1) x dim, final normalised PartA states
  nn::Tensor<T> part_b;     // m x dim
};

// ------------------------------------------------------------ transformer

template <class T>
struct AttentionBlock {
  nn::LayerNorm<T> norm1, norm2;
  nn::Linear<T> qkv, proj, fc1, fc2;
  std::size_t heads = 1;

  AttentionBlock() = default;
  AttentionBlock(nn::ParameterSet<T>& ps, const std::string& name, std::size_t dim, std::size_t h, Rng& rng)
      : norm1(ps, name + ".norm1", dim),
        norm2(ps, name + ".norm2", dim),
        qkv(ps, name + ".attn.qkv", dim, 3 * dim, rng),
        proj(ps, name + ".attn.proj", dim, dim, rng),
        fc1(ps, name + ".mlp.fc1", dim, 4 * dim, rng),
        fc2(ps, name + ".mlp.fc2", 4 * dim, dim, rng),
        heads(h) {}

  nn::Tensor<T> attention(const nn::Tensor<T>& x, const std::vector<T>& mask) const {
    using namespace nn;
    const std::size_t dim = x.cols(), dh = dim / heads;
    Tensor<T> z = qkv(x);
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<T> q = slice_cols(z, h * dh, dh);
      Tensor<T> k = slice_cols(z, dim + h * dh, dh);
      Tensor<T> v = slice_cols(z, 2 * dim + h * dh, dh);
      Tensor<T> p = softmax_with_additive_mask(scale(matmul_nt(q, k), inv), mask);
      outs.push_back(matmul(p, v));
    }
    return proj(heads == 1 ? outs[0] : concat_cols(outs));
  }

  nn::Tensor<T> mlp(const nn::Tensor<T>& x) const { return fc2(nn::gelu(fc1(x))); }

  /// Pre-norm residual block. `keep` < 0 is evaluation (branches scaled by
  /// the survival probability); otherwise 0 skips the block and 1 runs it.
  nn::Tensor<T> operator()(const nn::Tensor<T>& x, const std::vector<T>& mask, double survival, int keep) const {
    using namespace nn;
    if (keep == 0) return x;
    Tensor<T> a = attention(norm1(x), mask);
    if (keep < 0 && survival < 1.0) a = scale(a, static_cast<T>(survival));
    Tensor<T> h = add(x, a);
    Tensor<T> f = mlp(norm2(h));
    if (keep < 0 && survival < 1.0) f = scale(f, static_cast<T>(survival));
    return add(h, f);
  }
};

template <class T>
class GPMTransformer {
 public:
  explicit GPMTransformer(GPMConfig cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = make_rng(init_seed, {0x69A7ULL});
    const std::size_t d = cfg_.dim;
    input_proj_ = nn::Linear<T>(params_, "gpm.input_proj", cfg_.input_dim, d, rng);
    if (cfg_.positional == PositionalMode::mlp) {
      pos_a_ = nn::Linear<T>(params_, "gpm.pos.0", 3, d, rng);
      pos_b_ = nn::Linear<T>(params_, "gpm.pos.1", d, d, rng);
    } else {
      pos_table_ = params_.add_uniform("gpm.pos.table", cfg_.num_groups, d, 0.02, rng, false);
    }
    cls_ = params_.add_uniform("gpm.cls", 1, d, 0.02, rng, false);
    mask_token_ = params_.add_uniform("gpm.mask_token", 1, d, 0.02, rng, false);
    start_token_ = params_.add_uniform("gpm.start_token", 1, d, 0.02, rng, false);
    for (std::size_t b = 0; b < cfg_.depth; ++b)
      blocks_.emplace_back(params_, "gpm.blocks." + std::to_string(b), d, cfg_.heads, rng);
    final_norm_ = nn::LayerNorm<T>(params_, "gpm.norm", d);
    ae_head_ = nn::Linear<T>(params_, "gpm.ae_head", d, cfg_.vocab, rng);
    ar_head_ = nn::Linear<T>(params_, "gpm.ar_head", d, cfg_.vocab, rng);
  }

  GPMTransformer(const GPMTransformer&) = delete;
  GPMTransformer& operator=(const GPMTransformer&) = delete;

  const GPMConfig& config() const { return cfg_; }
  nn::ParameterSet<T>& parameters() { return params_; }
  const nn::ParameterSet<T>& parameters() const { return params_; }

  /// Parameters a pretraining objective reaches; a zero weight drops its head
  /// (and the start token, which only feeds the AR path).
  std::vector<nn::Parameter<T>*> trainable(double w_ae, double w_ar) {
    std::vector<std::string> skip;
    if (w_ae == 0.0) skip.push_back("gpm.ae_head.");
    if (w_ar == 0.0) skip.insert(skip.end(), {"gpm.ar_head.", "gpm.start_token"});
    return select(skip);
  }

  /// Parameters the encoder-only path (no masking, no PartB) reaches.
  std::vector<nn::Parameter<T>*> encoder_parameters() {
    return select({"gpm.mask_token", "gpm.start_token", "gpm.ae_head.", "gpm.ar_head."});
  }

  /// How many inputs with a PartB have been assembled by this model.
  std::size_t partb_constructions() const { return partb_built_.load(); }

  nn::Tensor<T> positions(const std::vector<Point3>& centers) const {
    const std::size_t m = centers.size();
    if (cfg_.positional == PositionalMode::table) {
      if (m > cfg_.num_groups) throw InvalidArgument("positional table smaller than the patch count");
      std::vector<std::size_t> idx(m);
      for (std::size_t i = 0; i < m; ++i) idx[i] = i;
      return nn::gather_rows(pos_table_, idx);
    }
    std::vector<T> c(m * 3);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t d = 0; d < 3; ++d) c[3 * i + d] = static_cast<T>(centers[i][d]);
    return pos_b_(nn::gelu(pos_a_(nn::Tensor<T>::from(m, 3, std::move(c)))));
  }

  /// Input projection of frozen patch embeddings.
  nn::Tensor<T> project(const nn::Tensor<T>& embeddings) const { return input_proj_(embeddings.detach()); }

  /// Projected codebook rows for the given tokens (the codebook itself is frozen).
  nn::Tensor<T> embed_codes(const nn::Tensor<T>& codebook, const std::vector<std::size_t>& tokens) const {
    return input_proj_(nn::gather_rows(codebook.detach(), tokens));
  }

  /// [CLS] followed by the m patch slots; masked slots get [M] + pos.
  nn::Tensor<T> build_part_a(const nn::Tensor<T>& embeddings, const nn::Tensor<T>& pos,
                             const std::vector<std::size_t>& mask_set) const {
    const std::size_t m = embeddings.rows();
    check_mask(mask_set, m);
    std::vector<std::size_t> pick(m);
    for (std::size_t i = 0; i < m; ++i) pick[i] = i;
    for (auto i : mask_set) pick[i] = m;
    nn::Tensor<T> table = nn::concat_rows<T>({project(embeddings), mask_token_});
    nn::Tensor<T> slots = nn::add(nn::gather_rows(table, pick), pos);
    return nn::concat_rows<T>({cls_, slots});
  }

  /// [S] + pos_0, then for slot j >= 1 the projected input of patch j-1 plus pos_j.
  /// `sources` holds one already-projected row per patch.
  nn::Tensor<T> build_part_b(const nn::Tensor<T>& sources, const nn::Tensor<T>& pos) const {
    const std::size_t m = sources.rows();
    std::vector<std::size_t> pick(m);
    for (std::size_t j = 0; j < m; ++j) pick[j] = j;  // row 0 of the table is [S]
    nn::Tensor<T> table = nn::concat_rows<T>({start_token_, sources});
    ++partb_built_;
    return nn::add(nn::gather_rows(table, pick), pos);
  }

  /// Full training/generation input. PartB teacher forcing uses projected
  /// codebook rows of the labels, or projected patch embeddings when
  /// partb_source = patch.
  GPMInput<T> assemble(const nn::Tensor<T>& embeddings, const std::vector<Point3>& centers,
                       const std::vector<std::size_t>& tokens, const std::vector<std::size_t>& mask_set,
                       const nn::Tensor<T>& codebook) const {
    const std::size_t m = embeddings.rows();
    if (centers.size() != m || tokens.size() != m)
      throw InvalidArgument("assemble: embeddings, centers and tokens must have m rows");
    for (auto t : tokens)
      if (t >= cfg_.vocab) throw ContractViolation("assemble: token out of range");
    GPMInput<T> in;
    in.positions = positions(centers);
    in.part_a = build_part_a(embeddings, in.positions, mask_set);
    nn::Tensor<T> src = cfg_.partb_source == PartBSource::codebook ? embed_codes(codebook, tokens)
                                                                   : project(embeddings);
    in.part_b = build_part_b(src, in.positions);
    in.mask_set = sorted(mask_set);
    in.labels = tokens;
    return in;
  }

  /// PartA only, for downstream heads. No PartB is built.
  GPMInput<T> assemble_encoder(const nn::Tensor<T>& embeddings, const std::vector<Point3>& centers) const {
    if (centers.size() != embeddings.rows()) throw InvalidArgument("assemble_encoder: one center per embedding");
    GPMInput<T> in;
    in.positions = positions(centers);
    in.part_a = build_part_a(embeddings, in.positions, {});
    return in;
  }

  /// One pass over the concatenated sequence. In training mode `rng` drives
  /// stochastic depth; it may be null in evaluation mode.
  GPMOutput<T> forward(const GPMInput<T>& in, bool train, Rng* rng) const {
    using namespace nn;
    if (train && cfg_.drop_path > 0.0 && !rng) throw InvalidArgument("gpm forward: training mode needs a generator");
    const std::size_t la = in.part_a.rows();
    Tensor<T> x;
    AttentionMask mask;
    if (!in.has_part_b()) {
      x = in.part_a;
      mask.part_a = la;
      mask.visible.assign(la * la, 1);
    } else {
      const std::size_t lb = in.part_b.rows();
      mask = in.b_first ? build_swapped_attention_mask(la, lb) : build_attention_mask(la, lb);
      x = in.b_first ? concat_rows<T>({in.part_b, in.part_a}) : concat_rows<T>({in.part_a, in.part_b});
    }
    const std::vector<T> additive = mask.template additive<T>();
    const double survival = 1.0 - cfg_.drop_path;
    for (const auto& block : blocks_) {
      int keep = -1;
      if (train) keep = cfg_.drop_path > 0.0 && uniform01(*rng) < cfg_.drop_path ? 0 : 1;
      x = block(x, additive, survival, keep);
    }
    x = final_norm_(x);
    GPMOutput<T> out;
    const std::size_t a0 = in.has_part_b() && in.b_first ? in.part_b.rows() : 0;
    out.part_a = slice_rows(x, a0, la);
    out.ae_logits = ae_head_(slice_rows(out.part_a, 1, la - 1));
    if (in.has_part_b()) {
      const std::size_t b0 = in.b_first ? 0 : la;
      out.part_b = slice_rows(x, b0, in.part_b.rows());
      out.ar_logits = ar_head_(out.part_b);
    }
    return out;
  }

 private:
  std::vector<nn::Parameter<T>*> select(const std::vector<std::string>& skip) {
    std::vector<nn::Parameter<T>*> out;
    for (auto& p : params_.all()) {
      bool drop = false;
      for (const auto& s : skip) drop = drop || p.name.rfind(s, 0) == 0;
      if (!drop) out.push_back(&p);
    }
    return out;
  }

  static std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  }

  static void check_mask(const std::vector<std::size_t>& mask_set, std::size_t m) {
    std::vector<std::uint8_t> seen(m, 0);
    for (auto i : mask_set) {
      if (i >= m) throw ContractViolation("mask set index " + std::to_string(i) + " out of range for m = " + std::to_string(m));
      if (seen[i]++) throw ContractViolation("mask set contains duplicate index " + std::to_string(i));
    }
  }

  GPMConfig cfg_;
  nn::ParameterSet<T> params_;
  nn::Linear<T> input_proj_, pos_a_, pos_b_;
  nn::Tensor<T> pos_table_, cls_, mask_token_, start_token_;
  std::vector<AttentionBlock<T>> blocks_;
  nn::LayerNorm<T> final_norm_;
  nn::Linear<T> ae_head_, ar_head_;
  mutable std::atomic<std::size_t> partb_built_{0};
};

// ------------------------------------------------------------ losses

namespace detail {
inline std::vector<int> masked_targets(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& mask_set,
                                       std::size_t rows, const char* who) {
  if (mask_set.empty()) throw InvalidArgument(std::string(who) + ": mask set is empty");
  if (labels.size() != rows) throw InvalidArgument(std::string(who) + ": one label per logit row required");
  std::vector<int> targets(rows, -1);
  for (auto i : mask_set) {
    if (i >= rows) throw ContractViolation(std::string(who) + ": mask index out of range");
    targets[i] = static_cast<int>(labels[i]);
  }
  return targets;
}
}  // namespace detail

/// Mean cross-entropy over masked PartA slots.
template <class T>
nn::Tensor<T> loss_ae(const nn::Tensor<T>& ae_logits, const std::vector<std::size_t>& labels,
                      const std::vector<std::size_t>& mask_set) {
  return nn::cross_entropy(ae_logits, detail::masked_targets(labels, mask_set, ae_logits.rows(), "loss_ae"));
}

/// PartB row j predicts patch token j; mean cross-entropy over rows in the
/// mask set, or over every row when all_positions is set.
template <class T>
nn::Tensor<T> loss_ar(const nn::Tensor<T>& ar_logits, const std::vector<std::size_t>& labels,
                      const std::vector<std::size_t>& mask_set, bool all_positions = false) {
  auto targets = detail::masked_targets(labels, mask_set, ar_logits.rows(), "loss_ar");
  if (all_positions)
    for (std::size_t j = 0; j < targets.size(); ++j) targets[j] = static_cast<int>(labels[j]);
  return nn::cross_entropy(ar_logits, targets);
}

template <class T>
nn::Tensor<T> loss_total(const nn::Tensor<T>& ae, const nn::Tensor<T>& ar, double w_ae = 1.0, double w_ar = 1.0) {
  if (w_ae < 0.0 || w_ar < 0.0) throw InvalidArgument("loss_total: weights must be non-negative");
  if (w_ar == 0.0) return nn::scale(ae, static_cast<T>(w_ae));
  if (w_ae == 0.0) return nn::scale(ar, static_cast<T>(w_ar));
  return nn::add(nn::scale(ae, static_cast<T>(w_ae)), nn::scale(ar, static_cast<T>(w_ar)));
}

template <class T>
struct GPMLoss {
  nn::Tensor<T> total, ae, ar;
};

template <class T>
GPMLoss<T> gpm_losses(const GPMTransformer<T>& model, const GPMInput<T>& in, const GPMOutput<T>& out) {
  const auto& cfg = model.config();
  GPMLoss<T> l;
  l.ae = loss_ae(out.ae_logits, in.labels, in.mask_set);
  l.ar = loss_ar(out.ar_logits, in.labels, in.mask_set, cfg.ar_all_positions);
  l.total = loss_total(l.ae, l.ar, cfg.w_ae, cfg.w_ar);
  return l;
}

}  // namespace gpm
