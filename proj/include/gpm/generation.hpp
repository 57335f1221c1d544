#pragma once

// Autoregressive generation through PartB. Each masked position is filled
// in increasing order; PartB slots before it carry ground-truth tokens at
// unmasked positions and already-sampled tokens at generated ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/random.hpp"
#include "gpm/config.hpp"
#include "gpm/data_io.hpp"
#include "gpm/dvae.hpp"
#include "gpm/gpm_model.hpp"

namespace gpm {

struct SamplingPolicy {
  SamplingMode mode = SamplingMode::top_k;
  std::size_t k = 8;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static SamplingPolicy greedy() { return {SamplingMode::greedy, 1, 1.0, 0}; }
};

/// Draws one index from a row of logits under the policy.
template <class T>
std::size_t sample_token(std::span<const T> logits, const SamplingPolicy& p, Rng& rng) {
  const std::size_t S = logits.size();
  if (S == 0) throw ContractViolation("sample_token: no logits");
  if (p.mode == SamplingMode::greedy) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < S; ++s)
      if (logits[s] > logits[best]) best = s;
    return best;
  }
  if (!(p.temperature > 0.0)) throw InvalidArgument("sample_token: temperature must be positive");
  std::vector<std::size_t> cand(S);
  for (std::size_t s = 0; s < S; ++s) cand[s] = s;
  if (p.mode == SamplingMode::top_k) {
    if (p.k < 1 || p.k > S) throw ContractViolation("sample_token: top-k candidate set is empty or too large");
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(p.k), cand.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    cand.resize(p.k);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto c : cand) mx = std::max(mx, static_cast<double>(logits[c]) / p.temperature);
  std::vector<double> w(cand.size());
  double z = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) z += w[i] = std::exp(static_cast<double>(logits[cand[i]]) / p.temperature - mx);
  double u = uniform01(rng) * z;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (u < w[i]) return cand[i];
    u -= w[i];
  }
  return cand.back();
}

struct TraceStep {
  std::size_t position = 0;
  std::size_t token = 0;
  double logit = 0.0;
};

struct GenerationResult {
  std::vector<std::size_t> tokens;  // full sequence after generation
  PointCloud cloud;
  std::vector<Point3> centers;
  std::vector<std::size_t> mask_set;
  std::vector<TraceStep> trace;
};

namespace detail {

/// Rolls PartB over the positions in `todo` (ascending), updating `tokens`.
template <class T>
std::vector<TraceStep> roll_part_b(const DVAE<T>& dvae, const GPMTransformer<T>& model, const nn::Tensor<T>& part_a,
                                   const nn::Tensor<T>& pos, const nn::Tensor<T>& embeddings,
                                   const std::vector<std::size_t>& todo, std::vector<std::size_t>& tokens,
                                   const SamplingPolicy& policy) {
  const std::size_t m = tokens.size();
  const bool from_patches = model.config().partb_source == PartBSource::patch && embeddings.defined();
  std::vector<std::uint8_t> generated(m, 0);
  nn::Tensor<T> projected_patches;
  if (from_patches) projected_patches = model.project(embeddings);
  std::vector<TraceStep> trace;
  for (std::size_t j : todo) {
    nn::Tensor<T> codes = model.embed_codes(dvae.codebook(), tokens);
    nn::Tensor<T> src = codes;
    if (from_patches) {
      // Ground-truth rows come from patch embeddings, generated rows from codes.
      std::vector<std::size_t> pick(m);
      for (std::size_t i = 0; i < m; ++i) pick[i] = generated[i] ? m + i : i;
      src = nn::gather_rows(nn::concat_rows<T>({projected_patches, codes}), pick);
    }
    GPMInput<T> in;
    in.part_a = part_a;
    in.part_b = model.build_part_b(src, pos);
    GPMOutput<T> out = model.forward(in, false, nullptr);
    const std::size_t S = out.ar_logits.cols();
    std::span<const T> row = out.ar_logits.value().subspan(j * S, S);
    Rng rng = make_rng(policy.seed, {0x6E4ULL, j});
    const std::size_t tok = sample_token<T>(row, policy, rng);
    tokens[j] = tok;
    generated[j] = 1;
    trace.push_back({j, tok, static_cast<double>(row[tok])});
  }
  return trace;
}

}  // namespace detail

/// Tokenizes `cloud`, masks `mask_set` in PartA, regenerates those tokens
/// through PartB and decodes the full sequence over the original centers.
template <class T>
GenerationResult generate_masked_region(const DVAE<T>& dvae, const GPMTransformer<T>& model, const PointCloud& cloud,
                                        std::uint64_t patch_seed, const std::vector<std::size_t>& mask_set,
                                        const SamplingPolicy& policy) {
  nn::NoGradGuard guard;
  Encoded<T> e = dvae.encode(cloud, patch_seed);
  GenerationResult res;
  res.mask_set = mask_set;
  std::sort(res.mask_set.begin(), res.mask_set.end());
  res.tokens = e.tokens;
  res.centers = e.patches.centers;
  nn::Tensor<T> pos = model.positions(res.centers);
  nn::Tensor<T> part_a = model.build_part_a(e.embeddings, pos, res.mask_set);
  res.trace = detail::roll_part_b(dvae, model, part_a, pos, e.embeddings, res.mask_set, res.tokens, policy);
  res.cloud = dvae.decode_tokens(res.tokens, res.centers);
  return res;
}

/// PartA fully masked; every PartB position is sampled.
template <class T>
GenerationResult generate_unconditional(const DVAE<T>& dvae, const GPMTransformer<T>& model,
                                        const std::vector<Point3>& centers, const SamplingPolicy& policy) {
  if (!dvae.ready()) throw NotReady("generate_unconditional: dVAE weights are not trained or loaded");
  nn::NoGradGuard guard;
  const std::size_t m = centers.size();
  if (m == 0) throw InvalidArgument("generate_unconditional: no centers");
  GenerationResult res;
  res.centers = centers;
  res.tokens.assign(m, 0);
  res.mask_set.resize(m);
  for (std::size_t i = 0; i < m; ++i) res.mask_set[i] = i;
  nn::Tensor<T> pos = model.positions(centers);
  nn::Tensor<T> blank = nn::Tensor<T>::zeros(m, model.config().input_dim);
  nn::Tensor<T> part_a = model.build_part_a(blank, pos, res.mask_set);
  res.trace = detail::roll_part_b(dvae, model, part_a, pos, nn::Tensor<T>(), res.mask_set, res.tokens, policy);
  res.cloud = dvae.decode_tokens(res.tokens, centers);
  return res;
}

/// FPS layout of m centers over a canonical unit sphere.
inline std::vector<Point3> canonical_centers(std::size_t m, std::uint64_t seed) {
  SyntheticShapeSpec spec;
  spec.family = ShapeFamily::sphere;
  spec.scale_jitter = 0.0;
  spec.rotation_jitter = 0.0;
  spec.points = std::max<std::size_t>(2048, 4 * m);
  Rng rng = make_rng(seed, {0xC3A7ULL});
  PointCloud sphere = synth_shape(spec, rng);
  std::vector<Point3> out;
  for (auto i : fps(sphere, m, seed)) out.push_back(sphere[i]);
  return out;
}

/// Shannon entropy (nats) of the pooled token histogram.
inline double token_entropy(const std::vector<std::vector<std::size_t>>& sequences) {
  std::map<std::size_t, double> hist;
  double n = 0;
  for (const auto& s : sequences)
    for (auto t : s) {
      hist[t] += 1;
      n += 1;
    }
  double h = 0.0;
  for (const auto& [t, c] : hist) h -= c / n * std::log(c / n);
  return h;
}

inline void write_token_trace(const std::string& path, const std::vector<TraceStep>& trace) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write token trace: " + path);
  os << "step\tposition\ttoken\tlogit\n" << std::setprecision(9);
  for (std::size_t i = 0; i < trace.size(); ++i)
    os << i << '\t' << trace[i].position << '\t' << trace[i].token << '\t' << trace[i].logit << '\n';
  if (!os) throw IoError("failed writing token trace: " + path);
}

}  // namespace gpm
