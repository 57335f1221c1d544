#pragma once

// Randomised attention-flow and masking checks, shared by unit and
// acceptance tests.

#include <cstring>

#include "gpm/gpm_model.hpp"

namespace gpm::checks {

struct FlowTrial {
  bool part_a_isolated = true;  // PartA outputs unchanged when PartB changes
  bool part_b_causal = true;    // PartB row j unchanged when rows > j change
};

inline bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

inline nn::Tensor<float> noise_rows(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<float> v(r * c);
  for (auto& x : v) x = static_cast<float>(normal01(rng));
  return nn::Tensor<float>::from(r, c, std::move(v));
}

/// One random model and input in eval mode.
inline FlowTrial attention_flow_trial(std::uint64_t seed) {
  Rng rng = make_rng(seed, {0xF10ULL});
  GPMConfig cfg;
  cfg.input_dim = 8;
  cfg.vocab = 12;
  cfg.depth = 1 + uniform_index(rng, 3);
  cfg.heads = 1 + uniform_index(rng, 2);
  cfg.dim = 8 * cfg.heads;
  const std::size_t m = 3 + uniform_index(rng, 8);
  cfg.num_groups = m;
  GPMTransformer<float> model(cfg, rng());

  GPMInput<float> in;
  in.part_a = noise_rows(m + 1, cfg.dim, rng);
  in.part_b = noise_rows(m, cfg.dim, rng);
  const auto base = model.forward(in, false, nullptr);

  FlowTrial t;
  // (a) replace all of PartB
  GPMInput<float> pa = in;
  pa.part_b = noise_rows(m, cfg.dim, rng);
  const auto out_a = model.forward(pa, false, nullptr);
  t.part_a_isolated = same_bits(base.part_a.value(), out_a.part_a.value()) &&
                      same_bits(base.ae_logits.value(), out_a.ae_logits.value());

  // (b) for each j, perturb rows j+1.. and compare rows 0..j
  for (std::size_t j = 0; j + 1 < m; ++j) {
    auto vals = std::vector<float>(in.part_b.value().begin(), in.part_b.value().end());
    for (std::size_t i = (j + 1) * cfg.dim; i < vals.size(); ++i) vals[i] += static_cast<float>(normal01(rng));
    GPMInput<float> pb = in;
    pb.part_b = nn::Tensor<float>::from(m, cfg.dim, std::move(vals));
    const auto out_b = model.forward(pb, false, nullptr);
    const std::size_t n = (j + 1) * cfg.dim, s = (j + 1) * cfg.vocab;
    t.part_b_causal = t.part_b_causal && same_bits(base.part_b.value().first(n), out_b.part_b.value().first(n)) &&
                      same_bits(base.ar_logits.value().first(s), out_b.ar_logits.value().first(s)) &&
                      same_bits(base.part_a.value(), out_b.part_a.value());
  }
  return t;
}

/// Gaussian center layout for the masking checks.
inline std::vector<Point3> random_centers(std::size_t m, Rng& rng) {
  std::vector<Point3> c;
  for (std::size_t i = 0; i < m; ++i) c.push_back({normal01(rng), normal01(rng), normal01(rng)});
  return c;
}

struct MaskStats {
  std::size_t draws = 0;
  std::size_t min_size = ~std::size_t{0}, max_size = 0;
  double mean_ratio = 0.0;
  bool all_nearest = true;  // every set is exactly the nearest-b around some member
};

inline MaskStats mask_statistics(std::size_t draws, std::size_t m, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x3A5ULL});
  MaskStats st;
  st.draws = draws;
  for (std::size_t d = 0; d < draws; ++d) {
    auto centers = random_centers(m, rng);
    auto set = select_mask_region(centers, 0.25, 0.45, rng);
    st.min_size = std::min(st.min_size, set.size());
    st.max_size = std::max(st.max_size, set.size());
    st.mean_ratio += static_cast<double>(set.size()) / static_cast<double>(m) / static_cast<double>(draws);
    // Contiguity: some member's b-nearest neighbourhood equals the set.
    bool found = false;
    for (auto s : set)
      if (mask_region_around(centers, s, set.size()) == set) {
        found = true;
        break;
      }
    st.all_nearest = st.all_nearest && found;
  }
  return st;
}

}  // namespace gpm::checks
