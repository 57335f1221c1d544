#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gpm/geometry.hpp"
#include "gpm/nn/ops.hpp"
#include "gpm/nn/parameters.hpp"

namespace gpm::nn {

enum class LinearInit {
  fan_in,  // weight and bias U(-1/sqrt(in), 1/sqrt(in))
  he,      // weight U(-sqrt(6/in), sqrt(6/in)), bias 0; for layers feeding a rectifier
};

/// y = x W + b with W stored in_features x out_features.
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         LinearInit init = LinearInit::fan_in) {
    const double fan = static_cast<double>(in);
    if (init == LinearInit::he) {
      weight = ps.add_uniform(name + ".weight", in, out, std::sqrt(6.0 / fan), rng, true);
      bias = ps.add_constant(name + ".bias", 1, out, T(0), false);
    } else {
      weight = ps.add_uniform(name + ".weight", in, out, 1.0 / std::sqrt(fan), rng, true);
      bias = ps.add_uniform(name + ".bias", 1, out, 1.0 / std::sqrt(fan), rng, false);
    }
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_row(matmul(x, weight), bias); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& name, std::size_t width) {
    gain = ps.add_constant(name + ".gain", 1, width, T(1));
    bias = ps.add_constant(name + ".bias", 1, width, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

/// For each row of `features`, the indices of its `k` nearest rows in
/// feature space (itself included), lowest index on ties. Flattened n*k.
template <class T>
std::vector<std::size_t> feature_knn(const Tensor<T>& features, std::size_t k) {
  const std::size_t n = features.rows(), d = features.cols();
  auto v = features.value();
  std::vector<std::size_t> out(n * k);
  parallel_for(n, [&](std::size_t i) {
    const T* xi = v.data() + i * d;
    auto nn = k_smallest(n, k, [&](std::size_t j) {
      const T* xj = v.data() + j * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(xi[c]) - static_cast<double>(xj[c]);
        s += diff * diff;
      }
      return std::sqrt(s);
    });
    std::copy(nn.begin(), nn.end(), out.begin() + static_cast<std::ptrdiff_t>(i * k));
  }, 16);
  return out;
}

/// For each point, the indices of its k nearest points (itself included).
inline std::vector<std::size_t> point_knn(const std::vector<Point3>& pts, std::size_t k) {
  const std::size_t n = pts.size();
  std::vector<std::size_t> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    auto nn = k_smallest(n, k, [&](std::size_t j) { return distance(pts[i], pts[j]); });
    std::copy(nn.begin(), nn.end(), out.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return out;
}

/// Edge convolution. By default the kNN graph is rebuilt from the input
/// features (dynamic graph). Each edge (i, j) carries [x_i, x_j - x_i], plus
/// c_j - c_i when the layer is built with coordinates; then a shared linear
/// map, per-edge layer norm and LeakyReLU(0.2); edges are max-pooled per node.
template <class T>
struct EdgeConv {
  Linear<T> edge_mlp;
  LayerNorm<T> norm;
  std::size_t neighbors = 4;
  bool coords = false;

  EdgeConv() = default;
  EdgeConv(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng,
           bool with_coords = false)
      : edge_mlp(ps, name + ".edge", 2 * in + (with_coords ? 3 : 0), out, rng, LinearInit::he),
        norm(ps, name + ".norm", out),
        neighbors(k),
        coords(with_coords) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (coords) throw InvalidArgument("EdgeConv: this layer needs coordinates");
    const std::size_t k = std::min(neighbors, x.rows());
    return on_graph(x, feature_knn(x, k), k, Tensor<T>());
  }

  /// Fixed graph `nbr` (n*k entries); `rel` holds c_j - c_i per edge when coords is set.
  Tensor<T> on_graph(const Tensor<T>& x, const std::vector<std::size_t>& nbr, std::size_t k, const Tensor<T>& rel) const {
    const std::size_t n = x.rows();
    std::vector<std::size_t> self_idx(n * k);
    for (std::size_t i = 0; i < n * k; ++i) self_idx[i] = i / k;
    Tensor<T> xi = gather_rows(x, self_idx);
    Tensor<T> xj = gather_rows(x, nbr);
    Tensor<T> edges = coords ? concat_cols<T>({xi, sub(xj, xi), rel}) : concat_cols<T>({xi, sub(xj, xi)});
    return max_pool_over_set(leaky_relu(norm(edge_mlp(edges)), T(0.2)), k);
  }
};

/// Four EdgeConv layers whose outputs are concatenated (DGCNN style) and
/// projected by a final linear map. A stack built with coordinates works on
/// the fixed kNN graph of the given points instead of feature-space graphs.
template <class T>
struct EdgeConvStack {
  std::vector<EdgeConv<T>> layers;
  Linear<T> head;
  bool coords = false;

  EdgeConvStack() = default;
  EdgeConvStack(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t width, std::size_t out,
                std::size_t k, Rng& rng, std::size_t depth = 4, bool with_coords = false)
      : coords(with_coords) {
    std::size_t d = in;
    for (std::size_t l = 0; l < depth; ++l) {
      layers.emplace_back(ps, name + ".conv" + std::to_string(l), d, width, k, rng, with_coords);
      d = width;
    }
    head = Linear<T>(ps, name + ".head", width * depth, out, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    std::vector<Tensor<T>> outs;
    Tensor<T> h = x;
    for (const auto& layer : layers) {
      h = layer(h);
      outs.push_back(h);
    }
    return head(concat_cols(outs));
  }

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<Point3>& points) const {
    if (!coords) return (*this)(x);
    if (points.size() != x.rows()) throw InvalidArgument("EdgeConvStack: one point per feature row required");
    const std::size_t n = x.rows(), k = std::min(layers.front().neighbors, n);
    const auto nbr = point_knn(points, k);
    std::vector<T> rel(n * k * 3);
    for (std::size_t e = 0; e < n * k; ++e)
      for (std::size_t d = 0; d < 3; ++d) rel[3 * e + d] = static_cast<T>(points[nbr[e]][d] - points[e / k][d]);
    const Tensor<T> relt = Tensor<T>::from(n * k, 3, std::move(rel));
    std::vector<Tensor<T>> outs;
    Tensor<T> h = x;
    for (const auto& layer : layers) {
      h = layer.on_graph(h, nbr, k, relt);
      outs.push_back(h);
    }
    return head(concat_cols(outs));
  }
};

}  // namespace gpm::nn
