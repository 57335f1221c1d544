#pragma once

// Differentiable operations over Tensor<T>. Shapes are checked eagerly and
// every result is checked for NaN/Inf (NumericFailure names the op).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gpm/common/random.hpp"
#include "gpm/geometry.hpp"
#include "gpm/nn/kernels.hpp"
#include "gpm/nn/tensor.hpp"

namespace gpm::nn {

/// Additive attention-mask entries at or below this value mark a hidden key.
template <class T>
constexpr T hidden_logit() {
  return -std::numeric_limits<T>::max() / T(4);
}

namespace detail {
inline std::string shape_str(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                          shape_str(b.rows(), b.cols()));
}
}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows())
    throw InvalidArgument("matmul: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " * " +
                          detail::shape_str(b.rows(), b.cols()));
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  std::vector<T> out(M * N, T(0));
  kernels::gemm_nn_acc(M, N, K, a.value().data(), b.value().data(), out.data());
  return detail::make_result<T>(M, N, std::move(out), "matmul", {a, b}, [M, N, K](Node<T>& self) {
    const T* A = self.parents[0]->value.data();
    const T* B = self.parents[1]->value.data();
    if (auto* ga = detail::parent_grad(self, 0)) kernels::gemm_nt_acc(M, K, N, self.grad.data(), B, ga->data());
    if (auto* gb = detail::parent_grad(self, 1)) kernels::gemm_tn_acc(K, N, M, A, self.grad.data(), gb->data());
  });
}

/// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols())
    throw InvalidArgument("matmul_nt: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " * (" +
                          detail::shape_str(b.rows(), b.cols()) + ")^T");
  const std::size_t M = a.rows(), K = a.cols(), N = b.rows();
  std::vector<T> out(M * N, T(0));
  kernels::gemm_nt_acc(M, N, K, a.value().data(), b.value().data(), out.data());
  return detail::make_result<T>(M, N, std::move(out), "matmul_nt", {a, b}, [M, N, K](Node<T>& self) {
    const T* A = self.parents[0]->value.data();
    const T* B = self.parents[1]->value.data();
    if (auto* ga = detail::parent_grad(self, 0)) kernels::gemm_nn_acc(M, K, N, self.grad.data(), B, ga->data());
    if (auto* gb = detail::parent_grad(self, 1)) kernels::gemm_tn_acc(N, K, M, self.grad.data(), A, gb->data());
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * C);
  auto v = a.value();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = v[r * C + c];
  return detail::make_result<T>(C, R, std::move(out), "transpose", {a}, [R, C](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*g)[r * C + c] += self.grad[c * R + r];
  });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = detail::parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * B[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * A[i];
  });
}

/// a + row, where row is 1 x cols and is broadcast over every row of a.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw InvalidArgument("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                          detail::shape_str(row.rows(), row.cols()));
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(a.size());
  auto av = a.value(), rv = row.value();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = av[r * C + c] + rv[c];
  return detail::make_result<T>(R, C, std::move(out), "add_row", {a, row}, [R, C](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*g)[c] += self.grad[r * C + c];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "scale", {a}, [s](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "relu", {a}, [](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (A[i] > T(0)) (*g)[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.2)) {
  std::vector<T> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : slope * av[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "leaky_relu", {a}, [slope](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += A[i] > T(0) ? self.grad[i] : slope * self.grad[i];
  });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  auto av = a.value();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "gelu", {a}, [inv_sqrt2](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T x = A[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
        (*g)[i] += self.grad[i] * (cdf + x * pdf);
      }
  });
}

// ---------------------------------------------------------------- structural

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const std::size_t R = parts[0].rows();
  std::vector<std::size_t> offs;
  std::size_t C = 0;
  for (const auto& p : parts) {
    if (p.rows() != R) throw InvalidArgument("concat_cols: row count mismatch");
    offs.push_back(C);
    C += p.cols();
  }
  std::vector<T> out(R * C);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].value();
    const std::size_t pc = parts[k].cols();
    for (std::size_t r = 0; r < R; ++r) std::copy_n(v.data() + r * pc, pc, out.data() + r * C + offs[k]);
  }
  return detail::make_result<T>(R, C, std::move(out), "concat_cols", parts, [R, C, offs](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (auto* g = detail::parent_grad(self, k)) {
        const std::size_t pc = self.parents[k]->cols;
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < pc; ++c) (*g)[r * pc + c] += self.grad[r * C + offs[k] + c];
      }
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  const std::size_t C = parts[0].cols();
  std::size_t R = 0;
  for (const auto& p : parts) {
    if (p.cols() != C) throw InvalidArgument("concat_rows: column count mismatch");
    R += p.rows();
  }
  std::vector<T> out;
  out.reserve(R * C);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  return detail::make_result<T>(R, C, std::move(out), "concat_rows", parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t n = self.parents[k]->value.size();
      if (auto* g = detail::parent_grad(self, k))
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[off + i];
      off += n;
    }
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) throw InvalidArgument("slice_rows: range out of bounds");
  const std::size_t C = a.cols();
  std::vector<T> out(a.value().begin() + begin * C, a.value().begin() + (begin + count) * C);
  return detail::make_result<T>(count, C, std::move(out), "slice_rows", {a}, [begin, C](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * C + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw InvalidArgument("slice_cols: range out of bounds");
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * count);
  auto v = a.value();
  for (std::size_t r = 0; r < R; ++r) std::copy_n(v.data() + r * C + begin, count, out.data() + r * count);
  return detail::make_result<T>(R, count, std::move(out), "slice_cols", {a}, [R, C, begin, count](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < count; ++c) (*g)[r * C + begin + c] += self.grad[r * count + c];
  });
}

/// out[i] = a[index[i]]; also serves as embedding lookup and row broadcast.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& index) {
  const std::size_t C = a.cols();
  std::vector<T> out(index.size() * C);
  auto v = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw InvalidArgument("gather_rows: index out of range");
    std::copy_n(v.data() + index[i] * C, C, out.data() + i * C);
  }
  return detail::make_result<T>(index.size(), C, std::move(out), "gather_rows", {a}, [index, C](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t c = 0; c < C; ++c) (*g)[index[i] * C + c] += self.grad[i * C + c];
  });
}

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  return gather_rows(table, ids);
}

// ---------------------------------------------------------------- normalization & pooling

/// Per-row layer normalization with learnable 1 x C gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t R = a.rows(), C = a.cols();
  if (gain.size() != C || bias.size() != C) throw InvalidArgument("layer_norm: gain/bias width mismatch");
  std::vector<T> out(R * C), xhat(R * C), inv_std(R);
  auto v = a.value(), gv = gain.value(), bv = bias.value();
  for (std::size_t r = 0; r < R; ++r) {
    const T* x = v.data() + r * C;
    T mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += x[c];
    mean /= T(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= T(C);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (x[c] - mean) * is;
      out[r * C + c] = xhat[r * C + c] * gv[c] + bv[c];
    }
  }
  return detail::make_result<T>(R, C, std::move(out), "layer_norm", {a, gain, bias},
                                [R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    const auto& G = self.parents[1]->value;
    const auto& dy = self.grad;
    if (auto* gg = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*gg)[c] += dy[r * C + c] * xhat[r * C + c];
    if (auto* gb = detail::parent_grad(self, 2))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*gb)[c] += dy[r * C + c];
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < R; ++r) {
        T sum_d = 0, sum_dx = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const T d = dy[r * C + c] * G[c];
          sum_d += d;
          sum_dx += d * xhat[r * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) {
          const T d = dy[r * C + c] * G[c];
          (*gx)[r * C + c] += inv_std[r] * (d - sum_d / T(C) - xhat[r * C + c] * sum_dx / T(C));
        }
      }
  });
}

/// Max over consecutive groups of `group` rows: (n*group) x C -> n x C.
template <class T>
Tensor<T> max_pool_over_set(const Tensor<T>& a, std::size_t group) {
  if (group == 0 || a.rows() % group != 0) throw InvalidArgument("max_pool_over_set: rows not divisible by group");
  const std::size_t n = a.rows() / group, C = a.cols();
  std::vector<T> out(n * C);
  std::vector<std::size_t> arg(n * C);
  auto v = a.value();
  for (std::size_t g = 0; g < n; ++g)
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t best = g * group;
      for (std::size_t r = g * group + 1; r < (g + 1) * group; ++r)
        if (v[r * C + c] > v[best * C + c]) best = r;
      arg[g * C + c] = best;
      out[g * C + c] = v[best * C + c];
    }
  return detail::make_result<T>(n, C, std::move(out), "max_pool_over_set", {a}, [C, arg = std::move(arg)](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < arg.size(); ++i) (*g)[arg[i] * C + i % C] += self.grad[i];
  });
}

template <class T>
Tensor<T> mean_pool_over_set(const Tensor<T>& a, std::size_t group) {
  if (group == 0 || a.rows() % group != 0) throw InvalidArgument("mean_pool_over_set: rows not divisible by group");
  const std::size_t n = a.rows() / group, C = a.cols();
  std::vector<T> out(n * C, T(0));
  auto v = a.value();
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < C; ++c) out[(r / group) * C + c] += v[r * C + c];
  for (auto& x : out) x /= T(group);
  return detail::make_result<T>(n, C, std::move(out), "mean_pool_over_set", {a}, [group, C](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < g->size() / C; ++r)
        for (std::size_t c = 0; c < C; ++c) (*g)[r * C + c] += self.grad[(r / group) * C + c] / T(group);
  });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.value()) s += x;
  return detail::make_result<T>(1, 1, {s}, "sum", {a}, [](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (auto& x : *g) x += self.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / T(a.size()));
}

// ---------------------------------------------------------------- softmax family

namespace detail {
template <class T>
bool is_hidden(T m) {
  return m <= hidden_logit<T>();
}
}  // namespace detail

/// Row softmax of a + mask. Mask entries <= hidden_logit() get probability
/// exactly 0 and never influence the row maximum.
template <class T>
Tensor<T> softmax_with_additive_mask(const Tensor<T>& a, const std::vector<T>& mask) {
  const std::size_t R = a.rows(), C = a.cols();
  if (!mask.empty() && mask.size() != R * C) throw InvalidArgument("softmax_with_additive_mask: mask shape mismatch");
  std::vector<T> out(R * C, T(0));
  auto v = a.value();
  for (std::size_t r = 0; r < R; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      if (!mask.empty() && detail::is_hidden(mask[i])) continue;
      mx = std::max(mx, v[i] + (mask.empty() ? T(0) : mask[i]));
    }
    if (!std::isfinite(mx)) throw NumericFailure("softmax_with_additive_mask: row with no visible entry");
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      if (!mask.empty() && detail::is_hidden(mask[i])) continue;
      out[i] = std::exp(v[i] + (mask.empty() ? T(0) : mask[i]) - mx);
      z += out[i];
    }
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= z;
  }
  std::vector<T> probs = out;
  return detail::make_result<T>(R, C, std::move(out), "softmax", {a}, [R, C, probs = std::move(probs)](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < R; ++r) {
        T dotp = 0;
        for (std::size_t c = 0; c < C; ++c) dotp += self.grad[r * C + c] * probs[r * C + c];
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = r * C + c;
          (*g)[i] += probs[i] * (self.grad[i] - dotp);
        }
      }
  });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  return softmax_with_additive_mask(a, {});
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<T> out(R * C);
  auto v = a.value();
  for (std::size_t r = 0; r < R; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, v[r * C + c]);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(v[r * C + c] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = v[r * C + c] - lz;
  }
  std::vector<T> logp = out;
  return detail::make_result<T>(R, C, std::move(out), "log_softmax", {a}, [R, C, logp = std::move(logp)](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < R; ++r) {
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += self.grad[r * C + c];
        for (std::size_t c = 0; c < C; ++c) (*g)[r * C + c] += self.grad[r * C + c] - std::exp(logp[r * C + c]) * s;
      }
  });
}

/// Mean cross-entropy over rows whose target is >= 0 (negative targets are
/// ignored). Returns a 1x1 tensor.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  const std::size_t R = logits.rows(), C = logits.cols();
  if (targets.size() != R) throw InvalidArgument("cross_entropy: one target per row required");
  std::size_t active = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(C)) throw InvalidArgument("cross_entropy: target out of range");
    if (t >= 0) ++active;
  }
  if (active == 0) throw InvalidArgument("cross_entropy: no active targets");
  auto v = logits.value();
  std::vector<T> probs(R * C, T(0));
  T loss = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (targets[r] < 0) continue;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, v[r * C + c]);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(v[r * C + c] - mx);
    const T lz = mx + std::log(z);
    loss += lz - v[r * C + targets[r]];
    for (std::size_t c = 0; c < C; ++c) probs[r * C + c] = std::exp(v[r * C + c] - lz);
  }
  const T inv = T(1) / T(active);
  loss *= inv;
  return detail::make_result<T>(1, 1, {loss}, "cross_entropy", {logits},
                                [R, C, inv, targets, probs = std::move(probs)](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      const T s = self.grad[0] * inv;
      for (std::size_t r = 0; r < R; ++r) {
        if (targets[r] < 0) continue;
        for (std::size_t c = 0; c < C; ++c) (*g)[r * C + c] += s * probs[r * C + c];
        (*g)[r * C + targets[r]] -= s;
      }
    }
  });
}

// ---------------------------------------------------------------- stochastic ops

/// Inverted dropout; identity when not training or rate == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& a, T rate, Rng& rng, bool training) {
  if (!training || rate <= T(0)) return a;
  if (rate >= T(1)) throw InvalidArgument("dropout: rate must be < 1");
  const T keep_scale = T(1) / (T(1) - rate);
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = uniform01(rng) < static_cast<double>(rate) ? T(0) : keep_scale;
  std::vector<T> out(a.size());
  auto v = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * mask[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), "dropout", {a}, [mask = std::move(mask)](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < mask.size(); ++i) (*g)[i] += self.grad[i] * mask[i];
  });
}

/// Standard Gumbel(0, 1) noise, -ln(-ln U), for an R x C matrix.
template <class T>
std::vector<T> gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<T> g(rows * cols);
  for (auto& x : g) {
    const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;  // strictly inside (0, 1)
    x = static_cast<T>(-std::log(-std::log(u)));
  }
  return g;
}

/// Forward value: row-wise one-hot of the argmax of `soft`. Backward: identity
/// (straight-through estimator).
template <class T>
Tensor<T> straight_through_one_hot(const Tensor<T>& soft) {
  const std::size_t R = soft.rows(), C = soft.cols();
  std::vector<T> out(R * C, T(0));
  auto v = soft.value();
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (v[r * C + c] > v[r * C + best]) best = c;
    out[r * C + best] = T(1);
  }
  return detail::make_result<T>(R, C, std::move(out), "straight_through", {soft}, [](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// softmax((logits + noise) / tau). An empty `noise` vector disables the
/// noise (test hook). In hard mode the forward value is one-hot and the
/// gradient flows through the soft sample.
template <class T>
Tensor<T> gumbel_softmax_with_noise(const Tensor<T>& logits, T tau, bool hard, const std::vector<T>& noise) {
  if (!(tau > T(0))) throw InvalidArgument("gumbel_softmax: tau must be positive");
  Tensor<T> z = logits;
  if (!noise.empty()) {
    if (noise.size() != logits.size()) throw InvalidArgument("gumbel_softmax: noise shape mismatch");
    z = add(z, Tensor<T>::from(logits.rows(), logits.cols(), noise));
  }
  Tensor<T> soft = softmax_rows(scale(z, T(1) / tau));
  return hard ? straight_through_one_hot(soft) : soft;
}

/// Gumbel-softmax drawing noise from `rng`; a null generator disables noise.
template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, T tau, bool hard, Rng* rng) {
  std::vector<T> noise;
  if (rng) noise = gumbel_noise<T>(logits.rows(), logits.cols(), *rng);
  return gumbel_softmax_with_noise(logits, tau, hard, noise);
}

// ---------------------------------------------------------------- set distances

/// Chamfer distance (non-squared norms) between predicted points (N x 3) and
/// a fixed target cloud; distances are evaluated in double precision.
template <class T>
Tensor<T> chamfer_loss(const Tensor<T>& pred, std::span<const Point3> target, ChamferNorm norm = ChamferNorm::euclidean) {
  if (pred.cols() != 3) throw InvalidArgument("chamfer_loss: predictions must be N x 3");
  if (pred.rows() == 0 || target.empty()) throw InvalidArgument("chamfer_loss: empty cloud");
  const std::size_t N = pred.rows(), G = target.size();
  std::vector<Point3> p(N);
  auto v = pred.value();
  for (std::size_t i = 0; i < N; ++i) p[i] = {double(v[3 * i]), double(v[3 * i + 1]), double(v[3 * i + 2])};
  std::vector<std::size_t> p2g, g2p;
  std::vector<double> dpg, dgp;
  nearest_neighbors(p, target, norm, p2g, dpg);
  nearest_neighbors(target, p, norm, g2p, dgp);
  double a = 0, b = 0;
  for (double d : dpg) a += d;
  for (double d : dgp) b += d;
  const double value = a / double(N) + b / double(G);

  // d|p - g| / dp, accumulated per predicted point.
  std::vector<T> dp(N * 3, T(0));
  auto accumulate = [&](std::size_t pi, const Point3& g, double w) {
    const double dx = p[pi][0] - g[0], dy = p[pi][1] - g[1], dz = p[pi][2] - g[2];
    if (norm == ChamferNorm::euclidean) {
      const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (d == 0.0) return;
      dp[3 * pi] += T(w * dx / d);
      dp[3 * pi + 1] += T(w * dy / d);
      dp[3 * pi + 2] += T(w * dz / d);
    } else {
      auto sgn = [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); };
      dp[3 * pi] += T(w * sgn(dx));
      dp[3 * pi + 1] += T(w * sgn(dy));
      dp[3 * pi + 2] += T(w * sgn(dz));
    }
  };
  for (std::size_t i = 0; i < N; ++i) accumulate(i, target[p2g[i]], 1.0 / double(N));
  for (std::size_t j = 0; j < G; ++j) accumulate(g2p[j], target[j], 1.0 / double(G));

  return detail::make_result<T>(1, 1, {static_cast<T>(value)}, "chamfer_l1", {pred}, [dp = std::move(dp)](Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < dp.size(); ++i) (*g)[i] += self.grad[0] * dp[i];
  });
}

}  // namespace gpm::nn
