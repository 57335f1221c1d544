#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/random.hpp"
#include "gpm/nn/tensor.hpp"

namespace gpm::nn {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // receives decoupled weight decay
};

/// Named, ordered collection of trainable tensors. Names are unique.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Tensor<T> add(const std::string& name, std::size_t rows, std::size_t cols, std::vector<T> values, bool decay = true) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back({name, Tensor<T>::from(rows, cols, std::move(values), true), decay});
    return params_.back().tensor;
  }

  /// Uniform(-bound, bound) initialisation.
  Tensor<T> add_uniform(const std::string& name, std::size_t rows, std::size_t cols, double bound, Rng& rng,
                        bool decay = true) {
    std::vector<T> v(rows * cols);
    for (auto& x : v) x = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
    return add(name, rows, cols, std::move(v), decay);
  }

  Tensor<T> add_constant(const std::string& name, std::size_t rows, std::size_t cols, T value, bool decay = false) {
    return add(name, rows, cols, std::vector<T>(rows * cols, value), decay);
  }

  std::size_t size() const { return params_.size(); }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>>& all() { return params_; }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  Tensor<T> get(const std::string& name) const {
    const auto* p = find(name);
    if (!p) throw InvalidArgument("unknown parameter: " + name);
    return p->tensor;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  /// Copies values (not graph identity) from another set with identical names and shapes.
  void copy_values_from(const ParameterSet& other) {
    for (auto& p : params_) {
      const auto* q = other.find(p.name);
      if (!q || q->tensor.size() != p.tensor.size())
        throw ContractViolation("copy_values_from: missing or mis-shaped parameter " + p.name);
      auto dst = p.tensor.mutable_value();
      std::copy(q->tensor.value().begin(), q->tensor.value().end(), dst.begin());
    }
  }

  /// FNV-1a over names and the raw bytes of every value.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& p : params_) {
      mix(p.name.data(), p.name.size());
      mix(p.tensor.value().data(), p.tensor.size() * sizeof(T));
    }
    return h;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace gpm::nn
