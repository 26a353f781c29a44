#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kvla/rng.hpp"
#include "kvla/tensor.hpp"

namespace kvla {

/// Named learnable tensors in a stable creation order. The order defines the
/// checkpoint block layout and the optimizer state alignment.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Shape shape,
                 std::vector<double> values) {
    if (find(name) != nullptr) {
      throw std::invalid_argument("duplicate parameter: " + name);
    }
    entries_.emplace_back(name,
                          Tensor::from_values(std::move(shape),
                                              std::move(values), true));
    return entries_.back().second;
  }

  Tensor& create_zeros(const std::string& name, Shape shape) {
    const std::size_t n = shape_numel(shape);
    return create(name, std::move(shape), std::vector<double>(n, 0.0));
  }

  Tensor& create_full(const std::string& name, Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return create(name, std::move(shape), std::vector<double>(n, value));
  }

  /// Gaussian fan-in init: N(0, sqrt(2 / fan_in)), seeded per name so the
  /// values do not depend on creation order.
  Tensor& create_kaiming(const std::string& name, Shape shape,
                         std::size_t fan_in, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "param", fnv1a(name)));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.next_gaussian() * sd;
    return create(name, std::move(shape), std::move(values));
  }

  Tensor& create_gaussian(const std::string& name, Shape shape, double sd,
                          std::uint64_t seed) {
    Rng rng(derive_seed(seed, "param", fnv1a(name)));
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.next_gaussian() * sd;
    return create(name, std::move(shape), std::move(values));
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : entries_) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  Tensor& at(const std::string& name) {
    Tensor* t = find(name);
    if (t == nullptr) throw std::invalid_argument("unknown parameter: " + name);
    return *t;
  }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }

  void zero_grads() {
    for (auto& [n, t] : entries_) t.zero_grad();
  }

  std::size_t count() const { return entries_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace kvla
