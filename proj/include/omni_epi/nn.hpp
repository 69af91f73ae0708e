// SPDX-License-Identifier: Apache-2.0
//
// Named parameters and the three parametric layers every block is built from.

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "omni_epi/ops.hpp"
#include "omni_epi/tensor.hpp"

namespace omni {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// Ordered, name-unique parameter list. Tensors are shared handles, so
/// updating a parameter through the set updates the owning module.
class ParameterSet {
 public:
  void add(const std::string& name, const Tensor& t, bool trainable = true);
  const std::vector<Parameter>& items() const { return items_; }
  std::vector<Parameter>& items() { return items_; }
  const Parameter* find(const std::string& name) const;
  std::int64_t total_elements() const;
  std::size_t size() const { return items_.size(); }
  std::vector<Tensor> tensors() const;

 private:
  std::vector<Parameter> items_;
};

/// Seeded uniform fan-in initialisation: U(-sqrt(1/fan_in), sqrt(1/fan_in)).
class Initializer {
 public:
  Initializer(std::uint64_t seed, DType dtype) : rng_(seed), dtype_(dtype) {}
  Tensor fan_in_uniform(const Shape& shape, std::int64_t fan_in);
  Tensor zeros(const Shape& shape) const { return Tensor::zeros(shape, dtype_); }
  Tensor constant(const Shape& shape, double v) const { return Tensor::full(shape, v, dtype_); }
  DType dtype() const { return dtype_; }

 private:
  std::mt19937_64 rng_;
  DType dtype_;
};

struct Linear {
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)

  static Linear make(std::int64_t in, std::int64_t out, Initializer& init);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  void collect(const std::string& prefix, ParameterSet& out) const;
};

using Kernel3 = std::array<std::int64_t, 3>;

struct Conv3d {
  Tensor weight;  // (Cout, Cin/groups, kd, kh, kw)
  Tensor bias;    // (Cout)
  ops::ConvOptions options;

  static Conv3d make(std::int64_t cin, std::int64_t cout, Kernel3 kernel, Initializer& init,
                     Kernel3 dilation = {1, 1, 1}, std::int64_t groups = 1);
  Tensor operator()(const Tensor& x) const { return ops::conv3d(x, weight, bias, options); }
  void collect(const std::string& prefix, ParameterSet& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(std::int64_t channels, Initializer& init);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, 1e-5); }
  void collect(const std::string& prefix, ParameterSet& out) const;
};

}  // namespace omni
