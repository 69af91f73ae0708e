// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/nn.hpp"

#include <cmath>

namespace omni {

void ParameterSet::add(const std::string& name, const Tensor& t, bool trainable) {
  if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
  items_.push_back(Parameter{name, t, trainable});
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::int64_t ParameterSet::total_elements() const {
  std::int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.tensor);
  return out;
}

Tensor Initializer::fan_in_uniform(const Shape& shape, std::int64_t fan_in) {
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng_);
  return Tensor::from_vector(shape, v, dtype_);
}

Linear Linear::make(std::int64_t in, std::int64_t out, Initializer& init) {
  Linear l;
  l.weight = init.fan_in_uniform({out, in}, in);
  l.bias = init.zeros({out});
  l.weight.set_requires_grad(true);
  l.bias.set_requires_grad(true);
  return l;
}

void Linear::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

Conv3d Conv3d::make(std::int64_t cin, std::int64_t cout, Kernel3 kernel, Initializer& init, Kernel3 dilation,
                    std::int64_t groups) {
  Conv3d c;
  const std::int64_t fan_in = (cin / groups) * kernel[0] * kernel[1] * kernel[2];
  c.weight = init.fan_in_uniform({cout, cin / groups, kernel[0], kernel[1], kernel[2]}, fan_in);
  c.bias = init.zeros({cout});
  c.weight.set_requires_grad(true);
  c.bias.set_requires_grad(true);
  c.options.dilation = dilation;
  c.options.groups = groups;
  return c;
}

void Conv3d::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

LayerNorm LayerNorm::make(std::int64_t channels, Initializer& init) {
  LayerNorm n;
  n.gamma = init.constant({channels}, 1.0);
  n.beta = init.zeros({channels});
  n.gamma.set_requires_grad(true);
  n.beta.set_requires_grad(true);
  return n;
}

void LayerNorm::collect(const std::string& prefix, ParameterSet& out) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

}  // namespace omni
