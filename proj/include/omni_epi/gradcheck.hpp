// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "omni_epi/tensor.hpp"

namespace omni {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates probed per tensor; all when <= 0, otherwise a seeded sample.
  std::int64_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// `f` rebuilds a scalar loss from the current values of `wrt` (64-bit
/// leaves). Returns max |analytic - central| / max(1, |central|).
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> wrt, const GradCheckOptions& opt = {});

/// sum(x * R) with a fixed seeded R of x's shape: a generic scalar probe.
Tensor projection_loss(const Tensor& x, std::uint64_t seed);

struct GradCheckCase {
  std::string name;
  double error = 0.0;
};

/// Finite-difference checks of every registered block at toy shapes:
/// attention with and without band mask, TP-FFN, EPI branch, both fusion
/// modes, the Omni-EPI block, the MacPI prior, the pixel-shuffle head, the
/// OHEM loss and a one-block model end to end.
std::vector<GradCheckCase> gradient_suite(std::uint64_t seed, std::int64_t max_coords = 16);

}  // namespace omni
