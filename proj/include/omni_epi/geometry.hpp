// SPDX-License-Identifier: Apache-2.0
//
// Layout transforms between the 5D light-field tensor (B, C, U*V, H, W) and
// its EPI / macro-pixel views. Angular flattening is a = u*V + v everywhere.

#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "omni_epi/tensor.hpp"

namespace omni {

class LightField {
 public:
  LightField() = default;
  /// tensor is (B, C, U*V, H, W).
  LightField(Tensor tensor, std::int64_t u, std::int64_t v);

  const Tensor& tensor() const { return tensor_; }
  std::int64_t u() const { return u_; }
  std::int64_t v() const { return v_; }
  std::int64_t batch() const { return tensor_.dim(0); }
  std::int64_t channels() const { return tensor_.dim(1); }
  std::int64_t views() const { return tensor_.dim(2); }
  std::int64_t height() const { return tensor_.dim(3); }
  std::int64_t width() const { return tensor_.dim(4); }

  /// Same angular grid, different tensor.
  LightField with(Tensor t) const { return LightField(std::move(t), u_, v_); }

 private:
  Tensor tensor_;
  std::int64_t u_ = 0;
  std::int64_t v_ = 0;
};

enum class EpiDirection { Horizontal, Vertical, Diag45, Diag135, MacPI };

const char* direction_name(EpiDirection d);

struct EpiView {
  Tensor tensor;
  EpiDirection direction = EpiDirection::Horizontal;
  std::int64_t u = 0, v = 0, height = 0, width = 0;

  /// For every flat element of `tensor`, the flat index of its source in the
  /// (B, C, U*V, H, W) light field. A permutation for horizontal, vertical and
  /// MacPI views.
  std::vector<std::int64_t> inverse_map() const;
  /// Token grid (rows, cols) of each EPI sequence; rows are angular.
  std::pair<std::int64_t, std::int64_t> token_grid() const;
};

/// b c (u v) h w -> b c (v w) u h
EpiView to_horizontal_epi(const LightField& lf);
/// b c (u v) h w -> b c (u h) v w
EpiView to_vertical_epi(const LightField& lf);
/// Exact inverse for horizontal, vertical and MacPI views.
LightField from_epi(const EpiView& view);

/// Flat angular indices of the 45 degree (i, i) and 135 degree (i, U-1-i) diagonals.
std::vector<std::int64_t> diagonal_indices(std::int64_t u, std::int64_t v, EpiDirection dir);

/// Gathers both diagonals, each laid out as (B, C, W, U, H).
std::pair<EpiView, EpiView> extract_diagonals(const LightField& lf);
/// Zero light field shaped like `like` with both processed diagonals added
/// back at their angular positions. With odd U the centre view receives the
/// sum of both contributions.
LightField scatter_diagonals(const Tensor& proc45, const Tensor& proc135, const LightField& like);

/// (B, C, U*H, V*W) with element (h*U + u, w*V + v) = lf(u*V + v, h, w).
EpiView to_macpi(const LightField& lf);
LightField from_macpi(const EpiView& view);

/// (B, C, S, P, Q) EPI layout -> (B*S, P*Q, C) token sequences, and back.
Tensor epi_to_tokens(const Tensor& epi);
Tensor tokens_to_epi(const Tensor& tokens, std::int64_t batch, std::int64_t channels, std::int64_t seqs,
                     std::int64_t rows, std::int64_t cols);

/// Element of the 8-fold dihedral group acting jointly on space and angle:
/// transpose swaps (h, w) with (u, v); flip_rows reverses h and u; flip_cols
/// reverses w and v. Transpose is applied first.
struct Dihedral {
  bool transpose = false;
  bool flip_rows = false;
  bool flip_cols = false;

  static std::array<Dihedral, 8> all();
  static Dihedral from_index(int i);
  int index() const;
  Dihedral inverse() const;
  /// (a * b)(x) = a(b(x)).
  static Dihedral compose(const Dihedral& a, const Dihedral& b);
  bool operator==(const Dihedral&) const = default;
};

LightField apply_dihedral(const LightField& lf, const Dihedral& g);
/// Reverses angular axes only; flips the sign of EPI slopes.
LightField reverse_angular(const LightField& lf, bool reverse_u, bool reverse_v);

}  // namespace omni
