// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/geometry.hpp"

#include <numeric>
#include <string>

#include "omni_epi/ops.hpp"

namespace omni {

using std::int64_t;

LightField::LightField(Tensor tensor, int64_t u, int64_t v) : tensor_(std::move(tensor)), u_(u), v_(v) {
  if (tensor_.rank() != 5)
    throw ShapeError("light field tensor must be (B, C, U*V, H, W), got " + shape_str(tensor_.shape()));
  if (u < 1 || v < 1 || tensor_.dim(2) != u * v)
    throw ShapeError("light field angular extent " + std::to_string(tensor_.dim(2)) +
                     " does not match U*V = " + std::to_string(u) + "*" + std::to_string(v));
}

const char* direction_name(EpiDirection d) {
  switch (d) {
    case EpiDirection::Horizontal: return "horizontal";
    case EpiDirection::Vertical: return "vertical";
    case EpiDirection::Diag45: return "diag45";
    case EpiDirection::Diag135: return "diag135";
    case EpiDirection::MacPI: return "macpi";
  }
  return "?";
}

namespace {

Tensor as6d(const LightField& lf) {
  return ops::reshape(lf.tensor(), {lf.batch(), lf.channels(), lf.u(), lf.v(), lf.height(), lf.width()});
}

EpiView make_view(Tensor t, EpiDirection dir, const LightField& lf) {
  return EpiView{std::move(t), dir, lf.u(), lf.v(), lf.height(), lf.width()};
}

}  // namespace

std::pair<int64_t, int64_t> EpiView::token_grid() const {
  switch (direction) {
    case EpiDirection::Horizontal: return {u, height};
    case EpiDirection::Vertical: return {v, width};
    case EpiDirection::Diag45:
    case EpiDirection::Diag135: return {u, height};
    case EpiDirection::MacPI: return {u * height, v * width};
  }
  return {0, 0};
}

std::vector<int64_t> EpiView::inverse_map() const {
  // Push a tensor of flat indices through the same layout transform.
  const int64_t b = tensor.dim(0), c = tensor.dim(1);
  const int64_t n = b * c * u * v * height * width;
  std::vector<double> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0.0);
  NoGradGuard guard;
  LightField lf(Tensor::from_vector({b, c, u * v, height, width}, idx, DType::F64), u, v);
  Tensor mapped;
  switch (direction) {
    case EpiDirection::Horizontal: mapped = to_horizontal_epi(lf).tensor; break;
    case EpiDirection::Vertical: mapped = to_vertical_epi(lf).tensor; break;
    case EpiDirection::MacPI: mapped = to_macpi(lf).tensor; break;
    case EpiDirection::Diag45: mapped = extract_diagonals(lf).first.tensor; break;
    case EpiDirection::Diag135: mapped = extract_diagonals(lf).second.tensor; break;
  }
  std::vector<int64_t> out;
  out.reserve(static_cast<std::size_t>(mapped.numel()));
  for (double x : mapped.to_vector()) out.push_back(static_cast<int64_t>(x));
  return out;
}

EpiView to_horizontal_epi(const LightField& lf) {
  Tensor t = ops::permute(as6d(lf), {0, 1, 3, 5, 2, 4});
  t = ops::reshape(t, {lf.batch(), lf.channels(), lf.v() * lf.width(), lf.u(), lf.height()});
  return make_view(std::move(t), EpiDirection::Horizontal, lf);
}

EpiView to_vertical_epi(const LightField& lf) {
  Tensor t = ops::permute(as6d(lf), {0, 1, 2, 4, 3, 5});
  t = ops::reshape(t, {lf.batch(), lf.channels(), lf.u() * lf.height(), lf.v(), lf.width()});
  return make_view(std::move(t), EpiDirection::Vertical, lf);
}

EpiView to_macpi(const LightField& lf) {
  Tensor t = ops::permute(as6d(lf), {0, 1, 4, 2, 5, 3});
  t = ops::reshape(t, {lf.batch(), lf.channels(), lf.height() * lf.u(), lf.width() * lf.v()});
  return make_view(std::move(t), EpiDirection::MacPI, lf);
}

LightField from_epi(const EpiView& view) {
  const Tensor& t = view.tensor;
  const int64_t b = t.dim(0), c = t.dim(1);
  const int64_t U = view.u, V = view.v, H = view.height, W = view.width;
  Tensor six;
  switch (view.direction) {
    case EpiDirection::Horizontal:
      if (t.rank() != 5 || t.dim(2) != V * W || t.dim(3) != U || t.dim(4) != H)
        throw ShapeError("from_epi: horizontal view has shape " + shape_str(t.shape()));
      six = ops::permute(ops::reshape(t, {b, c, V, W, U, H}), {0, 1, 4, 2, 5, 3});
      break;
    case EpiDirection::Vertical:
      if (t.rank() != 5 || t.dim(2) != U * H || t.dim(3) != V || t.dim(4) != W)
        throw ShapeError("from_epi: vertical view has shape " + shape_str(t.shape()));
      six = ops::permute(ops::reshape(t, {b, c, U, H, V, W}), {0, 1, 2, 4, 3, 5});
      break;
    case EpiDirection::MacPI:
      return from_macpi(view);
    case EpiDirection::Diag45:
    case EpiDirection::Diag135:
      throw ContractError("from_epi: diagonal views are not permutations; use scatter_diagonals");
  }
  return LightField(ops::reshape(six, {b, c, U * V, H, W}), U, V);
}

LightField from_macpi(const EpiView& view) {
  const Tensor& t = view.tensor;
  const int64_t U = view.u, V = view.v;
  if (t.rank() != 4 || U < 1 || V < 1 || t.dim(2) % U || t.dim(3) % V)
    throw ShapeError("from_macpi: shape " + shape_str(t.shape()) + " is not divisible by the angular grid " +
                     std::to_string(U) + "x" + std::to_string(V));
  const int64_t b = t.dim(0), c = t.dim(1), H = t.dim(2) / U, W = t.dim(3) / V;
  Tensor six = ops::permute(ops::reshape(t, {b, c, H, U, W, V}), {0, 1, 3, 5, 2, 4});
  return LightField(ops::reshape(six, {b, c, U * V, H, W}), U, V);
}

std::vector<int64_t> diagonal_indices(int64_t u, int64_t v, EpiDirection dir) {
  if (u != v) throw ContractError("diagonal EPIs need a square angular grid, got " + std::to_string(u) +
                                  "x" + std::to_string(v));
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < u; ++i) {
    if (dir == EpiDirection::Diag45)
      idx.push_back(i * v + i);
    else if (dir == EpiDirection::Diag135)
      idx.push_back(i * v + (u - 1 - i));
    else
      throw ContractError("diagonal_indices: not a diagonal direction");
  }
  return idx;
}

std::pair<EpiView, EpiView> extract_diagonals(const LightField& lf) {
  auto one = [&](EpiDirection dir) {
    Tensor g = ops::gather(lf.tensor(), 2, diagonal_indices(lf.u(), lf.v(), dir));
    return make_view(ops::permute(g, {0, 1, 4, 2, 3}), dir, lf);
  };
  return {one(EpiDirection::Diag45), one(EpiDirection::Diag135)};
}

LightField scatter_diagonals(const Tensor& proc45, const Tensor& proc135, const LightField& like) {
  const Shape expect{like.batch(), like.channels(), like.width(), like.u(), like.height()};
  if (proc45.shape() != expect || proc135.shape() != expect)
    throw ShapeError("scatter_diagonals: expected " + shape_str(expect) + ", got " + shape_str(proc45.shape()) +
                     " and " + shape_str(proc135.shape()));
  std::vector<int64_t> index = diagonal_indices(like.u(), like.v(), EpiDirection::Diag45);
  const auto anti = diagonal_indices(like.u(), like.v(), EpiDirection::Diag135);
  index.insert(index.end(), anti.begin(), anti.end());
  const Tensor parts[] = {ops::permute(proc45, {0, 1, 3, 4, 2}), ops::permute(proc135, {0, 1, 3, 4, 2})};
  Tensor both = ops::concat(parts, 2);
  return like.with(ops::scatter_add(both, 2, index, like.views()));
}

Tensor epi_to_tokens(const Tensor& epi) {
  if (epi.rank() != 5) throw ShapeError("epi_to_tokens: expected (B, C, S, P, Q), got " + shape_str(epi.shape()));
  const int64_t b = epi.dim(0), c = epi.dim(1), s = epi.dim(2), p = epi.dim(3), q = epi.dim(4);
  return ops::reshape(ops::permute(epi, {0, 2, 3, 4, 1}), {b * s, p * q, c});
}

Tensor tokens_to_epi(const Tensor& tokens, int64_t batch, int64_t channels, int64_t seqs, int64_t rows,
                     int64_t cols) {
  if (tokens.shape() != Shape{batch * seqs, rows * cols, channels})
    throw ShapeError("tokens_to_epi: token tensor " + shape_str(tokens.shape()) + " does not match grid");
  return ops::permute(ops::reshape(tokens, {batch, seqs, rows, cols, channels}), {0, 4, 1, 2, 3});
}

// ---------------------------------------------------------------------------

std::array<Dihedral, 8> Dihedral::all() {
  std::array<Dihedral, 8> out;
  for (int i = 0; i < 8; ++i) out[i] = from_index(i);
  return out;
}

Dihedral Dihedral::from_index(int i) { return Dihedral{(i & 4) != 0, (i & 2) != 0, (i & 1) != 0}; }

int Dihedral::index() const { return (transpose ? 4 : 0) + (flip_rows ? 2 : 0) + (flip_cols ? 1 : 0); }

namespace {

// Action on a coordinate of an n x n grid.
std::pair<int, int> act(const Dihedral& g, std::pair<int, int> p, int n) {
  if (g.transpose) std::swap(p.first, p.second);
  if (g.flip_rows) p.first = n - 1 - p.first;
  if (g.flip_cols) p.second = n - 1 - p.second;
  return p;
}

}  // namespace

Dihedral Dihedral::compose(const Dihedral& a, const Dihedral& b) {
  constexpr int n = 3;
  for (const Dihedral& c : all()) {
    bool same = true;
    for (int r = 0; r < n && same; ++r)
      for (int k = 0; k < n && same; ++k) same = act(c, {r, k}, n) == act(a, act(b, {r, k}, n), n);
    if (same) return c;
  }
  throw ContractError("dihedral composition is not closed");
}

Dihedral Dihedral::inverse() const {
  for (const Dihedral& c : all()) {
    if (compose(*this, c) == Dihedral{}) return c;
  }
  throw ContractError("dihedral element without inverse");
}

namespace {

std::vector<int64_t> reversed(int64_t n) {
  std::vector<int64_t> idx(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[i] = n - 1 - i;
  return idx;
}

}  // namespace

LightField apply_dihedral(const LightField& lf, const Dihedral& g) {
  if (g.transpose && lf.u() != lf.v())
    throw ContractError("spatial-angular transpose needs U == V, got " + std::to_string(lf.u()) + "x" +
                        std::to_string(lf.v()));
  Tensor t = as6d(lf);
  int64_t U = lf.u(), V = lf.v();
  if (g.transpose) {
    t = ops::permute(t, {0, 1, 3, 2, 5, 4});
    std::swap(U, V);
  }
  if (g.flip_rows) {
    t = ops::gather(t, 2, reversed(t.dim(2)));
    t = ops::gather(t, 4, reversed(t.dim(4)));
  }
  if (g.flip_cols) {
    t = ops::gather(t, 3, reversed(t.dim(3)));
    t = ops::gather(t, 5, reversed(t.dim(5)));
  }
  return LightField(ops::reshape(t, {t.dim(0), t.dim(1), U * V, t.dim(4), t.dim(5)}), U, V);
}

LightField reverse_angular(const LightField& lf, bool reverse_u, bool reverse_v) {
  Tensor t = as6d(lf);
  if (reverse_u) t = ops::gather(t, 2, reversed(lf.u()));
  if (reverse_v) t = ops::gather(t, 3, reversed(lf.v()));
  return lf.with(ops::reshape(t, lf.tensor().shape()));
}

}  // namespace omni
