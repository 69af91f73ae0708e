// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#define OMNI_STR(x) #x
// Loops below this many inner operations run on the calling thread.
constexpr std::int64_t kParallelGrain = 1 << 16;
#ifdef _OPENMP
#define OMNI_PARALLEL_FOR(work) _Pragma(OMNI_STR(omp parallel for schedule(static) if ((work) >= kParallelGrain)))
#else
#define OMNI_PARALLEL_FOR(work)
#endif

namespace omni::ops {

using detail::make_result;
using std::int64_t;

namespace {

template <class T>
const std::vector<T>& vals(const Tensor& t) {
  return buf<T>(t.buffer());
}

DType common_dtype(const char* op, std::initializer_list<const Tensor*> ts) {
  DType dt = (*ts.begin())->dtype();
  for (const Tensor* t : ts) {
    if (!t->defined()) continue;
    if (t->dtype() != dt)
      throw ContractError(std::string(op) + ": mixed precisions within one graph");
    detail::check_finite(op, *t);
  }
  return dt;
}

int norm_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return axis;
}

// outer * extent(axis) * inner decomposition of a shape.
struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// --- broadcasting ---------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;
  bool same = false;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    r.same = true;
    return r;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  r.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b) + " (dim " + std::to_string(i) + ")");
    r.out[i] = std::max(pa[i], pb[i]);
  }
  auto sa = contiguous_strides(pa), sb = contiguous_strides(pb);
  r.stride_a.resize(rank);
  r.stride_b.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    r.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    r.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return r;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const int64_t n = shape_numel(bc.out);
  if (bc.same) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<int64_t> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const char* op, BinOp kind, const Tensor& a, const Tensor& b) {
  const DType dt = common_dtype(op, {&a, &b});
  auto bc = std::make_shared<Broadcast>(broadcast_shapes(op, a.shape(), b.shape()));
  Buffer out = make_buffer(dt, static_cast<std::size_t>(shape_numel(bc->out)));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(a);
    const auto& y = vals<T>(b);
    auto& o = buf<T>(out);
    switch (kind) {
      case BinOp::Add: for_each_broadcast(*bc, [&](int64_t i, int64_t p, int64_t q) { o[i] = x[p] + y[q]; }); break;
      case BinOp::Sub: for_each_broadcast(*bc, [&](int64_t i, int64_t p, int64_t q) { o[i] = x[p] - y[q]; }); break;
      case BinOp::Mul: for_each_broadcast(*bc, [&](int64_t i, int64_t p, int64_t q) { o[i] = x[p] * y[q]; }); break;
    }
  });
  return make_result(op, bc->out, std::move(out), {a, b},
                     [a, b, bc, kind](const Buffer& g, std::span<Buffer*> gin) {
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const auto& go = buf<T>(g);
                         T* ga = gin[0] ? buf<T>(*gin[0]).data() : nullptr;
                         T* gb = gin[1] ? buf<T>(*gin[1]).data() : nullptr;
                         const auto& x = vals<T>(a);
                         const auto& y = vals<T>(b);
                         for_each_broadcast(*bc, [&](int64_t i, int64_t p, int64_t q) {
                           switch (kind) {
                             case BinOp::Add:
                               if (ga) ga[p] += go[i];
                               if (gb) gb[q] += go[i];
                               break;
                             case BinOp::Sub:
                               if (ga) ga[p] += go[i];
                               if (gb) gb[q] -= go[i];
                               break;
                             case BinOp::Mul:
                               if (ga) ga[p] += go[i] * y[q];
                               if (gb) gb[q] += go[i] * x[p];
                               break;
                           }
                         });
                       });
                     });
}

// Unary elementwise op: value(x) and derivative(x, y).
template <class Value, class Deriv>
Tensor unary(const char* op, const Tensor& a, Value value, Deriv deriv) {
  const DType dt = common_dtype(op, {&a});
  Buffer out = make_buffer(dt, static_cast<std::size_t>(a.numel()));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(a);
    auto& o = buf<T>(out);
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = static_cast<T>(value(static_cast<double>(x[i])));
  });
  Tensor result = make_result(op, a.shape(), std::move(out), {a}, nullptr);
  if (result.has_node()) {
    std::weak_ptr<detail::TensorImpl> weak_out = result.impl();
    const_cast<detail::Node*>(result.node())->backward =
        [a, weak_out, deriv](const Buffer& g, std::span<Buffer*> gin) {
          if (!gin[0]) return;
          auto out_impl = weak_out.lock();
          visit_dtype(buffer_dtype(g), [&](auto tag) {
            using T = decltype(tag);
            const auto& go = buf<T>(g);
            const auto& x = vals<T>(a);
            const auto& y = buf<T>(out_impl->data);
            auto& ga = buf<T>(*gin[0]);
            for (std::size_t i = 0; i < x.size(); ++i)
              ga[i] += go[i] * static_cast<T>(deriv(static_cast<double>(x[i]), static_cast<double>(y[i])));
          });
        };
  }
  return result;
}

// --- gemm -----------------------------------------------------------------

// C (M x N) += op(A) op(B); A is M x K (or K x M when ta), B is K x N (or N x K when tb).
template <class T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
  if (!tb) {
    OMNI_PARALLEL_FOR(M * N * K)
    for (int64_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      for (int64_t k = 0; k < K; ++k) {
        const T av = ta ? A[k * M + i] : A[i * K + k];
        if (av == T(0)) continue;
        const T* b = B + k * N;
        for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    OMNI_PARALLEL_FOR(M * N * K)
    for (int64_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) {
        const T* b = B + j * K;
        T s = 0;
        if (!ta) {
          const T* ar = A + i * K;
          for (int64_t k = 0; k < K; ++k) s += ar[k] * b[k];
        } else {
          for (int64_t k = 0; k < K; ++k) s += A[k * M + i] * b[k];
        }
        c[j] += s;
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](double x) {
    if (x < 0) throw NumericError("sqrt of negative value");
    return std::sqrt(x);
  }, [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary("gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
               [](double x, double) {
                 return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
               });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const DType dt = common_dtype("matmul", {&a, &b});
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const int ra = a.rank(), rb = b.rank();
  const int64_t M = trans_a ? sa[ra - 1] : sa[ra - 2];
  const int64_t Ka = trans_a ? sa[ra - 2] : sa[ra - 1];
  const int64_t Kb = trans_b ? sb[rb - 1] : sb[rb - 2];
  const int64_t N = trans_b ? sb[rb - 2] : sb[rb - 1];
  if (Ka != Kb)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
  const bool shared_b = rb == 2;
  Shape batch(sa.begin(), sa.end() - 2);
  if (!shared_b && Shape(sb.begin(), sb.end() - 2) != batch)
    throw ShapeError("matmul: batch dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
  const int64_t nb = shape_numel(batch);
  const int64_t K = Ka;
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);

  Buffer out = make_buffer(dt, static_cast<std::size_t>(nb * M * N));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const T* A = vals<T>(a).data();
    const T* B = vals<T>(b).data();
    T* C = buf<T>(out).data();
    for (int64_t i = 0; i < nb; ++i)
      gemm<T>(trans_a, trans_b, M, N, K, A + i * M * K, B + (shared_b ? 0 : i * K * N), C + i * M * N);
  });
  return make_result("matmul", out_shape, std::move(out), {a, b},
                     [a, b, trans_a, trans_b, nb, M, N, K, shared_b](const Buffer& g, std::span<Buffer*> gin) {
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const T* G = buf<T>(g).data();
                         const T* A = vals<T>(a).data();
                         const T* B = vals<T>(b).data();
                         for (int64_t i = 0; i < nb; ++i) {
                           const T* Gi = G + i * M * N;
                           const T* Ai = A + i * M * K;
                           const T* Bi = B + (shared_b ? 0 : i * K * N);
                           if (gin[0]) {
                             T* GA = buf<T>(*gin[0]).data() + i * M * K;
                             // dA = G op(B)^T, stored in A's orientation.
                             if (!trans_a)
                               gemm<T>(false, !trans_b, M, K, N, Gi, Bi, GA);
                             else
                               gemm<T>(trans_b, true, K, M, N, Bi, Gi, GA);
                           }
                           if (gin[1]) {
                             T* GB = buf<T>(*gin[1]).data() + (shared_b ? 0 : i * K * N);
                             if (!trans_b)
                               gemm<T>(!trans_a, false, K, N, M, Ai, Gi, GB);
                             else
                               gemm<T>(true, trans_a, N, K, M, Gi, Ai, GB);
                           }
                         }
                       });
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const DType dt = common_dtype("linear", {&x, &weight, &bias});
  if (weight.rank() != 2) throw ShapeError("linear: weight must be (out, in)");
  const int64_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.dim(-1) != in_f)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f))
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  const int64_t rows = x.numel() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Buffer out = make_buffer(dt, static_cast<std::size_t>(rows * out_f));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    T* Y = buf<T>(out).data();
    if (bias.defined()) {
      const auto& bv = vals<T>(bias);
      for (int64_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), Y + r * out_f);
    }
    gemm<T>(false, true, rows, out_f, in_f, vals<T>(x).data(), vals<T>(weight).data(), Y);
  });
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("linear", out_shape, std::move(out), inputs,
                     [x, weight, rows, in_f, out_f](const Buffer& g, std::span<Buffer*> gin) {
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const T* G = buf<T>(g).data();
                         if (gin[0])
                           gemm<T>(false, false, rows, in_f, out_f, G, vals<T>(weight).data(),
                                   buf<T>(*gin[0]).data());
                         if (gin[1])
                           gemm<T>(true, false, out_f, in_f, rows, G, vals<T>(x).data(),
                                   buf<T>(*gin[1]).data());
                         if (gin.size() > 2 && gin[2]) {
                           T* gb = buf<T>(*gin[2]).data();
                           for (int64_t r = 0; r < rows; ++r)
                             for (int64_t j = 0; j < out_f; ++j) gb[j] += G[r * out_f + j];
                         }
                       });
                     });
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
  common_dtype("reshape", {&a});
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_result("reshape", shape, a.buffer(), {a}, [](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    std::visit(
        [&](auto& dst) {
          using V = std::decay_t<decltype(dst)>;
          const auto& src = std::get<V>(g);
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        },
        *gin[0]);
  });
}

namespace {

// For each output flat index, the source flat index under a permutation.
std::vector<int64_t> permute_map(const Shape& in, const std::vector<int>& axes, Shape& out) {
  const std::size_t r = in.size();
  out.resize(r);
  auto in_st = contiguous_strides(in);
  std::vector<int64_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    st[i] = in_st[axes[i]];
  }
  const int64_t n = shape_numel(in);
  std::vector<int64_t> map(static_cast<std::size_t>(n));
  std::vector<int64_t> idx(r, 0);
  int64_t src = 0;
  for (int64_t o = 0; o < n; ++o) {
    map[o] = src;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      ++idx[d];
      src += st[d];
      if (idx[d] < out[d]) break;
      src -= st[d] * out[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const DType dt = common_dtype("permute", {&a});
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axes rank mismatch");
  std::vector<int> seen(r, 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= r || seen[ax]++) throw ShapeError("permute: axes are not a permutation");
  }
  Shape out_shape;
  auto map = std::make_shared<std::vector<int64_t>>(permute_map(a.shape(), axes, out_shape));
  Buffer out = make_buffer(dt, map->size());
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(a);
    auto& o = buf<T>(out);
    for (std::size_t i = 0; i < map->size(); ++i) o[i] = x[(*map)[i]];
  });
  return make_result("permute", out_shape, std::move(out), {a}, [map](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    visit_dtype(buffer_dtype(g), [&](auto tag) {
      using T = decltype(tag);
      const auto& go = buf<T>(g);
      auto& ga = buf<T>(*gin[0]);
      for (std::size_t i = 0; i < map->size(); ++i) ga[(*map)[i]] += go[i];
    });
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const DType dt = parts[0].dtype();
  const int r = parts[0].rank();
  axis = norm_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  std::vector<int64_t> extents;
  for (const auto& p : parts) {
    common_dtype("concat", {&parts[0], &p});
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.dim(i) != parts[0].dim(i))
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    extents.push_back(p.dim(axis));
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit sp = split_at(out_shape, axis);
  Buffer out = make_buffer(dt, static_cast<std::size_t>(shape_numel(out_shape)));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto& o = buf<T>(out);
    int64_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto& x = vals<T>(parts[k]);
      const int64_t chunk = extents[k] * sp.inner;
      for (int64_t q = 0; q < sp.outer; ++q)
        std::copy_n(x.begin() + q * chunk, chunk, o.begin() + q * sp.extent * sp.inner + offset);
      offset += chunk;
    }
  });
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat", out_shape, std::move(out), inputs,
                     [extents, sp](const Buffer& g, std::span<Buffer*> gin) {
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const auto& go = buf<T>(g);
                         int64_t offset = 0;
                         for (std::size_t k = 0; k < extents.size(); ++k) {
                           const int64_t chunk = extents[k] * sp.inner;
                           if (gin[k]) {
                             auto& ga = buf<T>(*gin[k]);
                             for (int64_t q = 0; q < sp.outer; ++q)
                               for (int64_t i = 0; i < chunk; ++i)
                                 ga[q * chunk + i] += go[q * sp.extent * sp.inner + offset + i];
                           }
                           offset += chunk;
                         }
                       });
                     });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t length) {
  axis = norm_axis(axis, a.rank(), "slice");
  if (start < 0 || length < 0 || start + length > a.dim(axis))
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for " + shape_str(a.shape()) + " axis " + std::to_string(axis));
  std::vector<int64_t> index(static_cast<std::size_t>(length));
  std::iota(index.begin(), index.end(), start);
  return gather(a, axis, index);
}

Tensor gather(const Tensor& a, int axis, const std::vector<int64_t>& index) {
  const DType dt = common_dtype("gather", {&a});
  axis = norm_axis(axis, a.rank(), "gather");
  const AxisSplit sp = split_at(a.shape(), axis);
  for (auto i : index) {
    if (i < 0 || i >= sp.extent)
      throw ShapeError("gather: index " + std::to_string(i) + " out of range for extent " +
                       std::to_string(sp.extent));
  }
  const int64_t m = static_cast<int64_t>(index.size());
  Shape out_shape = a.shape();
  out_shape[axis] = m;
  Buffer out = make_buffer(dt, static_cast<std::size_t>(sp.outer * m * sp.inner));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(a);
    auto& o = buf<T>(out);
    for (int64_t q = 0; q < sp.outer; ++q)
      for (int64_t j = 0; j < m; ++j)
        std::copy_n(x.begin() + (q * sp.extent + index[j]) * sp.inner, sp.inner,
                    o.begin() + (q * m + j) * sp.inner);
  });
  return make_result("gather", out_shape, std::move(out), {a},
                     [index, sp, m](const Buffer& g, std::span<Buffer*> gin) {
                       if (!gin[0]) return;
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const auto& go = buf<T>(g);
                         auto& ga = buf<T>(*gin[0]);
                         for (int64_t q = 0; q < sp.outer; ++q)
                           for (int64_t j = 0; j < m; ++j)
                             for (int64_t i = 0; i < sp.inner; ++i)
                               ga[(q * sp.extent + index[j]) * sp.inner + i] += go[(q * m + j) * sp.inner + i];
                       });
                     });
}

Tensor scatter_add(const Tensor& src, int axis, const std::vector<int64_t>& index, int64_t size) {
  const DType dt = common_dtype("scatter_add", {&src});
  axis = norm_axis(axis, src.rank(), "scatter_add");
  const AxisSplit sp = split_at(src.shape(), axis);
  const int64_t m = sp.extent;
  if (static_cast<int64_t>(index.size()) != m)
    throw ShapeError("scatter_add: " + std::to_string(index.size()) + " indices for extent " +
                     std::to_string(m));
  for (auto i : index) {
    if (i < 0 || i >= size) throw ShapeError("scatter_add: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = src.shape();
  out_shape[axis] = size;
  Buffer out = make_buffer(dt, static_cast<std::size_t>(sp.outer * size * sp.inner));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(src);
    auto& o = buf<T>(out);
    for (int64_t q = 0; q < sp.outer; ++q)
      for (int64_t j = 0; j < m; ++j)
        for (int64_t i = 0; i < sp.inner; ++i)
          o[(q * size + index[j]) * sp.inner + i] += x[(q * m + j) * sp.inner + i];
  });
  return make_result("scatter_add", out_shape, std::move(out), {src},
                     [index, sp, m, size](const Buffer& g, std::span<Buffer*> gin) {
                       if (!gin[0]) return;
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const auto& go = buf<T>(g);
                         auto& ga = buf<T>(*gin[0]);
                         for (int64_t q = 0; q < sp.outer; ++q)
                           for (int64_t j = 0; j < m; ++j)
                             for (int64_t i = 0; i < sp.inner; ++i)
                               ga[(q * m + j) * sp.inner + i] += go[(q * size + index[j]) * sp.inner + i];
                       });
                     });
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  std::vector<int> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reshape(sum(a, axes, false), {1});
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  const DType dt = common_dtype("sum", {&a});
  const int r = a.rank();
  std::vector<bool> reduce(r, false);
  for (int ax : axes) reduce[norm_axis(ax, r, "sum")] = true;
  Shape kept(r);
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    kept[i] = reduce[i] ? 1 : a.dim(i);
    if (!reduce[i] || keepdim) out_shape.push_back(kept[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  // Map every input element to its output slot.
  auto bc = std::make_shared<Broadcast>(broadcast_shapes("sum", a.shape(), kept));
  Buffer out = make_buffer(dt, static_cast<std::size_t>(shape_numel(kept)));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(a);
    auto& o = buf<T>(out);
    for_each_broadcast(*bc, [&](int64_t i, int64_t, int64_t q) { o[q] += x[i]; });
  });
  return make_result("sum", out_shape, std::move(out), {a}, [bc](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    visit_dtype(buffer_dtype(g), [&](auto tag) {
      using T = decltype(tag);
      const auto& go = buf<T>(g);
      auto& ga = buf<T>(*gin[0]);
      for_each_broadcast(*bc, [&](int64_t i, int64_t, int64_t q) { ga[i] += go[q]; });
    });
  });
}

Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  int64_t count = 1;
  for (int ax : axes) count *= a.dim(ax);
  return scale(sum(a, axes, keepdim), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions opt) {
  const DType dt = common_dtype("conv3d", {&x, &weight, &bias});
  if (x.rank() != 5 || weight.rank() != 5)
    throw ShapeError("conv3d: expected 5D input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(weight.shape()));
  const int64_t N = x.dim(0), Cin = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t Cout = weight.dim(0), Cg = weight.dim(1);
  const int64_t KD = weight.dim(2), KH = weight.dim(3), KW = weight.dim(4);
  const int64_t G = opt.groups;
  if (G < 1 || Cin % G || Cout % G || Cin / G != Cg)
    throw ShapeError("conv3d: input channels " + std::to_string(Cin) + " incompatible with weight " +
                     shape_str(weight.shape()) + " and groups " + std::to_string(G));
  if (KD % 2 == 0 || KH % 2 == 0 || KW % 2 == 0) throw ShapeError("conv3d: kernel extents must be odd");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()));
  const auto [dd, dh, dw] = opt.dilation;
  const int64_t pd = dd * (KD - 1) / 2, ph = dh * (KH - 1) / 2, pw = dw * (KW - 1) / 2;
  const int64_t plane = D * H * W;
  const int64_t cout_g = Cout / G;
  const bool pointwise = KD == 1 && KH == 1 && KW == 1;

  // Visits each (output row, input row) pair a tap touches; body(o_off, i_off, w0, w1)
  // covers output columns [w0, w1) of row o_off matched with input row i_off.
  auto for_each_tap_row = [=](int64_t kd, int64_t kh, int64_t kw, auto&& body) {
    const int64_t od_off = kd * dd - pd, oh_off = kh * dh - ph, ow_off = kw * dw - pw;
    const int64_t w0 = std::max<int64_t>(0, -ow_off), w1 = std::min<int64_t>(W, W - ow_off);
    if (w0 >= w1) return;
    for (int64_t od = std::max<int64_t>(0, -od_off); od < std::min<int64_t>(D, D - od_off); ++od)
      for (int64_t oh = std::max<int64_t>(0, -oh_off); oh < std::min<int64_t>(H, H - oh_off); ++oh)
        body((od * H + oh) * W, ((od + od_off) * H + (oh + oh_off)) * W + ow_off, w0, w1);
  };

  Buffer out = make_buffer(dt, static_cast<std::size_t>(N * Cout * plane));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const T* X = vals<T>(x).data();
    const T* Wt = vals<T>(weight).data();
    T* Y = buf<T>(out).data();
    if (pointwise && G == 1) {
      for (int64_t n = 0; n < N; ++n) {
        T* y = Y + n * Cout * plane;
        if (bias.defined()) {
          const auto& bv = vals<T>(bias);
          for (int64_t co = 0; co < Cout; ++co) std::fill_n(y + co * plane, plane, bv[co]);
        }
        gemm<T>(false, false, Cout, plane, Cin, Wt, X + n * Cin * plane, y);
      }
      return;
    }
    OMNI_PARALLEL_FOR(N * Cout * Cg * KD * KH * KW * plane)
    for (int64_t nc = 0; nc < N * Cout; ++nc) {
      const int64_t n = nc / Cout, co = nc % Cout, g = co / cout_g;
      T* y = Y + nc * plane;
      if (bias.defined()) std::fill_n(y, plane, vals<T>(bias)[co]);
      for (int64_t cl = 0; cl < Cg; ++cl) {
        const T* xin = X + (n * Cin + g * Cg + cl) * plane;
        const T* wk = Wt + (co * Cg + cl) * KD * KH * KW;
        for (int64_t kd = 0; kd < KD; ++kd)
          for (int64_t kh = 0; kh < KH; ++kh)
            for (int64_t kw = 0; kw < KW; ++kw) {
              const T wv = wk[(kd * KH + kh) * KW + kw];
              if (wv == T(0)) continue;
              for_each_tap_row(kd, kh, kw, [&](int64_t oo, int64_t io, int64_t w0, int64_t w1) {
                T* yr = y + oo;
                const T* xr = xin + io;
                for (int64_t w = w0; w < w1; ++w) yr[w] += wv * xr[w];
              });
            }
      }
    }
  });

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      "conv3d", Shape{N, Cout, D, H, W}, std::move(out), inputs,
      [=](const Buffer& g, std::span<Buffer*> gin) {
        visit_dtype(buffer_dtype(g), [&](auto tag) {
          using T = decltype(tag);
          const T* GY = buf<T>(g).data();
          const T* X = vals<T>(x).data();
          const T* Wt = vals<T>(weight).data();
          if (pointwise && G == 1) {
            for (int64_t n = 0; n < N; ++n) {
              const T* gy = GY + n * Cout * plane;
              if (gin[0]) gemm<T>(true, false, Cin, plane, Cout, Wt, gy, buf<T>(*gin[0]).data() + n * Cin * plane);
              if (gin[1]) gemm<T>(false, true, Cout, Cin, plane, gy, X + n * Cin * plane, buf<T>(*gin[1]).data());
            }
          } else {
            if (gin[0]) {
              T* GX = buf<T>(*gin[0]).data();
              OMNI_PARALLEL_FOR(N * Cout * Cg * KD * KH * KW * plane)
              for (int64_t nc = 0; nc < N * Cin; ++nc) {
                const int64_t n = nc / Cin, ci = nc % Cin, grp = ci / Cg, cl = ci % Cg;
                T* gx = GX + nc * plane;
                for (int64_t co = grp * cout_g; co < (grp + 1) * cout_g; ++co) {
                  const T* gy = GY + (n * Cout + co) * plane;
                  const T* wk = Wt + (co * Cg + cl) * KD * KH * KW;
                  for (int64_t kd = 0; kd < KD; ++kd)
                    for (int64_t kh = 0; kh < KH; ++kh)
                      for (int64_t kw = 0; kw < KW; ++kw) {
                        const T wv = wk[(kd * KH + kh) * KW + kw];
                        if (wv == T(0)) continue;
                        for_each_tap_row(kd, kh, kw, [&](int64_t oo, int64_t io, int64_t w0, int64_t w1) {
                          const T* gr = gy + oo;
                          T* xr = gx + io;
                          for (int64_t w = w0; w < w1; ++w) xr[w] += wv * gr[w];
                        });
                      }
                }
              }
            }
            if (gin[1]) {
              T* GW = buf<T>(*gin[1]).data();
              OMNI_PARALLEL_FOR(N * Cout * Cg * KD * KH * KW * plane)
              for (int64_t cc = 0; cc < Cout * Cg; ++cc) {
                const int64_t co = cc / Cg, cl = cc % Cg, grp = co / cout_g;
                T* gw = GW + cc * KD * KH * KW;
                for (int64_t kd = 0; kd < KD; ++kd)
                  for (int64_t kh = 0; kh < KH; ++kh)
                    for (int64_t kw = 0; kw < KW; ++kw) {
                      T s = 0;
                      for (int64_t n = 0; n < N; ++n) {
                        const T* gy = GY + (n * Cout + co) * plane;
                        const T* xin = X + (n * Cin + grp * Cg + cl) * plane;
                        for_each_tap_row(kd, kh, kw, [&](int64_t oo, int64_t io, int64_t w0, int64_t w1) {
                          const T* gr = gy + oo;
                          const T* xr = xin + io;
                          for (int64_t w = w0; w < w1; ++w) s += gr[w] * xr[w];
                        });
                      }
                      gw[(kd * KH + kh) * KW + kw] += s;
                    }
              }
            }
          }
          if (gin.size() > 2 && gin[2]) {
            T* gb = buf<T>(*gin[2]).data();
            for (int64_t n = 0; n < N; ++n)
              for (int64_t co = 0; co < Cout; ++co) {
                const T* gy = GY + (n * Cout + co) * plane;
                T s = 0;
                for (int64_t i = 0; i < plane; ++i) s += gy[i];
                gb[co] += s;
              }
          }
        });
      });
}

// ---------------------------------------------------------------------------

namespace {

Tensor softmax_impl(const char* op, const Tensor& a, const std::vector<std::uint8_t>* allowed) {
  const DType dt = common_dtype(op, {&a});
  const int64_t L = a.dim(-1);
  const int64_t rows = a.numel() / std::max<int64_t>(L, 1);
  if (allowed) {
    if (a.rank() < 2 || a.dim(-2) != L || static_cast<int64_t>(allowed->size()) != L * L)
      throw ShapeError("masked_softmax: scores " + shape_str(a.shape()) + " do not match an L x L mask");
    for (int64_t i = 0; i < L; ++i) {
      bool any = false;
      for (int64_t j = 0; j < L; ++j) any = any || (*allowed)[i * L + j];
      if (!any) throw ContractError("masked_softmax: row " + std::to_string(i) + " is fully masked");
    }
  }
  Buffer out = make_buffer(dt, static_cast<std::size_t>(a.numel()));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& x = vals<T>(a);
    auto& o = buf<T>(out);
    OMNI_PARALLEL_FOR(rows * L)
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * L;
      T* orow = o.data() + r * L;
      const std::uint8_t* mrow = allowed ? allowed->data() + (r % L) * L : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < L; ++j)
        if (!mrow || mrow[j]) mx = std::max(mx, xr[j]);
      T s = 0;
      for (int64_t j = 0; j < L; ++j) {
        orow[j] = (!mrow || mrow[j]) ? std::exp(xr[j] - mx) : T(0);
        s += orow[j];
      }
      for (int64_t j = 0; j < L; ++j) orow[j] /= s;
    }
  });
  Tensor result = make_result(op, a.shape(), std::move(out), {a}, nullptr);
  if (result.has_node()) {
    std::weak_ptr<detail::TensorImpl> weak_out = result.impl();
    const_cast<detail::Node*>(result.node())->backward = [weak_out, L, rows](const Buffer& g,
                                                                             std::span<Buffer*> gin) {
      if (!gin[0]) return;
      auto y_impl = weak_out.lock();
      visit_dtype(buffer_dtype(g), [&](auto tag) {
        using T = decltype(tag);
        const auto& go = buf<T>(g);
        const auto& y = buf<T>(y_impl->data);
        auto& ga = buf<T>(*gin[0]);
        OMNI_PARALLEL_FOR(rows * L)
        for (int64_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (int64_t j = 0; j < L; ++j) dot += go[r * L + j] * y[r * L + j];
          for (int64_t j = 0; j < L; ++j) ga[r * L + j] += y[r * L + j] * (go[r * L + j] - dot);
        }
      });
    };
  }
  return result;
}

}  // namespace

Tensor softmax(const Tensor& a) { return softmax_impl("softmax", a, nullptr); }

Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& allowed) {
  return softmax_impl("masked_softmax", a, &allowed);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const DType dt = common_dtype("layer_norm", {&x, &gamma, &beta});
  const int64_t C = x.dim(-1);
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("layer_norm: affine parameters do not match channel extent " + std::to_string(C));
  const int64_t rows = x.numel() / C;
  auto xhat = std::make_shared<Buffer>(make_buffer(dt, static_cast<std::size_t>(x.numel())));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  Buffer out = make_buffer(dt, static_cast<std::size_t>(x.numel()));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& xv = vals<T>(x);
    const auto& gv = vals<T>(gamma);
    const auto& bv = vals<T>(beta);
    auto& xh = buf<T>(*xhat);
    auto& o = buf<T>(out);
    OMNI_PARALLEL_FOR(rows * C)
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = xv.data() + r * C;
      double m = 0;
      for (int64_t c = 0; c < C; ++c) m += xr[c];
      m /= static_cast<double>(C);
      double var = 0;
      for (int64_t c = 0; c < C; ++c) var += (xr[c] - m) * (xr[c] - m);
      var /= static_cast<double>(C);
      const double rs = 1.0 / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (int64_t c = 0; c < C; ++c) {
        const T h = static_cast<T>((xr[c] - m) * rs);
        xh[r * C + c] = h;
        o[r * C + c] = h * gv[c] + bv[c];
      }
    }
  });
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [gamma, xhat, rstd, rows, C](const Buffer& g, std::span<Buffer*> gin) {
                       visit_dtype(buffer_dtype(g), [&](auto tag) {
                         using T = decltype(tag);
                         const auto& go = buf<T>(g);
                         const auto& xh = buf<T>(*xhat);
                         const auto& gv = vals<T>(gamma);
                         if (gin[0]) {
                           auto& gx = buf<T>(*gin[0]);
                           OMNI_PARALLEL_FOR(rows * C)
                           for (int64_t r = 0; r < rows; ++r) {
                             double m1 = 0, m2 = 0;
                             for (int64_t c = 0; c < C; ++c) {
                               const double d = go[r * C + c] * gv[c];
                               m1 += d;
                               m2 += d * xh[r * C + c];
                             }
                             m1 /= static_cast<double>(C);
                             m2 /= static_cast<double>(C);
                             for (int64_t c = 0; c < C; ++c) {
                               const double d = go[r * C + c] * gv[c];
                               gx[r * C + c] += static_cast<T>((*rstd)[r] * (d - m1 - xh[r * C + c] * m2));
                             }
                           }
                         }
                         if (gin[1] || gin[2]) {
                           for (int64_t r = 0; r < rows; ++r)
                             for (int64_t c = 0; c < C; ++c) {
                               if (gin[1]) buf<T>(*gin[1])[c] += go[r * C + c] * xh[r * C + c];
                               if (gin[2]) buf<T>(*gin[2])[c] += go[r * C + c];
                             }
                         }
                       });
                     });
}

Tensor resample(const Tensor& x, int axis, const ResampleMatrix& m) {
  const DType dt = common_dtype("resample", {&x});
  axis = norm_axis(axis, x.rank(), "resample");
  const AxisSplit sp = split_at(x.shape(), axis);
  if (sp.extent != m.in || static_cast<int64_t>(m.rows.size()) != m.out)
    throw ShapeError("resample: matrix " + std::to_string(m.out) + "x" + std::to_string(m.in) +
                     " does not match axis extent " + std::to_string(sp.extent));
  Shape out_shape = x.shape();
  out_shape[axis] = m.out;
  auto mat = std::make_shared<ResampleMatrix>(m);
  Buffer out = make_buffer(dt, static_cast<std::size_t>(sp.outer * m.out * sp.inner));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    const auto& xv = vals<T>(x);
    auto& o = buf<T>(out);
    OMNI_PARALLEL_FOR(sp.outer * m.out * sp.inner * 4)
    for (int64_t q = 0; q < sp.outer; ++q)
      for (int64_t r = 0; r < m.out; ++r) {
        T* orow = o.data() + (q * m.out + r) * sp.inner;
        for (const auto& [c, w] : m.rows[r]) {
          const T* xr = xv.data() + (q * m.in + c) * sp.inner;
          const T wt = static_cast<T>(w);
          for (int64_t i = 0; i < sp.inner; ++i) orow[i] += wt * xr[i];
        }
      }
  });
  return make_result("resample", out_shape, std::move(out), {x}, [mat, sp](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    visit_dtype(buffer_dtype(g), [&](auto tag) {
      using T = decltype(tag);
      const auto& go = buf<T>(g);
      auto& ga = buf<T>(*gin[0]);
      for (int64_t q = 0; q < sp.outer; ++q)
        for (int64_t r = 0; r < mat->out; ++r) {
          const T* grow = go.data() + (q * mat->out + r) * sp.inner;
          for (const auto& [c, w] : mat->rows[r]) {
            T* xr = ga.data() + (q * mat->in + c) * sp.inner;
            const T wt = static_cast<T>(w);
            for (int64_t i = 0; i < sp.inner; ++i) xr[i] += wt * grow[i];
          }
        }
    });
  });
}

}  // namespace omni::ops
