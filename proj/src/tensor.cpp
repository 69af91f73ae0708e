// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace omni {

const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

Buffer make_buffer(DType dt, std::size_t n) {
  if (dt == DType::F32) return Buffer(std::in_place_type<std::vector<float>>, n, 0.0f);
  return Buffer(std::in_place_type<std::vector<double>>, n, 0.0);
}

DType buffer_dtype(const Buffer& b) { return b.index() == 0 ? DType::F32 : DType::F64; }

std::size_t buffer_size(const Buffer& b) {
  return std::visit([](const auto& v) { return v.size(); }, b);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, DType dt) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data = make_buffer(dt, static_cast<std::size_t>(shape_numel(shape)));
  return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  Tensor t = zeros(shape, dt);
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto& v = buf<T>(t.impl_->data);
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, const std::vector<double>& values, DType dt) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("from_vector: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  Tensor t = zeros(shape, dt);
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto& v = buf<T>(t.impl_->data);
    for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_buffer(const Shape& shape, Buffer data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(buffer_size(data)))
    throw ShapeError("from_buffer: " + std::to_string(buffer_size(data)) +
                     " values for shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(buffer_size(impl_->data)); }

DType Tensor::dtype() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return buffer_dtype(impl_->data);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    impl_->data);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return std::visit([](const auto& v) { return static_cast<double>(v[0]); }, impl_->data);
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at(): rank mismatch for " + shape_str(s));
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("at(): index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return std::visit([flat](const auto& v) { return static_cast<double>(v[flat]); }, impl_->data);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->node) throw ContractError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

Tensor Tensor::grad() const {
  if (!impl_->grad) return zeros(shape(), dtype());
  return from_buffer(shape(), *impl_->grad);
}

Buffer* Tensor::grad_buffer() const { return impl_->grad.get(); }

void Tensor::zero_grad() {
  if (!impl_->grad)
    impl_->grad = std::make_unique<Buffer>(make_buffer(dtype(), static_cast<std::size_t>(numel())));
  else
    std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, *impl_->grad);
}

void Tensor::clear_grad() { impl_->grad.reset(); }

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }
bool Tensor::has_node() const { return impl_ && impl_->node != nullptr; }
const detail::Node* Tensor::node() const { return impl_ ? impl_->node.get() : nullptr; }

Tensor Tensor::detach() const { return from_buffer(shape(), impl_->data); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return detach();
  return from_vector(shape(), to_vector(), dt);
}

void Tensor::check_mutable() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  if (impl_->node) throw ContractError("graph outputs are immutable");
}

// ---------------------------------------------------------------------------

namespace detail {

void check_finite(const char* op, const Tensor& t) {
  if (t.dtype() != DType::F64) return;
  for (double v : buf<double>(t.impl()->data)) {
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": non-finite input value " + std::to_string(v));
  }
}

Tensor make_result(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  Tensor out = Tensor::from_buffer(shape, std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad() || t.has_node();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  return out;
}

namespace {

bool needs_grad(const TensorImpl& t) { return t.requires_grad || t.node != nullptr; }

void add_into(Buffer& dst, const Buffer& src) {
  std::visit(
      [&](auto& d) {
        using V = std::decay_t<decltype(d)>;
        const auto& s = std::get<V>(src);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
      },
      dst);
}

}  // namespace
}  // namespace detail

void backward(const Tensor& loss, std::span<Tensor> ensure) {
  using detail::TensorImpl;
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.has_node() && !loss.requires_grad())
    throw ContractError("backward: loss is not connected to any differentiable input");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (detail::needs_grad(*child) && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  // Intermediate gradients live only for the duration of this pass.
  std::unordered_map<TensorImpl*, Buffer> inter;
  auto slot_for = [&](TensorImpl* t) -> Buffer* {
    if (!t->node) {
      if (!t->grad) t->grad = std::make_unique<Buffer>(make_buffer(buffer_dtype(t->data), buffer_size(t->data)));
      return t->grad.get();
    }
    auto it = inter.find(t);
    if (it == inter.end())
      it = inter.emplace(t, make_buffer(buffer_dtype(t->data), buffer_size(t->data))).first;
    return &it->second;
  };

  {
    Buffer seed = make_buffer(loss.dtype(), 1);
    std::visit([](auto& v) { v[0] = 1; }, seed);
    if (loss.has_node()) {
      inter.emplace(loss.impl().get(), std::move(seed));
    } else {
      detail::add_into(*slot_for(loss.impl().get()), seed);
    }
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node) continue;
    auto g = inter.find(t);
    if (g == inter.end()) continue;
    const auto& node = *t->node;
    std::vector<Buffer*> slots(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (detail::needs_grad(*node.inputs[i])) slots[i] = slot_for(node.inputs[i].get());
    }
    node.backward(g->second, std::span<Buffer*>(slots));
    inter.erase(g);
  }

  // Tape is discarded once the pass completes.
  for (TensorImpl* t : order) t->node.reset();

  for (auto& p : ensure) {
    if (!p.has_grad()) p.zero_grad();
  }
}

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace omni
