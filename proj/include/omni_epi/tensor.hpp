// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode differentiation.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace omni {

// ---------------------------------------------------------------------------
// Errors. Each carries the process exit code the CLI maps it to.

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Violated precondition or invariant of an operation.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, 1) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what, 1) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 3) {}
};

/// Bad configuration value or key; user input.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, 2) {}
};

// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Calls fn(float{}) or fn(double{}) according to the runtime dtype.
template <class Fn>
decltype(auto) visit_dtype(DType dt, Fn&& fn) {
  if (dt == DType::F32) return fn(float{});
  return fn(double{});
}

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

Buffer make_buffer(DType dt, std::size_t n);
DType buffer_dtype(const Buffer& b);
std::size_t buffer_size(const Buffer& b);

template <class T>
std::vector<T>& buf(Buffer& b) {
  return std::get<std::vector<T>>(b);
}
template <class T>
const std::vector<T>& buf(const Buffer& b) {
  return std::get<std::vector<T>>(b);
}

namespace detail {

struct TensorImpl;

/// Backward closure: receives the output gradient and one slot per input.
/// A slot is null when that input does not need a gradient.
using BackwardFn = std::function<void(const Buffer& grad_out, std::span<Buffer*> grad_in)>;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  std::unique_ptr<Buffer> grad;
  std::shared_ptr<Node> node;
  bool requires_grad = false;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dt);
  static Tensor full(const Shape& shape, double value, DType dt);
  static Tensor from_vector(const Shape& shape, const std::vector<double>& values, DType dt);
  static Tensor scalar(double value, DType dt) { return full({1}, value, dt); }
  /// Takes ownership of a buffer; its length must match the shape.
  static Tensor from_buffer(const Shape& shape, Buffer data);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    return std::span<const T>(buf<T>(impl_->data));
  }
  /// Mutable access for leaves (parameters, data) only; graph outputs are immutable.
  template <class T>
  std::span<T> mutable_data() {
    check_mutable();
    return std::span<T>(buf<T>(impl_->data));
  }
  const Buffer& buffer() const { return impl_->data; }
  Buffer& mutable_buffer() {
    check_mutable();
    return impl_->data;
  }

  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  /// Marks a leaf as trainable/differentiable.
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  /// Gradient as a detached tensor; zeros if none was accumulated.
  Tensor grad() const;
  Buffer* grad_buffer() const;
  void zero_grad();
  void clear_grad();

  bool is_leaf() const;
  bool has_node() const;
  const detail::Node* node() const;

  /// Shares nothing with the graph; deep copy of data.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  Tensor to(DType dt) const;

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  void check_mutable() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables graph recording in its scope (inference, EMA evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

/// Builds an op result. Records a node when any input requires a gradient
/// and recording is enabled.
Tensor make_result(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs,
                   BackwardFn backward);

/// Throws NumericError for non-finite values in 64-bit tensors.
void check_finite(const char* op, const Tensor& t);

}  // namespace detail

/// Reverse-mode pass from a scalar loss. Accumulates into leaf gradients and
/// releases the tape. Every tensor in `ensure` ends with a gradient buffer,
/// zero-filled when unreachable.
void backward(const Tensor& loss, std::span<Tensor> ensure = {});

/// Sets the thread count for op kernels (1 forces the deterministic path
/// used in tests; all kernels are deterministic regardless).
void set_num_threads(int n);
int num_threads();

}  // namespace omni
