#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "circuitlab/errors.hpp"

namespace circuitlab {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
struct Access;
}  // namespace detail

/// Dense row-major float32 array with reverse-mode gradient support.
///
/// Copies share storage. The data of a tensor never changes after
/// construction; only the gradient buffer of a leaf is written, and only by
/// `backward`. Tensors produced by an op while grad mode is on and at least
/// one input requires grad carry a reference to the recorded op.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> data);
  static Tensor scalar(float value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(std::size_t axis) const;
  std::size_t rank() const;
  std::size_t numel() const;
  std::span<const float> data() const;
  float operator[](std::size_t i) const { return data()[i]; }
  float item() const;

  bool requires_grad() const;
  /// Leaves only.
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  /// Fresh leaf with a copy of the data and no history.
  Tensor detach() const;

  /// Identity of the underlying storage (copies compare equal).
  bool same_as(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  friend struct detail::Access;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Grad mode

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// The recorded graph is consumed: a second call on any part of it throws
/// TapeError.
void backward(const Tensor& loss);

/// Gradients of a scalar `output` with respect to `inputs`, returned rather
/// than accumulated. With `create_graph` the returned tensors are themselves
/// differentiable and the graph is kept alive for a later `backward`;
/// otherwise the graph is consumed. Inputs that do not influence `output`
/// get a zero tensor.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph = false);


}  // namespace circuitlab
