#pragma once

#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "circuitlab/tensor.hpp"

namespace circuitlab::detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

// One recorded primitive. Holds its inputs; the output holds the node.
struct Node {
  std::string_view name;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until the first accumulation
  std::shared_ptr<Node> grad_fn;
};

struct Access {
  static TensorImpl& impl(const Tensor& t) { return *t.impl_; }
  static const std::shared_ptr<TensorImpl>& ptr(const Tensor& t) { return t.impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
};

/// Builds an op output. Records a node when grad mode is on and any input
/// requires grad. Throws NumericError on non-finite output.
Tensor make_result(std::string_view name, Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace circuitlab::detail
