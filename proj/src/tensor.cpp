#include "circuitlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "circuitlab/ops.hpp"
#include "detail/graph.hpp"

namespace circuitlab {

using detail::Access;
using detail::Node;
using detail::TensorImpl;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void check_finite(std::string_view name, const std::vector<float>& data) {
  for (float v : data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(name));
    }
  }
}

class GradModeScope {
 public:
  explicit GradModeScope(bool on) : previous_(t_grad_enabled) { t_grad_enabled = on; }
  ~GradModeScope() { t_grad_enabled = previous_; }

 private:
  bool previous_;
};

}  // namespace

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<float>(n, 0.0f)));
}

Tensor Tensor::full(Shape shape, float value) {
  std::size_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  check_finite("from_data", data);
  return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::rank() const { return impl_->shape.size(); }
std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const float> Tensor::data() const { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn) throw TapeError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (impl_->grad.empty()) throw TapeError("tensor has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data)); }

// ---------------------------------------------------------------------------

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }


// ---------------------------------------------------------------------------

namespace detail {

Tensor make_result(std::string_view name, Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(name, data);
  auto impl = new_impl(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      auto node = std::make_shared<Node>();
      node->name = name;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
      impl->requires_grad = true;
      impl->grad_fn = std::move(node);
    }
  }
  return Access::wrap(std::move(impl));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

// Post-order over recorded nodes reachable from root: inputs precede users.
std::vector<TensorImpl*> topological_order(TensorImpl* root) {
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* impl;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& top = stack.back();
    Node* node = top.impl->grad_fn.get();
    if (node == nullptr || top.next >= node->inputs.size()) {
      if (node != nullptr) order.push_back(top.impl);
      stack.pop_back();
      continue;
    }
    const Tensor& in = node->inputs[top.next++];
    if (!in.defined() || !in.requires_grad()) continue;
    TensorImpl* child = &Access::impl(in);
    if (child->grad_fn && child->grad_fn->consumed) {
      throw TapeError("recorded graph already consumed by an earlier backward pass");
    }
    if (visited.insert(child).second) stack.push_back({child, 0});
  }
  return order;
}

// Consuming moves the recorded inputs into `retained`: the returned map is
// keyed by address, so those tensors must outlive it.
std::unordered_map<TensorImpl*, Tensor> run_reverse(const Tensor& output, bool create_graph,
                                                    bool consume, std::vector<Tensor>& retained) {
  if (!output.defined()) throw TapeError("backward on undefined tensor");
  if (output.numel() != 1) {
    throw TapeError("backward requires a scalar, got shape " + shape_str(output.shape()));
  }
  if (!output.requires_grad()) throw TapeError("output does not require grad");

  TensorImpl* root = &Access::impl(output);
  if (root->grad_fn && root->grad_fn->consumed) {
    throw TapeError("recorded graph already consumed by an earlier backward pass");
  }

  GradModeScope mode(create_graph);
  std::unordered_map<TensorImpl*, Tensor> grads;
  grads[root] = Tensor::full(output.shape(), 1.0f);

  std::vector<TensorImpl*> order = topological_order(root);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    Node& node = *impl->grad_fn;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    std::vector<Tensor> in_grads = node.backward(found->second);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const Tensor& in = node.inputs[i];
      if (!in.defined() || !in.requires_grad() || i >= in_grads.size()) continue;
      const Tensor& g = in_grads[i];
      if (!g.defined()) continue;
      if (g.shape() != in.shape()) {
        throw ShapeError(std::string("gradient shape mismatch in ") + std::string(node.name));
      }
      TensorImpl* key = &Access::impl(in);
      auto slot = grads.find(key);
      if (slot == grads.end()) {
        grads.emplace(key, g);
      } else {
        slot->second = add(slot->second, g);
      }
    }
  }

  if (consume) {
    for (TensorImpl* impl : order) {
      Node& node = *impl->grad_fn;
      node.consumed = true;
      for (Tensor& t : node.inputs) retained.push_back(std::move(t));
      node.inputs.clear();
      node.backward = nullptr;
    }
  }
  return grads;
}

}  // namespace

void backward(const Tensor& loss) {
  std::vector<Tensor> retained;
  auto grads = run_reverse(loss, false, true, retained);
  for (auto& [impl, g] : grads) {
    if (impl->grad_fn || !impl->requires_grad) continue;
    auto src = g.data();
    if (impl->grad.empty()) {
      impl->grad.assign(src.begin(), src.end());
    } else {
      for (std::size_t i = 0; i < src.size(); ++i) impl->grad[i] += src[i];
    }
  }
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph) {
  std::vector<Tensor> retained;
  auto grads = run_reverse(output, create_graph, !create_graph, retained);
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    auto found = grads.find(&Access::impl(in));
    if (found == grads.end()) {
      result.push_back(Tensor::zeros(in.shape()));
    } else {
      result.push_back(found->second);
    }
  }
  return result;
}

}  // namespace circuitlab
