#include "circuitlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "detail/conv_kernels.hpp"
#include "detail/graph.hpp"

namespace circuitlab {

using detail::make_result;

namespace {

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <class F>
std::vector<float> map_values(const Tensor& a, F f) {
  auto src = a.data();
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  return out;
}

template <class F>
std::vector<float> zip_values(const Tensor& a, const Tensor& b, F f) {
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

std::shared_ptr<const std::vector<float>> make_factor(const Tensor& a, float (*f)(float)) {
  auto factor = std::make_shared<std::vector<float>>(a.numel());
  auto src = a.data();
  for (std::size_t i = 0; i < src.size(); ++i) (*factor)[i] = f(src[i]);
  return factor;
}

IndexList make_index(std::vector<std::int32_t> v) {
  return std::make_shared<const std::vector<std::int32_t>>(std::move(v));
}

detail::ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, int stride,
                                   int padding) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ShapeError("conv2d: input and kernel must be rank 4, got " + shape_str(input) + " and " +
                     shape_str(kernel));
  }
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(input[1]) +
                     " != kernel channels " + std::to_string(kernel[1]));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  detail::ConvGeometry g{};
  g.batch = input[0];
  g.in_channels = input[1];
  g.in_h = input[2];
  g.in_w = input[3];
  g.out_channels = kernel[0];
  g.kernel_h = kernel[2];
  g.kernel_w = kernel[3];
  g.stride = stride;
  g.padding = padding;
  const int span_h = g.in_h + 2 * padding - g.kernel_h;
  const int span_w = g.in_w + 2 * padding - g.kernel_w;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ShapeError("conv2d: non-integer output size for input " + shape_str(input) +
                     ", kernel " + shape_str(kernel) + ", stride " + std::to_string(stride) +
                     ", padding " + std::to_string(padding));
  }
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return make_result("add", a.shape(), zip_values(a, b, [](float x, float y) { return x + y; }),
                     {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return make_result("sub", a.shape(), zip_values(a, b, [](float x, float y) { return x - y; }),
                     {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return make_result("mul", a.shape(), zip_values(a, b, [](float x, float y) { return x * y; }),
                     {a, b}, [a, b](const Tensor& g) {
                       return std::vector<Tensor>{mul(g, b), mul(g, a)};
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  return make_result("div", a.shape(), zip_values(a, b, [](float x, float y) { return x / y; }),
                     {a, b}, [a, b](const Tensor& g) {
                       return std::vector<Tensor>{div(g, b), neg(div(mul(g, a), mul(b, b)))};
                     });
}

Tensor neg(const Tensor& a) {
  return make_result("neg", a.shape(), map_values(a, [](float x) { return -x; }), {a},
                     [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, float factor) {
  return make_result("scale", a.shape(), map_values(a, [factor](float x) { return x * factor; }),
                     {a},
                     [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& a, float offset) {
  return make_result("add_scalar", a.shape(),
                     map_values(a, [offset](float x) { return x + offset; }), {a},
                     [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor log(const Tensor& a) {
  for (float v : a.data()) {
    if (!(v > 0.0f)) throw NumericError("log of non-positive value");
  }
  return make_result("log", a.shape(), map_values(a, [](float x) { return std::log(x); }), {a},
                     [a](const Tensor& g) { return std::vector<Tensor>{div(g, a)}; });
}

Tensor mul_const(const Tensor& a, std::shared_ptr<const std::vector<float>> factor) {
  if (factor->size() != a.numel()) throw ShapeError("mul_const: factor length mismatch");
  auto src = a.data();
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = src[i] * (*factor)[i];
  return make_result("mul_const", a.shape(), std::move(out), {a}, [factor](const Tensor& g) {
    return std::vector<Tensor>{mul_const(g, factor)};
  });
}

Tensor relu(const Tensor& a) {
  auto mask = make_factor(a, [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
  return make_result("relu", a.shape(), map_values(a, [](float x) { return x > 0.0f ? x : 0.0f; }),
                     {a}, [mask](const Tensor& g) {
                       return std::vector<Tensor>{mul_const(g, mask)};
                     });
}

Tensor abs(const Tensor& a) {
  auto sign = make_factor(a, [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
  return make_result("abs", a.shape(), map_values(a, [](float x) { return std::fabs(x); }), {a},
                     [sign](const Tensor& g) { return std::vector<Tensor>{mul_const(g, sign)}; });
}

Tensor clamp_min(const Tensor& a, float floor) {
  auto mask = std::make_shared<std::vector<float>>(a.numel());
  auto src = a.data();
  for (std::size_t i = 0; i < src.size(); ++i) (*mask)[i] = src[i] > floor ? 1.0f : 0.0f;
  std::shared_ptr<const std::vector<float>> frozen = mask;
  return make_result("clamp_min", a.shape(),
                     map_values(a, [floor](float x) { return x > floor ? x : floor; }), {a},
                     [frozen](const Tensor& g) {
                       return std::vector<Tensor>{mul_const(g, frozen)};
                     });
}

// ---------------------------------------------------------------------------
// Re-indexing

Tensor gather(const Tensor& a, IndexList index, Shape out_shape) {
  if (index->size() != shape_numel(out_shape)) throw ShapeError("gather: index length mismatch");
  auto src = a.data();
  std::vector<float> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::int32_t k = (*index)[i];
    if (k >= static_cast<std::int32_t>(src.size())) throw ShapeError("gather: index out of range");
    out[i] = k < 0 ? 0.0f : src[static_cast<std::size_t>(k)];
  }
  Shape in_shape = a.shape();
  return make_result("gather", std::move(out_shape), std::move(out), {a},
                     [index, in_shape](const Tensor& g) {
                       return std::vector<Tensor>{scatter_add(g, index, in_shape)};
                     });
}

Tensor scatter_add(const Tensor& a, IndexList index, Shape out_shape) {
  if (index->size() != a.numel()) throw ShapeError("scatter_add: index length mismatch");
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> acc(n, 0.0);
  auto src = a.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::int32_t k = (*index)[i];
    if (k < 0) continue;
    if (static_cast<std::size_t>(k) >= n) throw ShapeError("scatter_add: index out of range");
    acc[static_cast<std::size_t>(k)] += src[i];
  }
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i]);
  Shape in_shape = a.shape();
  return make_result("scatter_add", std::move(out_shape), std::move(out), {a},
                     [index, in_shape](const Tensor& g) {
                       return std::vector<Tensor>{gather(g, index, in_shape)};
                     });
}

Tensor sum(const Tensor& a) {
  return scatter_add(a, make_index(std::vector<std::int32_t>(a.numel(), 0)), {1});
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto src = a.data();
  Shape in_shape = a.shape();
  return make_result("reshape", std::move(shape), std::vector<float>(src.begin(), src.end()), {a},
                     [in_shape](const Tensor& g) {
                       return std::vector<Tensor>{reshape(g, in_shape)};
                     });
}

Tensor select_channel(const Tensor& a, int channel) {
  require_rank("select_channel", a, 4);
  const int n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
  if (channel < 0 || channel >= c) {
    throw ShapeError("select_channel: channel " + std::to_string(channel) + " out of range");
  }
  std::vector<std::int32_t> idx(static_cast<std::size_t>(n) * plane);
  for (int b = 0; b < n; ++b) {
    for (int p = 0; p < plane; ++p) {
      idx[static_cast<std::size_t>(b) * plane + p] = (b * c + channel) * plane + p;
    }
  }
  return gather(a, make_index(std::move(idx)), {n, 1, a.dim(2), a.dim(3)});
}

namespace {
std::vector<std::int32_t> channel_of_each(const Shape& s) {
  const int n = s[0], c = s[1], plane = s[2] * s[3];
  std::vector<std::int32_t> idx(shape_numel(s));
  std::size_t i = 0;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int p = 0; p < plane; ++p) idx[i++] = ch;
    }
  }
  return idx;
}
}  // namespace

Tensor channel_sum(const Tensor& a) {
  require_rank("channel_sum", a, 4);
  return scatter_add(a, make_index(channel_of_each(a.shape())), {a.dim(1)});
}

Tensor channel_expand(const Tensor& a, const Shape& shape) {
  if (a.rank() != 1 || shape.size() != 4 || shape[1] != a.dim(0)) {
    throw ShapeError("channel_expand: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return gather(a, make_index(channel_of_each(shape)), shape);
}

Tensor row_mean(const Tensor& a) {
  if (a.rank() < 1 || a.dim(0) == 0) throw ShapeError("row_mean: empty leading axis");
  const int rows = a.dim(0);
  const std::size_t per_row = a.numel() / static_cast<std::size_t>(rows);
  if (per_row == 0) throw ShapeError("row_mean: empty rows");
  std::vector<std::int32_t> idx(a.numel());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int32_t>(i / per_row);
  return scale(scatter_add(a, make_index(std::move(idx)), {rows}),
               1.0f / static_cast<float>(per_row));
}

Tensor index_select(const Tensor& a, const std::vector<int>& index) {
  require_rank("index_select", a, 1);
  std::vector<std::int32_t> idx(index.begin(), index.end());
  for (auto k : idx) {
    if (k < 0 || k >= a.dim(0)) throw ShapeError("index_select: index out of range");
  }
  return gather(a, make_index(std::move(idx)), {static_cast<int>(index.size())});
}

// ---------------------------------------------------------------------------
// Layers

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  auto g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(g.out_channels) + " output channels");
  }
  std::vector<float> out(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_h * g.out_w);
  detail::conv_forward(g, input.data().data(), kernel.data().data(),
                       bias.defined() ? bias.data().data() : nullptr, out.data());
  Shape in_shape = input.shape();
  Shape k_shape = kernel.shape();
  return make_result("conv2d", {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out),
                     {input, kernel, bias},
                     [input, kernel, bias, in_shape, k_shape, stride, padding](const Tensor& go) {
                       std::vector<Tensor> r(3);
                       if (input.requires_grad()) {
                         r[0] = conv2d_input_grad(go, kernel, in_shape, stride, padding);
                       }
                       if (kernel.requires_grad()) {
                         r[1] = conv2d_weight_grad(input, go, k_shape, stride, padding);
                       }
                       if (bias.defined() && bias.requires_grad()) r[2] = channel_sum(go);
                       return r;
                     });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         int stride, int padding) {
  auto g = conv_geometry(input_shape, kernel.shape(), stride, padding);
  Shape expect{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw ShapeError("conv2d_input_grad: grad shape " + shape_str(grad_out.shape()) +
                     " expected " + shape_str(expect));
  }
  std::vector<float> out(shape_numel(input_shape));
  detail::conv_backward_input(g, grad_out.data().data(), kernel.data().data(), out.data());
  Shape k_shape = kernel.shape();
  return make_result("conv2d_input_grad", input_shape, std::move(out), {grad_out, kernel},
                     [grad_out, kernel, k_shape, stride, padding](const Tensor& u) {
                       std::vector<Tensor> r(2);
                       if (grad_out.requires_grad()) r[0] = conv2d(u, kernel, Tensor(), stride, padding);
                       if (kernel.requires_grad()) {
                         r[1] = conv2d_weight_grad(u, grad_out, k_shape, stride, padding);
                       }
                       return r;
                     });
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          int stride, int padding) {
  auto g = conv_geometry(input.shape(), kernel_shape, stride, padding);
  Shape expect{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw ShapeError("conv2d_weight_grad: grad shape " + shape_str(grad_out.shape()) +
                     " expected " + shape_str(expect));
  }
  std::vector<float> out(shape_numel(kernel_shape));
  detail::conv_backward_kernel(g, input.data().data(), grad_out.data().data(), out.data());
  Shape in_shape = input.shape();
  return make_result("conv2d_weight_grad", kernel_shape, std::move(out), {input, grad_out},
                     [input, grad_out, in_shape, stride, padding](const Tensor& u) {
                       std::vector<Tensor> r(2);
                       if (input.requires_grad()) {
                         r[0] = conv2d_input_grad(grad_out, u, in_shape, stride, padding);
                       }
                       if (grad_out.requires_grad()) r[1] = conv2d(input, u, Tensor(), stride, padding);
                       return r;
                     });
}

Tensor maxpool2d(const Tensor& input, int window, int stride) {
  require_rank("maxpool2d", input, 4);
  if (window < 1 || stride < 1) throw ShapeError("maxpool2d: window and stride must be >= 1");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + "/stride " +
                     std::to_string(stride) + " does not tile " + shape_str(input.shape()));
  }
  const int oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  auto src = input.data();
  std::vector<std::int32_t> idx(static_cast<std::size_t>(n) * c * oh * ow);
  std::size_t o = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        std::size_t best = base + static_cast<std::size_t>(i * stride) * w + j * stride;
        float best_v = src[best];
        for (int di = 0; di < window; ++di) {
          for (int dj = 0; dj < window; ++dj) {
            if (di == 0 && dj == 0) continue;
            const std::size_t k = base + static_cast<std::size_t>(i * stride + di) * w + j * stride + dj;
            if (src[k] > best_v) {
              best_v = src[k];
              best = k;
            }
          }
        }
        idx[o++] = static_cast<std::int32_t>(best);
      }
    }
  }
  return gather(input, make_index(std::move(idx)), {n, c, oh, ow});
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", input, 2);
  require_rank("linear", weight, 2);
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input features " + std::to_string(input.dim(1)) +
                     " != weight features " + std::to_string(weight.dim(1)));
  }
  const int n = input.dim(0), d = input.dim(1), o = weight.dim(0);
  Tensor y = conv2d(reshape(input, {n, d, 1, 1}), reshape(weight, {o, d, 1, 1}), bias, 1, 0);
  return reshape(y, {n, o});
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank("softmax_rows", logits, 2);
  const int n = logits.dim(0), k = logits.dim(1);
  auto z = logits.data();
  std::vector<float> out(z.size());
  for (int r = 0; r < n; ++r) {
    const float* row = z.data() + static_cast<std::size_t>(r) * k;
    const float m = *std::max_element(row, row + k);
    double total = 0.0;
    for (int j = 0; j < k; ++j) total += std::exp(static_cast<double>(row[j]) - m);
    for (int j = 0; j < k; ++j) {
      out[static_cast<std::size_t>(r) * k + j] =
          static_cast<float>(std::exp(static_cast<double>(row[j]) - m) / total);
    }
  }
  return Tensor::from_data(logits.shape(), std::move(out));
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target_probs) {
  require_rank("softmax_cross_entropy", logits, 2);
  require_same_shape("softmax_cross_entropy", logits, target_probs);
  const int n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw ShapeError("softmax_cross_entropy: need at least 2 classes");
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto z = logits.data();
  auto t = target_probs.data();
  std::vector<double> log_sm(z.size());
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * k;
    double tsum = 0.0;
    for (int j = 0; j < k; ++j) tsum += t[off + j];
    if (std::fabs(tsum - 1.0) > 1e-5) {
      throw NumericError("softmax_cross_entropy: target row " + std::to_string(r) +
                         " sums to " + std::to_string(tsum));
    }
    const double m = *std::max_element(z.begin() + off, z.begin() + off + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(z[off + j] - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < k; ++j) {
      log_sm[off + j] = z[off + j] - lse;
      total -= t[off + j] * log_sm[off + j];
    }
  }
  auto saved = std::make_shared<const std::vector<double>>(std::move(log_sm));
  Shape shape = logits.shape();
  return make_result(
      "softmax_cross_entropy", {1}, {static_cast<float>(total / n)}, {logits, target_probs},
      [saved, target_probs, shape, n](const Tensor& g) {
        if (grad_enabled()) {
          throw TapeError("softmax_cross_entropy does not support higher-order gradients");
        }
        const double scale_by = static_cast<double>(g.item()) / n;
        auto t = target_probs.data();
        std::vector<float> gl(saved->size()), gt(saved->size());
        for (std::size_t i = 0; i < saved->size(); ++i) {
          gl[i] = static_cast<float>(scale_by * (std::exp((*saved)[i]) - t[i]));
          gt[i] = static_cast<float>(-scale_by * (*saved)[i]);
        }
        return std::vector<Tensor>{Tensor::from_data(shape, std::move(gl)),
                                   Tensor::from_data(shape, std::move(gt))};
      });
}

}  // namespace circuitlab
