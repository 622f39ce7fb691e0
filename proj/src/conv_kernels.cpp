#include "detail/conv_kernels.hpp"

#include <algorithm>
#include <vector>

namespace circuitlab::detail {

namespace {

// Output positions o in [0, out) whose input o*stride + k - pad lies in [0, in).
struct Span {
  int begin, end;
};

Span valid_range(int out, int in, int k, int stride, int pad) {
  int lo = pad - k;
  int begin = lo <= 0 ? 0 : (lo + stride - 1) / stride;
  int hi = in - 1 + pad - k;
  int end = hi < 0 ? 0 : hi / stride + 1;
  return {std::min(begin, out), std::clamp(end, 0, out)};
}

}  // namespace

void conv_forward(const ConvGeometry& g, const float* input, const float* kernel,
                  const float* bias, float* output) {
  const int plane_out = g.out_h * g.out_w;
  std::vector<double> acc(static_cast<std::size_t>(plane_out));
  for (int n = 0; n < g.batch; ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      std::fill(acc.begin(), acc.end(), bias ? static_cast<double>(bias[o]) : 0.0);
      for (int c = 0; c < g.in_channels; ++c) {
        const float* plane = input + (static_cast<std::size_t>(n) * g.in_channels + c) *
                                         g.in_h * g.in_w;
        const float* wk = kernel + (static_cast<std::size_t>(o) * g.in_channels + c) *
                                       g.kernel_h * g.kernel_w;
        for (int kh = 0; kh < g.kernel_h; ++kh) {
          Span rows = valid_range(g.out_h, g.in_h, kh, g.stride, g.padding);
          for (int kw = 0; kw < g.kernel_w; ++kw) {
            Span cols = valid_range(g.out_w, g.in_w, kw, g.stride, g.padding);
            const double w = wk[kh * g.kernel_w + kw];
            if (w == 0.0) continue;
            for (int i = rows.begin; i < rows.end; ++i) {
              const float* src = plane + static_cast<std::size_t>(i * g.stride + kh - g.padding) *
                                             g.in_w;
              double* dst = acc.data() + static_cast<std::size_t>(i) * g.out_w;
              const int off = kw - g.padding;
              if (g.stride == 1) {
                for (int j = cols.begin; j < cols.end; ++j) dst[j] += w * src[j + off];
              } else {
                for (int j = cols.begin; j < cols.end; ++j) dst[j] += w * src[j * g.stride + off];
              }
            }
          }
        }
      }
      float* out = output + (static_cast<std::size_t>(n) * g.out_channels + o) * plane_out;
      for (int i = 0; i < plane_out; ++i) out[i] = static_cast<float>(acc[i]);
    }
  }
}

void conv_backward_input(const ConvGeometry& g, const float* grad_out, const float* kernel,
                         float* grad_input) {
  const int plane_in = g.in_h * g.in_w;
  const int plane_out = g.out_h * g.out_w;
  std::vector<double> acc(static_cast<std::size_t>(plane_in));
  for (int n = 0; n < g.batch; ++n) {
    for (int c = 0; c < g.in_channels; ++c) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int o = 0; o < g.out_channels; ++o) {
        const float* gplane =
            grad_out + (static_cast<std::size_t>(n) * g.out_channels + o) * plane_out;
        const float* wk = kernel + (static_cast<std::size_t>(o) * g.in_channels + c) *
                                       g.kernel_h * g.kernel_w;
        for (int kh = 0; kh < g.kernel_h; ++kh) {
          Span rows = valid_range(g.out_h, g.in_h, kh, g.stride, g.padding);
          for (int kw = 0; kw < g.kernel_w; ++kw) {
            Span cols = valid_range(g.out_w, g.in_w, kw, g.stride, g.padding);
            const double w = wk[kh * g.kernel_w + kw];
            if (w == 0.0) continue;
            for (int i = rows.begin; i < rows.end; ++i) {
              const float* src = gplane + static_cast<std::size_t>(i) * g.out_w;
              double* dst = acc.data() +
                            static_cast<std::size_t>(i * g.stride + kh - g.padding) * g.in_w;
              const int off = kw - g.padding;
              if (g.stride == 1) {
                for (int j = cols.begin; j < cols.end; ++j) dst[j + off] += w * src[j];
              } else {
                for (int j = cols.begin; j < cols.end; ++j) dst[j * g.stride + off] += w * src[j];
              }
            }
          }
        }
      }
      float* out = grad_input + (static_cast<std::size_t>(n) * g.in_channels + c) * plane_in;
      for (int i = 0; i < plane_in; ++i) out[i] = static_cast<float>(acc[i]);
    }
  }
}

void conv_backward_kernel(const ConvGeometry& g, const float* input, const float* grad_out,
                          float* grad_kernel) {
  const int plane_in = g.in_h * g.in_w;
  const int plane_out = g.out_h * g.out_w;
  const int taps = g.kernel_h * g.kernel_w;
  std::vector<double> acc(static_cast<std::size_t>(g.out_channels) * g.in_channels * taps, 0.0);
  // Fixed n -> o -> c -> tap -> row order keeps the reduction deterministic.
  for (int n = 0; n < g.batch; ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      const float* gplane =
          grad_out + (static_cast<std::size_t>(n) * g.out_channels + o) * plane_out;
      for (int c = 0; c < g.in_channels; ++c) {
        const float* plane =
            input + (static_cast<std::size_t>(n) * g.in_channels + c) * plane_in;
        double* wacc = acc.data() + (static_cast<std::size_t>(o) * g.in_channels + c) * taps;
        for (int kh = 0; kh < g.kernel_h; ++kh) {
          Span rows = valid_range(g.out_h, g.in_h, kh, g.stride, g.padding);
          for (int kw = 0; kw < g.kernel_w; ++kw) {
            Span cols = valid_range(g.out_w, g.in_w, kw, g.stride, g.padding);
            const int off = kw - g.padding;
            double s0 = 0.0, s1 = 0.0;
            for (int i = rows.begin; i < rows.end; ++i) {
              const float* gr = gplane + static_cast<std::size_t>(i) * g.out_w;
              const float* xr =
                  plane + static_cast<std::size_t>(i * g.stride + kh - g.padding) * g.in_w;
              int j = cols.begin;
              if (g.stride == 1) {
                for (; j + 1 < cols.end; j += 2) {
                  s0 += static_cast<double>(gr[j]) * xr[j + off];
                  s1 += static_cast<double>(gr[j + 1]) * xr[j + 1 + off];
                }
                for (; j < cols.end; ++j) s0 += static_cast<double>(gr[j]) * xr[j + off];
              } else {
                for (; j < cols.end; ++j) {
                  s0 += static_cast<double>(gr[j]) * xr[j * g.stride + off];
                }
              }
            }
            wacc[kh * g.kernel_w + kw] += s0 + s1;
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) grad_kernel[i] = static_cast<float>(acc[i]);
}

}  // namespace circuitlab::detail
