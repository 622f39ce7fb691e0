#pragma once

// Raw NCHW convolution kernels. All accumulation is in double; results are
// rounded to float once.

namespace circuitlab::detail {

struct ConvGeometry {
  int batch, in_channels, in_h, in_w;
  int out_channels, kernel_h, kernel_w;
  int stride, padding;
  int out_h, out_w;
};

void conv_forward(const ConvGeometry& g, const float* input, const float* kernel,
                  const float* bias, float* output);
void conv_backward_input(const ConvGeometry& g, const float* grad_out, const float* kernel,
                         float* grad_input);
void conv_backward_kernel(const ConvGeometry& g, const float* input, const float* grad_out,
                          float* grad_kernel);

}  // namespace circuitlab::detail
