#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

/// One channel of a conv layer, written "layer:channel".
struct ChannelRef {
  std::string layer;
  int channel = 0;

  std::string str() const { return layer + ":" + std::to_string(channel); }
  static ChannelRef parse(const std::string& text);
  bool operator==(const ChannelRef&) const = default;
  auto operator<=>(const ChannelRef&) const = default;
};

/// Throws ConfigError unless `ref` names a channel of a conv layer.
void check_channel(const Model& model, const ChannelRef& ref);

/// Per-image squared Frobenius norm of every channel of a conv layer's
/// activation (the output of its ReLU when one follows). [N, C],
/// differentiable.
Tensor layer_energies(const Model& model, const Tensor& x, const std::string& layer);

/// Per-image squared norm of one channel's activation map. [N], differentiable.
Tensor channel_energy(const Model& model, const Tensor& x, const ChannelRef& ref);

/// Squared norm of the channel's activation map for a single image
/// ([C,H,W] or [1,C,H,W]).
double channel_activation(const Model& model, const Tensor& image, const ChannelRef& ref);

/// channel_activation of every image of the dataset, in order.
std::vector<double> channel_activations(const Model& model, const Dataset& data,
                                        const ChannelRef& ref, int batch = 128);

struct SynthOptions {
  int steps = 128;
  float lr = 0.05f;
  std::uint64_t seed = 0;
  int jitter = 2;     // largest circular shift in pixels per step; 0 disables
  bool clamp = true;  // keep iterates in [0,1]
};

struct SynthResult {
  Tensor image;  // [C,H,W]
  double initial_activation = 0.0;
  double final_activation = 0.0;
  int steps_run = 0;
  std::uint64_t seed = 0;
};

/// Gradient ascent on channel_activation from uniform noise in [0.4,0.6].
/// Each step jitters the image, normalizes the gradient to unit L2 norm
/// and clamps. The best unjittered iterate seen (the start included) is
/// returned.
SynthResult synth_featvis(const Model& model, const ChannelRef& ref, const SynthOptions& options);

struct TopKResult {
  std::vector<std::pair<std::size_t, double>> entries;  // (dataset index, activation)
};

/// Dataset images ranked by channel_activation, descending, ties by lower
/// index.
TopKResult natural_topk(const Model& model, const Dataset& data, const ChannelRef& ref,
                        std::size_t k);

/// Anisotropic total variation: sum of absolute differences between
/// vertically and horizontally adjacent pixels over all channels.
double total_variation(const Shape& image_shape, std::span<const float> pixels);
/// Expected total_variation of i.i.d. U[0,1] pixels (1/3 per adjacent pair).
double expected_noise_tv(const Shape& image_shape);
/// True when total variation exceeds `threshold` times that of uniform noise.
bool is_noisy(const Shape& image_shape, std::span<const float> pixels, double threshold = 0.9);

}  // namespace circuitlab
