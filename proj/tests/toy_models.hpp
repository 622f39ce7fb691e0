#pragma once

// Small networks and brute-force rank statistics shared by the tests.

#include <cmath>
#include <string>
#include <vector>

#include "circuitlab/model.hpp"
#include "circuitlab/random.hpp"

namespace circuitlab::testing {

inline LayerSpec conv_spec(std::string name, int out, int kernel, int padding) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.out_channels = out;
  l.kernel = kernel;
  l.padding = padding;
  return l;
}

inline LayerSpec relu_spec(std::string name) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::relu;
  return l;
}

inline LayerSpec pool_spec(std::string name) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::maxpool;
  l.window = l.stride = 2;
  return l;
}

inline LayerSpec flatten_spec(std::string name) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::flatten;
  return l;
}

inline LayerSpec linear_spec(std::string name, int out) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::linear;
  l.out_features = out;
  return l;
}

/// conv1(c1) -> relu -> conv2(c2) -> relu on [3,s,s] inputs, with small
/// random biases so ReLUs are not all balanced on zero.
inline Model two_conv_net(std::uint64_t seed, int c1 = 6, int c2 = 4, int size = 6,
                          bool with_head = false, int classes = 3) {
  std::vector<LayerSpec> layers = {conv_spec("conv1", c1, 3, 1), relu_spec("relu1"),
                                   conv_spec("conv2", c2, 3, 1), relu_spec("relu2")};
  if (with_head) {
    layers.push_back(flatten_spec("flatten"));
    layers.push_back(linear_spec("fc", classes));
  }
  Model m = build_model(layers, {3, size, size}, with_head ? classes : 0, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (auto& [name, p] : m.params.entries) {
    std::vector<float> b(p.bias.numel());
    for (float& v : b) v = static_cast<float>(rng.uniform(-0.1, 0.3));
    p.bias = Tensor::from_data(p.bias.shape(), b);
  }
  return m;
}

/// O(n^2) Kendall tau-b by pair enumeration.
inline double brute_kendall(const std::vector<double>& a, const std::vector<double>& b) {
  long long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0 && db == 0) {
        ++ties_a;
        ++ties_b;
      } else if (da == 0) {
        ++ties_a;
      } else if (db == 0) {
        ++ties_b;
      } else if ((da > 0) == (db > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  const double pairs = static_cast<double>(n) * (n - 1) / 2.0;
  const double denom = std::sqrt((pairs - ties_a) * (pairs - ties_b));
  return static_cast<double>(concordant - discordant) / denom;
}

}  // namespace circuitlab::testing
