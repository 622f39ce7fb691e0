#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/tensor.hpp"

namespace circuitlab {

enum class LayerKind { conv, relu, maxpool, flatten, linear };

std::string layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  int out_channels = 0;  // conv
  int kernel = 0;        // conv (square)
  int stride = 1;        // conv, maxpool
  int padding = 0;       // conv
  int window = 0;        // maxpool
  int out_features = 0;  // linear
};

struct LayerParams {
  Tensor kernel;  // conv [Cout,Cin,K,K]; linear [O,D]
  Tensor bias;    // [Cout] / [O]
};

/// Parameters keyed by layer name, kept in layer order.
struct ModelParams {
  Shape input_shape;  // [C,H,W]
  int class_count = 0;
  std::vector<std::pair<std::string, LayerParams>> entries;

  const LayerParams& at(const std::string& layer) const;
  LayerParams& at(const std::string& layer);
  bool contains(const std::string& layer) const;
  std::size_t parameter_count() const;
  /// Copy whose tensors are fresh leaves that require grad.
  ModelParams trainable() const;
  /// Copy whose tensors are fresh leaves without history.
  ModelParams detached() const;
  bool bit_equal(const ModelParams& other) const;
};

struct Model {
  std::vector<LayerSpec> layers;
  ModelParams params;

  const LayerSpec& layer(const std::string& name) const;
  std::size_t layer_index(const std::string& name) const;
  std::vector<std::string> conv_layers() const;
  /// Output channel count of a conv layer.
  int width(const std::string& conv_layer) const;
  /// Layer whose output is the activation of `conv_layer`: the ReLU that
  /// directly follows it, or the conv itself.
  std::string activation_layer(const std::string& conv_layer) const;
  /// Output shape (without batch axis) of every layer.
  std::vector<Shape> output_shapes() const;
  /// Model sharing these layers with different parameters.
  Model with_params(ModelParams p) const;
};

/// Type-checks the layer list against the input shape and parameter
/// shapes. Throws ShapeError / ConfigError.
void validate(const Model& model);

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Model build_model(std::vector<LayerSpec> layers, Shape input_shape, int class_count,
                  std::uint64_t seed);

/// conv1..conv4 (16/32/32/32, 3x3, padding 1) each followed by ReLU, 2x2
/// max-pool after the first two, then flatten and a linear head.
Model build_mini_alexnet(Shape input_shape, int class_count, std::uint64_t seed);

using Activations = std::map<std::string, Tensor>;

/// Runs the layers in order up to and including `upto` ("end" for all).
/// Every layer's output is stored under the layer's name, so a conv entry
/// is the post-convolution map; the final output is also stored under
/// "logits" when the model is run to the end.
Activations forward_with_activations(const Model& model, const Tensor& x,
                                     const std::string& upto = "end");
Tensor forward(const Model& model, const Tensor& x);

struct TrainOptions {
  int epochs = 5;
  float lr = 0.01f;
  int batch = 64;
  std::uint64_t seed = 0;
  float momentum = 0.9f;
};

struct TrainResult {
  Model model;
  double held_out_accuracy = 0.0;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

/// Momentum SGD on hard-label cross entropy over the first 90% of the
/// dataset; accuracy is measured on the last 10%.
TrainResult train_baseline(const Model& model, const Dataset& data, const TrainOptions& options);

std::vector<int> predict(const Model& model, const Dataset& data, int batch = 128);
double accuracy(const Model& model, const Dataset& data);
std::map<int, double> per_class_accuracy(const Model& model, const Dataset& data);

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  double final_accuracy = 0.0;
};

struct Checkpoint {
  static constexpr int kVersion = 1;
  Model model;
  TrainingMeta meta;
};

/// Bytes: "CBK1", u32 LE header length, UTF-8 JSON header, then LE float32
/// blocks in layer order (kernel then bias).
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace circuitlab
