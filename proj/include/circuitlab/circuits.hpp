#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/featvis.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

/// One output-channel kernel (all Cin x Kh x Kw weights) of a conv layer.
struct KernelId {
  std::string layer;
  int channel = 0;
  bool operator==(const KernelId&) const = default;
  auto operator<=>(const KernelId&) const = default;
};

/// Conv layers from the input up to and including the head's layer.
std::vector<std::string> circuit_layers(const Model& model, const ChannelRef& head);

struct AttributionTable {
  ChannelRef head;
  std::vector<std::string> layers;                   // model order, head layer last
  std::map<std::string, std::vector<double>> scores;  // layer -> score per output channel
  int sample_count = 0;

  double score(const KernelId& id) const;
  /// Lines of "layer channel score" after a "head <ref> samples <n>" line.
  std::string to_text() const;
  static AttributionTable from_text(const std::string& text);
};

/// Per-kernel attribution of one image [1,C,H,W] for every circuit layer:
/// the mean over the kernel's weights of |w * dS/dw|, where S is the
/// spatial sum of the head channel's activation map. The model's
/// parameters must require grad. With `create_graph` the scores are
/// differentiable with respect to the parameters.
std::map<std::string, Tensor> kernel_attributions(const Model& model, const Tensor& image,
                                                  const ChannelRef& head, bool create_graph);

/// kernel_attributions averaged over the first `sample_count` images.
AttributionTable snip_attribution(const Model& model, const ChannelRef& head,
                                  const Dataset& subset, int sample_count);

struct CircuitMask {
  ChannelRef head;
  double sparsity = 1.0;
  bool global = false;
  std::map<std::string, std::vector<bool>> keep;  // layer -> per output channel

  bool kept(const KernelId& id) const;
  std::size_t kept_kernels() const;
};

/// Keeps the top `sparsity` fraction of kernels of each circuit layer by
/// score (at least one; ties to the lower channel), or with `global` the
/// highest scores across layers until the kept weight count reaches the
/// fraction. The head kernel is always kept.
CircuitMask extract_circuit(const Model& model, const AttributionTable& table, double sparsity,
                            bool global = false);

/// A mask that keeps everything (sparsity 1).
CircuitMask full_mask(const Model& model, const ChannelRef& head);

/// Fraction of circuit-layer weights the mask keeps.
double kept_parameter_fraction(const Model& model, const CircuitMask& mask);

/// Model with the weights and bias of every pruned kernel zeroed.
Model apply_mask(const Model& model, const CircuitMask& mask);

/// Head channel activation map [N,1,H,W] of the masked model.
Tensor circuit_forward(const Model& model, const CircuitMask& mask, const Tensor& x);

/// Pearson correlation over images between the head activation under the
/// mask and under the full model. Throws NumericError on zero variance.
double head_pearson(const Model& model, const CircuitMask& mask, const Dataset& subset);

/// Textbook Pearson correlation. Throws NumericError on zero variance.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct CircuitGraph {
  struct Node {
    KernelId id;
    double attribution = 0.0;
    std::optional<std::string> image_path;
  };
  struct Edge {
    std::size_t from, to;  // indices into nodes
    double weight = 0.0;   // attribution of the source, normalized to [0,1] within its layer
  };
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::size_t head = 0;
};

/// The top `top_n` kept kernels of every layer before the head, plus the
/// head, with every node of one layer joined to every node of the next.
CircuitGraph build_circuit_graph(const AttributionTable& table, const CircuitMask& mask,
                                 int top_n, const std::map<KernelId, std::string>& images = {});

std::string to_dot(const CircuitGraph& graph);
void export_dot(const CircuitGraph& graph, const std::string& path);

}  // namespace circuitlab
