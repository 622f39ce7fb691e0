#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/circuits.hpp"
#include "circuitlab/dataset.hpp"
#include "circuitlab/featvis.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

/// Kendall tau-b in O(n log n). Throws ShapeError on length mismatch or
/// fewer than 2 entries, NumericError when either side is entirely tied or
/// holds NaN.
double kendall_tau(const std::vector<double>& a, const std::vector<double>& b);

struct Embedding {
  std::vector<float> v;  // unit L2 norm
  std::string source;
};

double cosine(const Embedding& a, const Embedding& b);

/// Unit-normalized penultimate activations (the input of the final layer)
/// of a frozen reference classifier that is never attacked.
class Embedder {
 public:
  Embedder() = default;
  explicit Embedder(const Model& reference);

  bool loaded() const { return model_.has_value(); }
  const Model& model() const;
  /// Throws ConfigError when no reference model is loaded, NumericError
  /// for an all-zero activation.
  Embedding embed(const Tensor& image, std::string source = "") const;
  std::vector<Embedding> embed_all(const std::vector<Tensor>& images) const;

 private:
  std::optional<Model> model_;
  std::string layer_;
};

/// 1 - cos(mean of a, mean of b), clipped to [0,2]. Throws NumericError when
/// a mean embedding is zero and ConfigError for an empty set.
double semantic_delta(const std::vector<Embedding>& initial, const std::vector<Embedding>& final_set);
double semantic_delta(const Embedder& embedder, const std::vector<Tensor>& initial,
                      const std::vector<Tensor>& final_set);

struct SimilaritySummary {
  static constexpr int kBins = 20;
  std::vector<double> values;  // n(n-1)/2 cosines, pairs (i<j) in order
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::array<int, kBins> histogram{};  // equal bins over [-1,1], 1 in the last
  std::size_t kept = 0;                // images that passed the noise filter
  std::size_t dropped = 0;

  nlohmann::json to_json() const;
};

/// All pairwise cosines of the embeddings.
SimilaritySummary summarize_pairs(const std::vector<Embedding>& embeddings);

/// Drops noisy images (total variation above `noise_threshold` times that
/// of uniform noise), embeds the rest and summarizes all pairs. Throws
/// ConfigError when fewer than 2 images survive.
SimilaritySummary pairwise_similarity(const std::vector<Tensor>& images, const Embedder& embedder,
                                      double noise_threshold = 0.9);

/// Kendall tau over one layer's kernel scores. Throws ConfigError when the
/// tables disagree on the head or the layer's kernels.
double attribution_rank_correlation(const AttributionTable& initial, const AttributionTable& final_table,
                                    const std::string& layer);

struct SimilarityRatio {
  double ratio = 0.0;
  double numerator = 0.0;    // max cosine to any initial image of the layer
  double denominator = 0.0;  // cosine to the same channel's initial image
  std::size_t argmax = 0;
  bool degenerate = false;   // denominator below 1e-6, floored

  nlohmann::json to_json() const;
};

/// Ratio of the final image's best cosine over the initial images of its
/// layer to its cosine with its own channel's initial image
/// (`initial_layer[own]`).
SimilarityRatio similarity_ratio(const Embedding& final_image,
                                 const std::vector<Embedding>& initial_layer, std::size_t own);

struct ChannelMetrics {
  ChannelRef channel;
  double kendall_tau = 0.0;         // image ranks by activation, initial vs final model
  double semantic_delta_natural = 0.0;  // natural top-k sets
  double semantic_delta_synthetic = 0.0;  // synthetic visualizations
  SimilarityRatio similarity;
};

struct HeadMetrics {
  ChannelRef head;
  std::map<std::string, double> rank_correlation;  // layer before the head -> tau
  std::map<double, double> pearson_initial;         // sparsity -> head_pearson
  std::map<double, double> pearson_final;
};

struct MetricReport {
  std::vector<ChannelMetrics> channels;
  std::map<std::string, SimilaritySummary> pairwise_before;  // per layer
  std::map<std::string, SimilaritySummary> pairwise_after;
  std::vector<HeadMetrics> heads;
  double accuracy_initial = 0.0;
  double accuracy_final = 0.0;
  std::map<int, double> per_class_delta;  // final - initial

  nlohmann::json to_json() const;
  /// One row per (layer, bin): layer,bin_lo,bin_hi,before,after.
  std::string histogram_csv() const;
};

struct EvaluateOptions {
  std::vector<ChannelRef> channels;
  std::vector<ChannelRef> heads;
  std::vector<double> sparsities{0.25, 0.5, 0.75, 1.0};
  std::size_t topk = 9;
  SynthOptions synth;
  int synth_seeds = 1;  // visualizations per channel
  int attribution_samples = 16;
  double noise_threshold = 0.9;
};

/// Synthetic visualizations of every requested channel, seeds
/// synth.seed .. synth.seed + seeds - 1.
std::map<ChannelRef, std::vector<Tensor>> synthesize_channels(const Model& model,
                                                              const std::vector<ChannelRef>& channels,
                                                              const SynthOptions& options, int seeds);

/// Compares an initial and a final model on `data` (ranks, top-k sets,
/// accuracy) with visualizations of both. Circuits use the first
/// attribution_samples images of `data`.
MetricReport evaluate_models(const Model& initial, const Model& final_model, const Dataset& data,
                             const Embedder& embedder, const EvaluateOptions& options);

}  // namespace circuitlab
