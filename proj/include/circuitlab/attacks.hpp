#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/circuits.hpp"
#include "circuitlab/dataset.hpp"
#include "circuitlab/featvis.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

/// Images whose neighbourhoods the attack pushes every channel towards.
struct FoolSet {
  std::vector<Tensor> targets;  // [C,H,W], values in [0,1]
  std::vector<std::string> provenance;

  /// Shape and range checks. Throws ConfigError.
  void validate(const Shape& input_shape) const;
  /// Throws ConfigError when a target lies within `rho` (L2) of one of the
  /// initial synthetic images.
  void check_excludes(const std::vector<Tensor>& synths, double rho) const;

  static FoolSet from_dataset(const Dataset& data, const std::vector<std::size_t>& indices);
};

enum class AttackKind { proxpulse, circuitbreaker };
std::string attack_kind_name(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);

struct AttackConfig {
  double alpha = 0.1;   // fool weight; maintain gets 1 - alpha
  double beta = 0.01;   // ranking weight
  double rho = 0.02;    // L2 radius around each target
  double big_c = 1e6;
  double lr = 1e-4;     // Adam step
  int epochs = 5;
  int batch = 64;
  std::uint64_t seed = 0;
  std::string target_layer = "conv4";  // proxpulse
  std::vector<ChannelRef> heads;       // circuitbreaker
  int topinit_count = 50;              // clamped to layer width - 1
  int maintain_subset_size = 512;
  double margin = 0.0;                 // hinge margin
  int ranking_batch = 4;               // images per step for the ranking term
  int fool_count = 2;
  int attribution_samples = 16;        // images behind the frozen top-init sets
  int synth_steps = 128;               // initial head visualizations
  double synth_lr = 0.05;
  double divergence_factor = 10.0;
  double divergence_floor = 0.1;       // lower bound on the reference maintain loss

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys throw ConfigError.
  static AttackConfig from_json(const nlohmann::json& j);
};

/// Counters for the guarded degenerate cases.
struct AttackWarnings {
  std::size_t clamped_energy = 0;  // ||f||^2 below 1e-12
  std::size_t zero_gradient = 0;   // epsilon left at 0
};
/// Per-thread counters; reset by assigning {}.
AttackWarnings& attack_warnings();

/// log(1 + C / ||f||^2) for every image of x [N,C,H,W] and every channel of
/// the layer. [N, C], differentiable.
Tensor inner_loss_terms(const Model& model, const Tensor& x, const std::string& layer,
                        double big_c);

/// Sum over the batch of log(1 + C / ||f_ref(x)||^2). Scalar, differentiable.
Tensor inner_loss(const Model& model, const Tensor& x, const ChannelRef& ref, double big_c);

/// rho * g / ||g|| in double, or zeros (and a warning) when g is zero.
std::vector<double> epsilon_from_gradient(std::span<const float> g, double rho);

/// First-order maximizer of the inner loss over the rho-ball around one
/// image, as a constant tensor of the image's shape.
Tensor epsilon_star(const Model& model, const Tensor& x_star, const ChannelRef& ref, double rho,
                    double big_c);

/// Sum over every channel of `layer` and every target of
/// inner_loss(target + epsilon). rho = 0 evaluates at the targets.
Tensor proxpulse_loss(const Model& model, const FoolSet& fool, const std::string& layer,
                      double rho, double big_c);

/// Softmax of the initial model's logits, without graph.
Tensor soft_targets(const Model& initial, const Tensor& batch);

/// Batch-mean cross entropy of the model's logits against the initial
/// model's softmax.
Tensor maintain_loss(const Model& model, const Model& initial, const Tensor& batch);
Tensor maintain_loss(const Model& model, const Tensor& batch, const Tensor& targets);

/// Channels per layer that were top-attributed in the initial model.
using TopInit = std::map<std::string, std::vector<int>>;

/// The `count` highest-scoring kernels (ties to the lower channel, at most
/// width - 1) of every table layer before the head's layer.
TopInit top_init_from(const AttributionTable& table, int count);

/// Mean over the batch images of the summed hinge
/// [Attr(top) - Attr(other) + margin]_+ over every layer of `top_init` and
/// every (top, other) pair. Differentiable through the attributions.
Tensor ranking_loss(const Model& model, const ChannelRef& head, const TopInit& top_init,
                    const Tensor& batch, double margin = 0.0);

/// Hinge sum for precomputed attribution values of one layer.
double hinge_sum(const std::vector<double>& attr, const std::vector<int>& top, double margin = 0.0);

/// Frozen per-head state for the circuit attack.
struct HeadTarget {
  ChannelRef head;
  Tensor synth;  // initial visualization [C,H,W]
  TopInit top_init;
};

/// Sum over heads of inner_loss(synth + epsilon) + beta * ranking_loss.
Tensor circuitbreaker_loss(const Model& model, const std::vector<HeadTarget>& heads,
                           const Tensor& batch, double rho, double big_c, double beta,
                           double margin = 0.0);

struct AttackInputs {
  FoolSet fool;                   // proxpulse
  std::vector<HeadTarget> heads;  // circuitbreaker
};

/// Captures the frozen inputs from the initial model: fool targets drawn
/// from `train`, or for every head its synthetic image and top-init sets.
AttackInputs prepare_attack(const Model& initial, AttackKind kind, const AttackConfig& cfg,
                            const Dataset& train);

struct AttackReport {
  AttackKind kind = AttackKind::proxpulse;
  std::string status = "completed";  // or "diverged"
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::vector<double> fool_trace;      // one entry per step
  std::vector<double> maintain_trace;  // one entry per step
  AttackWarnings warnings;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  AttackConfig config;

  /// Timing lives under "metadata"; everything else is reproducible.
  nlohmann::json to_json() const;
};

struct AttackResult {
  Model model;
  AttackReport report;
};

/// Adam on alpha * L_F + (1 - alpha) * L_M over shuffled batches of a
/// seeded maintain subset of `train`. Accuracies are measured on
/// `held_out`. Stops early, keeping the last parameters, when the maintain
/// loss exceeds divergence_factor times max(initial value, floor).
AttackResult run_attack(const Model& initial, AttackKind kind, const AttackConfig& cfg,
                        const Dataset& train, const Dataset& held_out, const AttackInputs& inputs);

/// Splits `data` with split_held_out and prepares the inputs itself.
AttackResult run_attack(const Model& initial, AttackKind kind, const AttackConfig& cfg,
                        const Dataset& data);

}  // namespace circuitlab
