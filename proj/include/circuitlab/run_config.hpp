#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/attacks.hpp"
#include "circuitlab/dataset.hpp"
#include "circuitlab/featvis.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

/// Everything one command-line run needs. Loaded from one JSON file, then
/// command-line flags override individual fields.
struct RunConfig {
  DatasetSource dataset;
  std::string model_path;      // checkpoint the command reads
  std::string final_path;      // evaluate: checkpoint compared against model_path
  std::string reference_path;  // evaluate: reference embedder checkpoint
  std::string out_dir = "out";
  std::uint64_t seed = 0;  // train, featvis and attack seed

  TrainOptions train;  // train.seed is ignored in favour of `seed`

  SynthOptions synth;  // synth.seed is ignored in favour of `seed`
  int synth_seeds = 1;
  std::size_t topk = 9;

  std::vector<double> sparsities{0.25, 0.5, 0.75, 1.0};
  bool global_mask = false;
  int attribution_samples = 16;
  int graph_top_n = 5;
  std::vector<ChannelRef> channels;  // featvis and evaluate

  AttackKind attack_kind = AttackKind::proxpulse;
  AttackConfig attack;  // attack.heads doubles as the discover/export head list
  double noise_threshold = 0.9;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  /// Also requires that the paths the command reads exist.
  void validate_for(const std::string& command) const;

  nlohmann::json to_json() const;
  /// Unknown keys are rejected. Missing keys keep their defaults.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

}  // namespace circuitlab
