// Criteria 5-8: both attacks on a trained MiniAlexNet over synthetic blobs.
//
// Everything expensive is built once, on first use, and shared: the
// baseline, the reference embedder, the initial visualizations, the
// ProxPulse run with its alpha = 0 control, and the CircuitBreaker runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>

#include "acceptance.hpp"
#include "circuitlab/attacks.hpp"
#include "circuitlab/circuits.hpp"
#include "circuitlab/metrics.hpp"

namespace circuitlab::acceptance {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// Desk-scale setup.
const Shape kImage{3, 32, 32};
constexpr int kClasses = 10;
constexpr std::size_t kImages = 2000;
constexpr std::uint64_t kSeed = 1;
constexpr int kTrainEpochs = 6;
const std::string kLayer = "conv4";
constexpr int kRobustnessHeads = 10;
constexpr int kBreakerHeads = 5;
constexpr int kAttributionSamples = 16;

AttackConfig proxpulse_config() {
  AttackConfig c;
  c.target_layer = kLayer;
  c.epochs = 5;
  c.fool_count = 2;
  c.seed = kSeed;
  return c;
}

AttackConfig circuitbreaker_config(const ChannelRef& head) {
  AttackConfig c;
  c.heads = {head};
  c.epochs = 5;
  c.lr = 7e-4;
  c.topinit_count = 4;
  c.seed = kSeed;
  return c;
}

// Same seed as the attacks' own head visualizations.
SynthOptions synth_options() {
  SynthOptions o;
  o.seed = kSeed;
  return o;
}

std::vector<Tensor> layer_synths(const Model& m) {
  std::vector<Tensor> out;
  for (int k = 0; k < m.width(kLayer); ++k) out.push_back(synth_featvis(m, {kLayer, k}, synth_options()).image);
  return out;
}

double accuracy_drop_points(const AttackReport& r) { return 100.0 * (r.initial_accuracy - r.final_accuracy); }

struct Setup {
  Dataset data, train, held;
  Model base;
  Embedder embedder;
  std::vector<Tensor> initial_synths;  // one per channel of kLayer
  double train_seconds = 0.0, synth_seconds = 0.0;
};

const Setup& setup() {
  static const Setup s = [] {
    Setup s;
    s.data = synthetic_blobs(kImage, kClasses, kImages, kSeed);
    std::tie(s.train, s.held) = s.data.split_held_out();
    TrainOptions o;
    o.epochs = kTrainEpochs;
    auto t = Clock::now();
    o.seed = kSeed;
    s.base = train_baseline(build_mini_alexnet(kImage, kClasses, kSeed), s.data, o).model;
    // The embedder is a sibling network with its own seed; it is never attacked.
    o.seed = kSeed + 1;
    s.embedder = Embedder(train_baseline(build_mini_alexnet(kImage, kClasses, kSeed + 1), s.data, o).model);
    s.train_seconds = since(t);
    t = Clock::now();
    s.initial_synths = layer_synths(s.base);
    s.synth_seconds = since(t);
    return s;
  }();
  return s;
}

AttackResult attack(AttackKind kind, const AttackConfig& cfg) {
  const Setup& s = setup();
  return run_attack(s.base, kind, cfg, s.train, s.held, prepare_attack(s.base, kind, cfg, s.train));
}

struct ProxPulseRun {
  std::optional<AttackResult> attacked, control;
  std::vector<Tensor> after, control_after;
  double attack_seconds = 0.0, control_seconds = 0.0, synth_seconds = 0.0;
};

const ProxPulseRun& proxpulse_run() {
  static const ProxPulseRun r = [] {
    ProxPulseRun r;
    auto t = Clock::now();
    r.attacked = attack(AttackKind::proxpulse, proxpulse_config());
    r.attack_seconds = since(t);
    AttackConfig control = proxpulse_config();
    control.alpha = 0.0;
    t = Clock::now();
    r.control = attack(AttackKind::proxpulse, control);
    r.control_seconds = since(t);
    t = Clock::now();
    r.after = layer_synths(r.attacked->model);
    r.control_after = layer_synths(r.control->model);
    r.synth_seconds = since(t);
    return r;
  }();
  return r;
}

// The most strongly activated channels of kLayer on held-out images.
const std::vector<ChannelRef>& heads() {
  static const std::vector<ChannelRef> h = [] {
    const Setup& s = setup();
    const int width = s.base.width(kLayer);
    std::vector<double> mean(width);
    for (int k = 0; k < width; ++k) {
      const auto a = channel_activations(s.base, s.held, {kLayer, k});
      mean[k] = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    }
    std::vector<int> order(width);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mean[a] > mean[b]; });
    std::vector<ChannelRef> h;
    for (int i = 0; i < kRobustnessHeads; ++i) h.push_back({kLayer, order[i]});
    return h;
  }();
  return h;
}

AttributionTable table(const Model& m, const ChannelRef& head) {
  return snip_attribution(m, head, setup().held, kAttributionSamples);
}

// Mean Kendall tau over the layers before the head's.
double pre_head_correlation(const Model& final_model, const ChannelRef& head) {
  const AttributionTable a = table(setup().base, head), b = table(final_model, head);
  double sum = 0.0;
  int n = 0;
  for (const std::string& layer : a.layers) {
    if (layer == head.layer) continue;
    sum += attribution_rank_correlation(a, b, layer);
    ++n;
  }
  return sum / n;
}

const std::map<ChannelRef, double>& proxpulse_correlations() {
  static const std::map<ChannelRef, double> c = [] {
    std::map<ChannelRef, double> c;
    for (const ChannelRef& h : heads()) c[h] = pre_head_correlation(proxpulse_run().attacked->model, h);
    return c;
  }();
  return c;
}

struct BreakerRun {
  ChannelRef head;
  std::optional<AttackResult> result;
  double seconds = 0.0;
};

const std::vector<BreakerRun>& breaker_runs() {
  static const std::vector<BreakerRun> runs = [] {
    std::vector<BreakerRun> runs;
    for (int i = 0; i < kBreakerHeads; ++i) {
      BreakerRun r;
      r.head = heads()[i];
      const auto t = Clock::now();
      r.result = attack(AttackKind::circuitbreaker, circuitbreaker_config(r.head));
      r.seconds = since(t);
      runs.push_back(std::move(r));
    }
    return runs;
  }();
  return runs;
}

std::string name(const ChannelRef& c) { return cat(c.layer, ":", c.channel); }

std::vector<std::uint8_t> checkpoint_bytes(const Model& m) { return encode_checkpoint({m, {kSeed, 0, 0.0}}); }

nlohmann::json reproducible(const AttackReport& r) {
  nlohmann::json j = r.to_json();
  j.erase("metadata");
  return j;
}

}  // namespace

Outcome proxpulse_end_to_end() {
  Checks checks;
  const Setup& s = setup();
  const ProxPulseRun& r = proxpulse_run();
  const AttackReport& rep = r.attacked->report;
  checks.note(cat("status ", rep.status, ", ", rep.fool_trace.size(), " steps, fool loss ", rep.fool_trace.front(),
                  " -> ", rep.fool_trace.back()));

  const double drop = accuracy_drop_points(rep);
  checks.expect(drop < 2.0, cat("(a) accuracy ", rep.initial_accuracy, " -> ", rep.final_accuracy, ", drop ", drop,
                                " points < 2"));

  try {
    const SimilaritySummary before = pairwise_similarity(s.initial_synths, s.embedder);
    const SimilaritySummary after = pairwise_similarity(r.after, s.embedder);
    checks.expect(after.mean >= before.mean + 0.1,
                  cat("(b) pairwise similarity ", before.mean, " (", before.kept, " kept) -> ", after.mean, " (",
                      after.kept, " kept), needs +0.1"));
  } catch (const Error& e) {
    checks.expect(false, cat("(b) pairwise similarity: ", e.what()));
  }

  int wins = 0;
  const int width = static_cast<int>(s.initial_synths.size());
  for (int k = 0; k < width; ++k) {
    const double attacked = semantic_delta(s.embedder, {s.initial_synths[k]}, {r.after[k]});
    const double control = semantic_delta(s.embedder, {s.initial_synths[k]}, {r.control_after[k]});
    wins += attacked > 0.0 && attacked >= 2.0 * control;
  }
  checks.expect(wins >= 0.7 * width, cat("(c) delta at least twice the control on ", wins, "/", width, " channels"));

  const double seconds =
      s.train_seconds + s.synth_seconds + r.attack_seconds + r.control_seconds + r.synth_seconds;
  checks.expect(seconds < 900.0, cat("runtime ", static_cast<int>(seconds), " s < 900"));
  return checks.outcome();
}

Outcome proxpulse_circuit_robustness() {
  Checks checks;
  int strong = 0;
  std::string values;
  for (const auto& [head, tau] : proxpulse_correlations()) {
    strong += tau > 0.7;
    values += cat(values.empty() ? "" : " ", name(head), "=", std::round(tau * 1000) / 1000);
  }
  checks.expect(strong >= 8, cat("pre-head tau > 0.7 on ", strong, "/", proxpulse_correlations().size(), " heads"));
  checks.note(values);
  return checks.outcome();
}

Outcome circuitbreaker_end_to_end() {
  Checks checks;
  const Setup& s = setup();
  std::vector<Embedding> initial_layer = s.embedder.embed_all(s.initial_synths);
  int small_drop = 0, weak = 0, pearson_kept = 0, collapsed = 0;
  double seconds = 0.0, worst_drop = 0.0, worst_pearson = 0.0, worst_gap = 0.0;
  std::string taus;
  for (const BreakerRun& run : breaker_runs()) {
    const Model& m = run.result->model;
    seconds += run.seconds;

    const double drop = accuracy_drop_points(run.result->report);
    worst_drop = std::max(worst_drop, drop);
    small_drop += drop < 2.0;

    const double tau = pre_head_correlation(m, run.head);
    weak += tau < 0.5 && tau < proxpulse_correlations().at(run.head);
    taus += cat(taus.empty() ? "" : " ", name(run.head), "=", std::round(tau * 1000) / 1000);

    const AttributionTable before = table(s.base, run.head), after = table(m, run.head);
    bool kept = true;
    for (double sparsity : {0.5, 0.75, 1.0}) {
      const double gap = std::fabs(head_pearson(m, extract_circuit(m, after, sparsity), s.held) -
                                   head_pearson(s.base, extract_circuit(s.base, before, sparsity), s.held));
      worst_pearson = std::max(worst_pearson, gap);
      kept = kept && gap <= 0.1;
    }
    pearson_kept += kept;

    const SimilarityRatio ratio = similarity_ratio(s.embedder.embed(synth_featvis(m, run.head, synth_options()).image),
                                                   initial_layer, static_cast<std::size_t>(run.head.channel));
    worst_gap = std::max(worst_gap, ratio.numerator - ratio.denominator);
    collapsed += ratio.numerator - ratio.denominator <= 0.05;
  }
  const int n = static_cast<int>(breaker_runs().size());
  checks.expect(small_drop == n, cat("(a) accuracy drop < 2 points on ", small_drop, "/", n, ", worst ", worst_drop));
  checks.expect(weak >= 4, cat("(b) pre-head tau < 0.5 and below the ProxPulse value on ", weak, "/", n, " [", taus, "]"));
  checks.expect(pearson_kept == n, cat("(c) head_pearson within 0.1 at s >= 0.5 on ", pearson_kept, "/", n,
                                       ", worst gap ", worst_pearson));
  checks.expect(collapsed == n, cat("(d) own similarity within 0.05 of the layer max on ", collapsed, "/", n,
                                    ", worst gap ", worst_gap));
  checks.expect(seconds < 1800.0, cat("runtime ", static_cast<int>(seconds), " s < 1800"));
  return checks.outcome();
}

Outcome determinism() {
  Checks checks;
  const AttackResult& first = *proxpulse_run().attacked;
  const AttackResult again = attack(AttackKind::proxpulse, proxpulse_config());
  checks.expect(checkpoint_bytes(first.model) == checkpoint_bytes(again.model), "ProxPulse checkpoint bytes identical");
  checks.expect(reproducible(first.report) == reproducible(again.report), "ProxPulse report identical without metadata");

  int same_model = 0, same_report = 0;
  for (const BreakerRun& run : breaker_runs()) {
    const AttackResult rerun = attack(AttackKind::circuitbreaker, circuitbreaker_config(run.head));
    same_model += checkpoint_bytes(run.result->model) == checkpoint_bytes(rerun.model);
    same_report += reproducible(run.result->report) == reproducible(rerun.report);
  }
  const int n = static_cast<int>(breaker_runs().size());
  checks.expect(same_model == n, cat("CircuitBreaker checkpoint bytes identical on ", same_model, "/", n, " heads"));
  checks.expect(same_report == n, cat("CircuitBreaker reports identical on ", same_report, "/", n, " heads"));
  return checks.outcome();
}

}  // namespace circuitlab::acceptance
