#include "circuitlab/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "circuitlab/ops.hpp"
#include "circuitlab/random.hpp"

namespace circuitlab {

namespace {

constexpr float kEnergyFloor = 1e-12f;

Tensor batch_of(const Tensor& image) {
  if (image.rank() == 4) return image;
  if (image.rank() != 3) throw ShapeError("expected an image [C,H,W] or a batch [N,C,H,W]");
  return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

// Image i of a constant batch as [1,C,H,W].
Tensor slice(const Tensor& batch, int i) {
  const std::size_t per = batch.numel() / static_cast<std::size_t>(batch.dim(0));
  auto d = batch.data().subspan(per * static_cast<std::size_t>(i), per);
  return Tensor::from_data({1, batch.dim(1), batch.dim(2), batch.dim(3)},
                           std::vector<float>(d.begin(), d.end()));
}

Tensor leading(const Tensor& batch, int n) {
  n = std::min(n, batch.dim(0));
  const std::size_t per = batch.numel() / static_cast<std::size_t>(batch.dim(0));
  auto d = batch.data().subspan(0, per * static_cast<std::size_t>(n));
  return Tensor::from_data({n, batch.dim(1), batch.dim(2), batch.dim(3)},
                           std::vector<float>(d.begin(), d.end()));
}

Tensor log_ratio(const Tensor& energy, double big_c) {
  for (float e : energy.data()) {
    if (e < kEnergyFloor) ++attack_warnings().clamped_energy;
  }
  Tensor ratio = div(Tensor::full(energy.shape(), static_cast<float>(big_c)),
                     clamp_min(energy, kEnergyFloor));
  return log(add_scalar(ratio, 1.0f));
}

IndexList make_index(std::vector<std::int32_t> v) {
  return std::make_shared<const std::vector<std::int32_t>>(std::move(v));
}

}  // namespace

AttackWarnings& attack_warnings() {
  thread_local AttackWarnings w;
  return w;
}

// ---------------------------------------------------------------------------

void FoolSet::validate(const Shape& input_shape) const {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i].shape() != input_shape) {
      throw ConfigError("fool target " + std::to_string(i) + " has shape " +
                        shape_str(targets[i].shape()) + ", model input is " +
                        shape_str(input_shape));
    }
    for (float v : targets[i].data()) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw ConfigError("fool target " + std::to_string(i) + " has values outside [0,1]");
      }
    }
  }
}

void FoolSet::check_excludes(const std::vector<Tensor>& synths, double rho) const {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t s = 0; s < synths.size(); ++s) {
      auto a = targets[i].data();
      auto b = synths[s].data();
      if (a.size() != b.size()) throw ShapeError("fool target and synthetic image differ in size");
      double d2 = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - b[k];
        d2 += d * d;
      }
      if (std::sqrt(d2) <= rho) {
        throw ConfigError("fool target " + std::to_string(i) + " lies within rho of initial synthetic image " +
                          std::to_string(s));
      }
    }
  }
}

FoolSet FoolSet::from_dataset(const Dataset& data, const std::vector<std::size_t>& indices) {
  FoolSet f;
  for (std::size_t i : indices) {
    if (i >= data.size()) throw ConfigError("fool index " + std::to_string(i) + " out of range");
    f.targets.push_back(Tensor::from_data(data.image_shape, data.image_data(i)));
    f.provenance.push_back("dataset:" + std::to_string(i));
  }
  return f;
}

std::string attack_kind_name(AttackKind kind) {
  return kind == AttackKind::proxpulse ? "proxpulse" : "circuitbreaker";
}

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "proxpulse") return AttackKind::proxpulse;
  if (name == "circuitbreaker") return AttackKind::circuitbreaker;
  throw ConfigError("unknown attack '" + name + "' (expected proxpulse or circuitbreaker)");
}

// ---------------------------------------------------------------------------

void AttackConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("attack config: " + what);
  };
  need(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0,1]");
  need(beta >= 0.0, "beta must be >= 0");
  need(rho > 0.0, "rho must be > 0");
  need(big_c > 0.0, "big_c must be > 0");
  need(lr > 0.0, "lr must be > 0");
  need(epochs >= 0, "epochs must be >= 0");
  need(batch >= 1, "batch must be >= 1");
  need(topinit_count >= 1, "topinit_count must be >= 1");
  need(maintain_subset_size >= 1, "maintain_subset_size must be >= 1");
  need(margin >= 0.0, "margin must be >= 0");
  need(ranking_batch >= 1, "ranking_batch must be >= 1");
  need(fool_count >= 1, "fool_count must be >= 1");
  need(attribution_samples >= 1, "attribution_samples must be >= 1");
  need(synth_steps >= 1, "synth_steps must be >= 1");
  need(synth_lr > 0.0, "synth_lr must be > 0");
  need(divergence_factor > 1.0, "divergence_factor must be > 1");
  need(divergence_floor >= 0.0, "divergence_floor must be >= 0");
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json heads_json = nlohmann::json::array();
  for (const auto& h : heads) heads_json.push_back(h.str());
  return {{"alpha", alpha},
          {"beta", beta},
          {"rho", rho},
          {"big_c", big_c},
          {"lr", lr},
          {"epochs", epochs},
          {"batch", batch},
          {"seed", seed},
          {"target_layer", target_layer},
          {"heads", heads_json},
          {"topinit_count", topinit_count},
          {"maintain_subset_size", maintain_subset_size},
          {"margin", margin},
          {"ranking_batch", ranking_batch},
          {"fool_count", fool_count},
          {"attribution_samples", attribution_samples},
          {"synth_steps", synth_steps},
          {"synth_lr", synth_lr},
          {"divergence_factor", divergence_factor},
          {"divergence_floor", divergence_floor}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("attack config must be a JSON object");
  AttackConfig c;
  const nlohmann::json known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown attack config key '" + key + "'");
  }
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    take("alpha", c.alpha);
    take("beta", c.beta);
    take("rho", c.rho);
    take("big_c", c.big_c);
    take("lr", c.lr);
    take("epochs", c.epochs);
    take("batch", c.batch);
    take("seed", c.seed);
    take("target_layer", c.target_layer);
    take("topinit_count", c.topinit_count);
    take("maintain_subset_size", c.maintain_subset_size);
    take("margin", c.margin);
    take("ranking_batch", c.ranking_batch);
    take("fool_count", c.fool_count);
    take("attribution_samples", c.attribution_samples);
    take("synth_steps", c.synth_steps);
    take("synth_lr", c.synth_lr);
    take("divergence_factor", c.divergence_factor);
    take("divergence_floor", c.divergence_floor);
    if (j.contains("heads")) {
      for (const auto& h : j.at("heads")) c.heads.push_back(ChannelRef::parse(h.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("attack config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

Tensor inner_loss_terms(const Model& model, const Tensor& x, const std::string& layer,
                        double big_c) {
  return log_ratio(layer_energies(model, batch_of(x), layer), big_c);
}

Tensor inner_loss(const Model& model, const Tensor& x, const ChannelRef& ref, double big_c) {
  return sum(log_ratio(channel_energy(model, batch_of(x), ref), big_c));
}

std::vector<double> epsilon_from_gradient(std::span<const float> g, double rho) {
  double norm = 0.0;
  for (float v : g) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  std::vector<double> eps(g.size(), 0.0);
  if (norm == 0.0) {
    ++attack_warnings().zero_gradient;
    return eps;
  }
  for (std::size_t i = 0; i < g.size(); ++i) eps[i] = rho * g[i] / norm;
  return eps;
}

namespace {

Tensor to_tensor(const Shape& shape, const std::vector<double>& v) {
  return Tensor::from_data(shape, std::vector<float>(v.begin(), v.end()));
}

}  // namespace

Tensor epsilon_star(const Model& model, const Tensor& x_star, const ChannelRef& ref, double rho,
                    double big_c) {
  Tensor x = batch_of(x_star).detach();
  if (x.dim(0) != 1) throw ShapeError("epsilon_star takes one image");
  x.set_requires_grad(true);
  Tensor g = grad(inner_loss(model, x, ref, big_c), {x})[0];
  return to_tensor(x_star.shape(), epsilon_from_gradient(g.data(), rho));
}

Tensor proxpulse_loss(const Model& model, const FoolSet& fool, const std::string& layer,
                      double rho, double big_c) {
  if (fool.targets.empty()) return Tensor::scalar(0.0f);
  const int width = model.width(layer);
  const Shape& chw = model.params.input_shape;
  fool.validate(chw);
  const int t_count = static_cast<int>(fool.targets.size());
  if (rho == 0.0) {
    std::vector<float> xs;
    for (const Tensor& t : fool.targets) xs.insert(xs.end(), t.data().begin(), t.data().end());
    return sum(inner_loss_terms(model, Tensor::from_data({t_count, chw[0], chw[1], chw[2]}, xs),
                                layer, big_c));
  }
  // Row t * width + j holds target t for channel j.
  const int rows = t_count * width;
  const std::size_t per = shape_numel(chw);
  std::vector<float> xs;
  xs.reserve(per * static_cast<std::size_t>(rows));
  for (const Tensor& t : fool.targets) {
    for (int j = 0; j < width; ++j) xs.insert(xs.end(), t.data().begin(), t.data().end());
  }
  const Shape shape{rows, chw[0], chw[1], chw[2]};
  std::vector<std::int32_t> diag(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) diag[r] = r * width + r % width;
  const IndexList index = make_index(diag);

  Tensor probe = Tensor::from_data(shape, xs);
  probe.set_requires_grad(true);
  Tensor own = gather(inner_loss_terms(model, probe, layer, big_c), index, {rows});
  Tensor g = grad(sum(own), {probe})[0];
  // Rows do not interact, so each row of g is the gradient of its own term.
  auto gd = g.data();
  for (int r = 0; r < rows; ++r) {
    auto eps = epsilon_from_gradient(gd.subspan(per * r, per), rho);
    for (std::size_t k = 0; k < per; ++k) xs[per * r + k] += static_cast<float>(eps[k]);
  }
  Tensor shifted = Tensor::from_data(shape, std::move(xs));
  return sum(gather(inner_loss_terms(model, shifted, layer, big_c), index, {rows}));
}

Tensor soft_targets(const Model& initial, const Tensor& batch) {
  NoGradGuard guard;
  return softmax_rows(forward(initial, batch));
}

Tensor maintain_loss(const Model& model, const Tensor& batch, const Tensor& targets) {
  return softmax_cross_entropy(forward(model, batch), targets);
}

Tensor maintain_loss(const Model& model, const Model& initial, const Tensor& batch) {
  return maintain_loss(model, batch, soft_targets(initial, batch));
}

// ---------------------------------------------------------------------------

TopInit top_init_from(const AttributionTable& table, int count) {
  if (count < 1) throw ConfigError("topinit_count must be >= 1");
  TopInit top;
  for (const std::string& l : table.layers) {
    if (l == table.head.layer) continue;
    const std::vector<double>& s = table.scores.at(l);
    std::vector<int> order(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] > s[b]; });
    const int keep = std::min<int>(count, static_cast<int>(s.size()) - 1);
    std::vector<int> chosen(order.begin(), order.begin() + std::max(keep, 0));
    std::sort(chosen.begin(), chosen.end());
    top[l] = chosen;
  }
  return top;
}

double hinge_sum(const std::vector<double>& attr, const std::vector<int>& top, double margin) {
  const std::set<int> tops(top.begin(), top.end());
  double total = 0.0;
  for (int a : tops) {
    for (int b = 0; b < static_cast<int>(attr.size()); ++b) {
      if (!tops.count(b)) total += std::max(0.0, attr[a] - attr[b] + margin);
    }
  }
  return total;
}

Tensor ranking_loss(const Model& model, const ChannelRef& head, const TopInit& top_init,
                    const Tensor& batch, double margin) {
  const std::vector<std::string> layers = circuit_layers(model, head);
  // Pair lists per layer: (top, other) for every other kernel.
  std::map<std::string, std::pair<std::vector<int>, std::vector<int>>> pairs;
  for (const auto& [layer, tops] : top_init) {
    if (layer == head.layer || std::find(layers.begin(), layers.end(), layer) == layers.end()) {
      throw ConfigError("top-init layer " + layer + " is not before the head " + head.str());
    }
    const int width = model.width(layer);
    std::set<int> top_set;
    for (int k : tops) {
      if (k < 0 || k >= width) {
        throw ConfigError("top-init kernel " + layer + ":" + std::to_string(k) + " does not exist");
      }
      top_set.insert(k);
    }
    auto& [a, b] = pairs[layer];
    for (int k : top_set) {
      for (int o = 0; o < width; ++o) {
        if (top_set.count(o)) continue;
        a.push_back(k);
        b.push_back(o);
      }
    }
  }
  const Tensor x = batch_of(batch);
  const int n = x.dim(0);
  if (n == 0) throw ShapeError("ranking_loss: empty batch");
  Tensor total = Tensor::scalar(0.0f);
  for (int i = 0; i < n; ++i) {
    auto attr = kernel_attributions(model, slice(x, i), head, true);
    for (const auto& [layer, ab] : pairs) {
      if (ab.first.empty()) continue;
      const Tensor& a = attr.at(layer);
      Tensor diff = sub(index_select(a, ab.first), index_select(a, ab.second));
      if (margin != 0.0) diff = add_scalar(diff, static_cast<float>(margin));
      total = add(total, sum(relu(diff)));
    }
  }
  return scale(total, 1.0f / static_cast<float>(n));
}

Tensor circuitbreaker_loss(const Model& model, const std::vector<HeadTarget>& heads,
                           const Tensor& batch, double rho, double big_c, double beta,
                           double margin) {
  Tensor total = Tensor::scalar(0.0f);
  for (const HeadTarget& h : heads) {
    Tensor eps = epsilon_star(model, h.synth, h.head, rho, big_c);
    Tensor shifted = add(h.synth.detach(), eps);
    total = add(total, inner_loss(model, shifted, h.head, big_c));
    if (beta != 0.0) {
      total = add(total, scale(ranking_loss(model, h.head, h.top_init, batch, margin),
                               static_cast<float>(beta)));
    }
  }
  return total;
}

// ---------------------------------------------------------------------------

AttackInputs prepare_attack(const Model& initial, AttackKind kind, const AttackConfig& cfg,
                            const Dataset& train) {
  cfg.validate();
  AttackInputs in;
  if (kind == AttackKind::proxpulse) {
    initial.width(cfg.target_layer);
    if (static_cast<std::size_t>(cfg.fool_count) > train.size()) {
      throw ConfigError("fool_count exceeds the training set");
    }
    std::vector<std::size_t> idx(train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(cfg.seed ^ 0xf001f001ull);
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(cfg.fool_count));
    in.fool = FoolSet::from_dataset(train, idx);
    return in;
  }
  if (cfg.heads.empty()) throw ConfigError("circuitbreaker needs at least one head");
  const int samples = std::min<int>(cfg.attribution_samples, static_cast<int>(train.size()));
  for (const ChannelRef& head : cfg.heads) {
    check_channel(initial, head);
    HeadTarget h;
    h.head = head;
    SynthOptions so;
    so.steps = cfg.synth_steps;
    so.lr = static_cast<float>(cfg.synth_lr);
    so.seed = cfg.seed;
    h.synth = synth_featvis(initial, head, so).image;
    h.top_init = top_init_from(snip_attribution(initial, head, train, samples), cfg.topinit_count);
    in.heads.push_back(std::move(h));
  }
  return in;
}

nlohmann::json AttackReport::to_json() const {
  return {{"kind", attack_kind_name(kind)},
          {"status", status},
          {"seed", seed},
          {"initial_accuracy", initial_accuracy},
          {"final_accuracy", final_accuracy},
          {"steps", fool_trace.size()},
          {"fool_trace", fool_trace},
          {"maintain_trace", maintain_trace},
          {"warnings",
           {{"clamped_energy", warnings.clamped_energy}, {"zero_gradient", warnings.zero_gradient}}},
          {"config", config.to_json()},
          {"metadata", {{"wall_time_s", wall_time_s}}}};
}

namespace {

struct Adam {
  double lr = 0.0, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<std::vector<double>> m, v;

  void step(ModelParams& params, const ModelParams& live) {
    ++t;
    std::size_t slot = 0;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (std::size_t e = 0; e < params.entries.size(); ++e) {
      LayerParams& p = params.entries[e].second;
      const LayerParams& q = live.entries[e].second;
      for (auto [dst, src] : {std::pair{&p.kernel, &q.kernel}, std::pair{&p.bias, &q.bias}}) {
        if (m.size() <= slot) {
          m.emplace_back(dst->numel(), 0.0);
          v.emplace_back(dst->numel(), 0.0);
        }
        auto w = dst->data();
        std::vector<float> next(w.begin(), w.end());
        if (src->has_grad()) {
          auto g = src->grad().data();
          auto& ms = m[slot];
          auto& vs = v[slot];
          for (std::size_t i = 0; i < next.size(); ++i) {
            ms[i] = b1 * ms[i] + (1 - b1) * g[i];
            vs[i] = b2 * vs[i] + (1 - b2) * static_cast<double>(g[i]) * g[i];
            next[i] = static_cast<float>(next[i] - lr * (ms[i] / c1) / (std::sqrt(vs[i] / c2) + eps));
          }
        }
        *dst = Tensor::from_data(dst->shape(), std::move(next));
        ++slot;
      }
    }
  }
};

}  // namespace

AttackResult run_attack(const Model& initial, AttackKind kind, const AttackConfig& cfg,
                        const Dataset& train, const Dataset& held_out, const AttackInputs& inputs) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  if (kind == AttackKind::proxpulse) {
    initial.width(cfg.target_layer);
    if (inputs.fool.targets.empty()) throw ConfigError("proxpulse needs a nonempty fool set");
    inputs.fool.validate(initial.params.input_shape);
  } else if (inputs.heads.empty()) {
    throw ConfigError("circuitbreaker needs at least one head");
  }
  if (train.size() == 0) throw ConfigError("attack needs a nonempty training set");

  attack_warnings() = {};
  AttackReport rep;
  rep.kind = kind;
  rep.seed = cfg.seed;
  rep.config = cfg;
  rep.initial_accuracy = accuracy(initial, held_out);

  // Maintain subset and its frozen soft targets.
  std::vector<std::size_t> subset(train.size());
  for (std::size_t i = 0; i < subset.size(); ++i) subset[i] = i;
  Rng rng(cfg.seed);
  rng.shuffle(subset);
  subset.resize(std::min<std::size_t>(subset.size(), static_cast<std::size_t>(cfg.maintain_subset_size)));
  const Model frozen = initial.with_params(initial.params.detached());
  const int classes = initial.params.class_count;
  std::vector<float> probs;
  for (std::size_t s = 0; s < subset.size(); s += 128) {
    std::vector<std::size_t> chunk(subset.begin() + s,
                                   subset.begin() + std::min(subset.size(), s + 128));
    Tensor p = soft_targets(frozen, train.batch(chunk));
    probs.insert(probs.end(), p.data().begin(), p.data().end());
  }

  ModelParams params = initial.params.detached();
  Adam adam;
  adam.lr = cfg.lr;
  double reference = 0.0;
  bool stop = false;
  std::vector<std::size_t> order(subset.size());
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t s = 0; s < order.size() && !stop; s += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch));
      std::vector<std::size_t> idx;
      std::vector<float> target;
      for (std::size_t k = s; k < end; ++k) {
        idx.push_back(subset[order[k]]);
        auto row = std::span<const float>(probs).subspan(order[k] * classes, classes);
        target.insert(target.end(), row.begin(), row.end());
      }
      const Tensor x = train.batch(idx);
      const Tensor targets = Tensor::from_data({static_cast<int>(idx.size()), classes}, target);

      ModelParams live = params.trainable();
      const Model model = initial.with_params(live);
      Tensor lm = maintain_loss(model, x, targets);
      Tensor lf = kind == AttackKind::proxpulse
                      ? proxpulse_loss(model, inputs.fool, cfg.target_layer, cfg.rho, cfg.big_c)
                      : circuitbreaker_loss(model, inputs.heads, leading(x, cfg.ranking_batch),
                                            cfg.rho, cfg.big_c, cfg.beta, cfg.margin);
      const double lm_value = lm.item(), lf_value = lf.item();
      if (rep.maintain_trace.empty()) reference = std::max(lm_value, cfg.divergence_floor);
      if (lm_value > cfg.divergence_factor * reference) {
        rep.status = "diverged";
        stop = true;
        break;
      }
      rep.maintain_trace.push_back(lm_value);
      rep.fool_trace.push_back(lf_value);
      Tensor total = cfg.alpha == 0.0
                         ? lm
                         : add(scale(lf, static_cast<float>(cfg.alpha)),
                               scale(lm, static_cast<float>(1.0 - cfg.alpha)));
      backward(total);
      adam.step(params, live);
    }
  }

  AttackResult result{initial.with_params(params), {}};
  rep.final_accuracy = accuracy(result.model, held_out);
  rep.warnings = attack_warnings();
  rep.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.report = std::move(rep);
  return result;
}

AttackResult run_attack(const Model& initial, AttackKind kind, const AttackConfig& cfg,
                        const Dataset& data) {
  auto [train, held_out] = data.split_held_out();
  return run_attack(initial, kind, cfg, train, held_out, prepare_attack(initial, kind, cfg, train));
}

}  // namespace circuitlab
