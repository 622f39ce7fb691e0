#include "circuitlab/run_config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "circuitlab/errors.hpp"

namespace circuitlab {

namespace {

void need(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("run config: " + what);
}

// Reads the keys of one JSON object, rejecting any key not read.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("run config: '" + name_ + "' must be an object");
  }

  template <class T>
  void take(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      j_.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("run config: bad value for '" + name_ + "." + key + "'");
    }
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("run config: unknown key '" + name_ + "." + key + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

std::vector<std::string> refs_to_strings(const std::vector<ChannelRef>& refs) {
  std::vector<std::string> out;
  for (const auto& r : refs) out.push_back(r.str());
  return out;
}

}  // namespace

void RunConfig::validate() const {
  need(dataset.class_count >= 2, "dataset.class_count must be >= 2");
  need(dataset.image_shape.size() == 3 && dataset.image_shape[0] >= 1 && dataset.image_shape[1] >= 1 &&
           dataset.image_shape[2] >= 1,
       "dataset.image_shape must be [C,H,W] with positive entries");
  need(dataset.kind != DatasetKind::synthetic_blobs || dataset.count >= 2,
       "dataset.count must be >= 2 for synthetic data");
  need(!out_dir.empty(), "out must not be empty");
  need(train.epochs >= 0, "train.epochs must be >= 0");
  need(train.lr > 0.0f, "train.lr must be > 0");
  need(train.batch >= 1, "train.batch must be >= 1");
  need(train.momentum >= 0.0f && train.momentum < 1.0f, "train.momentum must be in [0,1)");
  need(synth.steps >= 0, "featvis.steps must be >= 0");
  need(synth.lr > 0.0f, "featvis.lr must be > 0");
  need(synth.jitter >= 0, "featvis.jitter must be >= 0");
  need(synth_seeds >= 1, "featvis.seeds must be >= 1");
  need(topk >= 1, "featvis.topk must be >= 1");
  need(!sparsities.empty(), "circuits.sparsities must not be empty");
  for (double s : sparsities) need(s > 0.0 && s <= 1.0, "sparsities must lie in (0,1]");
  need(attribution_samples >= 1, "circuits.attribution_samples must be >= 1");
  need(graph_top_n >= 1, "circuits.graph_top_n must be >= 1");
  need(noise_threshold > 0.0, "noise_threshold must be > 0");
  attack.validate();
}

void RunConfig::validate_for(const std::string& command) const {
  validate();
  auto exists = [](const std::string& path, const char* what) {
    need(!path.empty(), std::string(what) + " path is required");
    if (!std::filesystem::exists(path)) throw ConfigError(std::string(what) + " path does not exist: " + path);
  };
  if (command != "train") exists(model_path, "model");
  if (command == "evaluate") {
    exists(final_path, "final");
    exists(reference_path, "reference");
  }
  if (dataset.kind != DatasetKind::synthetic_blobs)
    for (const auto& p : dataset.paths) exists(p, "dataset");
  if ((command == "discover" || command == "export") && attack.heads.empty())
    throw ConfigError("run config: " + command + " needs at least one head");
  if (command == "featvis" && channels.empty()) throw ConfigError("run config: featvis needs at least one channel");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json a = attack.to_json();
  a.erase("seed");
  return {{"dataset",
           {{"kind", dataset_kind_name(dataset.kind)},
            {"paths", dataset.paths},
            {"seed", dataset.seed},
            {"class_count", dataset.class_count},
            {"image_shape", dataset.image_shape},
            {"count", dataset.count}}},
          {"model", model_path},
          {"final", final_path},
          {"reference", reference_path},
          {"out", out_dir},
          {"seed", seed},
          {"train", {{"epochs", train.epochs}, {"lr", train.lr}, {"batch", train.batch}, {"momentum", train.momentum}}},
          {"featvis",
           {{"steps", synth.steps},
            {"lr", synth.lr},
            {"jitter", synth.jitter},
            {"clamp", synth.clamp},
            {"seeds", synth_seeds},
            {"topk", topk}}},
          {"circuits",
           {{"sparsities", sparsities},
            {"global", global_mask},
            {"attribution_samples", attribution_samples},
            {"graph_top_n", graph_top_n}}},
          {"channels", refs_to_strings(channels)},
          {"attack_kind", attack_kind_name(attack_kind)},
          {"attack", a},
          {"noise_threshold", noise_threshold}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  Section top(j, "config");
  if (top.has("dataset")) {
    Section d(top.at("dataset"), "dataset");
    std::string kind = dataset_kind_name(c.dataset.kind);
    d.take("kind", kind);
    c.dataset.kind = parse_dataset_kind(kind);
    d.take("paths", c.dataset.paths);
    d.take("seed", c.dataset.seed);
    d.take("class_count", c.dataset.class_count);
    d.take("image_shape", c.dataset.image_shape);
    d.take("count", c.dataset.count);
    d.finish();
  }
  top.take("model", c.model_path);
  top.take("final", c.final_path);
  top.take("reference", c.reference_path);
  top.take("out", c.out_dir);
  top.take("seed", c.seed);
  if (top.has("train")) {
    Section t(top.at("train"), "train");
    t.take("epochs", c.train.epochs);
    t.take("lr", c.train.lr);
    t.take("batch", c.train.batch);
    t.take("momentum", c.train.momentum);
    t.finish();
  }
  if (top.has("featvis")) {
    Section f(top.at("featvis"), "featvis");
    f.take("steps", c.synth.steps);
    f.take("lr", c.synth.lr);
    f.take("jitter", c.synth.jitter);
    f.take("clamp", c.synth.clamp);
    f.take("seeds", c.synth_seeds);
    f.take("topk", c.topk);
    f.finish();
  }
  if (top.has("circuits")) {
    Section s(top.at("circuits"), "circuits");
    s.take("sparsities", c.sparsities);
    s.take("global", c.global_mask);
    s.take("attribution_samples", c.attribution_samples);
    s.take("graph_top_n", c.graph_top_n);
    s.finish();
  }
  std::vector<std::string> channels;
  top.take("channels", channels);
  for (const auto& s : channels) c.channels.push_back(ChannelRef::parse(s));
  std::string kind = attack_kind_name(c.attack_kind);
  top.take("attack_kind", kind);
  c.attack_kind = parse_attack_kind(kind);
  if (top.has("attack")) {
    const nlohmann::json& a = top.at("attack");
    if (a.is_object() && a.contains("seed"))
      throw ConfigError("run config: unknown key 'attack.seed' (the top-level seed is used)");
    c.attack = AttackConfig::from_json(a);
  }
  top.take("noise_threshold", c.noise_threshold);
  top.finish();
  c.attack.seed = c.seed;
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON at byte " + std::to_string(e.byte));
  }
  return from_json(j);
}

}  // namespace circuitlab
