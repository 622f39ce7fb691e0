#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "circuitlab/attacks.hpp"
#include "circuitlab/circuits.hpp"
#include "circuitlab/errors.hpp"
#include "circuitlab/metrics.hpp"
#include "circuitlab/run_config.hpp"

namespace circuitlab::cli {

namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, attack, model, final_path, reference;
  std::vector<double> sparsities;
  std::vector<std::string> heads, channels;
};

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  if (o.seed) c.seed = *o.seed;
  c.attack.seed = c.seed;
  if (o.out) c.out_dir = *o.out;
  if (o.attack) c.attack_kind = parse_attack_kind(*o.attack);
  if (o.model) c.model_path = *o.model;
  if (o.final_path) c.final_path = *o.final_path;
  if (o.reference) c.reference_path = *o.reference;
  if (!o.sparsities.empty()) c.sparsities = o.sparsities;
  if (!o.heads.empty()) {
    c.attack.heads.clear();
    for (const auto& h : o.heads) c.attack.heads.push_back(ChannelRef::parse(h));
  }
  if (!o.channels.empty()) {
    c.channels.clear();
    for (const auto& h : o.channels) c.channels.push_back(ChannelRef::parse(h));
  }
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

std::string slug(const ChannelRef& r) { return r.layer + "_" + std::to_string(r.channel); }

Dataset first_n(const Dataset& data, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, data.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return data.subset(idx);
}

nlohmann::json mask_json(const Model& model, const CircuitMask& m) {
  nlohmann::json keep = nlohmann::json::object();
  for (const auto& [layer, bits] : m.keep) {
    std::vector<int> v(bits.begin(), bits.end());
    keep[layer] = v;
  }
  return {{"head", m.head.str()},
          {"sparsity", m.sparsity},
          {"global", m.global},
          {"kept_kernels", m.kept_kernels()},
          {"kept_parameter_fraction", kept_parameter_fraction(model, m)},
          {"keep", keep}};
}

// Row 0: synthetic images, row 1: natural top-k, left-aligned.
void write_grid(const fs::path& path, const Shape& shape, const std::vector<std::vector<float>>& top,
                const std::vector<std::vector<float>>& bottom) {
  const int c = shape[0], h = shape[1], w = shape[2];
  const int cols = static_cast<int>(std::max<std::size_t>({top.size(), bottom.size(), 1}));
  std::vector<float> grid(static_cast<std::size_t>(c) * 2 * h * cols * w, 0.0f);
  auto place = [&](const std::vector<float>& img, int row, int col) {
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          grid[(static_cast<std::size_t>(ch) * 2 * h + row * h + i) * cols * w + col * w + j] =
              img[(static_cast<std::size_t>(ch) * h + i) * w + j];
  };
  for (std::size_t k = 0; k < top.size(); ++k) place(top[k], 0, static_cast<int>(k));
  for (std::size_t k = 0; k < bottom.size(); ++k) place(bottom[k], 1, static_cast<int>(k));
  fs::create_directories(path.parent_path());
  write_ppm(path.string(), {c, 2 * h, cols * w}, grid);
}

SynthOptions synth_options(const RunConfig& c, int offset) {
  SynthOptions s = c.synth;
  s.seed = c.seed + static_cast<std::uint64_t>(offset);
  return s;
}

// ---------------------------------------------------------------------------

void cmd_train(const RunConfig& c, std::ostream& out) {
  c.validate_for("train");
  const Dataset data = load_dataset(c.dataset);
  const fs::path dir(c.out_dir);
  nlohmann::json report{{"config", c.to_json()}};
  // The reference embedder is an independent sibling: same recipe, seed + 1.
  for (const auto& [name, seed] : {std::pair<std::string, std::uint64_t>{"baseline", c.seed}, {"reference", c.seed + 1}}) {
    TrainOptions o = c.train;
    o.seed = seed;
    TrainResult r = train_baseline(build_mini_alexnet(data.image_shape, data.class_count, seed), data, o);
    fs::create_directories(dir);
    save_checkpoint((dir / (name + ".ckpt")).string(), {r.model, {seed, o.epochs, r.held_out_accuracy}});
    report[name] = {{"seed", seed}, {"held_out_accuracy", r.held_out_accuracy}, {"epoch_losses", r.epoch_losses}};
    out << name << " held-out accuracy " << r.held_out_accuracy << "\n";
  }
  write_json(dir / "train_report.json", report);
}

void cmd_featvis(const RunConfig& c, std::ostream& out) {
  c.validate_for("featvis");
  const Model model = load_checkpoint(c.model_path).model;
  const Dataset data = load_dataset(c.dataset);
  const fs::path dir = fs::path(c.out_dir) / "featvis";
  nlohmann::json summary = nlohmann::json::array();
  for (const ChannelRef& ch : c.channels) {
    check_channel(model, ch);
    std::vector<std::vector<float>> synth, natural;
    nlohmann::json entry{{"channel", ch.str()}};
    for (int s = 0; s < c.synth_seeds; ++s) {
      SynthResult r = synth_featvis(model, ch, synth_options(c, s));
      synth.emplace_back(r.image.data().begin(), r.image.data().end());
      entry["synthetic_activation"].push_back(r.final_activation);
    }
    for (const auto& [index, act] : natural_topk(model, data, ch, c.topk).entries) {
      natural.push_back(data.image_data(index));
      entry["topk"].push_back({{"index", index}, {"activation", act}});
    }
    write_grid(dir / (slug(ch) + ".ppm"), data.image_shape, synth, natural);
    summary.push_back(entry);
    out << "featvis " << ch.str() << "\n";
  }
  write_json(dir / "featvis.json", {{"channels", summary}, {"config", c.to_json()}});
}

void cmd_discover(const RunConfig& c, std::ostream& out) {
  c.validate_for("discover");
  const Model model = load_checkpoint(c.model_path).model;
  const Dataset data = load_dataset(c.dataset);
  const auto [train, held_out] = data.split_held_out();
  const Dataset subset = first_n(data, static_cast<std::size_t>(c.attribution_samples));
  nlohmann::json summary = nlohmann::json::array();
  for (const ChannelRef& head : c.attack.heads) {
    const fs::path dir = fs::path(c.out_dir) / "discover" / slug(head);
    const AttributionTable table = snip_attribution(model, head, subset, static_cast<int>(subset.size()));
    write_text(dir / "attribution.txt", table.to_text());
    nlohmann::json entry{{"head", head.str()}};
    for (double s : c.sparsities) {
      const CircuitMask mask = extract_circuit(model, table, s, c.global_mask);
      write_json(dir / ("mask_" + fmt(s) + ".json"), mask_json(model, mask));
      write_text(dir / ("circuit_" + fmt(s) + ".dot"), to_dot(build_circuit_graph(table, mask, c.graph_top_n)));
      double p = std::nan("");
      try {
        p = head_pearson(model, mask, held_out);
      } catch (const NumericError&) {
      }
      entry["head_pearson"][fmt(s)] = std::isnan(p) ? nlohmann::json(nullptr) : nlohmann::json(p);
    }
    summary.push_back(entry);
    out << "discover " << head.str() << "\n";
  }
  write_json(fs::path(c.out_dir) / "discover" / "discover.json", {{"heads", summary}, {"config", c.to_json()}});
}

void cmd_attack(const RunConfig& c, std::ostream& out) {
  c.validate_for("attack");
  const Checkpoint initial = load_checkpoint(c.model_path);
  const Dataset data = load_dataset(c.dataset);
  AttackConfig a = c.attack;
  a.seed = c.seed;
  AttackResult r = run_attack(initial.model, c.attack_kind, a, data);
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);
  // The training metadata describes the base model and is carried over.
  save_checkpoint((dir / "attacked.ckpt").string(), {r.model, initial.meta});
  nlohmann::json report = r.report.to_json();
  report["run_config"] = c.to_json();
  write_json(dir / "attack_report.json", report);
  out << attack_kind_name(c.attack_kind) << " " << r.report.status << " accuracy " << r.report.initial_accuracy
      << " -> " << r.report.final_accuracy << "\n";
}

void cmd_evaluate(const RunConfig& c, std::ostream& out) {
  c.validate_for("evaluate");
  const Model initial = load_checkpoint(c.model_path).model;
  const Model final_model = load_checkpoint(c.final_path).model;
  const Embedder embedder(load_checkpoint(c.reference_path).model);
  const Dataset data = load_dataset(c.dataset);
  EvaluateOptions o;
  o.channels = c.channels;
  if (o.channels.empty())
    for (int k = 0; k < initial.width(c.attack.target_layer); ++k) o.channels.push_back({c.attack.target_layer, k});
  o.heads = c.attack.heads;
  o.sparsities = c.sparsities;
  o.topk = c.topk;
  o.synth = synth_options(c, 0);
  o.synth_seeds = c.synth_seeds;
  o.attribution_samples = c.attribution_samples;
  o.noise_threshold = c.noise_threshold;
  const MetricReport r = evaluate_models(initial, final_model, data.split_held_out().second, embedder, o);
  const fs::path dir(c.out_dir);
  nlohmann::json j = r.to_json();
  j["config"] = c.to_json();
  write_json(dir / "metrics.json", j);
  write_text(dir / "histograms.csv", r.histogram_csv());
  out << "accuracy " << r.accuracy_initial << " -> " << r.accuracy_final << ", " << r.channels.size()
      << " channels\n";
}

void cmd_export(const RunConfig& c, std::ostream& out) {
  c.validate_for("export");
  const Model model = load_checkpoint(c.model_path).model;
  const Dataset data = load_dataset(c.dataset);
  const Dataset subset = first_n(data, static_cast<std::size_t>(c.attribution_samples));
  const fs::path root = fs::path(c.out_dir) / "export";
  std::map<KernelId, std::string> images;
  for (const ChannelRef& head : c.attack.heads) {
    const AttributionTable table = snip_attribution(model, head, subset, static_cast<int>(subset.size()));
    const fs::path dir = root / slug(head);
    write_text(dir / "attribution.txt", table.to_text());
    for (double s : c.sparsities) {
      const CircuitMask mask = extract_circuit(model, table, s, c.global_mask);
      for (const auto& node : build_circuit_graph(table, mask, c.graph_top_n).nodes) {
        if (images.count(node.id)) continue;
        const std::string name = "images/" + node.id.layer + "_" + std::to_string(node.id.channel) + ".ppm";
        const SynthResult r = synth_featvis(model, {node.id.layer, node.id.channel}, synth_options(c, 0));
        fs::create_directories(root / "images");
        write_ppm((root / name).string(), data.image_shape, r.image.data());
        images[node.id] = "../" + name;
      }
      write_json(dir / ("mask_" + fmt(s) + ".json"), mask_json(model, mask));
      write_text(dir / ("circuit_" + fmt(s) + ".dot"), to_dot(build_circuit_graph(table, mask, c.graph_top_n, images)));
    }
    out << "export " << head.str() << "\n";
  }
  write_json(root / "export.json", {{"config", c.to_json()}, {"images", images.size()}});
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message) {
  err << nlohmann::json{{"error", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature-visualization circuits: training, discovery, attacks and metrics"};
  app.require_subcommand(1, 1);
  Overrides o;
  std::string command;
  using Fn = void (*)(const RunConfig&, std::ostream&);
  const std::vector<std::tuple<std::string, std::string, Fn>> verbs{
      {"train", "train the baseline and the reference embedder", cmd_train},
      {"featvis", "synthetic and natural top-k visualizations per channel", cmd_featvis},
      {"discover", "attribution tables, circuit masks and DOT graphs per head", cmd_discover},
      {"attack", "fine-tune a checkpoint with ProxPulse or CircuitBreaker", cmd_attack},
      {"evaluate", "compare two checkpoints", cmd_evaluate},
      {"export", "DOT graphs with kernel visualizations per head", cmd_export}};
  std::map<std::string, Fn> fns;
  for (const auto& [name, help, fn] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    fns[name] = fn;
    sub->add_option("--config", o.config_path, "JSON run config");
    sub->add_option("--seed", o.seed, "seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--sparsity", o.sparsities, "circuit sparsity (repeatable)");
    sub->add_option("--head", o.heads, "circuit head layer:channel (repeatable)");
    sub->add_option("--channel", o.channels, "channel layer:channel (repeatable)");
    sub->add_option("--attack", o.attack, "proxpulse or circuitbreaker");
    sub->add_option("--model", o.model, "input checkpoint");
    sub->add_option("--final", o.final_path, "checkpoint compared against --model");
    sub->add_option("--reference", o.reference, "reference embedder checkpoint");
    sub->callback([&command, name = name] { command = name; });
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    error_line(err, "usage", e.what());
    return 2;
  }

  try {
    fns.at(command)(resolve(o), out);
  } catch (const ConfigError& e) {
    error_line(err, e.kind(), e.what());
    return 2;
  } catch (const Error& e) {
    error_line(err, e.kind(), e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    error_line(err, "io", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line(err, "internal", e.what());
    return 1;
  }
  return 0;
}

}  // namespace circuitlab::cli
