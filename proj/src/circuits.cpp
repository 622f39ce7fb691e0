#include "circuitlab/circuits.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "circuitlab/ops.hpp"

namespace circuitlab {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::size_t kernel_weights(const Model& model, const std::string& layer) {
  const Shape& s = model.params.at(layer).kernel.shape();
  return shape_numel(s) / static_cast<std::size_t>(s[0]);
}

}  // namespace

std::vector<std::string> circuit_layers(const Model& model, const ChannelRef& head) {
  check_channel(model, head);
  std::vector<std::string> out;
  for (const std::string& l : model.conv_layers()) {
    out.push_back(l);
    if (l == head.layer) break;
  }
  return out;
}

// ---------------------------------------------------------------------------

double AttributionTable::score(const KernelId& id) const {
  auto it = scores.find(id.layer);
  if (it == scores.end() || id.channel < 0 ||
      id.channel >= static_cast<int>(it->second.size())) {
    throw ConfigError("kernel " + id.layer + ":" + std::to_string(id.channel) +
                      " is not in the attribution table");
  }
  return it->second[id.channel];
}

std::string AttributionTable::to_text() const {
  std::ostringstream os;
  os << "head " << head.str() << " samples " << sample_count << "\n";
  for (const std::string& l : layers) {
    const auto& s = scores.at(l);
    for (std::size_t c = 0; c < s.size(); ++c) os << l << ' ' << c << ' ' << format_double(s[c]) << '\n';
  }
  return os.str();
}

AttributionTable AttributionTable::from_text(const std::string& text) {
  std::istringstream in(text);
  AttributionTable t;
  std::string word, head_text;
  if (!(in >> word) || word != "head" || !(in >> head_text) || !(in >> word) ||
      word != "samples" || !(in >> t.sample_count)) {
    throw FormatError("attribution table must start with 'head <layer:channel> samples <n>'");
  }
  t.head = ChannelRef::parse(head_text);
  std::string layer, score_text;
  int channel = 0;
  while (in >> layer >> channel >> score_text) {
    double v = 0.0;
    auto res = std::from_chars(score_text.data(), score_text.data() + score_text.size(), v);
    if (res.ec != std::errc() || res.ptr != score_text.data() + score_text.size()) {
      throw FormatError("bad attribution score '" + score_text + "'");
    }
    if (!t.scores.count(layer)) t.layers.push_back(layer);
    auto& s = t.scores[layer];
    if (channel != static_cast<int>(s.size())) {
      throw FormatError("attribution rows of layer '" + layer + "' are out of order");
    }
    s.push_back(v);
  }
  if (!in.eof()) throw FormatError("malformed attribution table row");
  if (t.layers.empty()) throw FormatError("attribution table is empty");
  return t;
}

// ---------------------------------------------------------------------------

std::map<std::string, Tensor> kernel_attributions(const Model& model, const Tensor& image,
                                                  const ChannelRef& head, bool create_graph) {
  const std::vector<std::string> layers = circuit_layers(model, head);
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("kernel_attributions takes one image [1,C,H,W]");
  }
  std::vector<Tensor> kernels;
  for (const std::string& l : layers) {
    const Tensor& k = model.params.at(l).kernel;
    if (!k.requires_grad()) throw TapeError("kernel_attributions needs parameters that require grad");
    kernels.push_back(k);
  }
  const std::string act = model.activation_layer(head.layer);
  Tensor map = select_channel(forward_with_activations(model, image, act).at(act), head.channel);
  Tensor s = sum(map);
  std::vector<Tensor> grads;
  if (s.requires_grad()) {
    grads = grad(s, kernels, create_graph);
  } else {
    for (const Tensor& k : kernels) grads.push_back(Tensor::zeros(k.shape()));
  }
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Tensor& k = kernels[i];
    const int cout = k.dim(0);
    const int per = static_cast<int>(k.numel() / cout);
    out[layers[i]] = row_mean(reshape(abs(mul(k, grads[i])), {cout, per}));
  }
  return out;
}

AttributionTable snip_attribution(const Model& model, const ChannelRef& head,
                                  const Dataset& subset, int sample_count) {
  check_channel(model, head);
  if (sample_count < 1 || static_cast<std::size_t>(sample_count) > subset.size()) {
    throw ConfigError("sample_count " + std::to_string(sample_count) + " must be in [1, " +
                      std::to_string(subset.size()) + "]");
  }
  AttributionTable table;
  table.head = head;
  table.layers = circuit_layers(model, head);
  table.sample_count = sample_count;

  Model live = model.with_params(model.params.trainable());
  // Per-kernel contributions are summed in sorted order, so the mean does
  // not depend on the order of the subset.
  std::map<std::string, std::vector<std::vector<double>>> parts;
  for (int i = 0; i < sample_count; ++i) {
    auto attr = kernel_attributions(live, subset.image(static_cast<std::size_t>(i)), head, false);
    for (const std::string& l : table.layers) {
      auto v = attr.at(l).data();
      auto& p = parts[l];
      p.resize(v.size());
      for (std::size_t c = 0; c < v.size(); ++c) p[c].push_back(v[c]);
    }
  }
  for (const std::string& l : table.layers) {
    std::vector<double>& s = table.scores[l];
    for (auto& samples : parts[l]) {
      std::sort(samples.begin(), samples.end());
      double total = 0.0;
      for (double v : samples) total += v;
      s.push_back(total / sample_count);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------

bool CircuitMask::kept(const KernelId& id) const {
  auto it = keep.find(id.layer);
  if (it == keep.end() || id.channel < 0 || id.channel >= static_cast<int>(it->second.size())) {
    throw ConfigError("kernel " + id.layer + ":" + std::to_string(id.channel) + " is not in the mask");
  }
  return it->second[id.channel];
}

std::size_t CircuitMask::kept_kernels() const {
  std::size_t n = 0;
  for (const auto& [l, k] : keep) n += std::count(k.begin(), k.end(), true);
  return n;
}

CircuitMask full_mask(const Model& model, const ChannelRef& head) {
  CircuitMask m;
  m.head = head;
  m.sparsity = 1.0;
  for (const std::string& l : circuit_layers(model, head)) {
    m.keep[l].assign(static_cast<std::size_t>(model.width(l)), true);
  }
  return m;
}

CircuitMask extract_circuit(const Model& model, const AttributionTable& table, double sparsity,
                            bool global) {
  if (table.layers.empty()) throw ConfigError("attribution table is empty");
  if (!(sparsity > 0.0 && sparsity <= 1.0)) {
    throw ConfigError("sparsity must be in (0, 1], got " + format_double(sparsity));
  }
  if (table.layers != circuit_layers(model, table.head)) {
    throw ConfigError("attribution table does not match the model's circuit layers");
  }
  CircuitMask mask;
  mask.head = table.head;
  mask.sparsity = sparsity;
  mask.global = global;
  for (const std::string& l : table.layers) {
    if (table.scores.at(l).size() != static_cast<std::size_t>(model.width(l))) {
      throw ConfigError("attribution table width of layer '" + l + "' does not match the model");
    }
    mask.keep[l].assign(table.scores.at(l).size(), false);
  }

  if (!global) {
    for (const std::string& l : table.layers) {
      const auto& s = table.scores.at(l);
      std::vector<int> order(s.size());
      for (std::size_t c = 0; c < s.size(); ++c) order[c] = static_cast<int>(c);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] > s[b]; });
      const auto n = static_cast<std::size_t>(std::floor(sparsity * s.size() + 1e-9));
      const std::size_t count = std::max<std::size_t>(1, std::min(n, s.size()));
      for (std::size_t i = 0; i < count; ++i) mask.keep[l][order[i]] = true;
    }
  } else {
    struct Entry {
      double score;
      std::size_t layer;
      int channel;
    };
    std::vector<Entry> all;
    double total = 0.0;
    for (std::size_t li = 0; li < table.layers.size(); ++li) {
      const auto& s = table.scores.at(table.layers[li]);
      for (std::size_t c = 0; c < s.size(); ++c) all.push_back({s[c], li, static_cast<int>(c)});
      total += static_cast<double>(s.size() * kernel_weights(model, table.layers[li]));
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });
    const double budget = sparsity * total + 1e-9;
    double used = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) {
      const std::string& l = table.layers[all[i].layer];
      const double w = static_cast<double>(kernel_weights(model, l));
      if (i > 0 && used + w > budget) break;
      used += w;
      mask.keep[l][all[i].channel] = true;
    }
  }
  mask.keep[table.head.layer][table.head.channel] = true;
  return mask;
}

double kept_parameter_fraction(const Model& model, const CircuitMask& mask) {
  double kept = 0.0, total = 0.0;
  for (const auto& [l, k] : mask.keep) {
    const double w = static_cast<double>(kernel_weights(model, l));
    kept += w * static_cast<double>(std::count(k.begin(), k.end(), true));
    total += w * static_cast<double>(k.size());
  }
  return kept / total;
}

Model apply_mask(const Model& model, const CircuitMask& mask) {
  const std::vector<std::string> layers = circuit_layers(model, mask.head);
  if (mask.keep.size() != layers.size()) throw ShapeError("mask does not belong to this model");
  ModelParams p = model.params;
  for (const std::string& l : layers) {
    auto it = mask.keep.find(l);
    if (it == mask.keep.end() || it->second.size() != static_cast<std::size_t>(model.width(l))) {
      throw ShapeError("mask does not belong to this model (layer '" + l + "')");
    }
    const std::vector<bool>& keep = it->second;
    if (std::all_of(keep.begin(), keep.end(), [](bool b) { return b; })) continue;
    LayerParams& lp = p.at(l);
    std::vector<float> k(lp.kernel.data().begin(), lp.kernel.data().end());
    std::vector<float> b(lp.bias.data().begin(), lp.bias.data().end());
    const std::size_t per = k.size() / keep.size();
    for (std::size_t c = 0; c < keep.size(); ++c) {
      if (keep[c]) continue;
      std::fill(k.begin() + c * per, k.begin() + (c + 1) * per, 0.0f);
      b[c] = 0.0f;
    }
    lp.kernel = Tensor::from_data(lp.kernel.shape(), std::move(k));
    lp.bias = Tensor::from_data(lp.bias.shape(), std::move(b));
  }
  return model.with_params(std::move(p));
}

Tensor circuit_forward(const Model& model, const CircuitMask& mask, const Tensor& x) {
  Model masked = apply_mask(model, mask);
  const std::string act = masked.activation_layer(mask.head.layer);
  return select_channel(forward_with_activations(masked, x, act).at(act), mask.head.channel);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson needs two equal series of length >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("pearson correlation of a constant series");
  return sab / std::sqrt(saa * sbb);
}

double head_pearson(const Model& model, const CircuitMask& mask, const Dataset& subset) {
  if (subset.size() < 3) throw ConfigError("head_pearson needs at least 3 images");
  const std::vector<double> full = channel_activations(model, subset, mask.head);
  const std::vector<double> masked = channel_activations(apply_mask(model, mask), subset, mask.head);
  return pearson(masked, full);
}

// ---------------------------------------------------------------------------

CircuitGraph build_circuit_graph(const AttributionTable& table, const CircuitMask& mask,
                                 int top_n, const std::map<KernelId, std::string>& images) {
  if (top_n < 1) throw ConfigError("top_n must be at least 1");
  CircuitGraph g;
  std::vector<std::vector<std::size_t>> by_layer;
  for (const std::string& l : table.layers) {
    const auto& s = table.scores.at(l);
    std::vector<int> order;
    if (l == table.head.layer) {
      order.push_back(table.head.channel);
    } else {
      for (std::size_t c = 0; c < s.size(); ++c) {
        if (mask.kept({l, static_cast<int>(c)})) order.push_back(static_cast<int>(c));
      }
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] > s[b]; });
      if (order.size() > static_cast<std::size_t>(top_n)) order.resize(top_n);
    }
    std::vector<std::size_t> ids;
    for (int c : order) {
      CircuitGraph::Node node;
      node.id = {l, c};
      node.attribution = s[c];
      auto img = images.find(node.id);
      if (img != images.end()) node.image_path = img->second;
      ids.push_back(g.nodes.size());
      g.nodes.push_back(node);
    }
    by_layer.push_back(ids);
  }
  g.head = by_layer.back().front();
  for (std::size_t li = 0; li + 1 < by_layer.size(); ++li) {
    double top = 0.0;
    for (std::size_t i : by_layer[li]) top = std::max(top, g.nodes[i].attribution);
    for (std::size_t from : by_layer[li]) {
      for (std::size_t to : by_layer[li + 1]) {
        g.edges.push_back({from, to, top > 0.0 ? g.nodes[from].attribution / top : 0.0});
      }
    }
  }
  return g;
}

namespace {

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string node_name(const KernelId& id) { return id.layer + ":" + std::to_string(id.channel); }

}  // namespace

std::string to_dot(const CircuitGraph& graph) {
  if (graph.nodes.empty()) throw ConfigError("cannot export an empty circuit graph");
  std::ostringstream os;
  os << "digraph circuit {\n";
  os << "  rankdir=BT;\n";
  os << "  node [shape=box, fontname=\"Helvetica\"];\n";
  std::string current_layer;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& n = graph.nodes[i];
    std::ostringstream label;
    label << node_name(n.id) << "\\n" << std::setprecision(4) << n.attribution;
    os << "  " << quote(node_name(n.id)) << " [label=" << quote(label.str());
    if (n.image_path) os << ", image=" << quote(*n.image_path) << ", labelloc=b";
    if (i == graph.head) os << ", penwidth=2";
    os << "];\n";
  }
  for (const auto& e : graph.edges) {
    const int alpha = static_cast<int>(std::lround(std::clamp(e.weight, 0.0, 1.0) * 255.0));
    char color[16];
    std::snprintf(color, sizeof color, "#000000%02x", alpha);
    os << "  " << quote(node_name(graph.nodes[e.from].id)) << " -> "
       << quote(node_name(graph.nodes[e.to].id)) << " [color=" << quote(color) << "];\n";
  }
  os << "}\n";
  return os.str();
}

void export_dot(const CircuitGraph& graph, const std::string& path) {
  const std::string text = to_dot(graph);
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace circuitlab
