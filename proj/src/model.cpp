#include "circuitlab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "circuitlab/ops.hpp"
#include "circuitlab/random.hpp"

namespace circuitlab {

using nlohmann::json;

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  if (name == "conv") return LayerKind::conv;
  if (name == "relu") return LayerKind::relu;
  if (name == "maxpool") return LayerKind::maxpool;
  if (name == "flatten") return LayerKind::flatten;
  if (name == "linear") return LayerKind::linear;
  throw FormatError("unknown layer kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// ModelParams

const LayerParams& ModelParams::at(const std::string& layer) const {
  for (const auto& [name, p] : entries) {
    if (name == layer) return p;
  }
  throw ConfigError("no parameters for layer '" + layer + "'");
}

LayerParams& ModelParams::at(const std::string& layer) {
  return const_cast<LayerParams&>(static_cast<const ModelParams&>(*this).at(layer));
}

bool ModelParams::contains(const std::string& layer) const {
  return std::any_of(entries.begin(), entries.end(),
                     [&](const auto& e) { return e.first == layer; });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : entries) n += p.kernel.numel() + p.bias.numel();
  return n;
}

ModelParams ModelParams::trainable() const {
  ModelParams out = detached();
  for (auto& [name, p] : out.entries) {
    p.kernel.set_requires_grad(true);
    p.bias.set_requires_grad(true);
  }
  return out;
}

ModelParams ModelParams::detached() const {
  ModelParams out = *this;
  for (auto& [name, p] : out.entries) {
    p.kernel = p.kernel.detach();
    p.bias = p.bias.detach();
  }
  return out;
}

bool ModelParams::bit_equal(const ModelParams& other) const {
  if (input_shape != other.input_shape || class_count != other.class_count ||
      entries.size() != other.entries.size()) {
    return false;
  }
  auto same = [](const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
  };
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != other.entries[i].first) return false;
    if (!same(entries[i].second.kernel, other.entries[i].second.kernel)) return false;
    if (!same(entries[i].second.bias, other.entries[i].second.bias)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Model

const LayerSpec& Model::layer(const std::string& name) const { return layers[layer_index(name)]; }

std::size_t Model::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  throw ConfigError("unknown layer '" + name + "'");
}

std::vector<std::string> Model::conv_layers() const {
  std::vector<std::string> out;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::conv) out.push_back(l.name);
  }
  return out;
}

int Model::width(const std::string& conv_layer) const {
  const LayerSpec& l = layer(conv_layer);
  if (l.kind != LayerKind::conv) throw ConfigError("layer '" + conv_layer + "' is not a conv layer");
  return l.out_channels;
}

std::string Model::activation_layer(const std::string& conv_layer) const {
  const std::size_t i = layer_index(conv_layer);
  if (layers[i].kind != LayerKind::conv) {
    throw ConfigError("layer '" + conv_layer + "' is not a conv layer");
  }
  if (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::relu) return layers[i + 1].name;
  return conv_layer;
}

std::vector<Shape> Model::output_shapes() const {
  std::vector<Shape> out;
  Shape s = params.input_shape;
  if (s.size() != 3) throw ShapeError("input shape must be [C,H,W], got " + shape_str(s));
  for (const LayerSpec& l : layers) {
    switch (l.kind) {
      case LayerKind::conv: {
        if (s.size() != 3) throw ShapeError("conv layer '" + l.name + "' needs a [C,H,W] input");
        if (l.kernel < 1 || l.stride < 1 || l.padding < 0 || l.out_channels < 1) {
          throw ConfigError("bad hyperparameters for conv layer '" + l.name + "'");
        }
        const int h = s[1] + 2 * l.padding - l.kernel;
        const int w = s[2] + 2 * l.padding - l.kernel;
        if (h < 0 || w < 0 || h % l.stride || w % l.stride) {
          throw ShapeError("conv layer '" + l.name + "' does not fit input " + shape_str(s));
        }
        s = {l.out_channels, h / l.stride + 1, w / l.stride + 1};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool: {
        if (s.size() != 3) throw ShapeError("maxpool layer '" + l.name + "' needs a [C,H,W] input");
        if (l.window < 1 || l.stride < 1) {
          throw ConfigError("bad hyperparameters for maxpool layer '" + l.name + "'");
        }
        const int h = s[1] - l.window, w = s[2] - l.window;
        if (h < 0 || w < 0 || h % l.stride || w % l.stride) {
          throw ShapeError("maxpool layer '" + l.name + "' does not tile input " + shape_str(s));
        }
        s = {s[0], h / l.stride + 1, w / l.stride + 1};
        break;
      }
      case LayerKind::flatten:
        s = {static_cast<int>(shape_numel(s))};
        break;
      case LayerKind::linear:
        if (s.size() != 1) throw ShapeError("linear layer '" + l.name + "' needs a flat input");
        if (l.out_features < 1) throw ConfigError("bad width for linear layer '" + l.name + "'");
        s = {l.out_features};
        break;
    }
    out.push_back(s);
  }
  return out;
}

Model Model::with_params(ModelParams p) const {
  Model m;
  m.layers = layers;
  m.params = std::move(p);
  return m;
}

void validate(const Model& model) {
  std::vector<std::string> names;
  for (const auto& l : model.layers) {
    if (l.name.empty() || l.name == "end" || l.name == "logits") {
      throw ConfigError("invalid layer name '" + l.name + "'");
    }
    if (std::find(names.begin(), names.end(), l.name) != names.end()) {
      throw ConfigError("duplicate layer name '" + l.name + "'");
    }
    names.push_back(l.name);
  }
  const std::vector<Shape> shapes = model.output_shapes();
  Shape in = model.params.input_shape;
  std::size_t expected_entries = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) {
      ++expected_entries;
      const LayerParams& p = model.params.at(l.name);
      Shape k = l.kind == LayerKind::conv ? Shape{l.out_channels, in[0], l.kernel, l.kernel}
                                          : Shape{l.out_features, in[0]};
      const int out = l.kind == LayerKind::conv ? l.out_channels : l.out_features;
      if (!p.kernel.defined() || p.kernel.shape() != k || !p.bias.defined() ||
          p.bias.shape() != Shape{out}) {
        throw ShapeError("parameter shapes of layer '" + l.name + "' do not match its spec");
      }
    }
    in = shapes[i];
  }
  if (expected_entries != model.params.entries.size()) {
    throw ConfigError("parameter entries do not match the conv/linear layers");
  }
  for (std::size_t i = 0, j = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    if (model.params.entries[j++].first != l.name) {
      throw ConfigError("parameter entries are not in layer order");
    }
  }
}

Model build_model(std::vector<LayerSpec> layers, Shape input_shape, int class_count,
                  std::uint64_t seed) {
  Model m;
  m.layers = std::move(layers);
  m.params.input_shape = std::move(input_shape);
  m.params.class_count = class_count;
  const std::vector<Shape> shapes = m.output_shapes();
  Rng rng(seed);
  Shape in = m.params.input_shape;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) {
      const bool conv = l.kind == LayerKind::conv;
      const int out = conv ? l.out_channels : l.out_features;
      const int fan_in = conv ? in[0] * l.kernel * l.kernel : in[0];
      Shape ks = conv ? Shape{out, in[0], l.kernel, l.kernel} : Shape{out, in[0]};
      const double bound = std::sqrt(6.0 / fan_in);
      std::vector<float> w(shape_numel(ks));
      for (float& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
      m.params.entries.push_back(
          {l.name, LayerParams{Tensor::from_data(ks, std::move(w)), Tensor::zeros({out})}});
    }
    in = shapes[i];
  }
  validate(m);
  return m;
}

Model build_mini_alexnet(Shape input_shape, int class_count, std::uint64_t seed) {
  if (input_shape.size() != 3) {
    throw ShapeError("input shape must be [C,H,W], got " + shape_str(input_shape));
  }
  if (input_shape[1] < 16 || input_shape[2] < 16 || input_shape[1] % 4 || input_shape[2] % 4) {
    throw ShapeError("input " + shape_str(input_shape) +
                     " too small for the pooling pyramid (need >= 16 and divisible by 4)");
  }
  if (class_count < 2) throw ConfigError("class_count must be at least 2");
  auto conv = [](std::string name, int c) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::conv;
    l.out_channels = c;
    l.kernel = 3;
    l.padding = 1;
    return l;
  };
  auto plain = [](std::string name, LayerKind kind) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = kind;
    if (kind == LayerKind::maxpool) l.window = l.stride = 2;
    return l;
  };
  LayerSpec head;
  head.name = "fc";
  head.kind = LayerKind::linear;
  head.out_features = class_count;
  std::vector<LayerSpec> layers = {
      conv("conv1", 16), plain("relu1", LayerKind::relu), plain("pool1", LayerKind::maxpool),
      conv("conv2", 32), plain("relu2", LayerKind::relu), plain("pool2", LayerKind::maxpool),
      conv("conv3", 32), plain("relu3", LayerKind::relu),
      conv("conv4", 32), plain("relu4", LayerKind::relu),
      plain("flatten", LayerKind::flatten), head,
  };
  return build_model(std::move(layers), std::move(input_shape), class_count, seed);
}

// ---------------------------------------------------------------------------
// Forward

Activations forward_with_activations(const Model& model, const Tensor& x,
                                     const std::string& upto) {
  std::size_t last = model.layers.size();
  if (upto != "end") last = model.layer_index(upto) + 1;
  const Shape& in = model.params.input_shape;
  if (x.rank() != 4 || x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2]) {
    throw ShapeError("model input must be [N," + std::to_string(in[0]) + "," +
                     std::to_string(in[1]) + "," + std::to_string(in[2]) + "], got " +
                     shape_str(x.shape()));
  }
  Activations acts;
  Tensor h = x;
  for (std::size_t i = 0; i < last; ++i) {
    const LayerSpec& l = model.layers[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const LayerParams& p = model.params.at(l.name);
        h = conv2d(h, p.kernel, p.bias, l.stride, l.padding);
        break;
      }
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::maxpool:
        h = maxpool2d(h, l.window, l.stride);
        break;
      case LayerKind::flatten:
        h = reshape(h, {h.dim(0), static_cast<int>(h.numel() / h.dim(0))});
        break;
      case LayerKind::linear: {
        const LayerParams& p = model.params.at(l.name);
        h = linear(h, p.kernel, p.bias);
        break;
      }
    }
    acts[l.name] = h;
  }
  if (last == model.layers.size()) acts["logits"] = h;
  return acts;
}

Tensor forward(const Model& model, const Tensor& x) {
  return forward_with_activations(model, x).at("logits");
}

// ---------------------------------------------------------------------------
// Training and evaluation

namespace {

Tensor one_hot(const Dataset& data, const std::vector<std::size_t>& index) {
  const int k = data.class_count;
  std::vector<float> t(index.size() * static_cast<std::size_t>(k), 0.0f);
  for (std::size_t i = 0; i < index.size(); ++i) t[i * k + data.labels[index[i]]] = 1.0f;
  return Tensor::from_data({static_cast<int>(index.size()), k}, std::move(t));
}

}  // namespace

TrainResult train_baseline(const Model& model, const Dataset& data, const TrainOptions& options) {
  if (data.size() == 0) throw ConfigError("cannot train on an empty dataset");
  if (data.class_count < 2) throw ConfigError("training needs at least 2 classes");
  if (options.batch < 1 || options.epochs < 0) throw ConfigError("bad training options");
  auto [train, held_out] = data.split_held_out();
  if (train.size() == 0) throw ConfigError("training split is empty");

  TrainResult result;
  ModelParams params = model.params.detached();
  std::vector<std::vector<float>> velocity;
  for (const auto& [name, p] : params.entries) {
    velocity.emplace_back(p.kernel.numel(), 0.0f);
    velocity.emplace_back(p.bias.numel(), 0.0f);
  }
  Rng rng(options.seed);
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      std::vector<std::size_t> index(
          order.begin() + start,
          order.begin() + std::min(order.size(), start + static_cast<std::size_t>(options.batch)));
      ModelParams live = params.trainable();
      Model m = model.with_params(live);
      Tensor loss = softmax_cross_entropy(forward(m, train.batch(index)), one_hot(train, index));
      backward(loss);
      loss_total += loss.item();
      ++batches;
      std::size_t slot = 0;
      for (std::size_t e = 0; e < params.entries.size(); ++e) {
        for (Tensor* t : {&live.entries[e].second.kernel, &live.entries[e].second.bias}) {
          std::vector<float>& v = velocity[slot++];
          auto g = t->grad();
          auto w = t->data();
          std::vector<float> next(w.size());
          for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = options.momentum * v[i] + g[i];
            next[i] = w[i] - options.lr * v[i];
          }
          Tensor updated = Tensor::from_data(t->shape(), std::move(next));
          if (t == &live.entries[e].second.kernel) {
            params.entries[e].second.kernel = updated;
          } else {
            params.entries[e].second.bias = updated;
          }
        }
      }
    }
    result.epoch_losses.push_back(loss_total / static_cast<double>(batches));
  }
  result.model = model.with_params(std::move(params));
  result.held_out_accuracy = held_out.size() ? accuracy(result.model, held_out) : 0.0;
  return result;
}

std::vector<int> predict(const Model& model, const Dataset& data, int batch) {
  NoGradGuard guard;
  std::vector<int> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> index;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) index.push_back(i);
    Tensor logits = forward(model, data.batch(index));
    const int k = logits.dim(1);
    auto z = logits.data();
    for (std::size_t r = 0; r < index.size(); ++r) {
      const float* row = z.data() + r * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("accuracy of an empty dataset");
  std::vector<int> pred = predict(model, data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::map<int, double> per_class_accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("accuracy of an empty dataset");
  std::vector<int> pred = predict(model, data);
  std::map<int, std::pair<std::size_t, std::size_t>> counts;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto& [hit, total] = counts[data.labels[i]];
    hit += pred[i] == data.labels[i];
    ++total;
  }
  std::map<int, double> out;
  for (const auto& [c, ht] : counts) out[c] = static_cast<double>(ht.first) / ht.second;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'C', 'B', 'K', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

json layer_json(const LayerSpec& l) {
  json j = {{"name", l.name}, {"kind", layer_kind_name(l.kind)}};
  switch (l.kind) {
    case LayerKind::conv:
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::maxpool:
      j["window"] = l.window;
      j["stride"] = l.stride;
      break;
    case LayerKind::linear:
      j["out_features"] = l.out_features;
      break;
    default:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec l;
  l.name = j.at("name").get<std::string>();
  l.kind = parse_layer_kind(j.at("kind").get<std::string>());
  l.out_channels = j.value("out_channels", 0);
  l.kernel = j.value("kernel", 0);
  l.stride = j.value("stride", 1);
  l.padding = j.value("padding", 0);
  l.window = j.value("window", 0);
  l.out_features = j.value("out_features", 0);
  return l;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  const Model& m = checkpoint.model;
  validate(m);
  json header;
  header["version"] = Checkpoint::kVersion;
  header["input_shape"] = m.params.input_shape;
  header["class_count"] = m.params.class_count;
  header["layers"] = json::array();
  for (const auto& l : m.layers) header["layers"].push_back(layer_json(l));
  header["params"] = json::array();
  for (const auto& [name, p] : m.params.entries) {
    header["params"].push_back(
        {{"layer", name}, {"kernel_shape", p.kernel.shape()}, {"bias_shape", p.bias.shape()}});
  }
  header["meta"] = {{"seed", checkpoint.meta.seed},
                    {"epochs", checkpoint.meta.epochs},
                    {"final_accuracy", checkpoint.meta.final_accuracy}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, p] : m.params.entries) {
    put_floats(out, p.kernel.data());
    put_floats(out, p.bias.data());
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint has bad magic bytes");
  const std::uint32_t header_len = get_u32(bytes.data() + 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(header_len)) {
    throw FormatError("checkpoint truncated inside the header");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint cp;
  try {
    const int version = header.at("version").get<int>();
    if (version != Checkpoint::kVersion) {
      throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
    }
    cp.model.params.input_shape = header.at("input_shape").get<Shape>();
    cp.model.params.class_count = header.at("class_count").get<int>();
    for (const auto& l : header.at("layers")) cp.model.layers.push_back(layer_from_json(l));
    std::size_t offset = 8 + header_len;
    auto take = [&](const Shape& shape) {
      const std::size_t n = shape_numel(shape);
      if (bytes.size() < offset + 4 * n) {
        throw FormatError("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                          ", parameters need " + std::to_string(offset + 4 * n));
      }
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = std::bit_cast<float>(get_u32(bytes.data() + offset + 4 * i));
      }
      offset += 4 * n;
      return Tensor::from_data(shape, std::move(v));
    };
    for (const auto& p : header.at("params")) {
      LayerParams lp;
      lp.kernel = take(p.at("kernel_shape").get<Shape>());
      lp.bias = take(p.at("bias_shape").get<Shape>());
      cp.model.params.entries.push_back({p.at("layer").get<std::string>(), lp});
    }
    if (offset != bytes.size()) {
      throw FormatError("checkpoint has " + std::to_string(bytes.size() - offset) +
                        " trailing bytes");
    }
    const json& meta = header.at("meta");
    cp.meta.seed = meta.at("seed").get<std::uint64_t>();
    cp.meta.epochs = meta.at("epochs").get<int>();
    cp.meta.final_accuracy = meta.at("final_accuracy").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  }
  try {
    validate(cp.model);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint describes an inconsistent model: ") + e.what());
  }
  return cp;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace circuitlab
