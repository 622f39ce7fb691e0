#include "circuitlab/featvis.hpp"

#include <algorithm>
#include <cmath>

#include "circuitlab/ops.hpp"
#include "circuitlab/random.hpp"

namespace circuitlab {

ChannelRef ChannelRef::parse(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError("channel must be written layer:channel, got '" + text + "'");
  }
  ChannelRef r;
  r.layer = text.substr(0, colon);
  std::size_t used = 0;
  try {
    r.channel = std::stoi(text.substr(colon + 1), &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() - colon - 1) throw ConfigError("bad channel index in '" + text + "'");
  return r;
}

void check_channel(const Model& model, const ChannelRef& ref) {
  const int width = model.width(ref.layer);  // throws for unknown / non-conv layers
  if (ref.channel < 0 || ref.channel >= width) {
    throw ConfigError("channel " + ref.str() + " out of range (layer width " +
                      std::to_string(width) + ")");
  }
}

namespace {

Tensor layer_activation(const Model& model, const Tensor& x, const std::string& layer) {
  const std::string act = model.activation_layer(layer);
  return forward_with_activations(model, x, act).at(act);
}

Tensor as_batch(const Tensor& image) {
  if (image.rank() == 3) {
    return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  }
  return image;
}

// Circular shift of every [H,W] plane by (dy, dx).
std::vector<float> roll(std::span<const float> src, const Shape& chw, int dy, int dx) {
  const int c = chw[0], h = chw[1], w = chw[2];
  std::vector<float> out(src.size());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const int ii = ((i + dy) % h + h) % h, jj = ((j + dx) % w + w) % w;
        out[(static_cast<std::size_t>(ch) * h + ii) * w + jj] =
            src[(static_cast<std::size_t>(ch) * h + i) * w + j];
      }
  return out;
}

}  // namespace

Tensor layer_energies(const Model& model, const Tensor& x, const std::string& layer) {
  model.width(layer);
  Tensor a = layer_activation(model, x, layer);
  const int n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor per = row_mean(reshape(square(a), {n * c, plane}));
  return reshape(scale(per, static_cast<float>(plane)), {n, c});
}

Tensor channel_energy(const Model& model, const Tensor& x, const ChannelRef& ref) {
  check_channel(model, ref);
  Tensor a = select_channel(layer_activation(model, x, ref.layer), ref.channel);
  const int n = a.dim(0), plane = a.dim(2) * a.dim(3);
  Tensor per = row_mean(reshape(square(a), {n, plane}));
  return scale(per, static_cast<float>(plane));
}

double channel_activation(const Model& model, const Tensor& image, const ChannelRef& ref) {
  NoGradGuard guard;
  check_channel(model, ref);
  Tensor a = select_channel(layer_activation(model, as_batch(image), ref.layer), ref.channel);
  if (a.dim(0) != 1) throw ShapeError("channel_activation takes a single image");
  double s = 0.0;
  for (float v : a.data()) s += static_cast<double>(v) * v;
  return s;
}

std::vector<double> channel_activations(const Model& model, const Dataset& data,
                                        const ChannelRef& ref, int batch) {
  NoGradGuard guard;
  check_channel(model, ref);
  std::vector<double> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> index;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) index.push_back(i);
    Tensor a = select_channel(layer_activation(model, data.batch(index), ref.layer), ref.channel);
    const std::size_t plane = a.numel() / index.size();
    auto v = a.data();
    for (std::size_t r = 0; r < index.size(); ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(v[r * plane + i]) * v[r * plane + i];
      out.push_back(s);
    }
  }
  return out;
}

SynthResult synth_featvis(const Model& model, const ChannelRef& ref, const SynthOptions& options) {
  check_channel(model, ref);
  if (options.steps < 1) throw ConfigError("synth_featvis needs at least one step");
  const Shape& chw = model.params.input_shape;
  Rng rng(options.seed);
  std::vector<float> x(shape_numel(chw));
  for (float& v : x) v = static_cast<float>(rng.uniform(0.4, 0.6));

  auto score = [&](const std::vector<float>& img) {
    return channel_activation(model, Tensor::from_data(chw, img), ref);
  };
  SynthResult result;
  result.seed = options.seed;
  result.initial_activation = score(x);
  std::vector<float> best = x;
  double best_score = result.initial_activation;

  const Shape batch_shape{1, chw[0], chw[1], chw[2]};
  for (int step = 0; step < options.steps; ++step) {
    int dy = 0, dx = 0;
    if (options.jitter > 0) {
      dy = static_cast<int>(rng.below(2 * options.jitter + 1)) - options.jitter;
      dx = static_cast<int>(rng.below(2 * options.jitter + 1)) - options.jitter;
    }
    Tensor input = Tensor::from_data(batch_shape, roll(x, chw, dy, dx));
    input.set_requires_grad(true);
    Tensor objective = sum(channel_energy(model, input, ref));
    std::vector<float> g = roll(grad(objective, {input})[0].data(), chw, -dy, -dx);
    double norm = 0.0;
    for (float v : g) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    result.steps_run = step + 1;
    if (norm == 0.0) break;  // dead channel: no ascent direction
    const double step_size = options.lr / norm;
    for (std::size_t i = 0; i < x.size(); ++i) {
      float v = static_cast<float>(x[i] + step_size * g[i]);
      x[i] = options.clamp ? std::clamp(v, 0.0f, 1.0f) : v;
    }
    const double s = score(x);
    if (s > best_score) {
      best_score = s;
      best = x;
    }
  }
  result.image = Tensor::from_data(chw, std::move(best));
  result.final_activation = channel_activation(model, result.image, ref);
  return result;
}

TopKResult natural_topk(const Model& model, const Dataset& data, const ChannelRef& ref,
                        std::size_t k) {
  if (k > data.size()) {
    throw ConfigError("top-" + std::to_string(k) + " requested from " +
                      std::to_string(data.size()) + " images");
  }
  TopKResult r;
  if (k == 0) return r;
  std::vector<double> act = channel_activations(model, data, ref);
  std::vector<std::size_t> order(act.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return act[a] > act[b]; });
  for (std::size_t i = 0; i < k; ++i) r.entries.emplace_back(order[i], act[order[i]]);
  return r;
}

double total_variation(const Shape& image_shape, std::span<const float> pixels) {
  if (image_shape.size() != 3 || shape_numel(image_shape) != pixels.size()) {
    throw ShapeError("total_variation needs a [C,H,W] image");
  }
  const int c = image_shape[0], h = image_shape[1], w = image_shape[2];
  double tv = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const float* p = pixels.data() + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        if (i + 1 < h) tv += std::fabs(static_cast<double>(p[(i + 1) * w + j]) - p[i * w + j]);
        if (j + 1 < w) tv += std::fabs(static_cast<double>(p[i * w + j + 1]) - p[i * w + j]);
      }
  }
  return tv;
}

double expected_noise_tv(const Shape& image_shape) {
  const double c = image_shape[0], h = image_shape[1], w = image_shape[2];
  return c * ((h - 1) * w + h * (w - 1)) / 3.0;
}

bool is_noisy(const Shape& image_shape, std::span<const float> pixels, double threshold) {
  return total_variation(image_shape, pixels) > threshold * expected_noise_tv(image_shape);
}

}  // namespace circuitlab
