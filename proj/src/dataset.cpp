#include "circuitlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "circuitlab/model.hpp"
#include "circuitlab/random.hpp"

namespace circuitlab {

namespace fs = std::filesystem;

Tensor Dataset::batch(const std::vector<std::size_t>& index) const {
  const std::size_t n = image_numel();
  std::vector<float> out;
  out.reserve(index.size() * n);
  for (std::size_t i : index) {
    if (i >= size()) throw ShapeError("dataset index " + std::to_string(i) + " out of range");
    out.insert(out.end(), pixels.begin() + i * n, pixels.begin() + (i + 1) * n);
  }
  Shape s{static_cast<int>(index.size())};
  s.insert(s.end(), image_shape.begin(), image_shape.end());
  return Tensor::from_data(std::move(s), std::move(out));
}

Tensor Dataset::image(std::size_t i) const { return batch({i}); }

std::vector<float> Dataset::image_data(std::size_t i) const {
  const std::size_t n = image_numel();
  return {pixels.begin() + i * n, pixels.begin() + (i + 1) * n};
}

void Dataset::append(std::span<const float> image, int label) {
  if (image.size() != image_numel()) throw ShapeError("image size does not match dataset shape");
  if (label < 0 || label >= class_count) {
    throw FormatError("label " + std::to_string(label) + " outside [0," +
                      std::to_string(class_count) + ")");
  }
  pixels.insert(pixels.end(), image.begin(), image.end());
  labels.push_back(label);
}

Dataset Dataset::subset(const std::vector<std::size_t>& index) const {
  Dataset out;
  out.image_shape = image_shape;
  out.class_count = class_count;
  const std::size_t n = image_numel();
  out.pixels.reserve(index.size() * n);
  for (std::size_t i : index) {
    if (i >= size()) throw ShapeError("dataset index " + std::to_string(i) + " out of range");
    out.pixels.insert(out.pixels.end(), pixels.begin() + i * n, pixels.begin() + (i + 1) * n);
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::pair<Dataset, Dataset> Dataset::split_held_out() const {
  const std::size_t held = size() / 10;
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < size(); ++i) (i < size() - held ? a : b).push_back(i);
  return {subset(a), subset(b)};
}

// ---------------------------------------------------------------------------

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "cifar10-binary") return DatasetKind::cifar10_binary;
  if (name == "ppm-directory") return DatasetKind::ppm_directory;
  if (name == "synthetic-blobs") return DatasetKind::synthetic_blobs;
  throw ConfigError("unknown dataset kind '" + name + "'");
}

std::string dataset_kind_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::cifar10_binary: return "cifar10-binary";
    case DatasetKind::ppm_directory: return "ppm-directory";
    case DatasetKind::synthetic_blobs: return "synthetic-blobs";
  }
  return "?";
}

Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  constexpr std::size_t kRecord = 1 + 3072;
  Dataset d;
  d.image_shape = {3, 32, 32};
  d.class_count = 10;
  if (bytes.size() % kRecord != 0) {
    const std::size_t offset = bytes.size() / kRecord * kRecord;
    throw FormatError(name + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " of " + std::to_string(kRecord) +
                      " bytes)");
  }
  const std::size_t n = bytes.size() / kRecord;
  d.pixels.resize(n * 3072);
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kRecord;
    if (rec[0] > 9) {
      throw FormatError(name + ": label " + std::to_string(rec[0]) + " at byte offset " +
                        std::to_string(r * kRecord) + " is not in [0,9]");
    }
    d.labels[r] = rec[0];
    for (std::size_t i = 0; i < 3072; ++i) d.pixels[r * 3072 + i] = rec[1 + i] / 255.0f;
  }
  return d;
}

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  rgb[0] = r + v - c;
  rgb[1] = g + v - c;
  rgb[2] = b + v - c;
}

void paint_blob(std::vector<float>& img, const Shape& shape, double cy, double cx, double sigma,
                double amplitude, const double color[3]) {
  const int c = shape[0], h = shape[1], w = shape[2];
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double d2 = (i - cy) * (i - cy) + (j - cx) * (j - cx);
      const double g = amplitude * std::exp(-d2 / (2.0 * sigma * sigma));
      for (int ch = 0; ch < c; ++ch) {
        const double target = c == 3 ? color[ch] : (color[0] + color[1] + color[2]) / 3.0;
        float& p = img[(static_cast<std::size_t>(ch) * h + i) * w + j];
        p = static_cast<float>(p + g * (target - p));
      }
    }
}

}  // namespace

Dataset synthetic_blobs(const Shape& image_shape, int class_count, std::size_t count,
                        std::uint64_t seed) {
  if (image_shape.size() != 3 || (image_shape[0] != 1 && image_shape[0] != 3)) {
    throw ConfigError("synthetic blobs need a [1|3,H,W] shape, got " + shape_str(image_shape));
  }
  if (class_count < 2) throw ConfigError("synthetic blobs need at least 2 classes");
  Dataset d;
  d.image_shape = image_shape;
  d.class_count = class_count;
  const int h = image_shape[1], w = image_shape[2];
  const double size = std::min(h, w);
  Rng rng(seed);
  std::vector<float> img(d.image_numel());
  for (std::size_t n = 0; n < count; ++n) {
    const int label = static_cast<int>(n % class_count);
    for (float& p : img) p = static_cast<float>(rng.uniform(0.0, 0.3));
    // A faint distractor of a random hue at a random place.
    double distractor[3];
    hsv_to_rgb(rng.uniform(), 0.8, 0.9, distractor);
    const double dy = rng.uniform(0, h - 1), dx = rng.uniform(0, w - 1);
    paint_blob(img, image_shape, dy, dx, 0.08 * size, 0.45 * rng.uniform(), distractor);

    double color[3];
    hsv_to_rgb(static_cast<double>(label) / class_count, 0.85, 0.95, color);
    const double angle = 2.0 * std::numbers::pi * label / class_count;
    const double cy = (h - 1) / 2.0 + 0.25 * size * std::sin(angle) + 0.06 * size * rng.normal();
    const double cx = (w - 1) / 2.0 + 0.25 * size * std::cos(angle) + 0.06 * size * rng.normal();
    const double sigma = 0.12 * size * (1.0 + 0.2 * rng.normal());
    paint_blob(img, image_shape, cy, cx, std::max(sigma, 0.04 * size), rng.uniform(0.7, 1.0),
               color);
    for (float& p : img) p = std::clamp(p, 0.0f, 1.0f);
    d.append(img, label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// PPM

void write_ppm(const std::string& path, const Shape& image_shape, std::span<const float> pixels) {
  if (image_shape.size() != 3 || (image_shape[0] != 1 && image_shape[0] != 3) ||
      shape_numel(image_shape) != pixels.size()) {
    throw ShapeError("cannot write image of shape " + shape_str(image_shape) + " as PPM");
  }
  const int c = image_shape[0], h = image_shape[1], w = image_shape[2];
  std::vector<std::uint8_t> out;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.assign(header.begin(), header.end());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = pixels[(static_cast<std::size_t>(c == 3 ? ch : 0) * h + i) * w + j];
        out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
      }
  write_file(path, out);
}

std::vector<float> read_ppm(const std::string& path, int& height, int& width) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    std::string t;
    while (pos < bytes.size()) {
      const char ch = static_cast<char>(bytes[pos]);
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        ++pos;
      } else {
        t.push_back(ch);
        ++pos;
      }
    }
    return t;
  };
  if (token() != "P6") throw FormatError(path + ": not a binary PPM (P6)");
  int maxval = 0;
  try {
    width = std::stoi(token());
    height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(path + ": malformed PPM header");
  }
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw FormatError(path + ": unsupported PPM dimensions or maxval");
  }
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (bytes.size() < pos + 3 * n) {
    throw FormatError(path + ": truncated pixel data at byte offset " + std::to_string(bytes.size()));
  }
  std::vector<float> out(3 * n);
  for (std::size_t p = 0; p < n; ++p)
    for (int ch = 0; ch < 3; ++ch) out[ch * n + p] = bytes[pos + 3 * p + ch] / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------

Dataset load_dataset(const DatasetSource& source) {
  switch (source.kind) {
    case DatasetKind::synthetic_blobs:
      return synthetic_blobs(source.image_shape, source.class_count, source.count, source.seed);
    case DatasetKind::cifar10_binary: {
      if (source.paths.empty()) throw ConfigError("cifar10-binary needs at least one batch file");
      Dataset all;
      all.image_shape = {3, 32, 32};
      all.class_count = 10;
      for (const std::string& p : source.paths) {
        Dataset part = parse_cifar10(read_file(p), p);
        all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
        all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
      }
      if (source.count > 0 && source.count < all.size()) {
        all.pixels.resize(source.count * all.image_numel());
        all.labels.resize(source.count);
      }
      return all;
    }
    case DatasetKind::ppm_directory: {
      if (source.paths.size() != 1) throw ConfigError("ppm-directory needs exactly one root path");
      const fs::path root = source.paths[0];
      if (!fs::is_directory(root)) throw IoError("'" + root.string() + "' is not a directory");
      std::vector<std::string> classes;
      for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) classes.push_back(e.path().filename().string());
      }
      std::sort(classes.begin(), classes.end());
      if (classes.empty()) throw FormatError("'" + root.string() + "' has no class subdirectories");
      Dataset d;
      d.class_count = static_cast<int>(classes.size());
      for (std::size_t c = 0; c < classes.size(); ++c) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(root / classes[c])) {
          if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path().string());
        }
        std::sort(files.begin(), files.end());
        for (const std::string& f : files) {
          int h = 0, w = 0;
          std::vector<float> px = read_ppm(f, h, w);
          if (d.image_shape.empty()) d.image_shape = {3, h, w};
          if (d.image_shape != Shape{3, h, w}) {
            throw FormatError(f + ": image shape differs from the rest of the directory");
          }
          d.append(px, static_cast<int>(c));
        }
      }
      if (d.size() == 0) throw FormatError("'" + root.string() + "' contains no .ppm images");
      if (source.count > 0 && source.count < d.size()) {
        d.pixels.resize(source.count * d.image_numel());
        d.labels.resize(source.count);
      }
      return d;
    }
  }
  throw ConfigError("unknown dataset kind");
}

}  // namespace circuitlab
