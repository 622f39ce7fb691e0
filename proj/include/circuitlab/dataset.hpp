#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/tensor.hpp"

namespace circuitlab {

/// Labelled images of one shape [C,H,W], pixel values in [0,1].
struct Dataset {
  Shape image_shape;
  int class_count = 0;
  std::vector<float> pixels;  // images back to back
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return shape_numel(image_shape); }
  /// [len(index), C, H, W]
  Tensor batch(const std::vector<std::size_t>& index) const;
  Tensor image(std::size_t i) const;
  std::vector<float> image_data(std::size_t i) const;
  void append(std::span<const float> image, int label);
  /// Subset by index, preserving order.
  Dataset subset(const std::vector<std::size_t>& index) const;
  /// The deterministic split used for evaluation: the last 10% by index.
  /// Returns {train, held_out}.
  std::pair<Dataset, Dataset> split_held_out() const;
};

enum class DatasetKind { cifar10_binary, ppm_directory, synthetic_blobs };

struct DatasetSource {
  DatasetKind kind = DatasetKind::synthetic_blobs;
  std::vector<std::string> paths;  // cifar: batch files; ppm: one root directory
  std::uint64_t seed = 0;          // synthetic
  int class_count = 10;
  Shape image_shape{3, 32, 32};
  std::size_t count = 1000;        // synthetic: images to render; others: cap (0 = all)
};

DatasetKind parse_dataset_kind(const std::string& name);
std::string dataset_kind_name(DatasetKind kind);

Dataset load_dataset(const DatasetSource& source);

/// Parses CIFAR-10 binary batch bytes (1 label byte + 3072 pixel bytes per
/// record). `name` is used in error messages.
Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& name);

/// Gaussian colour blobs: each class has its own hue and blob centre; each
/// image jitters the centre and radius and adds uniform background noise.
Dataset synthetic_blobs(const Shape& image_shape, int class_count, std::size_t count,
                        std::uint64_t seed);

/// Binary PPM (P6, maxval 255). Channel count must be 3, or 1 (grey is
/// replicated).
void write_ppm(const std::string& path, const Shape& image_shape, std::span<const float> pixels);
/// Returns [3,H,W] pixels in [0,1].
std::vector<float> read_ppm(const std::string& path, int& height, int& width);

}  // namespace circuitlab
