#pragma once

// Dataset container and loaders. All loaders are fail-closed: any parse error
// throws before a Dataset is returned.

#include <string>
#include <vector>

#include "dentlab/tensor.hpp"

namespace dentlab {

struct Dataset {
  Tensor<float> images;     // (N, C, H, W), values in [0, 1]
  std::vector<int> labels;  // values in [0, num_classes)
  std::string split;        // "train" | "test"
  std::string name;
  int num_classes = 0;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  int64_t channels() const { return images.dim(1); }
  int64_t hw() const { return images.dim(2); }

  void validate() const;

  Dataset slice(int64_t start, int64_t count) const;

  Tensor<float> gather_images(const std::vector<int64_t>& idx) const;
  std::vector<int> gather_labels(const std::vector<int64_t>& idx) const;
};

// IDX format (big-endian): magic 0x00000803 for images, 0x00000801 for labels.
// Bytes are normalized to [0, 1].
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       const std::string& split = "train");

// CIFAR-10 binary batches: 3073-byte records (1 label + 3072 channel-planar
// RGB pixels), 10000 records per standard file.
Dataset load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split = "train");

// Procedurally rendered 1x28x28 shape classification set: one geometric shape
// template per class (8 available), random position/scale/noise, exactly
// balanced labels, fully determined by the seed.
Dataset synth_shapes(int64_t n, int classes, uint64_t seed);

// Dataset root fallback used when a config gives a relative data dir.
std::string data_dir_fallback();

}  // namespace dentlab
