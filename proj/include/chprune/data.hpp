#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "chprune/tensor.hpp"

namespace chprune {

enum class Split { Train, Val, Test };

/// Inputs X with labels V. Classification samples carry one label; segmentation
/// samples carry one label per pixel.
struct LabeledDataset {
  std::vector<Tensor<float>> inputs;
  std::vector<std::vector<int>> labels;
  Split split = Split::Train;
  int classes = 1;

  size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  bool pixel_labels() const { return !labels.empty() && labels.front().size() > 1; }
  TensorShape sample_shape() const;
};

enum class SyntheticKind { BlobsClassify, ShapesSegment };

/// Throws InvalidConfig for unrecognized names.
SyntheticKind synthetic_kind_from_name(const std::string& name);
std::string synthetic_kind_name(SyntheticKind kind);

struct SyntheticConfig {
  int64_t n = 2000;
  int64_t size = 32;
  int64_t classes = 4;
  int64_t channels = 3;
  double noise = 0.3;
  uint64_t seed = 0;
};

/// Blobs: Gaussian blobs in a class-specific colour over noise, one label per
/// image. Shapes: class 0 is background; rectangles, disks and rings cycle over
/// the foreground classes, each tinted by class. Masks come from the geometry
/// alone. Throws InvalidConfig.
LabeledDataset generate_synthetic(SyntheticKind kind, const SyntheticConfig& config);

struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Per-channel mean and standard deviation over every sample. Throws EmptyDataset.
Normalization compute_normalization(const LabeledDataset& dataset);
void normalize(LabeledDataset& dataset, const Normalization& norm);

/// Parses 3073-byte records: label byte then 3x32x32 channels-first pixels,
/// scaled to [0, 1]. Throws CorruptFile, LabelOutOfRange.
LabeledDataset parse_cifar10(const std::vector<uint8_t>& bytes);

/// Reads data_batch_1..5.bin (train) or test_batch.bin (test) from `dir`.
/// Throws MissingFile, CorruptFile, LabelOutOfRange.
LabeledDataset load_cifar10(const std::string& dir, Split split = Split::Train);

struct Batch {
  Tensor<float> inputs;
  std::vector<int> labels;  // flattened per sample, then per pixel
  std::vector<size_t> indices;
};

/// Sample order of one epoch, cut into batches; the last batch may be short.
std::vector<std::vector<size_t>> batch_indices(size_t n, size_t batch_size, uint64_t seed, uint64_t epoch);

/// Stacks the given samples. Throws EmptyDataset for an empty index list.
Batch make_batch(const LabeledDataset& dataset, const std::vector<size_t>& indices);

/// Deterministic shuffled iteration over one epoch.
class BatchIterator {
 public:
  BatchIterator(const LabeledDataset& dataset, size_t batch_size, uint64_t seed, uint64_t epoch);
  bool next(Batch& out);
  size_t batches() const { return order_.size(); }

 private:
  const LabeledDataset* dataset_;
  std::vector<std::vector<size_t>> order_;
  size_t cursor_ = 0;
};

/// FNV-1a over shapes, pixel bytes and labels.
uint64_t fingerprint(const LabeledDataset& dataset);

/// Binary container: magic, sample shape, counts, raw floats, int32 labels.
void save_dataset(const LabeledDataset& dataset, const std::string& path);
LabeledDataset load_dataset(const std::string& path);

}  // namespace chprune
