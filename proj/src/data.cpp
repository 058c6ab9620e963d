#include "chprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

namespace chprune {

TensorShape LabeledDataset::sample_shape() const {
  if (inputs.empty()) throw Error(ErrorCode::EmptyDataset, "dataset has no samples");
  return inputs.front().shape;
}

SyntheticKind synthetic_kind_from_name(const std::string& name) {
  if (name == "blobs-classify") return SyntheticKind::BlobsClassify;
  if (name == "shapes-segment") return SyntheticKind::ShapesSegment;
  throw Error(ErrorCode::InvalidConfig, "unknown synthetic dataset '" + name + "'");
}

std::string synthetic_kind_name(SyntheticKind kind) {
  return kind == SyntheticKind::BlobsClassify ? "blobs-classify" : "shapes-segment";
}

namespace {

// Colours spread around a hue circle, one per class.
std::vector<double> palette(int64_t cls, int64_t classes, int64_t channels) {
  const double theta = 2 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(classes);
  std::vector<double> out(static_cast<size_t>(channels));
  for (int64_t k = 0; k < channels; ++k)
    out[k] = 0.5 + 0.5 * std::cos(theta - 2 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(channels));
  return out;
}

struct Sampler {
  std::mt19937_64 rng;
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int64_t integer(int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }
  double normal(double sd) { return sd > 0 ? std::normal_distribution<double>(0.0, sd)(rng) : 0.0; }
};

// Pixel noise draws from its own stream so geometry and labels do not depend on the noise level.
Sampler noise_stream(uint64_t seed) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), 0x6e6f6973u};
  return Sampler{std::mt19937_64(seq)};
}

Tensor<float> noise_image(Sampler& s, const SyntheticConfig& c) {
  Tensor<float> img(TensorShape{1, c.channels, {c.size, c.size}});
  for (auto& v : img.data) v = static_cast<float>(s.normal(c.noise));
  return img;
}

LabeledDataset blobs(const SyntheticConfig& c) {
  Sampler s{std::mt19937_64(c.seed)};
  Sampler pixels = noise_stream(c.seed);
  LabeledDataset ds;
  ds.classes = static_cast<int>(c.classes);
  const double size = static_cast<double>(c.size);
  for (int64_t i = 0; i < c.n; ++i) {
    int64_t cls = s.integer(0, c.classes - 1);
    auto colour = palette(cls, c.classes, c.channels);
    Tensor<float> img = noise_image(pixels, c);
    int64_t count = s.integer(1, 3);
    for (int64_t b = 0; b < count; ++b) {
      double cy = s.uniform(0, size), cx = s.uniform(0, size);
      double sd = s.uniform(size / 8, size / 4);
      double amp = s.uniform(0.6, 1.2);
      for (int64_t y = 0; y < c.size; ++y)
        for (int64_t x = 0; x < c.size; ++x) {
          double r2 = (y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx);
          double w = amp * std::exp(-r2 / (2 * sd * sd));
          for (int64_t k = 0; k < c.channels; ++k) img.channel(0, k)[y * c.size + x] += static_cast<float>(w * colour[k]);
        }
    }
    ds.inputs.push_back(std::move(img));
    ds.labels.push_back({static_cast<int>(cls)});
  }
  return ds;
}

LabeledDataset shapes(const SyntheticConfig& c) {
  Sampler s{std::mt19937_64(c.seed)};
  Sampler pixels = noise_stream(c.seed);
  LabeledDataset ds;
  ds.classes = static_cast<int>(c.classes);
  const int64_t n = c.size;
  const double size = static_cast<double>(n);
  for (int64_t i = 0; i < c.n; ++i) {
    std::vector<int> mask(static_cast<size_t>(n * n), 0);
    int64_t count = s.integer(1, 3);
    for (int64_t k = 0; k < count; ++k) {
      int64_t cls = s.integer(1, c.classes - 1);
      int64_t form = (cls - 1) % 3;
      double cy = s.uniform(0, size), cx = s.uniform(0, size);
      double a = form == 0 ? s.uniform(size / 12, size / 4) : s.uniform(size / 10, size / 4);
      double b = form == 0 ? s.uniform(size / 12, size / 4) : 0.5 * a;
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          bool inside;
          if (form == 0) {
            inside = std::abs(dy) <= a && std::abs(dx) <= b;
          } else {
            double r = std::sqrt(dy * dy + dx * dx);
            inside = form == 1 ? r <= a : (r <= a && r >= b);
          }
          if (inside) mask[static_cast<size_t>(y * n + x)] = static_cast<int>(cls);
        }
    }
    // Render from the mask so every labelled pixel carries its class tint.
    Tensor<float> img = noise_image(pixels, c);
    std::vector<std::vector<double>> colours;
    for (int64_t cls = 0; cls < c.classes; ++cls) {
      auto col = palette(cls, c.classes, c.channels);
      double amp = cls == 0 ? 0.0 : s.uniform(0.7, 1.2);
      for (auto& v : col) v *= amp;
      colours.push_back(std::move(col));
    }
    for (int64_t p = 0; p < n * n; ++p) {
      int cls = mask[static_cast<size_t>(p)];
      for (int64_t k = 0; k < c.channels; ++k) img.channel(0, k)[p] += static_cast<float>(colours[cls][k]);
    }
    ds.inputs.push_back(std::move(img));
    ds.labels.push_back(std::move(mask));
  }
  return ds;
}

}  // namespace

LabeledDataset generate_synthetic(SyntheticKind kind, const SyntheticConfig& config) {
  if (config.n < 1 || config.size < 1 || config.classes < 1 || config.channels < 1)
    throw Error(ErrorCode::InvalidConfig, "synthetic n, size, classes and channels must be >= 1");
  if (config.noise < 0) throw Error(ErrorCode::InvalidConfig, "noise must be >= 0");
  if (kind == SyntheticKind::ShapesSegment && config.classes < 2)
    throw Error(ErrorCode::InvalidConfig, "segmentation needs a background and at least one shape class");
  return kind == SyntheticKind::BlobsClassify ? blobs(config) : shapes(config);
}

Normalization compute_normalization(const LabeledDataset& dataset) {
  auto shape = dataset.sample_shape();
  Normalization norm;
  norm.mean.assign(static_cast<size_t>(shape.channels), 0.0);
  norm.std.assign(static_cast<size_t>(shape.channels), 0.0);
  const double count = static_cast<double>(dataset.size() * static_cast<size_t>(shape.spatial_size()));
  for (const auto& x : dataset.inputs)
    for (int64_t c = 0; c < shape.channels; ++c)
      for (int64_t i = 0; i < x.plane(); ++i) norm.mean[c] += x.channel(0, c)[i];
  for (auto& m : norm.mean) m /= count;
  for (const auto& x : dataset.inputs)
    for (int64_t c = 0; c < shape.channels; ++c)
      for (int64_t i = 0; i < x.plane(); ++i) {
        double d = x.channel(0, c)[i] - norm.mean[c];
        norm.std[c] += d * d;
      }
  for (auto& v : norm.std) v = std::sqrt(v / count);
  for (auto& v : norm.std)
    if (v <= 0) v = 1.0;
  return norm;
}

void normalize(LabeledDataset& dataset, const Normalization& norm) {
  for (auto& x : dataset.inputs) {
    if (static_cast<int64_t>(norm.mean.size()) != x.shape.channels || norm.std.size() != norm.mean.size())
      throw Error(ErrorCode::LengthMismatch, "normalization does not match the channel count");
    for (int64_t c = 0; c < x.shape.channels; ++c)
      for (int64_t i = 0; i < x.plane(); ++i)
        x.channel(0, c)[i] = static_cast<float>((x.channel(0, c)[i] - norm.mean[c]) / norm.std[c]);
  }
}

LabeledDataset parse_cifar10(const std::vector<uint8_t>& bytes) {
  constexpr size_t record = 3073;
  if (bytes.size() % record != 0)
    throw Error(ErrorCode::CorruptFile, std::to_string(bytes.size()) + " bytes is not a multiple of 3073");
  LabeledDataset ds;
  ds.classes = 10;
  for (size_t off = 0; off < bytes.size(); off += record) {
    int label = bytes[off];
    if (label > 9) throw Error(ErrorCode::LabelOutOfRange, "label byte " + std::to_string(label));
    Tensor<float> img(TensorShape{1, 3, {32, 32}});
    for (size_t i = 0; i < 3072; ++i) img.data[i] = static_cast<float>(bytes[off + 1 + i]) / 255.0f;
    ds.inputs.push_back(std::move(img));
    ds.labels.push_back({label});
  }
  return ds;
}

namespace {

std::vector<uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open '" + path.string() + "'");
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

LabeledDataset load_cifar10(const std::string& dir, Split split) {
  std::vector<std::string> files;
  if (split == Split::Test)
    files = {"test_batch.bin"};
  else
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  for (const auto& f : files)
    if (!std::filesystem::exists(std::filesystem::path(dir) / f))
      throw Error(ErrorCode::MissingFile, "missing '" + (std::filesystem::path(dir) / f).string() + "'");
  LabeledDataset ds;
  ds.classes = 10;
  ds.split = split;
  for (const auto& f : files) {
    auto part = parse_cifar10(read_bytes(std::filesystem::path(dir) / f));
    for (size_t i = 0; i < part.size(); ++i) {
      ds.inputs.push_back(std::move(part.inputs[i]));
      ds.labels.push_back(std::move(part.labels[i]));
    }
  }
  return ds;
}

std::vector<std::vector<size_t>> batch_indices(size_t n, size_t batch_size, uint64_t seed, uint64_t epoch) {
  if (batch_size == 0) batch_size = 1;
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

Batch make_batch(const LabeledDataset& dataset, const std::vector<size_t>& indices) {
  if (indices.empty()) throw Error(ErrorCode::EmptyDataset, "empty batch");
  TensorShape shape = dataset.sample_shape();
  shape.batch = static_cast<int64_t>(indices.size());
  Batch b;
  b.inputs = Tensor<float>(shape);
  b.indices = indices;
  const size_t per = static_cast<size_t>(shape.channels * shape.spatial_size());
  for (size_t k = 0; k < indices.size(); ++k) {
    const auto& x = dataset.inputs.at(indices[k]);
    if (x.size() != per) throw Error(ErrorCode::ShapeMismatch, "samples differ in shape");
    std::copy(x.data.begin(), x.data.end(), b.inputs.data.begin() + static_cast<std::ptrdiff_t>(k * per));
    const auto& l = dataset.labels.at(indices[k]);
    b.labels.insert(b.labels.end(), l.begin(), l.end());
  }
  return b;
}

BatchIterator::BatchIterator(const LabeledDataset& dataset, size_t batch_size, uint64_t seed, uint64_t epoch)
    : dataset_(&dataset), order_(batch_indices(dataset.size(), batch_size, seed, epoch)) {}

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  out = make_batch(*dataset_, order_[cursor_++]);
  return true;
}

uint64_t fingerprint(const LabeledDataset& dataset) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (size_t i = 0; i < dataset.size(); ++i) {
    const auto& x = dataset.inputs[i];
    mix(&x.shape.channels, sizeof(int64_t));
    for (auto d : x.shape.spatial) mix(&d, sizeof(d));
    mix(x.data.data(), x.data.size() * sizeof(float));
    mix(dataset.labels[i].data(), dataset.labels[i].size() * sizeof(int));
  }
  return h;
}

namespace {
constexpr char kMagic[8] = {'C', 'H', 'P', 'D', 'S', '0', '0', '1'};
}

void save_dataset(const LabeledDataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write '" + path + "'");
  auto shape = dataset.sample_shape();
  auto put = [&](int64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kMagic, sizeof(kMagic));
  put(static_cast<int64_t>(dataset.size()));
  put(dataset.classes);
  put(static_cast<int64_t>(dataset.split));
  put(shape.channels);
  put(static_cast<int64_t>(shape.spatial.size()));
  for (auto d : shape.spatial) put(d);
  put(static_cast<int64_t>(dataset.labels.front().size()));
  for (const auto& x : dataset.inputs) out.write(reinterpret_cast<const char*>(x.data.data()), static_cast<std::streamsize>(x.size() * sizeof(float)));
  for (const auto& l : dataset.labels) {
    std::vector<int32_t> v(l.begin(), l.end());
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(int32_t)));
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write to '" + path + "' failed");
}

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw Error(ErrorCode::CorruptFile, "bad dataset header");
  auto get = [&]() {
    int64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw Error(ErrorCode::CorruptFile, "truncated dataset header");
    return v;
  };
  LabeledDataset ds;
  int64_t n = get();
  ds.classes = static_cast<int>(get());
  ds.split = static_cast<Split>(get());
  TensorShape shape{1, get(), {}};
  int64_t rank = get();
  if (n < 0 || rank < 0 || rank > 8) throw Error(ErrorCode::CorruptFile, "implausible dataset header");
  for (int64_t i = 0; i < rank; ++i) shape.spatial.push_back(get());
  int64_t label_len = get();
  for (int64_t i = 0; i < n; ++i) {
    Tensor<float> x(shape);
    in.read(reinterpret_cast<char*>(x.data.data()), static_cast<std::streamsize>(x.size() * sizeof(float)));
    ds.inputs.push_back(std::move(x));
  }
  for (int64_t i = 0; i < n; ++i) {
    std::vector<int32_t> v(static_cast<size_t>(label_len));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(int32_t)));
    ds.labels.emplace_back(v.begin(), v.end());
  }
  if (!in) throw Error(ErrorCode::CorruptFile, "truncated dataset body");
  return ds;
}

}  // namespace chprune
