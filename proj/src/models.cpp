#include "chprune/models.hpp"

#include "chprune/error.hpp"

namespace chprune {

namespace {

// conv -> bn [-> relu]; returns the last node id.
NodeId conv_unit(GraphBuilder& b, const std::string& prefix, const NodeId& from, int64_t cin, int64_t cout,
                 int64_t kernel, int64_t stride, bool relu) {
  auto c = b.conv(prefix + "_conv", from, cin, cout, {kernel, kernel}, stride, kernel / 2);
  auto n = b.batch_norm(prefix + "_bn", c);
  return relu ? b.relu(prefix + "_relu", n) : n;
}

std::string two_digit(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

}  // namespace

Graph build_resnet(const std::vector<int>& blocks_per_stage, const ModelConfig& config) {
  GraphBuilder b;
  int64_t size = config.image_size;
  auto x = b.input("input", config.in_channels, {size, size});
  x = conv_unit(b, "a00_stem", x, config.in_channels, config.width, 3, 1, true);
  int64_t channels = config.width;
  int block = 0;
  for (size_t stage = 0; stage < blocks_per_stage.size(); ++stage) {
    int64_t out = config.width << stage;
    for (int i = 0; i < blocks_per_stage[stage]; ++i) {
      int64_t stride = (stage > 0 && i == 0) ? 2 : 1;
      std::string p = "b" + two_digit(++block);
      auto h = conv_unit(b, p + "_1", x, channels, out, 3, stride, true);
      h = conv_unit(b, p + "_2", h, out, out, 3, 1, false);
      NodeId shortcut = x;
      if (stride != 1 || channels != out) shortcut = conv_unit(b, p + "_proj", x, channels, out, 1, stride, false);
      auto s = b.sum(p + "_sum", {shortcut, h});
      x = b.relu(p + "_out", s);
      channels = out;
      if (stride == 2) size = (size + 2 - 3) / 2 + 1;
    }
  }
  auto pooled = b.max_pool("z00_pool", x, size);
  auto logits = b.fc("z01_fc", pooled, channels, config.classes);
  b.output("z02_output", logits);
  return b.build();
}

Graph build_unet(const ModelConfig& config) {
  if (config.depth < 1) throw Error(ErrorCode::InvalidConfig, "unet depth must be >= 1");
  if (config.image_size % (int64_t{1} << config.depth) != 0)
    throw Error(ErrorCode::InvalidConfig, "unet image size must be divisible by 2^depth");
  GraphBuilder b;
  auto x = b.input("input", config.in_channels, {config.image_size, config.image_size});
  std::vector<NodeId> skips;
  std::vector<int64_t> skip_channels;
  int64_t channels = config.in_channels;
  for (int64_t level = 0; level < config.depth; ++level) {
    int64_t out = config.width << level;
    std::string p = "e" + std::to_string(level);
    x = conv_unit(b, p + "_1", x, channels, out, 3, 1, true);
    x = conv_unit(b, p + "_2", x, out, out, 3, 1, true);
    skips.push_back(x);
    skip_channels.push_back(out);
    x = b.max_pool(p + "_pool", x, 2);
    channels = out;
  }
  int64_t bottom = config.width << config.depth;
  x = conv_unit(b, "m_1", x, channels, bottom, 3, 1, true);
  x = conv_unit(b, "m_2", x, bottom, bottom, 3, 1, true);
  channels = bottom;
  for (int64_t level = config.depth - 1; level >= 0; --level) {
    std::string p = "u" + std::to_string(level);
    auto up = b.upsample(p + "_up", x, 2);
    auto cat = b.concat(p + "_cat", {skips[level], up});
    int64_t out = config.width << level;
    x = conv_unit(b, p + "_1", cat, skip_channels[level] + channels, out, 3, 1, true);
    x = conv_unit(b, p + "_2", x, out, out, 3, 1, true);
    channels = out;
  }
  auto logits = b.conv("z_head", x, channels, config.classes, {1, 1}, 1, 0, true);
  b.output("z_output", logits);
  return b.build();
}

Graph build_reference_model(const std::string& name, const ModelConfig& config) {
  if (name == "resnet8") return build_resnet({1, 1, 1}, config);
  if (name == "resnet18") return build_resnet({2, 2, 2, 2}, config);
  if (name == "unet-small") return build_unet(config);
  throw Error(ErrorCode::UnknownModel, "unknown model '" + name + "'");
}

}  // namespace chprune
