#include "cssc/backbone.hpp"

#include <array>

#include "cssc/archive.hpp"
#include "cssc/error.hpp"

namespace cssc {

namespace {

constexpr std::array<double, 3> kImageMean{0.485, 0.456, 0.406};
constexpr std::array<double, 3> kImageStd{0.229, 0.224, 0.225};

}  // namespace

BackboneConfig BackboneConfig::full() {
  BackboneConfig c;
  c.scale = BackboneScale::full;
  c.input_height = 384;
  c.input_width = 192;
  c.channels_out = 1024;
  c.toy_stage_widths.clear();
  return c;
}

std::size_t BackboneConfig::stride() const {
  if (scale == BackboneScale::full) return 16;
  return std::size_t{1} << toy_stage_widths.size();
}

std::size_t BackboneConfig::output_channels() const {
  if (scale == BackboneScale::full) return 1024;
  return toy_stage_widths.empty() ? 0 : toy_stage_widths.back();
}

void BackboneConfig::validate() const {
  if (scale == BackboneScale::full) {
    if (input_height != 384 || input_width != 192)
      throw ValidationError("backbone: full scale requires 384x192 input, got " + std::to_string(input_height) +
                            "x" + std::to_string(input_width));
    if (channels_out != 0 && channels_out != 1024)
      throw ValidationError("backbone: full scale produces 1024 channels, configured " +
                            std::to_string(channels_out));
    return;
  }
  if (toy_stage_widths.empty()) throw ValidationError("backbone: toy scale needs at least one stage width");
  for (auto w : toy_stage_widths)
    if (w == 0) throw ValidationError("backbone: toy stage widths must be positive");
  if (channels_out != 0 && channels_out != toy_stage_widths.back())
    throw ValidationError("backbone: channels_out " + std::to_string(channels_out) +
                          " does not match the last toy stage width " + std::to_string(toy_stage_widths.back()));
  const std::size_t s = stride();
  if (input_height == 0 || input_width == 0 || input_height % s != 0 || input_width % s != 0)
    throw ValidationError("backbone: input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                          " is not divisible by the total stride " + std::to_string(s));
}

struct Backbone::Layers {
  // full
  Conv2d conv1;
  BatchNorm bn1;
  ReLU relu;
  MaxPool2d pool;
  std::vector<std::vector<Bottleneck>> stages;
  // toy
  Conv2d stem_conv;
  BatchNorm stem_bn;
  ReLU stem_relu;
  std::vector<BasicBlock> blocks;
};

Backbone::Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg), layers_(std::make_unique<Layers>()) {
  cfg_.validate();
  auto& L = *layers_;
  if (cfg_.scale == BackboneScale::full) {
    L.conv1 = Conv2d(3, 64, 7, 2, 3);
    L.bn1 = BatchNorm(64);
    L.conv1.init(rng);
    const std::array<std::size_t, 3> depth{3, 4, 6};
    const std::array<std::size_t, 3> width{64, 128, 256};
    std::size_t in = 64;
    for (std::size_t s = 0; s < depth.size(); ++s) {
      std::vector<Bottleneck> stage;
      for (std::size_t b = 0; b < depth[s]; ++b) {
        const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
        stage.emplace_back(in, width[s], width[s] * 4, stride);
        stage.back().init(rng);
        in = width[s] * 4;
      }
      L.stages.push_back(std::move(stage));
    }
  } else {
    L.stem_conv = Conv2d(3, cfg_.toy_stage_widths.front(), 3, 1, 1);
    L.stem_bn = BatchNorm(cfg_.toy_stage_widths.front());
    L.stem_conv.init(rng);
    std::size_t in = cfg_.toy_stage_widths.front();
    for (auto w : cfg_.toy_stage_widths) {
      L.blocks.emplace_back(in, w, 2);
      L.blocks.back().init(rng);
      in = w;
    }
  }
  if (!cfg_.external_weights_path.empty()) {
    const Archive archive = read_archive(cfg_.external_weights_path);
    load_module(*this, "", archive, "");
  }
}

Backbone::~Backbone() = default;
Backbone::Backbone(Backbone&&) noexcept = default;
Backbone& Backbone::operator=(Backbone&&) noexcept = default;

Shape Backbone::output_shape(std::size_t batch) const {
  return {batch, cfg_.input_height / cfg_.stride(), cfg_.input_width / cfg_.stride(), cfg_.output_channels()};
}

Tensor Backbone::forward(const Tensor& images, Mode mode) {
  if (images.rank() != 4 || images.dim(1) != cfg_.input_height || images.dim(2) != cfg_.input_width ||
      images.dim(3) != 3)
    throw Error("backbone: expected images (batch x " + std::to_string(cfg_.input_height) + " x " +
                std::to_string(cfg_.input_width) + " x 3), got " + shape_string(images.shape()));
  if (!images.all_finite()) throw Error("backbone: non-finite input image values");
  auto& L = *layers_;
  if (cfg_.scale == BackboneScale::toy) {
    Tensor x = L.stem_relu.forward(L.stem_bn.forward(L.stem_conv.forward(images, mode), mode), mode);
    for (auto& b : L.blocks) x = b.forward(x, mode);
    return x;
  }
  Tensor x = images;
  const std::size_t pixels = x.size() / 3;
  for (std::size_t i = 0; i < pixels; ++i)
    for (std::size_t c = 0; c < 3; ++c) x[i * 3 + c] = (x[i * 3 + c] - kImageMean[c]) / kImageStd[c];
  x = L.pool.forward(L.relu.forward(L.bn1.forward(L.conv1.forward(x, mode), mode), mode), mode);
  for (auto& stage : L.stages)
    for (auto& b : stage) x = b.forward(x, mode);
  return x;
}

Tensor Backbone::backward(const Tensor& grad) {
  auto& L = *layers_;
  Tensor g = grad;
  if (cfg_.scale == BackboneScale::toy) {
    for (auto it = L.blocks.rbegin(); it != L.blocks.rend(); ++it) g = it->backward(g);
    return L.stem_conv.backward(L.stem_bn.backward(L.stem_relu.backward(g)));
  }
  for (auto s = L.stages.rbegin(); s != L.stages.rend(); ++s)
    for (auto b = s->rbegin(); b != s->rend(); ++b) g = b->backward(g);
  g = L.conv1.backward(L.bn1.backward(L.relu.backward(L.pool.backward(g))));
  const std::size_t pixels = g.size() / 3;
  for (std::size_t i = 0; i < pixels; ++i)
    for (std::size_t c = 0; c < 3; ++c) g[i * 3 + c] /= kImageStd[c];
  return g;
}

void Backbone::visit(const std::string& prefix, ParamVisitor& v) {
  auto& L = *layers_;
  if (cfg_.scale == BackboneScale::toy) {
    L.stem_conv.visit(join_path(prefix, "stem.conv"), v);
    L.stem_bn.visit(join_path(prefix, "stem.bn"), v);
    for (std::size_t i = 0; i < L.blocks.size(); ++i)
      L.blocks[i].visit(join_path(prefix, "blocks." + std::to_string(i)), v);
    return;
  }
  L.conv1.visit(join_path(prefix, "conv1"), v);
  L.bn1.visit(join_path(prefix, "bn1"), v);
  for (std::size_t s = 0; s < L.stages.size(); ++s)
    for (std::size_t b = 0; b < L.stages[s].size(); ++b)
      L.stages[s][b].visit(join_path(prefix, "layer" + std::to_string(s + 1) + "." + std::to_string(b)), v);
}

}  // namespace cssc
