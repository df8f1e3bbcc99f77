#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "cssc/layers.hpp"

namespace cssc {

enum class BackboneScale { full, toy };

struct BackboneConfig {
  BackboneScale scale = BackboneScale::toy;
  std::size_t input_height = 64;
  std::size_t input_width = 32;
  // 0 derives the width from the layout (1024 full, last toy width).
  std::size_t channels_out = 0;
  std::vector<std::size_t> toy_stage_widths{16, 32, 64};
  std::string external_weights_path;

  static BackboneConfig full();
  std::size_t stride() const;
  std::size_t output_channels() const;
  void validate() const;
};

// Image -> feature map extractor. The full layout is conv1..conv4 of the
// 50-layer bottleneck residual network (stride 16, 1024 channels); the toy
// layout is a 3x3 stem followed by one stride-2 basic residual block per
// configured width. Inputs are NHWC images in [0,1]; per-channel input
// normalization happens inside forward().
class Backbone : public Module {
 public:
  Backbone(const BackboneConfig& cfg, Rng& rng);
  ~Backbone() override;
  Backbone(Backbone&&) noexcept;
  Backbone& operator=(Backbone&&) noexcept;

  Tensor forward(const Tensor& images, Mode mode);
  // Returns the gradient with respect to the [0,1] input images.
  Tensor backward(const Tensor& grad);
  void visit(const std::string& prefix, ParamVisitor& v) override;

  const BackboneConfig& config() const { return cfg_; }
  Shape output_shape(std::size_t batch) const;

 private:
  struct Layers;
  BackboneConfig cfg_;
  std::unique_ptr<Layers> layers_;
};

}  // namespace cssc
