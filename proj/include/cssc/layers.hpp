#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cssc/random.hpp"
#include "cssc/tensor.hpp"

namespace cssc {

enum class Mode { train, eval };

struct Parameter {
  Tensor value;
  Tensor grad;
  bool decay = true;  // weight decay applies

  explicit Parameter(Shape shape = {}, bool decay_ = true)
      : value(shape), grad(shape), decay(decay_) {}
};

// Walks parameters and non-learnable buffers (running statistics) with their
// dotted module paths, e.g. "branch1.smr_c.block.conv2.weight".
class ParamVisitor {
 public:
  virtual ~ParamVisitor() = default;
  virtual void param(const std::string& name, Parameter& p) = 0;
  virtual void buffer(const std::string& name, Tensor& t) { (void)name; (void)t; }
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void visit(const std::string& prefix, ParamVisitor& v) = 0;
};

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

struct NamedParam {
  std::string name;
  Parameter* param;
};
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

std::vector<NamedParam> named_parameters(Module& m, const std::string& prefix = "");
std::vector<NamedBuffer> named_buffers(Module& m, const std::string& prefix = "");
std::size_t count_parameters(Module& m);
void zero_grad(Module& m);

// 2-D convolution over NHWC input, no bias. Weight layout (kh, kw, in, out).
class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
         std::size_t padding = 0);

  void init(Rng& rng);  // He normal, fan-in scaled
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamVisitor& v) override;

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t out_size(std::size_t n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

  Parameter weight;

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  std::size_t in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Shape in_shape_;
  std::vector<double> col_;  // im2col of the last training input
  bool cached_ = false;
};

// Normalization over the last axis with batch statistics in training mode and
// running statistics (momentum 0.1) in evaluation mode.
class BatchNorm : public Module {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, bool learn_shift = true, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamVisitor& v) override;

  std::size_t channels() const { return channels_; }
  // Evaluation-mode transform of the leading x.dim(1) features of (batch, k) x.
  Tensor normalize_prefix(const Tensor& x) const;

  Parameter gamma, beta;
  Tensor running_mean, running_var;

 private:
  std::size_t channels_ = 0;
  bool learn_shift_ = true;
  double momentum_ = 0.1, eps_ = 1e-5;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool cached_ = false;
};

class Linear : public Module {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features);

  void init_normal(Rng& rng, double stddev);
  // (batch, in) -> (batch, out); weight is (out, in).
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamVisitor& v) override;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Parameter weight;

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor input_;
  bool cached_ = false;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

 private:
  Tensor output_;
  bool cached_ = false;
};

// 3x3 stride-2 pad-1 spatial max pooling of the residual-network stem.
class MaxPool2d {
 public:
  MaxPool2d(std::size_t kernel = 3, std::size_t stride = 2, std::size_t padding = 1)
      : k_(kernel), stride_(stride), pad_(padding) {}
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

 private:
  std::size_t k_, stride_, pad_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
  bool cached_ = false;
};

// 1x1 -> 3x3 (strided) -> 1x1 residual bottleneck with projection shortcut
// when the shape changes.
class Bottleneck : public Module {
 public:
  Bottleneck() = default;
  Bottleneck(std::size_t in_channels, std::size_t width, std::size_t out_channels, std::size_t stride);

  void init(Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamVisitor& v) override;

  std::size_t in_channels() const { return conv1_.in_channels(); }
  std::size_t out_channels() const { return conv3_.out_channels(); }

 private:
  Conv2d conv1_, conv2_, conv3_;
  BatchNorm bn1_, bn2_, bn3_;
  ReLU relu1_, relu2_, relu_out_;
  bool has_downsample_ = false;
  Conv2d down_conv_;
  BatchNorm down_bn_;
};

// Two 3x3 convolutions with a residual shortcut.
class BasicBlock : public Module {
 public:
  BasicBlock() = default;
  BasicBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride);

  void init(Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamVisitor& v) override;

 private:
  Conv2d conv1_, conv2_;
  BatchNorm bn1_, bn2_;
  ReLU relu1_, relu_out_;
  bool has_downsample_ = false;
  Conv2d down_conv_;
  BatchNorm down_bn_;
};

}  // namespace cssc
