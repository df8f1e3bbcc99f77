#include "cssc/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "cssc/error.hpp"

namespace cssc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

class Collector : public ParamVisitor {
 public:
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  void param(const std::string& name, Parameter& p) override { params.push_back({name, &p}); }
  void buffer(const std::string& name, Tensor& t) override { buffers.push_back({name, &t}); }
};

void require_cache(bool cached, const char* layer) {
  if (!cached) throw Error(std::string(layer) + ": backward called without a training-mode forward");
}

}  // namespace

std::vector<NamedParam> named_parameters(Module& m, const std::string& prefix) {
  Collector c;
  m.visit(prefix, c);
  return c.params;
}

std::vector<NamedBuffer> named_buffers(Module& m, const std::string& prefix) {
  Collector c;
  m.visit(prefix, c);
  return c.buffers;
}

std::size_t count_parameters(Module& m) {
  std::size_t n = 0;
  for (const auto& p : named_parameters(m)) n += p.param->value.size();
  return n;
}

void zero_grad(Module& m) {
  for (const auto& p : named_parameters(m)) p.param->grad.zero();
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
               std::size_t padding)
    : weight({kernel, kernel, in_channels, out_channels}),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding) {
  if (in_ == 0 || out_ == 0 || k_ == 0 || stride_ == 0) throw Error("conv2d: zero-sized configuration");
}

void Conv2d::init(Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(k_ * k_ * in_));
  for (auto& w : weight.value.values()) w = rng.normal(0.0, stddev);
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(3) != in_)
    throw Error("conv2d: expected NHWC input with " + std::to_string(in_) + " channels, got " +
                shape_string(x.shape()));
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h + 2 * pad_ < k_ || w + 2 * pad_ < k_) throw Error("conv2d: input smaller than kernel");
  const std::size_t ho = out_size(h), wo = out_size(w);
  const std::size_t rows = n * ho * wo, kkc = k_ * k_ * in_;
  Tensor y({n, ho, wo, out_});

  if (pointwise()) {
    ConstMapMat xin(x.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in_));
    ConstMapMat wm(weight.value.data(), static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(out_));
    MapMat(y.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_)).noalias() = xin * wm;
    if (mode == Mode::train) col_.assign(x.storage().begin(), x.storage().end());
  } else {
    col_.assign(rows * kkc, 0.0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          double* dst = col_.data() + ((b * ho + oh) * wo + ow) * kkc;
          for (std::size_t kh = 0; kh < k_; ++kh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride_ + kh) - static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kw = 0; kw < k_; ++kw) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * stride_ + kw) - static_cast<std::ptrdiff_t>(pad_);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
              const double* src = x.data() + ((b * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw)) * in_;
              std::memcpy(dst + (kh * k_ + kw) * in_, src, in_ * sizeof(double));
            }
          }
        }
    ConstMapMat cm(col_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(kkc));
    ConstMapMat wm(weight.value.data(), static_cast<Eigen::Index>(kkc), static_cast<Eigen::Index>(out_));
    MapMat(y.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_)).noalias() = cm * wm;
    if (mode != Mode::train) std::vector<double>().swap(col_);
  }
  in_shape_ = x.shape();
  cached_ = mode == Mode::train;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  require_cache(cached_, "conv2d");
  const std::size_t n = in_shape_[0], h = in_shape_[1], w = in_shape_[2];
  const std::size_t ho = out_size(h), wo = out_size(w);
  const std::size_t rows = n * ho * wo, kkc = k_ * k_ * in_;
  require_shape(dy, {n, ho, wo, out_}, "conv2d backward");

  ConstMapMat g(dy.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_));
  ConstMapMat cm(col_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(kkc));
  ConstMapMat wm(weight.value.data(), static_cast<Eigen::Index>(kkc), static_cast<Eigen::Index>(out_));
  MapMat(weight.grad.data(), static_cast<Eigen::Index>(kkc), static_cast<Eigen::Index>(out_)).noalias() +=
      cm.transpose() * g;

  Tensor dx(in_shape_);
  if (pointwise()) {
    MapMat(dx.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in_)).noalias() =
        g * wm.transpose();
    return dx;
  }
  RowMat dcol = g * wm.transpose();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const double* src = dcol.data() + ((b * ho + oh) * wo + ow) * kkc;
        for (std::size_t kh = 0; kh < k_; ++kh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride_ + kh) - static_cast<std::ptrdiff_t>(pad_);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kw = 0; kw < k_; ++kw) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride_ + kw) - static_cast<std::ptrdiff_t>(pad_);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
            double* dst = dx.data() + ((b * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw)) * in_;
            const double* s = src + (kh * k_ + kw) * in_;
            for (std::size_t c = 0; c < in_; ++c) dst[c] += s[c];
          }
        }
      }
  return dx;
}

void Conv2d::visit(const std::string& prefix, ParamVisitor& v) { v.param(join_path(prefix, "weight"), weight); }

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::size_t channels, bool learn_shift, double momentum, double eps)
    : gamma({channels}, false),
      beta({channels}, false),
      running_mean({channels}, 0.0),
      running_var({channels}, 1.0),
      channels_(channels),
      learn_shift_(learn_shift),
      momentum_(momentum),
      eps_(eps) {
  gamma.value.fill(1.0);
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  if (x.rank() == 0 || x.shape().back() != channels_)
    throw Error("batchnorm: expected last axis " + std::to_string(channels_) + ", got " + shape_string(x.shape()));
  const std::size_t c = channels_, rows = x.size() / c;
  Tensor y(x.shape());
  const double* in = x.data();
  double* out = y.data();

  if (mode == Mode::eval) {
    std::vector<double> scale(c), shift(c);
    for (std::size_t j = 0; j < c; ++j) {
      scale[j] = gamma.value[j] / std::sqrt(running_var[j] + eps_);
      shift[j] = beta.value[j] - running_mean[j] * scale[j];
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] = in[r * c + j] * scale[j] + shift[j];
    cached_ = false;
    return y;
  }

  if (rows < 2) throw Error("batchnorm: training mode needs more than one value per channel");
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) mean[j] += in[r * c + j];
  for (auto& m : mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = in[r * c + j] - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= static_cast<double>(rows);

  inv_std_.resize(c);
  for (std::size_t j = 0; j < c; ++j) inv_std_[j] = 1.0 / std::sqrt(var[j] + eps_);
  xhat_ = Tensor(x.shape());
  double* xh = xhat_.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = (in[r * c + j] - mean[j]) * inv_std_[j];
      xh[r * c + j] = v;
      out[r * c + j] = gamma.value[j] * v + beta.value[j];
    }

  const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
  for (std::size_t j = 0; j < c; ++j) {
    running_mean[j] = (1.0 - momentum_) * running_mean[j] + momentum_ * mean[j];
    running_var[j] = (1.0 - momentum_) * running_var[j] + momentum_ * var[j] * unbias;
  }
  cached_ = true;
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  require_cache(cached_, "batchnorm");
  require_shape(dy, xhat_.shape(), "batchnorm backward");
  const std::size_t c = channels_, rows = dy.size() / c;
  const double* g = dy.data();
  const double* xh = xhat_.data();
  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      sum_g[j] += g[r * c + j];
      sum_gx[j] += g[r * c + j] * xh[r * c + j];
    }
  for (std::size_t j = 0; j < c; ++j) {
    gamma.grad[j] += sum_gx[j];
    if (learn_shift_) beta.grad[j] += sum_g[j];
  }
  Tensor dx(dy.shape());
  double* out = dx.data();
  const double m = static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double k = gamma.value[j] * inv_std_[j] / m;
      out[r * c + j] = k * (m * g[r * c + j] - sum_g[j] - xh[r * c + j] * sum_gx[j]);
    }
  return dx;
}

Tensor BatchNorm::normalize_prefix(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) > channels_) throw Error("batchnorm: prefix input " + shape_string(x.shape()) + " too wide");
  Tensor y = x;
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t j = 0; j < x.dim(1); ++j)
      y.at(b, j) = gamma.value[j] * (x.at(b, j) - running_mean[j]) / std::sqrt(running_var[j] + eps_) + beta.value[j];
  return y;
}

void BatchNorm::visit(const std::string& prefix, ParamVisitor& v) {
  v.param(join_path(prefix, "weight"), gamma);
  // A frozen shift stays at zero and is not a learnable parameter.
  if (learn_shift_) v.param(join_path(prefix, "bias"), beta);
  v.buffer(join_path(prefix, "running_mean"), running_mean);
  v.buffer(join_path(prefix, "running_var"), running_var);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::size_t in_features, std::size_t out_features)
    : weight({out_features, in_features}), in_(in_features), out_(out_features) {}

void Linear::init_normal(Rng& rng, double stddev) {
  for (auto& w : weight.value.values()) w = rng.normal(0.0, stddev);
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.dim(1) != in_)
    throw Error("linear: expected (batch, " + std::to_string(in_) + "), got " + shape_string(x.shape()));
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  Tensor y({x.dim(0), out_});
  ConstMapMat xm(x.data(), n, static_cast<Eigen::Index>(in_));
  ConstMapMat wm(weight.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
  MapMat(y.data(), n, static_cast<Eigen::Index>(out_)).noalias() = xm * wm.transpose();
  cached_ = mode == Mode::train;
  if (cached_) input_ = x;
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  require_cache(cached_, "linear");
  const auto n = static_cast<Eigen::Index>(input_.dim(0));
  require_shape(dy, {input_.dim(0), out_}, "linear backward");
  ConstMapMat g(dy.data(), n, static_cast<Eigen::Index>(out_));
  ConstMapMat xm(input_.data(), n, static_cast<Eigen::Index>(in_));
  ConstMapMat wm(weight.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
  MapMat(weight.grad.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_)).noalias() +=
      g.transpose() * xm;
  Tensor dx({input_.dim(0), in_});
  MapMat(dx.data(), n, static_cast<Eigen::Index>(in_)).noalias() = g * wm;
  return dx;
}

void Linear::visit(const std::string& prefix, ParamVisitor& v) { v.param(join_path(prefix, "weight"), weight); }

// ---------------------------------------------------------------- ReLU

Tensor ReLU::forward(const Tensor& x, Mode mode) {
  Tensor y = x;
  for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
  cached_ = mode == Mode::train;
  if (cached_) output_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  require_cache(cached_, "relu");
  require_shape(dy, output_.shape(), "relu backward");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(output_[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

// ---------------------------------------------------------------- MaxPool2d

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4) throw Error("maxpool2d: expected NHWC input");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t ho = (h + 2 * pad_ - k_) / stride_ + 1, wo = (w + 2 * pad_ - k_) / stride_ + 1;
  Tensor y({n, ho, wo, c});
  argmax_.assign(y.size(), 0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t kh = 0; kh < k_; ++kh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride_ + kh) - static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kw = 0; kw < k_; ++kw) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * stride_ + kw) - static_cast<std::ptrdiff_t>(pad_);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t idx = ((b * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw)) * c + ch;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          const std::size_t o = ((b * ho + oh) * wo + ow) * c + ch;
          y[o] = best;
          argmax_[o] = best_idx;
        }
  in_shape_ = x.shape();
  cached_ = mode == Mode::train;
  return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) {
  require_cache(cached_, "maxpool2d");
  Tensor dx(in_shape_);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------- Bottleneck

Bottleneck::Bottleneck(std::size_t in_channels, std::size_t width, std::size_t out_channels, std::size_t stride)
    : conv1_(in_channels, width, 1),
      conv2_(width, width, 3, stride, 1),
      conv3_(width, out_channels, 1),
      bn1_(width),
      bn2_(width),
      bn3_(out_channels),
      has_downsample_(stride != 1 || in_channels != out_channels) {
  if (has_downsample_) {
    down_conv_ = Conv2d(in_channels, out_channels, 1, stride, 0);
    down_bn_ = BatchNorm(out_channels);
  }
}

void Bottleneck::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  conv3_.init(rng);
  if (has_downsample_) down_conv_.init(rng);
}

Tensor Bottleneck::forward(const Tensor& x, Mode mode) {
  Tensor out = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
  out = relu2_.forward(bn2_.forward(conv2_.forward(out, mode), mode), mode);
  out = bn3_.forward(conv3_.forward(out, mode), mode);
  if (has_downsample_)
    out += down_bn_.forward(down_conv_.forward(x, mode), mode);
  else
    out += x;
  return relu_out_.forward(out, mode);
}

Tensor Bottleneck::backward(const Tensor& dy) {
  Tensor g = relu_out_.backward(dy);
  Tensor dx = has_downsample_ ? down_conv_.backward(down_bn_.backward(g)) : g;
  Tensor d = conv3_.backward(bn3_.backward(g));
  d = conv2_.backward(bn2_.backward(relu2_.backward(d)));
  d = conv1_.backward(bn1_.backward(relu1_.backward(d)));
  dx += d;
  return dx;
}

void Bottleneck::visit(const std::string& prefix, ParamVisitor& v) {
  conv1_.visit(join_path(prefix, "conv1"), v);
  bn1_.visit(join_path(prefix, "bn1"), v);
  conv2_.visit(join_path(prefix, "conv2"), v);
  bn2_.visit(join_path(prefix, "bn2"), v);
  conv3_.visit(join_path(prefix, "conv3"), v);
  bn3_.visit(join_path(prefix, "bn3"), v);
  if (has_downsample_) {
    down_conv_.visit(join_path(prefix, "downsample.0"), v);
    down_bn_.visit(join_path(prefix, "downsample.1"), v);
  }
}

// ---------------------------------------------------------------- BasicBlock

BasicBlock::BasicBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride)
    : conv1_(in_channels, out_channels, 3, stride, 1),
      conv2_(out_channels, out_channels, 3, 1, 1),
      bn1_(out_channels),
      bn2_(out_channels),
      has_downsample_(stride != 1 || in_channels != out_channels) {
  if (has_downsample_) {
    down_conv_ = Conv2d(in_channels, out_channels, 1, stride, 0);
    down_bn_ = BatchNorm(out_channels);
  }
}

void BasicBlock::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  if (has_downsample_) down_conv_.init(rng);
}

Tensor BasicBlock::forward(const Tensor& x, Mode mode) {
  Tensor out = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
  out = bn2_.forward(conv2_.forward(out, mode), mode);
  if (has_downsample_)
    out += down_bn_.forward(down_conv_.forward(x, mode), mode);
  else
    out += x;
  return relu_out_.forward(out, mode);
}

Tensor BasicBlock::backward(const Tensor& dy) {
  Tensor g = relu_out_.backward(dy);
  Tensor dx = has_downsample_ ? down_conv_.backward(down_bn_.backward(g)) : g;
  Tensor d = conv2_.backward(bn2_.backward(g));
  d = conv1_.backward(bn1_.backward(relu1_.backward(d)));
  dx += d;
  return dx;
}

void BasicBlock::visit(const std::string& prefix, ParamVisitor& v) {
  conv1_.visit(join_path(prefix, "conv1"), v);
  bn1_.visit(join_path(prefix, "bn1"), v);
  conv2_.visit(join_path(prefix, "conv2"), v);
  bn2_.visit(join_path(prefix, "bn2"), v);
  if (has_downsample_) {
    down_conv_.visit(join_path(prefix, "downsample.0"), v);
    down_bn_.visit(join_path(prefix, "downsample.1"), v);
  }
}

}  // namespace cssc
