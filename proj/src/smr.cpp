#include "cssc/smr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cssc/error.hpp"

namespace cssc {

namespace {

// Largest double below 1 and smallest positive normal: the gate stays
// strictly inside (0, 1) even where the logistic function saturates.
constexpr double kGateMax = 1.0 - 0x1.0p-53;
constexpr double kGateMin = std::numeric_limits<double>::min();

double sigmoid(double x) {
  const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return std::clamp(s, kGateMin, kGateMax);
}

void require_map(const Tensor& map, const char* what) {
  if (map.rank() != 4) throw Error(std::string(what) + ": expected a (batch, h, w, d) map, got " + shape_string(map.shape()));
  if (map.dim(1) == 0 || map.dim(2) == 0) throw Error(std::string(what) + ": empty spatial extent");
}

}  // namespace

void SmrConfig::validate() const {
  if (num_parts < 1) throw ValidationError("smr: num_parts must be >= 1");
  if (in_channels < 1 || out_channels < 1) throw ValidationError("smr: channel counts must be >= 1");
  if (part_channels < 1) throw ValidationError("smr: part_channels must be >= 1");
  if (reduction_ratio < 1 || out_channels % reduction_ratio != 0)
    throw ValidationError("smr: reduction_ratio " + std::to_string(reduction_ratio) + " must divide out_channels " +
                          std::to_string(out_channels));
}

std::vector<std::pair<std::size_t, std::size_t>> band_rows(std::size_t height, std::size_t parts) {
  if (parts == 0) throw Error("band_rows: zero parts");
  if (height < parts)
    throw Error("band_rows: map height " + std::to_string(height) + " is smaller than the part count " +
                std::to_string(parts));
  std::vector<std::pair<std::size_t, std::size_t>> bands;
  const std::size_t base = height / parts, extra = height % parts;
  std::size_t r = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t rows = base + (p < extra ? 1 : 0);
    bands.emplace_back(r, r + rows);
    r += rows;
  }
  return bands;
}

// ---------------------------------------------------------------- BandPool

Tensor BandPool::forward(const Tensor& map, std::size_t parts, PoolMode mode, Mode m) {
  require_map(map, "pool");
  const std::size_t n = map.dim(0), h = map.dim(1), w = map.dim(2), d = map.dim(3);
  const auto bands = band_rows(h, parts);
  Tensor out({n, parts, d});
  if (mode == PoolMode::max) argmax_.assign(out.size(), 0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < parts; ++p) {
      const auto [r0, r1] = bands[p];
      double* o = out.data() + (b * parts + p) * d;
      if (mode == PoolMode::average) {
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t x = 0; x < w; ++x) {
            const double* src = map.data() + ((b * h + r) * w + x) * d;
            for (std::size_t c = 0; c < d; ++c) o[c] += src[c];
          }
        const double inv = 1.0 / static_cast<double>((r1 - r0) * w);
        for (std::size_t c = 0; c < d; ++c) o[c] *= inv;
      } else {
        std::size_t* idx = argmax_.data() + (b * parts + p) * d;
        for (std::size_t c = 0; c < d; ++c) {
          o[c] = -std::numeric_limits<double>::infinity();
        }
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t base = ((b * h + r) * w + x) * d;
            for (std::size_t c = 0; c < d; ++c)
              if (map[base + c] > o[c]) {
                o[c] = map[base + c];
                idx[c] = base + c;
              }
          }
      }
    }
  in_shape_ = map.shape();
  parts_ = parts;
  mode_ = mode;
  cached_ = m == Mode::train;
  return out;
}

Tensor BandPool::backward(const Tensor& grad) {
  if (!cached_) throw Error("pool: backward called without a training-mode forward");
  const std::size_t n = in_shape_[0], h = in_shape_[1], w = in_shape_[2], d = in_shape_[3];
  if (grad.size() != n * parts_ * d) throw Error("pool backward: gradient has shape " + shape_string(grad.shape()));
  Tensor dmap(in_shape_);
  if (mode_ == PoolMode::max) {
    for (std::size_t i = 0; i < grad.size(); ++i) dmap[argmax_[i]] += grad[i];
    return dmap;
  }
  const auto bands = band_rows(h, parts_);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < parts_; ++p) {
      const auto [r0, r1] = bands[p];
      const double inv = 1.0 / static_cast<double>((r1 - r0) * w);
      const double* g = grad.data() + (b * parts_ + p) * d;
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t x = 0; x < w; ++x) {
          double* dst = dmap.data() + ((b * h + r) * w + x) * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += g[c] * inv;
        }
    }
  return dmap;
}

// ---------------------------------------------------------------- pure ops

Tensor global_pool(const Tensor& map, PoolMode mode) {
  BandPool pool;
  Tensor out = pool.forward(map, 1, mode, Mode::eval);
  out.reshape({map.dim(0), map.dim(3)});
  return out;
}

std::vector<Tensor> part_features(const Tensor& map, std::size_t parts, PoolMode mode,
                                  const std::vector<Tensor>& reduce_weights) {
  if (reduce_weights.size() != 1 && reduce_weights.size() != parts)
    throw Error("part_features: need one shared or one per-part reduction weight");
  require_map(map, "part_features");
  const std::size_t n = map.dim(0), d = map.dim(3);
  BandPool pool;
  const Tensor pooled = pool.forward(map, parts, mode, Mode::eval);
  std::vector<Tensor> out;
  for (std::size_t p = 0; p < parts; ++p) {
    const Tensor& w = reduce_weights.size() == 1 ? reduce_weights[0] : reduce_weights[p];
    if (w.rank() != 2 || w.dim(1) != d) throw Error("part_features: reduction weight must be (d_l, " + std::to_string(d) + ")");
    const std::size_t dl = w.dim(0);
    Tensor f({n, dl});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < dl; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += w.at(j, c) * pooled[(b * parts + p) * d + c];
        f.at(b, j) = s;
      }
    out.push_back(std::move(f));
  }
  return out;
}

Tensor concat_semantics(const Tensor& global, const std::vector<Tensor>& parts) {
  if (global.rank() != 2) throw Error("concat_semantics: global feature must be (batch, d)");
  const std::size_t n = global.dim(0);
  std::size_t width = global.dim(1);
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n)
      throw Error("concat_semantics: part shape " + shape_string(p.shape()) + " does not match batch " + std::to_string(n));
    if (!parts.empty() && p.dim(1) != parts.front().dim(1)) throw Error("concat_semantics: part widths differ");
    width += p.dim(1);
  }
  Tensor out({n, width});
  for (std::size_t b = 0; b < n; ++b) {
    double* dst = out.data() + b * width;
    dst = std::copy_n(global.data() + b * global.dim(1), global.dim(1), dst);
    for (const auto& p : parts) dst = std::copy_n(p.data() + b * p.dim(1), p.dim(1), dst);
  }
  return out;
}

Tensor channel_gate(const Tensor& global, const Tensor& squeeze, const Tensor& excite) {
  if (global.rank() != 2 || squeeze.rank() != 2 || excite.rank() != 2 || squeeze.dim(1) != global.dim(1) ||
      excite.dim(1) != squeeze.dim(0) || excite.dim(0) != global.dim(1))
    throw Error("channel_gate: weight shapes " + shape_string(squeeze.shape()) + ", " + shape_string(excite.shape()) +
                " do not fit feature " + shape_string(global.shape()));
  const std::size_t n = global.dim(0), d = global.dim(1), k = squeeze.dim(0);
  Tensor gate({n, d});
  std::vector<double> hidden(k);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += squeeze.at(j, c) * global.at(b, c);
      hidden[j] = std::max(s, 0.0);
    }
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += excite.at(c, j) * hidden[j];
      if (!std::isfinite(s)) throw Error("channel_gate: non-finite gate pre-activation");
      gate.at(b, c) = sigmoid(s);
    }
  }
  return gate;
}

Tensor refine(const Tensor& map, const Tensor& global, const Tensor& squeeze, const Tensor& excite) {
  require_map(map, "refine");
  const Tensor gate = channel_gate(global, squeeze, excite);
  if (gate.dim(0) != map.dim(0) || gate.dim(1) != map.dim(3)) throw Error("refine: gate does not match map channels");
  Tensor out = map;
  const std::size_t d = map.dim(3), per_sample = map.size() / map.dim(0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= gate.at(i / per_sample, i % d);
  return out;
}

// ---------------------------------------------------------------- SmrModule

SmrModule::SmrModule(const SmrConfig& cfg, std::size_t num_classes, Rng& rng)
    : cfg_(cfg),
      block_(cfg.in_channels, std::max<std::size_t>(1, cfg.out_channels / 4), cfg.out_channels, 1),
      squeeze_(cfg.out_channels, cfg.out_channels / std::max<std::size_t>(1, cfg.reduction_ratio)),
      excite_(cfg.out_channels / std::max<std::size_t>(1, cfg.reduction_ratio), cfg.out_channels),
      neck_(cfg.augmented_dim(), /*learn_shift=*/false),
      classifier_(cfg.augmented_dim(), num_classes) {
  cfg_.validate();
  if (num_classes < 1) throw ValidationError("smr: need at least one training identity");
  block_.init(rng);
  if (cfg_.local_mining) {
    const std::size_t count = cfg_.shared_reduction ? 1 : cfg_.num_parts;
    const double stddev = std::sqrt(2.0 / static_cast<double>(cfg_.out_channels));
    for (std::size_t p = 0; p < count; ++p) {
      reduce_.emplace_back(cfg_.out_channels, cfg_.part_channels);
      reduce_.back().init_normal(rng, stddev);
    }
  }
  if (cfg_.refinement) {
    squeeze_.init_normal(rng, std::sqrt(2.0 / static_cast<double>(squeeze_.in_features())));
    excite_.init_normal(rng, std::sqrt(1.0 / static_cast<double>(excite_.in_features())));
  }
  classifier_.init_normal(rng, 0.001);
}

SmrOutput SmrModule::forward(const Tensor& input, Mode mode) {
  if (input.rank() != 4 || input.dim(3) != cfg_.in_channels)
    throw Error(std::string(smr_name(cfg_.mode)) + ": expected input with " + std::to_string(cfg_.in_channels) +
                " channels, got " + shape_string(input.shape()));
  const PoolMode pm = pool_mode(cfg_.mode);
  const std::size_t n = input.dim(0), d = cfg_.out_channels;
  SmrOutput out;
  out.mode = cfg_.mode;
  out.input_digest = input.digest();
  out.conv_map = block_.forward(input, mode);

  out.global = global_pool_.forward(out.conv_map, 1, pm, mode);
  out.global.reshape({n, d});

  if (cfg_.local_mining) {
    const std::size_t parts = cfg_.num_parts, dl = cfg_.part_channels;
    Tensor pooled = part_pool_.forward(out.conv_map, parts, pm, mode);
    std::vector<Tensor> features;
    if (cfg_.shared_reduction) {
      pooled.reshape({n * parts, d});
      Tensor reduced = reduce_[0].forward(pooled, mode);
      for (std::size_t p = 0; p < parts; ++p) {
        Tensor f({n, dl});
        for (std::size_t b = 0; b < n; ++b)
          std::copy_n(reduced.data() + (b * parts + p) * dl, dl, f.data() + b * dl);
        features.push_back(std::move(f));
      }
    } else {
      for (std::size_t p = 0; p < parts; ++p) {
        Tensor x({n, d});
        for (std::size_t b = 0; b < n; ++b) std::copy_n(pooled.data() + (b * parts + p) * d, d, x.data() + b * d);
        features.push_back(reduce_[p].forward(x, mode));
      }
    }
    out.augmented = concat_semantics(out.global, features);
  } else {
    out.augmented = out.global;
  }

  if (cfg_.refinement) {
    const Tensor pre = excite_.forward(gate_relu_.forward(squeeze_.forward(out.global, mode), mode), mode);
    out.gate = Tensor({n, d});
    for (std::size_t i = 0; i < pre.size(); ++i) {
      if (!std::isfinite(pre[i])) throw Error(std::string(smr_name(cfg_.mode)) + ": non-finite gate pre-activation");
      out.gate[i] = sigmoid(pre[i]);
    }
    out.refined = out.conv_map;
    const std::size_t per_sample = out.refined.size() / n;
    for (std::size_t i = 0; i < out.refined.size(); ++i) out.refined[i] *= out.gate[(i / per_sample) * d + i % d];
  } else {
    out.refined = out.conv_map;
  }

  if (mode == Mode::train) {
    const Tensor neck = cfg_.neck ? neck_.forward(out.augmented, mode) : out.augmented;
    out.logits = classifier_.forward(neck, mode);
    conv_map_ = out.conv_map;
    gate_ = out.gate;
    batch_ = n;
  }
  cached_ = mode == Mode::train;
  return out;
}

Tensor SmrModule::backward(const SmrGradients& grads) {
  if (!cached_) throw Error(std::string(smr_name(cfg_.mode)) + ": backward called without a training-mode forward");
  const std::size_t n = batch_, d = cfg_.out_channels;
  Tensor dmap(conv_map_.shape());
  Tensor dglobal({n, d});
  if (!grads.global.empty()) dglobal += grads.global;

  if (!grads.refined.empty()) {
    require_shape(grads.refined, conv_map_.shape(), "smr backward (refined)");
    if (cfg_.refinement) {
      const std::size_t per_sample = conv_map_.size() / n;
      Tensor dgate({n, d});
      for (std::size_t i = 0; i < conv_map_.size(); ++i) {
        const std::size_t g = (i / per_sample) * d + i % d;
        dmap[i] += grads.refined[i] * gate_[g];
        dgate[g] += grads.refined[i] * conv_map_[i];
      }
      for (std::size_t i = 0; i < dgate.size(); ++i) dgate[i] *= gate_[i] * (1.0 - gate_[i]);
      dglobal += squeeze_.backward(gate_relu_.backward(excite_.backward(dgate)));
    } else {
      dmap += grads.refined;
    }
  }

  if (!grads.logits.empty()) {
    Tensor daug = classifier_.backward(grads.logits);
    if (cfg_.neck) daug = neck_.backward(daug);
    const std::size_t width = cfg_.augmented_dim();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < d; ++c) dglobal.at(b, c) += daug[b * width + c];
    if (cfg_.local_mining) {
      const std::size_t parts = cfg_.num_parts, dl = cfg_.part_channels;
      Tensor dpooled({n, parts, d});
      if (cfg_.shared_reduction) {
        Tensor dreduced({n * parts, dl});
        for (std::size_t b = 0; b < n; ++b)
          std::copy_n(daug.data() + b * width + d, parts * dl, dreduced.data() + b * parts * dl);
        Tensor dp = reduce_[0].backward(dreduced);
        std::copy(dp.storage().begin(), dp.storage().end(), dpooled.storage().begin());
      } else {
        for (std::size_t p = 0; p < parts; ++p) {
          Tensor dpart({n, dl});
          for (std::size_t b = 0; b < n; ++b)
            std::copy_n(daug.data() + b * width + d + p * dl, dl, dpart.data() + b * dl);
          const Tensor dx = reduce_[p].backward(dpart);
          for (std::size_t b = 0; b < n; ++b) std::copy_n(dx.data() + b * d, d, dpooled.data() + (b * parts + p) * d);
        }
      }
      dmap += part_pool_.backward(dpooled);
    }
  }

  dmap += global_pool_.backward(dglobal);
  return block_.backward(dmap);
}

Tensor SmrModule::neck_global(const Tensor& global) const {
  return cfg_.neck ? neck_.normalize_prefix(global) : global;
}

void SmrModule::visit(const std::string& prefix, ParamVisitor& v) {
  block_.visit(join_path(prefix, "block"), v);
  if (cfg_.shared_reduction && !reduce_.empty()) {
    reduce_[0].visit(join_path(prefix, "reduce"), v);
  } else {
    for (std::size_t p = 0; p < reduce_.size(); ++p) reduce_[p].visit(join_path(prefix, "reduce." + std::to_string(p)), v);
  }
  if (cfg_.refinement) {
    squeeze_.visit(join_path(prefix, "gate.squeeze"), v);
    excite_.visit(join_path(prefix, "gate.excite"), v);
  }
  if (cfg_.neck) neck_.visit(join_path(prefix, "neck"), v);
  classifier_.visit(join_path(prefix, "classifier"), v);
}

}  // namespace cssc
