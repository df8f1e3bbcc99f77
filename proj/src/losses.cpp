#include "cssc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "cssc/error.hpp"

namespace cssc {

void LossConfig::validate() const {
  if (!(triplet_margin >= 0.0)) throw ValidationError("loss: triplet_margin must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ValidationError("loss: label_smoothing must be in [0, 1)");
}

double id_loss(const Tensor& logits, std::span<const int> labels, double smoothing, Tensor* grad) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw Error("id_loss: logits " + shape_string(logits.shape()) + " do not match " + std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (grad) *grad = Tensor({n, c});
  double loss = 0.0;
  const double off = smoothing / static_cast<double>(c);
  const double on = 1.0 - smoothing + off;
  std::vector<double> logp(c);
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= c)
      throw Error("id_loss: label " + std::to_string(labels[b]) + " out of range [0, " + std::to_string(c) + ")");
    const double* z = logits.data() + b * c;
    const double zmax = *std::max_element(z, z + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) {
      logp[j] = z[j] - lse;
      const double target = j == static_cast<std::size_t>(labels[b]) ? on : off;
      loss -= target * logp[j];
      if (grad) grad->at(b, j) = (std::exp(logp[j]) - target) / static_cast<double>(n);
    }
  }
  return loss / static_cast<double>(n);
}

double batch_hard_triplet(const Tensor& features, std::span<const int> labels, double margin, Tensor* grad) {
  if (features.rank() != 2 || features.dim(0) != labels.size())
    throw Error("batch_hard_triplet: features " + shape_string(features.shape()) + " do not match " +
                std::to_string(labels.size()) + " labels");
  const std::size_t n = features.dim(0), m = features.dim(1);
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw Error("batch_hard_triplet: batch contains a single label");
  for (const auto& [label, k] : counts)
    if (k < 2) throw Error("batch_hard_triplet: label " + std::to_string(label) + " has a single instance");

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double d = features.at(i, k) - features.at(j, k);
        s += d * d;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(s);
    }

  if (grad) *grad = Tensor({n, m});
  auto add_grad = [&](std::size_t a, std::size_t o, double sign) {
    const double d = dist[a * n + o];
    if (d <= 0.0) return;  // zero subgradient at coincident points
    const double scale = sign / (d * static_cast<double>(n));
    for (std::size_t k = 0; k < m; ++k) {
      const double diff = (features.at(a, k) - features.at(o, k)) * scale;
      grad->at(a, k) += diff;
      grad->at(o, k) -= diff;
    }
  };

  double loss = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t pos = n, neg = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (pos == n || dist[a * n + j] > dist[a * n + pos]) pos = j;
      } else if (neg == n || dist[a * n + j] < dist[a * n + neg]) {
        neg = j;
      }
    }
    const double term = margin + dist[a * n + pos] - dist[a * n + neg];
    if (term > 0.0) {
      loss += term;
      if (grad) {
        add_grad(a, pos, 1.0);
        add_grad(a, neg, -1.0);
      }
    }
  }
  return loss / static_cast<double>(n);
}

HeadLoss smr_head_loss(const SmrOutput& output, std::span<const int> labels, const LossConfig& cfg,
                       HeadGradients* grads) {
  if (!output.logits) throw Error("smr_head_loss: output has no logits (evaluation-mode forward)");
  HeadLoss h;
  h.id = id_loss(*output.logits, labels, cfg.label_smoothing, grads ? &grads->logits : nullptr);
  if (cfg.triplet_active) h.tri = batch_hard_triplet(output.global, labels, cfg.triplet_margin, grads ? &grads->global : nullptr);
  return h;
}

void finalize_bundle(LossBundle& b) {
  b.branch1 = b.smr_c_b1.total() + b.smr_s_b1.total();
  b.branch2 = b.smr_s_b2.total() + b.smr_c_b2.total();
  b.cssc_total = b.cssc.total();
  b.total = b.branch1 + b.branch2 + b.cssc_total;
}

LossBundle total_loss(const ForwardOutputs& out, std::span<const int> labels, const LossConfig& cfg,
                      ModelGradients* grads) {
  LossBundle b;
  b.triplet_active = cfg.triplet_active;
  auto head = [&](const SmrOutput& o, int branch, HeadGradients* g) {
    HeadLoss& dst = o.mode == SmrMode::content ? (branch == 1 ? b.smr_c_b1 : b.smr_c_b2)
                                               : (branch == 1 ? b.smr_s_b1 : b.smr_s_b2);
    dst = smr_head_loss(o, labels, cfg, g);
  };
  head(out.branch1_first, 1, grads ? &grads->branch1_first : nullptr);
  if (out.branch1_second) head(*out.branch1_second, 1, grads ? &grads->branch1_second : nullptr);
  if (out.branch2_first) head(*out.branch2_first, 2, grads ? &grads->branch2_first : nullptr);
  if (out.branch2_second) head(*out.branch2_second, 2, grads ? &grads->branch2_second : nullptr);
  if (out.fusion_logits) {
    b.cssc.id = id_loss(*out.fusion_logits, labels, cfg.label_smoothing, grads ? &grads->fusion.logits : nullptr);
    if (cfg.triplet_active)
      b.cssc.tri = batch_hard_triplet(out.embedding, labels, cfg.triplet_margin, grads ? &grads->fusion.global : nullptr);
  }
  finalize_bundle(b);
  return b;
}

std::vector<std::pair<std::string, double>> LossBundle::fields() const {
  return {{"smr_c_b1", smr_c_b1.total()}, {"smr_c_b1_id", smr_c_b1.id}, {"smr_c_b1_tri", smr_c_b1.tri},
          {"smr_s_b1", smr_s_b1.total()}, {"smr_s_b1_id", smr_s_b1.id}, {"smr_s_b1_tri", smr_s_b1.tri},
          {"smr_s_b2", smr_s_b2.total()}, {"smr_s_b2_id", smr_s_b2.id}, {"smr_s_b2_tri", smr_s_b2.tri},
          {"smr_c_b2", smr_c_b2.total()}, {"smr_c_b2_id", smr_c_b2.id}, {"smr_c_b2_tri", smr_c_b2.tri},
          {"cssc_id", cssc.id},           {"cssc_tri", cssc.tri},       {"branch1", branch1},
          {"branch2", branch2},           {"cssc", cssc_total},         {"total", total}};
}

}  // namespace cssc
