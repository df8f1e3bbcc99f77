#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cssc/model.hpp"

namespace cssc {

struct LossConfig {
  double triplet_margin = 0.3;
  double label_smoothing = 0.1;
  // Set by the training schedule; triplet terms are exactly zero while false.
  bool triplet_active = false;

  void validate() const;
};

// Mean label-smoothed cross-entropy: target 1-eps+eps/C on the true class and
// eps/C elsewhere. Writes d(loss)/d(logits) to `grad` when given.
double id_loss(const Tensor& logits, std::span<const int> labels, double smoothing, Tensor* grad = nullptr);

// Batch-hard triplet loss over Euclidean distances: for every anchor the
// farthest same-label and nearest other-label sample, hinge at `margin`,
// mean over anchors. Ties pick the lowest index.
double batch_hard_triplet(const Tensor& features, std::span<const int> labels, double margin, Tensor* grad = nullptr);

struct HeadLoss {
  double id = 0.0;
  double tri = 0.0;
  double total() const { return id + tri; }
};

// Identity loss on the classifier logits (augmented vector through the neck)
// plus triplet loss on the pre-neck global vector, gated by triplet_active.
HeadLoss smr_head_loss(const SmrOutput& output, std::span<const int> labels, const LossConfig& cfg,
                       HeadGradients* grads = nullptr);

struct LossBundle {
  HeadLoss smr_c_b1, smr_s_b1, smr_s_b2, smr_c_b2;
  HeadLoss cssc;
  double branch1 = 0.0, branch2 = 0.0, cssc_total = 0.0, total = 0.0;
  bool triplet_active = false;

  double triplet_sum() const { return smr_c_b1.tri + smr_s_b1.tri + smr_s_b2.tri + smr_c_b2.tri + cssc.tri; }
  // Flat (field, value) list; names match the training log keys.
  std::vector<std::pair<std::string, double>> fields() const;
};

// Sum of both branch losses and the fusion loss with unit weights. Heads
// absent from the architecture contribute zero.
LossBundle total_loss(const ForwardOutputs& outputs, std::span<const int> labels, const LossConfig& cfg,
                      ModelGradients* grads = nullptr);

// Recomputes the bundle totals from its components.
void finalize_bundle(LossBundle& bundle);

}  // namespace cssc
