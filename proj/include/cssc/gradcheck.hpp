#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cssc/model.hpp"

namespace cssc {

struct GradTarget {
  std::string name;
  Tensor* value;
  Tensor* analytic;
};

// Every parameter of `m` as a target (value, grad).
std::vector<GradTarget> parameter_targets(Module& m, const std::string& prefix = "");

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  // Coordinates sampled per target; 0 checks every coordinate.
  std::size_t coords_per_group = 12;
  std::uint64_t seed = 0;
};

struct GradGroupResult {
  std::string name;
  std::size_t checked = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double abs_error = 0.0;  // |numeric - analytic|
  // |numeric - analytic| / (|numeric| + |analytic|) over the checked
  // coordinates (Euclidean norms).
  double rel_error = 0.0;
  // Rounding noise of the central difference, sqrt(n) * eps * max|loss| / step.
  // A group whose gradient norm is below noise / tolerance cannot be checked
  // to the relative tolerance; it is judged by abs_error <= noise instead.
  double noise = 0.0;
  bool resolved = true;
  bool passed = true;
};

struct GradCheckReport {
  std::string scenario;
  double tolerance = 1e-5;
  std::vector<GradGroupResult> groups;
  // Over resolved groups.
  double max_rel_error = 0.0;
  std::string worst_group;
  std::size_t unresolved = 0;

  bool passed() const;
};

// `loss(true)` must zero and fill every target's analytic gradient and
// return the loss; `loss(false)` only returns the loss.
GradCheckReport check_gradients(const std::string& scenario, const std::vector<GradTarget>& targets,
                                const std::function<double(bool)>& loss, const GradCheckOptions& opts = {});

// Weighted sum of every SMR output (refined map, global vector, logits)
// through one train-mode module.
GradCheckReport gradcheck_smr(const SmrConfig& cfg, std::size_t num_classes, std::size_t batch, std::size_t height,
                              std::size_t width, const GradCheckOptions& opts = {});

// total_loss of a model on a random batch of `labels.size()` images,
// including the image gradient as group "input".
GradCheckReport gradcheck_model(const ModelConfig& cfg, const std::vector<int>& labels, bool triplet_active,
                                const GradCheckOptions& opts = {});

std::string format_report(const GradCheckReport& r);

}  // namespace cssc
