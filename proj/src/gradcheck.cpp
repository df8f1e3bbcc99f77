#include "cssc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "cssc/error.hpp"
#include "cssc/losses.hpp"

namespace cssc {

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GradGroupResult& g) { return g.passed; });
}

std::vector<GradTarget> parameter_targets(Module& m, const std::string& prefix) {
  std::vector<GradTarget> out;
  for (auto& [name, p] : named_parameters(m, prefix)) out.push_back({name, &p->value, &p->grad});
  return out;
}

GradCheckReport check_gradients(const std::string& scenario, const std::vector<GradTarget>& targets,
                                const std::function<double(bool)>& loss, const GradCheckOptions& opts) {
  loss(true);
  std::vector<Tensor> analytic;
  for (const auto& t : targets) analytic.push_back(*t.analytic);

  GradCheckReport report{scenario, opts.tolerance, {}, 0.0, "", 0};
  Rng rng(derive_seed(opts.seed, 0x67C));
  for (std::size_t g = 0; g < targets.size(); ++g) {
    Tensor& value = *targets[g].value;
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.coords_per_group > 0 && coords.size() > opts.coords_per_group) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opts.coords_per_group);
      std::sort(coords.begin(), coords.end());
    }
    double diff2 = 0, num2 = 0, ana2 = 0, loss_mag = 0;
    for (std::size_t i : coords) {
      const double orig = value[i];
      value[i] = orig + opts.step;
      const double up = loss(false);
      value[i] = orig - opts.step;
      const double down = loss(false);
      loss_mag = std::max({loss_mag, std::abs(up), std::abs(down)});
      value[i] = orig;
      const double numeric = (up - down) / (2 * opts.step);
      const double a = analytic[g][i];
      diff2 += (numeric - a) * (numeric - a);
      num2 += numeric * numeric;
      ana2 += a * a;
    }
    GradGroupResult r;
    r.name = targets[g].name;
    r.checked = coords.size();
    r.analytic_norm = std::sqrt(ana2);
    r.numeric_norm = std::sqrt(num2);
    r.abs_error = std::sqrt(diff2);
    const double denom = r.analytic_norm + r.numeric_norm;
    r.rel_error = denom > 0 ? r.abs_error / denom : 0.0;
    r.noise = std::sqrt(static_cast<double>(coords.size())) * std::numeric_limits<double>::epsilon() * loss_mag / opts.step;
    r.resolved = denom * opts.tolerance >= r.noise;
    r.passed = r.resolved ? r.rel_error < opts.tolerance : r.abs_error <= r.noise;
    if (r.resolved && r.rel_error >= report.max_rel_error) {
      report.max_rel_error = r.rel_error;
      report.worst_group = r.name;
    }
    if (!r.resolved) ++report.unresolved;
    report.groups.push_back(r);
  }
  return report;
}

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor t(s);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

GradCheckReport gradcheck_smr(const SmrConfig& cfg, std::size_t num_classes, std::size_t batch, std::size_t height,
                              std::size_t width, const GradCheckOptions& opts) {
  Rng rng(derive_seed(opts.seed, 0x53));
  SmrModule smr(cfg, num_classes, rng);
  Tensor input = random_tensor({batch, height, width, cfg.in_channels}, rng, -1.0, 1.0);
  Tensor input_grad(input.shape());
  // Fixed random projections turn every output into one scalar.
  const SmrOutput probe = smr.forward(input, Mode::train);
  const Tensor w_refined = random_tensor(probe.refined.shape(), rng, -1.0, 1.0);
  const Tensor w_global = random_tensor(probe.global.shape(), rng, -1.0, 1.0);
  const Tensor w_logits = random_tensor(probe.logits->shape(), rng, -1.0, 1.0);

  auto loss = [&](bool with_grad) {
    const SmrOutput out = smr.forward(input, Mode::train);
    const double value = dot(out.refined, w_refined) + dot(out.global, w_global) + dot(*out.logits, w_logits);
    if (with_grad) {
      zero_grad(smr);
      input_grad = smr.backward(SmrGradients{w_refined, w_global, w_logits});
    }
    return value;
  };
  auto targets = parameter_targets(smr, smr_name(cfg.mode));
  targets.push_back({"input", &input, &input_grad});
  return check_gradients(std::string(smr_name(cfg.mode)) + "_forward", targets, loss, opts);
}

GradCheckReport gradcheck_model(const ModelConfig& cfg, const std::vector<int>& labels, bool triplet_active,
                                const GradCheckOptions& opts) {
  Rng rng(derive_seed(opts.seed, 0x4D));
  CsscModel model(cfg, rng);
  model.train();
  Tensor images = random_tensor({labels.size(), cfg.backbone.input_height, cfg.backbone.input_width, 3}, rng, 0.0, 1.0);
  Tensor image_grad(images.shape());
  const LossConfig loss_cfg{0.3, 0.1, triplet_active};
  auto loss = [&](bool with_grad) {
    const ForwardOutputs out = model.forward(images);
    ModelGradients grads;
    const LossBundle b = total_loss(out, labels, loss_cfg, with_grad ? &grads : nullptr);
    if (with_grad) {
      zero_grad(model);
      image_grad = model.backward(grads);
    }
    return b.total;
  };
  auto targets = parameter_targets(model);
  targets.push_back({"input", &images, &image_grad});
  return check_gradients(std::string("total_loss_b") + std::to_string(labels.size()) + (triplet_active ? "_triplet" : ""),
                         targets, loss, opts);
}

std::string format_report(const GradCheckReport& r) {
  std::ostringstream os;
  char buf[256];
  os << "scenario " << r.scenario << '\n';
  for (const auto& g : r.groups) {
    if (g.resolved)
      std::snprintf(buf, sizeof buf, "  %-44s n=%-3zu |g|=%.3e rel=%.3e %s\n", g.name.c_str(), g.checked, g.analytic_norm,
                    g.rel_error, g.passed ? "ok" : "FAIL");
    else
      std::snprintf(buf, sizeof buf, "  %-44s n=%-3zu |g|=%.3e abs=%.3e noise=%.3e %s\n", g.name.c_str(), g.checked,
                    g.analytic_norm, g.abs_error, g.noise, g.passed ? "ok (below FD resolution)" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "  max rel error %.3e (%s) over %zu resolved groups; %zu below FD resolution; %s\n",
                r.max_rel_error, r.worst_group.c_str(), r.groups.size() - r.unresolved, r.unresolved,
                r.passed() ? "PASS" : "FAIL");
  os << buf;
  return os.str();
}

}  // namespace cssc
