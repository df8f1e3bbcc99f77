#include <cmath>
#include <limits>
#include <numeric>

#include "cssc/error.hpp"
#include "cssc/losses.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cssc;

namespace {

// Plain softmax cross-entropy with smoothed targets, one sample.
double ce_oracle(const std::vector<double>& logits, int label, double eps) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double C = static_cast<double>(logits.size());
  double loss = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double target = (static_cast<int>(k) == label ? 1.0 - eps : 0.0) + eps / C;
    loss -= target * (logits[k] - mx - std::log(z));
  }
  return loss;
}

Tensor column(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

}  // namespace

TEST_CASE("identity loss by hand") {
  const std::vector<int> two{0};
  CHECK(id_loss(Tensor({1, 2}), two, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(id_loss(Tensor({1, 2}, {0.0, 0.0}), two, 0.0) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(id_loss(Tensor({1, 2}, {700.0, 0.0}), two, 0.0) < 1e-300);
  const double l = id_loss(Tensor({1, 3}, {1.0, 0.0, 0.0}), two, 0.1);
  const double e = std::exp(1.0);
  const double hand = -((0.9 + 0.1 / 3) * std::log(e / (e + 2)) + 2 * (0.1 / 3) * std::log(1 / (e + 2)));
  CHECK(l == doctest::Approx(hand).epsilon(1e-14));
  CHECK(l == doctest::Approx(0.618111).epsilon(1e-6));
  CHECK(l == doctest::Approx(ce_oracle({1, 0, 0}, 0, 0.1)).epsilon(1e-14));
  CHECK_THROWS(id_loss(Tensor({1, 3}), std::vector<int>{3}, 0.0));
}

TEST_CASE("identity loss matches an independent cross-entropy on random cases") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(6), C = 2 + rng.below(8);
    Tensor logits({n, C});
    for (double& v : logits.values()) v = rng.uniform(-5, 5);
    std::vector<int> labels(n);
    for (int& y : labels) y = static_cast<int>(rng.below(C));
    const double eps = t % 2 == 0 ? 0.0 : rng.uniform(0.0, 0.5);
    double expect = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      expect += ce_oracle({logits.data() + i * C, logits.data() + (i + 1) * C}, labels[i], eps);
    expect /= static_cast<double>(n);
    REQUIRE(id_loss(logits, labels, eps) == doctest::Approx(expect).epsilon(1e-12));

    // Permuting the batch leaves the mean unchanged.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    Tensor pl({n, C});
    std::vector<int> py(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(logits.data() + perm[i] * C, C, pl.data() + i * C);
      py[i] = labels[perm[i]];
    }
    REQUIRE(id_loss(pl, py, eps) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("batch-hard triplet by enumeration") {
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(batch_hard_triplet(column({0.0, 0.1, 1.0, 1.2}), labels, 0.3) == 0.0);
  CHECK(batch_hard_triplet(column({0.0, 0.9, 1.0, 1.9}), labels, 0.3) == doctest::Approx(0.65).epsilon(1e-14));
  CHECK(batch_hard_triplet(Tensor({4, 3}, 0.25), labels, 0.3) == 0.3);
}

TEST_CASE("batch-hard triplet preconditions") {
  CHECK_THROWS(batch_hard_triplet(column({0, 1, 2}), std::vector<int>{0, 0, 1}, 0.3));
  CHECK_THROWS(batch_hard_triplet(column({0, 1}), std::vector<int>{0, 0}, 0.3));
}

TEST_CASE("batch-hard triplet ignores a common translation") {
  Rng rng(3);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  for (int t = 0; t < 50; ++t) {
    const Tensor f = testing::random_tensor({6, 5}, 10 + static_cast<std::uint64_t>(t));
    Tensor g = f;
    for (std::size_t c = 0; c < 5; ++c) {
      const double shift = rng.uniform(-10, 10);
      for (std::size_t i = 0; i < 6; ++i) g.at(i, c) += shift;
    }
    REQUIRE(batch_hard_triplet(g, labels, 0.3) == doctest::Approx(batch_hard_triplet(f, labels, 0.3)).epsilon(1e-12));
  }
}

TEST_CASE("smr head loss on separable features") {
  SmrOutput o;
  o.global = Tensor({4, 2}, {0, 0, 0.1, 0, 5, 5, 5.1, 5});
  o.logits = Tensor({4, 3});
  const std::vector<int> labels{0, 0, 1, 1};
  LossConfig cfg;
  cfg.triplet_active = true;
  const HeadLoss h = smr_head_loss(o, labels, cfg);
  CHECK(h.tri == 0.0);
  CHECK(h.id > 0.0);
  CHECK(h.total() == h.id + h.tri);
  cfg.triplet_active = false;
  o.global = Tensor({4, 2});  // every triplet term would be the margin
  CHECK(smr_head_loss(o, labels, cfg).tri == 0.0);
  cfg.triplet_active = true;
  CHECK(smr_head_loss(o, labels, cfg).tri == 0.3);
}

TEST_CASE("loss bundle arithmetic") {
  LossBundle zero;
  finalize_bundle(zero);
  CHECK(zero.total == 0.0);

  Rng rng(5);
  CsscModel model(ModelConfig::toy(3), rng);
  const Tensor images = testing::random_tensor({6, 64, 32, 3}, 6, 0.0, 1.0);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  const ForwardOutputs out = model.forward(images);
  LossConfig cfg;
  const LossBundle off = total_loss(out, labels, cfg);
  cfg.triplet_active = true;
  const LossBundle on = total_loss(out, labels, cfg);

  for (const LossBundle* b : {&off, &on}) {
    CHECK(b->branch1 == doctest::Approx(b->smr_c_b1.total() + b->smr_s_b1.total()).epsilon(1e-12));
    CHECK(b->branch2 == doctest::Approx(b->smr_s_b2.total() + b->smr_c_b2.total()).epsilon(1e-12));
    CHECK(b->cssc_total == doctest::Approx(b->cssc.id + b->cssc.tri).epsilon(1e-12));
    CHECK(b->total == doctest::Approx(b->branch1 + b->branch2 + b->cssc_total).epsilon(1e-12));
  }
  CHECK(off.triplet_sum() == 0.0);
  for (const HeadLoss* h : {&off.smr_c_b1, &off.smr_s_b1, &off.smr_s_b2, &off.smr_c_b2, &off.cssc}) CHECK(h->tri == 0.0);
  CHECK(on.triplet_sum() > 0.0);
  CHECK(on.total - off.total == doctest::Approx(on.triplet_sum()).epsilon(1e-12));
  CHECK(on.smr_c_b1.id == off.smr_c_b1.id);
  CHECK(on.cssc.id == off.cssc.id);
}

TEST_CASE("loss configuration validation") {
  LossConfig c;
  c.label_smoothing = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.label_smoothing = 0.1;
  c.triplet_margin = -0.1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
