#include <algorithm>
#include <cmath>

#include "cssc/error.hpp"
#include "cssc/gradcheck.hpp"
#include "cssc/model.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cssc;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

BackboneConfig toy_backbone(std::vector<std::size_t> widths, std::size_t h, std::size_t w) {
  BackboneConfig c;
  c.toy_stage_widths = std::move(widths);
  c.input_height = h;
  c.input_width = w;
  return c;
}

SmrConfig small_smr(SmrMode mode) {
  SmrConfig c;
  c.mode = mode;
  c.in_channels = 6;
  c.out_channels = 8;
  c.num_parts = 2;
  c.part_channels = 4;
  c.reduction_ratio = 2;
  return c;
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("full layout maps 384x192 to 24x12x1024") {
    Rng rng(1);
    Backbone b(BackboneConfig::full(), rng);
    const Tensor out = b.forward(testing::random_tensor({2, 384, 192, 3}, 2, 0.0, 1.0), Mode::eval);
    CHECK(out.shape() == Shape{2, 24, 12, 1024});
    CHECK(out.all_finite());
  }

  TEST_CASE("toy layout has stride 8") {
    Rng rng(1);
    Backbone b(BackboneConfig{}, rng);
    CHECK(b.config().stride() == 8);
    CHECK(b.forward(Tensor({3, 64, 32, 3}), Mode::train).shape() == Shape{3, 8, 4, 64});
  }

  TEST_CASE("seeded initialization is deterministic") {
    Rng r1(5), r2(5);
    Backbone a(BackboneConfig{}, r1), b(BackboneConfig{}, r2);
    const auto pa = named_parameters(a), pb = named_parameters(b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(pa[i].param->value == pb[i].param->value);
    }
  }

  TEST_CASE("zero images give finite features") {
    Rng rng(3);
    Backbone b(BackboneConfig{}, rng);
    CHECK(b.forward(Tensor({2, 64, 32, 3}), Mode::train).all_finite());
    CHECK(b.forward(Tensor({2, 64, 32, 3}), Mode::eval).all_finite());
  }

  TEST_CASE("evaluation mode is pure per sample") {
    Rng rng(3);
    Backbone b(BackboneConfig{}, rng);
    const Tensor one = testing::random_tensor({1, 64, 32, 3}, 4, 0.0, 1.0);
    const Tensor out = b.forward(concat_rows({one, one}), Mode::eval);
    CHECK(slice_rows(out, 0, 1) == slice_rows(out, 1, 2));
    CHECK(max_abs_diff(b.forward(one, Mode::eval), slice_rows(out, 0, 1)) < 1e-10);
  }

  TEST_CASE("input size must match the configuration") {
    Rng rng(3);
    Backbone b(BackboneConfig{}, rng);
    CHECK_THROWS(b.forward(Tensor({1, 32, 32, 3}), Mode::eval));
    BackboneConfig bad;
    bad.input_height = 60;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("gradient check on a two-block toy backbone") {
    const BackboneConfig cfg = toy_backbone({4, 6}, 8, 8);
    Rng rng(7);
    Backbone b(cfg, rng);
    Tensor images = testing::random_tensor({2, 8, 8, 3}, 8, 0.0, 1.0);
    const Tensor proj = testing::random_tensor(b.output_shape(2), 9);
    Tensor image_grad(images.shape());
    auto targets = parameter_targets(b, "backbone");
    targets.push_back({"input", &images, &image_grad});
    const auto loss = [&](bool grad) {
      const Tensor out = b.forward(images, Mode::train);
      double s = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * proj[i];
      if (grad) {
        zero_grad(b);
        image_grad = b.backward(proj);
      }
      return s;
    };
    GradCheckOptions opts;
    opts.coords_per_group = 0;
    const GradCheckReport r = check_gradients("backbone", targets, loss, opts);
    INFO(format_report(r));
    CHECK(r.passed());
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_SUITE("smr") {
  TEST_CASE("global pooling arithmetic") {
    const Tensor m({1, 2, 2, 1}, {1, 2, 3, 4});
    CHECK(global_pool(m, PoolMode::average)[0] == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(global_pool(m, PoolMode::max)[0] == 4.0);
    const Tensor c({2, 3, 2, 4}, 0.7);
    CHECK(global_pool(c, PoolMode::average) == global_pool(c, PoolMode::max));
  }

  TEST_CASE("global pooling ignores spatial permutations") {
    const Tensor m = testing::random_tensor({1, 24, 12, 2048}, 21);
    std::vector<std::size_t> perm(24 * 12);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(22);
    rng.shuffle(perm.begin(), perm.end());
    Tensor p(m.shape());
    for (std::size_t s = 0; s < perm.size(); ++s)
      std::copy_n(m.data() + perm[s] * 2048, 2048, p.data() + s * 2048);
    const Tensor ma = global_pool(m, PoolMode::average), pa = global_pool(p, PoolMode::average);
    CHECK(max_abs_diff(ma, pa) < 1e-14);
    CHECK(global_pool(m, PoolMode::max) == global_pool(p, PoolMode::max));
    // Max dominance.
    const Tensor mm = global_pool(m, PoolMode::max);
    for (std::size_t c = 0; c < 2048; ++c) REQUIRE(mm[c] >= ma[c]);
  }

  TEST_CASE("band rows") {
    const auto rows = band_rows(8, 8);
    REQUIRE(rows.size() == 8);
    for (std::size_t p = 0; p < 8; ++p) CHECK(rows[p] == std::pair<std::size_t, std::size_t>{p, p + 1});
    const auto uneven = band_rows(10, 4);
    CHECK(uneven == std::vector<std::pair<std::size_t, std::size_t>>{{0, 3}, {3, 6}, {6, 8}, {8, 10}});
    CHECK_THROWS(part_features(Tensor({1, 2, 2, 3}), 3, PoolMode::average, {Tensor({1, 3})}));
  }

  TEST_CASE("one part through an identity reduction equals the global pool") {
    const Tensor m = testing::random_tensor({2, 5, 3, 4}, 30);
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
    for (PoolMode mode : {PoolMode::average, PoolMode::max}) {
      const auto parts = part_features(m, 1, mode, {eye});
      REQUIRE(parts.size() == 1);
      CHECK(max_abs_diff(parts[0], global_pool(m, mode)) < 1e-15);
    }
  }

  TEST_CASE("part features by hand") {
    // h=2, w=1, d=4, two one-row bands.
    const Tensor m({1, 2, 1, 4}, {1, 2, 3, 4, -1, 0, 5, 2});
    const Tensor w({2, 4}, {1, 0, -1, 0.5, 0, 2, 0, -1});
    const auto parts = part_features(m, 2, PoolMode::average, {w});
    REQUIRE(parts.size() == 2);
    CHECK(parts[0][0] == doctest::Approx(1 - 3 + 2.0));
    CHECK(parts[0][1] == doctest::Approx(4 - 4.0));
    CHECK(parts[1][0] == doctest::Approx(-1 - 5 + 1.0));
    CHECK(parts[1][1] == doctest::Approx(0 - 2.0));
  }

  TEST_CASE("concatenation order") {
    const Tensor g = testing::random_tensor({2, 2048}, 40);
    std::vector<Tensor> parts;
    for (std::uint64_t p = 0; p < 8; ++p) parts.push_back(testing::random_tensor({2, 256}, 41 + p));
    const Tensor f = concat_semantics(g, parts);
    CHECK(f.shape() == Shape{2, 4096});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2048; ++c) REQUIRE(f.at(b, c) == g.at(b, c));
    std::vector<Tensor> swapped = parts;
    std::swap(swapped[0], swapped[3]);
    const Tensor h = concat_semantics(g, swapped);
    CHECK_FALSE(f == h);
    std::vector<double> a(f.values().begin(), f.values().end()), b(h.values().begin(), h.values().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    CHECK_THROWS(concat_semantics(g, {Tensor({3, 256})}));
  }

  TEST_CASE("zero gate weights halve the map") {
    const Tensor m = testing::random_tensor({2, 3, 2, 4}, 50);
    const Tensor g = testing::random_tensor({2, 4}, 51);
    const Tensor out = refine(m, g, Tensor({2, 4}), Tensor({4, 2}));
    for (std::size_t i = 0; i < m.size(); ++i) REQUIRE(out[i] == 0.5 * m[i]);
  }

  TEST_CASE("gate by hand") {
    const Tensor gate = channel_gate(Tensor({1, 2}, {2, 0}), Tensor({1, 2}, {1, 0}), Tensor({2, 1}, {1, -1}));
    CHECK(gate[0] == doctest::Approx(0.880797).epsilon(1e-6));
    CHECK(gate[1] == doctest::Approx(0.119203).epsilon(1e-6));
    CHECK(gate[0] == doctest::Approx(sigmoid(2.0)).epsilon(1e-15));
    CHECK(gate[1] == doctest::Approx(sigmoid(-2.0)).epsilon(1e-15));
    const Tensor m({1, 1, 2, 2}, {1, 1, -3, 2});
    const Tensor out = refine(m, Tensor({1, 2}, {2, 0}), Tensor({1, 2}, {1, 0}), Tensor({2, 1}, {1, -1}));
    CHECK(out[0] == doctest::Approx(gate[0]));
    CHECK(out[1] == doctest::Approx(gate[1]));
    CHECK(out[2] == doctest::Approx(-3 * gate[0]));
    CHECK(out[3] == doctest::Approx(2 * gate[1]));
  }

  TEST_CASE("refinement shrinks every nonzero entry") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Tensor m = testing::random_tensor({2, 4, 3, 8}, 100 + seed, -3, 3);
      const Tensor out = refine(m, testing::random_tensor({2, 8}, 200 + seed, -3, 3),
                                testing::random_tensor({4, 8}, 300 + seed), testing::random_tensor({8, 4}, 400 + seed));
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i] != 0.0) REQUIRE(std::abs(out[i]) < std::abs(m[i]));
    }
  }

  TEST_CASE("module output shapes and invariants") {
    for (SmrMode mode : {SmrMode::content, SmrMode::salient}) {
      Rng rng(60);
      SmrModule smr(small_smr(mode), 5, rng);
      const Tensor in = testing::random_tensor({3, 4, 2, 6}, 61);
      const SmrOutput o = smr.forward(in, Mode::train);
      CHECK(o.conv_map.shape() == Shape{3, 4, 2, 8});
      CHECK(o.global.shape() == Shape{3, 8});
      CHECK(o.augmented.shape() == Shape{3, 16});
      CHECK(o.refined.shape() == Shape{3, 4, 2, 8});
      REQUIRE(o.logits.has_value());
      CHECK(o.logits->shape() == Shape{3, 5});
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t c = 0; c < 8; ++c) REQUIRE(o.augmented.at(b, c) == o.global.at(b, c));
      for (double g : o.gate.values()) REQUIRE((g > 0.0 && g < 1.0));
      CHECK(o.input_digest == in.digest());
      CHECK(o.global == global_pool(o.conv_map, pool_mode(mode)));

      const SmrOutput e1 = smr.forward(in, Mode::eval), e2 = smr.forward(in, Mode::eval);
      CHECK_FALSE(e1.logits.has_value());
      CHECK(e1.refined == e2.refined);
      CHECK(e1.augmented == e2.augmented);
    }
  }

  TEST_CASE("content and salient agree on a spatially constant map") {
    SmrConfig c = small_smr(SmrMode::content);
    c.num_parts = 1;
    SmrConfig s = c;
    s.mode = SmrMode::salient;
    Rng r1(70), r2(70);
    SmrModule a(c, 3, r1), b(s, 3, r2);
    const Tensor in({2, 1, 1, 6}, {0.1, -0.4, 0.3, 0.9, -0.2, 0.5, 1.0, 0.0, -1.0, 0.2, 0.2, 0.7});
    const SmrOutput oa = a.forward(in, Mode::eval), ob = b.forward(in, Mode::eval);
    CHECK(oa.global == ob.global);
    CHECK(oa.refined == ob.refined);
  }

  TEST_CASE("module gradient check") {
    for (SmrMode mode : {SmrMode::content, SmrMode::salient}) {
      const GradCheckReport r = gradcheck_smr(small_smr(mode), 5, 3, 4, 2, GradCheckOptions{});
      INFO(format_report(r));
      CHECK(r.passed());
    }
  }

  TEST_CASE("full-scale content module shapes") {
    SmrConfig c;
    c.mode = SmrMode::content;
    Rng rng(80);
    SmrModule smr(c, 77, rng);
    const SmrOutput o = smr.forward(testing::random_tensor({2, 24, 12, 1024}, 81), Mode::eval);
    CHECK(o.refined.shape() == Shape{2, 24, 12, 2048});
    CHECK(o.augmented.shape() == Shape{2, 4096});
  }
}

TEST_SUITE("cssc model") {
  TEST_CASE("forward fields and wiring") {
    Rng rng(90);
    CsscModel model(ModelConfig::toy(6), rng);
    const Tensor images = testing::random_tensor({4, 64, 32, 3}, 91, 0.0, 1.0);
    const ForwardOutputs o = model.forward(images);
    CHECK(o.features.shape() == Shape{4, 8, 4, 64});
    REQUIRE(o.branch1_second.has_value());
    REQUIRE(o.branch2_first.has_value());
    REQUIRE(o.branch2_second.has_value());
    CHECK(o.branch1_first.mode == SmrMode::content);
    CHECK(o.branch1_second->mode == SmrMode::salient);
    CHECK(o.branch2_first->mode == SmrMode::salient);
    CHECK(o.branch2_second->mode == SmrMode::content);
    for (const SmrOutput* s : {&o.branch1_first, &*o.branch1_second, &*o.branch2_first, &*o.branch2_second}) {
      CHECK(s->refined.shape() == Shape{4, 8, 4, 64});
      CHECK(s->augmented.shape() == Shape{4, 128});
      CHECK(s->logits->shape() == Shape{4, 6});
    }
    CHECK(o.branch1_second->input_digest == o.branch1_first.refined.digest());
    CHECK(o.branch2_second->input_digest == o.branch2_first->refined.digest());
    CHECK(o.branch1_first.input_digest == o.features.digest());
    CHECK(o.branch2_first->input_digest == o.features.digest());
    CHECK(o.fused_map.shape() == Shape{4, 8, 4, 64});
    CHECK(o.embedding.shape() == Shape{4, 64});
    CHECK(o.embedding == global_pool(o.fused_map, PoolMode::max));
    CHECK(o.fusion_logits->shape() == Shape{4, 6});
  }

  TEST_CASE("fusion is commutative in its two inputs") {
    Rng rng(92);
    CsscModel model(ModelConfig::toy(4), rng);
    model.eval();
    const Tensor a = testing::random_tensor({2, 8, 4, 64}, 93), b = testing::random_tensor({2, 8, 4, 64}, 94);
    CHECK(model.fuse(a, b) == model.fuse(b, a));
  }

  TEST_CASE("zeroed fusion input gives a constant fused map across the batch") {
    Rng rng(95);
    CsscModel model(ModelConfig::toy(4), rng);
    model.eval();
    ForwardHooks hooks;
    hooks.zero_fusion_input = true;
    const ForwardOutputs o = model.forward(testing::random_tensor({3, 64, 32, 3}, 96, 0.0, 1.0), hooks);
    const Tensor zero_fused = model.fuse(Tensor({1, 8, 4, 64}), Tensor({1, 8, 4, 64}));
    for (std::size_t b = 0; b < 3; ++b) CHECK(slice_rows(o.fused_map, b, b + 1) == zero_fused);
  }

  TEST_CASE("evaluation forward and embedding are deterministic") {
    Rng rng(97);
    CsscModel model(ModelConfig::toy(4), rng);
    const Tensor one = testing::random_tensor({1, 64, 32, 3}, 98, 0.0, 1.0);
    CHECK_THROWS(model.embed(one));
    model.eval();
    const Tensor e = model.embed(concat_rows({one, one}));
    CHECK(e.shape() == Shape{2, 64});
    CHECK(slice_rows(e, 0, 1) == slice_rows(e, 1, 2));
    CHECK(max_abs_diff(model.embed(one), slice_rows(e, 0, 1)) < 1e-10);
    CHECK(model.forward(one).fused_map == model.forward(one).fused_map);
  }

  TEST_CASE("the w/o SMR ablation reduces to one block and a classifier") {
    ModelConfig c = ModelConfig::toy(5);
    c.ablation = {true, true, true, true, false};
    Rng rng(99);
    CsscModel model(c, rng);
    CHECK(model.branch1_second() == nullptr);
    CHECK(model.branch2_first() == nullptr);
    for (const auto& p : named_parameters(model)) {
      const bool allowed = p.name.starts_with("backbone.") || p.name.starts_with("branch1.smr_c.block.") ||
                           p.name.starts_with("branch1.smr_c.neck.") || p.name.starts_with("branch1.smr_c.classifier.");
      INFO(p.name);
      CHECK(allowed);
    }
    model.eval();
    const Tensor images = testing::random_tensor({2, 64, 32, 3}, 100, 0.0, 1.0);
    const ForwardOutputs o = model.forward(images);
    CHECK(o.embedding == global_pool(o.branch1_first.conv_map, PoolMode::average));
    CHECK(o.fused_map.empty());
    CHECK(model.embed(images).shape() == Shape{2, 64});
  }

  TEST_CASE("parameter counting") {
    struct Tiny : Module {
      Conv2d conv{2, 2, 3};
      Linear fc{2, 3};
      void visit(const std::string& prefix, ParamVisitor& v) override {
        conv.visit(join_path(prefix, "conv"), v);
        fc.visit(join_path(prefix, "fc"), v);
      }
    } tiny;
    CHECK(count_parameters(tiny) == 3 * 3 * 2 * 2 + 2 * 3);

    Rng r1(1), r2(1), r3(1);
    ModelConfig base = ModelConfig::toy(7);
    CsscModel full(base, r1);
    ModelConfig swapped = base;
    swapped.ablation.swap_branch_order = true;
    CsscModel sw(swapped, r2);
    CHECK(count_params(full) == count_params(sw));
    CHECK(sw.slot_path(1, 0) == "branch1.smr_s");
    ModelConfig no_local = base;
    no_local.ablation.disable_local_mining = true;
    CsscModel nl(no_local, r3);
    CHECK(count_params(nl) < count_params(full));

    const ParamBreakdown b = full.param_breakdown();
    std::size_t sum = 0;
    for (const auto& [name, n] : b.modules) sum += n;
    CHECK(sum == b.total);
    CHECK(b.total == count_params(full));
    CHECK(b.modules.size() == 6);
  }

  TEST_CASE("full-scale model with 77 identities") {
    Rng rng(1);
    CsscModel model(ModelConfig::full(77), rng);
    const ParamBreakdown b = model.param_breakdown();
    MESSAGE("full-scale parameter count: " << b.total);
    CHECK(b.total >= 40'000'000);
    CHECK(b.total <= 65'000'000);
  }

  TEST_CASE("inconsistent channel chains are rejected") {
    ModelConfig c = ModelConfig::toy(3);
    c.smr.in_channels = 32;
    Rng rng(1);
    CHECK_THROWS_AS(CsscModel(c, rng), ValidationError);
  }
}
