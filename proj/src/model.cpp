#include "cssc/model.hpp"

#include "cssc/archive.hpp"
#include "cssc/error.hpp"

namespace cssc {

ModelConfig ModelConfig::full(std::size_t num_train_identities) {
  ModelConfig c;
  c.backbone = BackboneConfig::full();
  c.smr.num_parts = 8;
  c.smr.in_channels = 1024;
  c.smr.out_channels = 2048;
  c.smr.part_channels = 256;
  c.smr.reduction_ratio = 16;
  c.num_train_identities = num_train_identities;
  return c;
}

ModelConfig ModelConfig::toy(std::size_t num_train_identities) {
  ModelConfig c;
  c.smr.num_parts = 4;
  c.smr.in_channels = c.backbone.output_channels();
  c.smr.out_channels = 64;
  c.smr.part_channels = 16;
  c.smr.reduction_ratio = 4;
  c.num_train_identities = num_train_identities;
  return c;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (num_train_identities < 1) throw ValidationError("model: num_train_identities must be >= 1");
  if (smr.in_channels != backbone.output_channels())
    throw ValidationError("model: backbone produces " + std::to_string(backbone.output_channels()) +
                          " channels but smr.in_channels is " + std::to_string(smr.in_channels));
  smr.validate();
  if (!ablation.disable_local_mining) {
    const std::size_t h = backbone.input_height / backbone.stride();
    if (h < smr.num_parts)
      throw ValidationError("model: feature map height " + std::to_string(h) + " is smaller than num_parts " +
                            std::to_string(smr.num_parts));
  }
}

SmrConfig ModelConfig::smr_for(SmrMode mode, int position) const {
  SmrConfig c = smr;
  c.mode = mode;
  c.in_channels = position == 0 ? backbone.output_channels() : smr.out_channels;
  c.local_mining = !ablation.disable_local_mining;
  c.refinement = !ablation.disable_refinement;
  c.neck = neck_enabled;
  return c;
}

struct CsscModel::Parts {
  Backbone backbone;
  std::unique_ptr<SmrModule> b1_first, b1_second, b2_first, b2_second;
  Bottleneck fusion_block;
  BandPool fusion_pool;
  BatchNorm fusion_neck;
  Linear fusion_classifier;
  bool fusion_input_zeroed = false;
  std::size_t batch = 0;

  explicit Parts(Backbone b) : backbone(std::move(b)) {}
};

namespace {

SmrMode first_mode(int branch, bool swap) {
  const bool content = (branch == 1) != swap;
  return content ? SmrMode::content : SmrMode::salient;
}

SmrMode other(SmrMode m) { return m == SmrMode::content ? SmrMode::salient : SmrMode::content; }

}  // namespace

std::string CsscModel::slot_path(int branch, int position) const {
  SmrMode m = first_mode(branch, cfg_.ablation.swap_branch_order);
  if (position == 1) m = other(m);
  return "branch" + std::to_string(branch) + "." + smr_name(m);
}

CsscModel::CsscModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  parts_ = std::make_unique<Parts>(Backbone(cfg_.backbone, rng));
  auto& P = *parts_;
  const bool swap = cfg_.ablation.swap_branch_order;
  const std::size_t classes = cfg_.num_train_identities;
  const std::size_t d = cfg_.smr.out_channels;

  auto make = [&](int branch, int position) {
    SmrMode m = first_mode(branch, swap);
    if (position == 1) m = other(m);
    return std::make_unique<SmrModule>(cfg_.smr_for(m, position), classes, rng);
  };
  P.b1_first = make(1, 0);
  if (!cfg_.ablation.disable_second_smr) P.b1_second = make(1, 1);
  if (!cfg_.ablation.disable_branch2) {
    P.b2_first = make(2, 0);
    if (!cfg_.ablation.disable_second_smr) P.b2_second = make(2, 1);
    P.fusion_block = Bottleneck(d, std::max<std::size_t>(1, d / 4), d, 1);
    P.fusion_block.init(rng);
    P.fusion_neck = BatchNorm(d, /*learn_shift=*/false);
    P.fusion_classifier = Linear(d, classes);
    P.fusion_classifier.init_normal(rng, 0.001);
  }

  // Pretrained stage-5 blocks serve as independent initialization templates:
  // block 0 for first-position SMRs, block 1 for second-position SMRs,
  // block 2 for the fusion block.
  if (!cfg_.backbone.external_weights_path.empty()) {
    const Archive archive = read_archive(cfg_.backbone.external_weights_path);
    for (SmrModule* m : {P.b1_first.get(), P.b2_first.get()})
      if (m) load_module(m->block(), "", archive, "layer4.0");
    for (SmrModule* m : {P.b1_second.get(), P.b2_second.get()})
      if (m) load_module(m->block(), "", archive, "layer4.1");
    if (has_fusion_block()) load_module(P.fusion_block, "", archive, "layer4.2");
  }
}

CsscModel::~CsscModel() = default;
CsscModel::CsscModel(CsscModel&&) noexcept = default;
CsscModel& CsscModel::operator=(CsscModel&&) noexcept = default;

Backbone& CsscModel::backbone() { return parts_->backbone; }
SmrModule& CsscModel::branch1_first() { return *parts_->b1_first; }
SmrModule* CsscModel::branch1_second() { return parts_->b1_second.get(); }
SmrModule* CsscModel::branch2_first() { return parts_->b2_first.get(); }
SmrModule* CsscModel::branch2_second() { return parts_->b2_second.get(); }

Tensor CsscModel::fuse(const Tensor& a, const Tensor& b) {
  if (!cfg_.has_fusion()) throw Error("model: fusion block is disabled in this configuration");
  return parts_->fusion_block.forward(a + b, mode());
}

ForwardOutputs CsscModel::forward(const Tensor& images, const ForwardHooks& hooks) {
  auto& P = *parts_;
  const Mode m = mode();
  ForwardOutputs out;
  out.features = P.backbone.forward(images, m);
  P.batch = images.dim(0);

  out.branch1_first = P.b1_first->forward(out.features, m);
  if (P.b1_second) out.branch1_second = P.b1_second->forward(out.branch1_first.refined, m);
  if (P.b2_first) {
    out.branch2_first = P.b2_first->forward(out.features, m);
    if (P.b2_second) out.branch2_second = P.b2_second->forward(out.branch2_first->refined, m);
  }

  if (!cfg_.has_fusion()) {
    out.embedding = out.branch1_last().global;
    return out;
  }
  const Tensor& a = out.branch1_last().refined;
  const Tensor& b = out.branch2_last()->refined;
  P.fusion_input_zeroed = hooks.zero_fusion_input;
  out.fused_map = hooks.zero_fusion_input ? P.fusion_block.forward(Tensor(a.shape()), m) : P.fusion_block.forward(a + b, m);
  out.embedding = P.fusion_pool.forward(out.fused_map, 1, PoolMode::max, m);
  out.embedding.reshape({P.batch, cfg_.smr.out_channels});
  if (m == Mode::train) {
    const Tensor neck = cfg_.neck_enabled ? P.fusion_neck.forward(out.embedding, m) : out.embedding;
    out.fusion_logits = P.fusion_classifier.forward(neck, m);
  }
  return out;
}

Tensor CsscModel::backward(const ModelGradients& grads) {
  auto& P = *parts_;
  if (!training_) throw Error("model: backward requires training mode");
  Tensor dsum;
  if (cfg_.has_fusion()) {
    Tensor demb({P.batch, cfg_.smr.out_channels});
    if (!grads.fusion.global.empty()) demb += grads.fusion.global;
    if (!grads.fusion.logits.empty()) {
      Tensor dneck = P.fusion_classifier.backward(grads.fusion.logits);
      demb += cfg_.neck_enabled ? P.fusion_neck.backward(dneck) : dneck;
    }
    demb.reshape({P.batch, 1, cfg_.smr.out_channels});
    dsum = P.fusion_block.backward(P.fusion_pool.backward(demb));
    if (P.fusion_input_zeroed) dsum = Tensor();
  }

  auto branch = [&](SmrModule* first, SmrModule* second, const HeadGradients& gf, const HeadGradients& gs) {
    if (second) {
      Tensor dmid = second->backward({dsum, gs.global, gs.logits});
      return first->backward({dmid, gf.global, gf.logits});
    }
    return first->backward({dsum, gf.global, gf.logits});
  };
  Tensor dfeat = branch(P.b1_first.get(), P.b1_second.get(), grads.branch1_first, grads.branch1_second);
  if (P.b2_first) dfeat += branch(P.b2_first.get(), P.b2_second.get(), grads.branch2_first, grads.branch2_second);
  return P.backbone.backward(dfeat);
}

Tensor CsscModel::embed(const Tensor& images) {
  if (training_) throw Error("model: embed() requires evaluation mode");
  ForwardOutputs out = forward(images);
  if (!cfg_.neck_enabled) return out.embedding;
  if (cfg_.has_fusion()) return parts_->fusion_neck.normalize_prefix(out.embedding);
  SmrModule* last = parts_->b1_second ? parts_->b1_second.get() : parts_->b1_first.get();
  return last->neck_global(out.embedding);
}

bool CsscModel::has_fusion_block() const { return cfg_.has_fusion(); }

void CsscModel::visit(const std::string& prefix, ParamVisitor& v) {
  auto& P = *parts_;
  P.backbone.visit(join_path(prefix, "backbone"), v);
  P.b1_first->visit(join_path(prefix, slot_path(1, 0)), v);
  if (P.b1_second) P.b1_second->visit(join_path(prefix, slot_path(1, 1)), v);
  if (P.b2_first) P.b2_first->visit(join_path(prefix, slot_path(2, 0)), v);
  if (P.b2_second) P.b2_second->visit(join_path(prefix, slot_path(2, 1)), v);
  if (cfg_.has_fusion()) {
    P.fusion_block.visit(join_path(prefix, "fusion.block"), v);
    if (cfg_.neck_enabled) P.fusion_neck.visit(join_path(prefix, "fusion.neck"), v);
    P.fusion_classifier.visit(join_path(prefix, "fusion.classifier"), v);
  }
}

ParamBreakdown CsscModel::param_breakdown() {
  auto& P = *parts_;
  ParamBreakdown r;
  auto add = [&](const std::string& name, Module& m) {
    const std::size_t n = count_parameters(m);
    r.modules.emplace_back(name, n);
    r.total += n;
  };
  add("backbone", P.backbone);
  add(slot_path(1, 0), *P.b1_first);
  if (P.b1_second) add(slot_path(1, 1), *P.b1_second);
  if (P.b2_first) add(slot_path(2, 0), *P.b2_first);
  if (P.b2_second) add(slot_path(2, 1), *P.b2_second);
  if (cfg_.has_fusion()) {
    std::size_t n = count_parameters(P.fusion_block) + count_parameters(P.fusion_classifier) +
                    (cfg_.neck_enabled ? count_parameters(P.fusion_neck) : 0);
    r.modules.emplace_back("fusion", n);
    r.total += n;
  }
  return r;
}

std::size_t count_params(CsscModel& model) { return count_parameters(model); }

}  // namespace cssc
