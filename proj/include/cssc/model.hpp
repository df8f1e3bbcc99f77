#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cssc/backbone.hpp"
#include "cssc/smr.hpp"

namespace cssc {

// Build-time architecture switches for the ablation presets.
struct AblationFlags {
  bool disable_branch2 = false;      // keep only branch 1 (no fusion head)
  bool disable_second_smr = false;   // each branch has only its first SMR
  bool disable_local_mining = false; // augmented vector = global vector
  bool disable_refinement = false;   // gate == 1, gate weights absent
  bool swap_branch_order = false;    // branch 1 starts with SMR-S

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  BackboneConfig backbone;
  // Template for all SMR modules; mode and in_channels are set per slot.
  SmrConfig smr;
  std::size_t num_train_identities = 1;
  AblationFlags ablation;
  bool neck_enabled = true;

  static ModelConfig full(std::size_t num_train_identities);
  // 64x32 input, widths {16, 32, 64}, d = 64, 4 parts of 16 channels.
  static ModelConfig toy(std::size_t num_train_identities);
  void validate() const;
  // SMR config for a slot: position 0 consumes the backbone map, position 1
  // the refined map of position 0.
  SmrConfig smr_for(SmrMode mode, int position) const;
  bool has_fusion() const { return !ablation.disable_branch2; }
};

struct ForwardOutputs {
  Tensor features;  // backbone map F
  SmrOutput branch1_first;
  std::optional<SmrOutput> branch1_second;
  std::optional<SmrOutput> branch2_first;
  std::optional<SmrOutput> branch2_second;
  Tensor fused_map;  // Conv(branch1 ⊕ branch2); empty without fusion
  Tensor embedding;  // max-pooled fused map (or the single branch's global vector)
  std::optional<Tensor> fusion_logits;

  // Last SMR output of each branch (the one feeding fusion).
  const SmrOutput& branch1_last() const { return branch1_second ? *branch1_second : branch1_first; }
  const SmrOutput* branch2_last() const {
    return branch2_second ? &*branch2_second : (branch2_first ? &*branch2_first : nullptr);
  }
};

struct HeadGradients {
  Tensor global;  // pre-neck pooled vector (triplet)
  Tensor logits;  // identity classifier output
};

struct ModelGradients {
  HeadGradients branch1_first, branch1_second, branch2_first, branch2_second;
  HeadGradients fusion;  // global = embedding
};

struct ForwardHooks {
  // Replace both branch outputs with zeros before fusion.
  bool zero_fusion_input = false;
};

struct ParamBreakdown {
  std::vector<std::pair<std::string, std::size_t>> modules;
  std::size_t total = 0;
};

// Cross-parallel two-branch network: branch 1 applies SMR-C then SMR-S,
// branch 2 SMR-S then SMR-C, both on the backbone map; the last refined maps
// are summed, passed through a bottleneck block and max pooled.
class CsscModel : public Module {
 public:
  CsscModel(const ModelConfig& cfg, Rng& rng);
  ~CsscModel() override;
  CsscModel(CsscModel&&) noexcept;
  CsscModel& operator=(CsscModel&&) noexcept;

  void train() { training_ = true; }
  void eval() { training_ = false; }
  bool training() const { return training_; }
  Mode mode() const { return training_ ? Mode::train : Mode::eval; }

  ForwardOutputs forward(const Tensor& images, const ForwardHooks& hooks = {});
  // Backpropagates loss gradients of the last training-mode forward into
  // parameter gradients (accumulating). Returns the input-image gradient.
  Tensor backward(const ModelGradients& grads);
  // Retrieval embedding (batch, d); evaluation mode only.
  Tensor embed(const Tensor& images);
  // Fusion block applied to (a ⊕ b) in the current mode.
  Tensor fuse(const Tensor& a, const Tensor& b);

  void visit(const std::string& prefix, ParamVisitor& v) override;
  ParamBreakdown param_breakdown();

  const ModelConfig& config() const { return cfg_; }
  Backbone& backbone();
  SmrModule& branch1_first();
  SmrModule* branch1_second();
  SmrModule* branch2_first();
  SmrModule* branch2_second();

  // Module path such as "branch1.smr_c" for a slot (branch 1|2, position 0|1).
  std::string slot_path(int branch, int position) const;

 private:
  bool has_fusion_block() const;

  struct Parts;
  ModelConfig cfg_;
  std::unique_ptr<Parts> parts_;
  bool training_ = true;
};

std::size_t count_params(CsscModel& model);

}  // namespace cssc
