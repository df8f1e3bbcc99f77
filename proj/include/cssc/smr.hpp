#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cssc/layers.hpp"

namespace cssc {

enum class PoolMode { average, max };

// content = SMR-C (average pooling), salient = SMR-S (max pooling).
enum class SmrMode { content, salient };

inline PoolMode pool_mode(SmrMode m) { return m == SmrMode::content ? PoolMode::average : PoolMode::max; }
inline const char* smr_name(SmrMode m) { return m == SmrMode::content ? "smr_c" : "smr_s"; }

struct SmrConfig {
  SmrMode mode = SmrMode::content;
  std::size_t num_parts = 8;         // P
  std::size_t in_channels = 1024;
  std::size_t out_channels = 2048;   // d
  std::size_t part_channels = 256;   // d_l
  std::size_t reduction_ratio = 16;  // r
  bool local_mining = true;
  bool refinement = true;
  // One reduction layer shared by all parts, or one per part.
  bool shared_reduction = false;
  bool neck = true;

  void validate() const;
  std::size_t augmented_dim() const { return out_channels + (local_mining ? num_parts * part_channels : 0); }
};

struct SmrOutput {
  SmrMode mode = SmrMode::content;
  Tensor conv_map;    // block output, (b, h, w, d)
  Tensor global;      // pooled conv_map, (b, d)
  Tensor augmented;   // [global; part_1; ...; part_P], (b, d + P*d_l)
  Tensor refined;     // gate (x) conv_map, (b, h, w, d)
  Tensor gate;        // (b, d); empty when refinement is disabled
  std::optional<Tensor> logits;  // training mode only
  std::uint64_t input_digest = 0;
};

// Upstream gradients for one SMR module. Empty tensors mean zero.
struct SmrGradients {
  Tensor refined;
  Tensor global;
  Tensor logits;
};

// Row ranges [begin, end) of P horizontal bands over h rows. The first
// (h mod P) bands get one extra row.
std::vector<std::pair<std::size_t, std::size_t>> band_rows(std::size_t height, std::size_t parts);

// Spatial pooling of a NHWC map over horizontal bands, (b, h, w, d) ->
// (b, P, d). Max pooling routes the gradient to the first maximal element in
// scan order.
class BandPool {
 public:
  Tensor forward(const Tensor& map, std::size_t parts, PoolMode mode, Mode m);
  Tensor backward(const Tensor& grad);

 private:
  Shape in_shape_;
  std::size_t parts_ = 1;
  PoolMode mode_ = PoolMode::average;
  std::vector<std::size_t> argmax_;
  bool cached_ = false;
};

// Per-channel spatial mean (average) or maximum (max): (b, h, w, d) -> (b, d).
Tensor global_pool(const Tensor& map, PoolMode mode);

// Pools each of P bands with `mode` and maps the pooled d-vector through the
// reduction weights ((d_l, d) matrices; one shared or one per part).
std::vector<Tensor> part_features(const Tensor& map, std::size_t parts, PoolMode mode,
                                  const std::vector<Tensor>& reduce_weights);

// [global; parts...] along the feature axis.
Tensor concat_semantics(const Tensor& global, const std::vector<Tensor>& parts);

// sigmoid(W2 relu(W1 f)) for W1 (d/r, d) and W2 (d, d/r); (b, d) -> (b, d).
Tensor channel_gate(const Tensor& global, const Tensor& squeeze, const Tensor& excite);

// Channel-wise recalibration gate[c] * map[.., c].
Tensor refine(const Tensor& map, const Tensor& global, const Tensor& squeeze, const Tensor& excite);

// Semantics mining and refinement module: a bottleneck block, global and
// part pooling in the module's mode, identity head over the augmented vector,
// and a channel gate driven by the global vector.
class SmrModule : public Module {
 public:
  SmrModule(const SmrConfig& cfg, std::size_t num_classes, Rng& rng);

  SmrOutput forward(const Tensor& input, Mode mode);
  // Returns the gradient with respect to the module input.
  Tensor backward(const SmrGradients& grads);
  void visit(const std::string& prefix, ParamVisitor& v) override;

  const SmrConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return classifier_.out_features(); }

  // Evaluation-mode neck applied to the global slice of the augmented vector.
  // The neck is per-feature, so this equals neck(augmented)[:, :d].
  Tensor neck_global(const Tensor& global) const;

  Bottleneck& block() { return block_; }
  Linear& squeeze() { return squeeze_; }
  Linear& excite() { return excite_; }
  std::vector<Linear>& reduce() { return reduce_; }
  Linear& classifier() { return classifier_; }

 private:
  SmrConfig cfg_;
  Bottleneck block_;
  BandPool global_pool_, part_pool_;
  std::vector<Linear> reduce_;
  Linear squeeze_, excite_;
  ReLU gate_relu_;
  BatchNorm neck_;
  Linear classifier_;

  Tensor conv_map_, gate_;
  std::size_t batch_ = 0;
  bool cached_ = false;
};

}  // namespace cssc
