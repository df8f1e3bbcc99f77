#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cssc/archive.hpp"
#include "cssc/data.hpp"
#include "cssc/losses.hpp"
#include "cssc/model.hpp"

namespace cssc {

struct TrainConfig {
  int epochs = 120;
  int batch_ids = 8;
  int instances_per_id = 4;
  double base_lr = 3e-4;
  double warmup_start_lr = 3e-5;
  int warmup_epochs = 10;
  std::vector<int> decay_epochs{30, 60};
  double decay_factor = 0.1;
  double weight_decay = 5e-4;
  int triplet_start_epoch = 31;
  std::uint64_t seed = 1;
  double triplet_margin = 0.3;
  double label_smoothing = 0.1;
  AugConfig augment;
  // Keep one checkpoint file per epoch instead of overwriting last.ckpt only.
  bool keep_checkpoints = false;

  void validate() const;
  int batch_size() const { return batch_ids * instances_per_id; }
  LossConfig loss_config(int epoch) const;
};

// Learning rate for a 1-based epoch: linear warmup from warmup_start_lr at
// epoch 1 to base_lr at warmup_epochs, then base_lr times decay_factor for
// every decay epoch <= epoch.
double lr_schedule(int epoch, const TrainConfig& cfg);

// One epoch of PK batches over positions into `labels`. Each identity's
// images are shuffled and cut into chunks of K (short identities are padded
// by resampling); every batch draws P distinct identities, preferring those
// with the most unused chunks. A final batch tops up leftover identities with
// random others, so every identity appears at least once per epoch.
std::vector<std::vector<std::size_t>> pk_sampler(std::span<const int> labels, int P, int K, Rng& rng);

// Adam with L2 weight decay folded into the gradient (parameters flagged
// decay=false are exempt).
class Adam {
 public:
  Adam(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(Module& model, double lr);
  std::int64_t steps() const { return t_; }

  void store(Archive& archive) const;
  void load(const Archive& archive);

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

struct EpochSummary {
  int epoch = 0;
  double lr = 0.0;
  double mean_total = 0.0;
  double mean_triplet = 0.0;
  std::size_t steps = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::filesystem::path resume_from;  // empty: fresh start
  int stop_after_epoch = 0;           // 0: run to cfg.epochs
  bool write_log = true;
  std::string config_snapshot = "{}";  // stored in checkpoint metadata
  std::function<void(const EpochSummary&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::filesystem::path last_checkpoint;
};

TrainResult train(CsscModel& model, const TrainConfig& cfg, const Manifest& manifest, const TrainOptions& opts);

// Checkpoint metadata is JSON with kind "checkpoint", epoch, step, and the
// caller-supplied config snapshot.
void save_checkpoint(const std::filesystem::path& path, CsscModel& model, const Adam* adam, int epoch,
                     std::int64_t step, const std::string& config_snapshot);
struct CheckpointInfo {
  int epoch = 0;
  std::int64_t step = 0;
  std::string config_snapshot;
};
// Restores model parameters and buffers (every one must be present with a
// matching shape) and, when given, the optimizer state.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, CsscModel& model, Adam* adam = nullptr);

}  // namespace cssc
