#include "cssc/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "cssc/error.hpp"

namespace cssc {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
  if (batch_ids < 2) throw ValidationError("train.batch_ids must be >= 2");
  if (instances_per_id < 2) throw ValidationError("train.instances_per_id must be >= 2");
  if (!(base_lr > 0)) throw ValidationError("train.base_lr must be > 0");
  if (!(warmup_start_lr > 0)) throw ValidationError("train.warmup_start_lr must be > 0");
  if (warmup_epochs < 1) throw ValidationError("train.warmup_epochs must be >= 1");
  if (!(decay_factor > 0 && decay_factor <= 1)) throw ValidationError("train.decay_factor must lie in (0, 1]");
  if (!(weight_decay >= 0)) throw ValidationError("train.weight_decay must be >= 0");
  if (triplet_start_epoch < 1) throw ValidationError("train.triplet_start_epoch must be >= 1");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i)
    if (decay_epochs[i] < 1 || (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]))
      throw ValidationError("train.decay_epochs must be positive and strictly increasing");
  LossConfig{triplet_margin, label_smoothing, false}.validate();
  augment.validate();
}

LossConfig TrainConfig::loss_config(int epoch) const {
  return LossConfig{triplet_margin, label_smoothing, epoch >= triplet_start_epoch};
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  double lr;
  if (epoch <= cfg.warmup_epochs && cfg.warmup_epochs > 1) {
    const double t = static_cast<double>(epoch - 1) / (cfg.warmup_epochs - 1);
    lr = std::lerp(cfg.warmup_start_lr, cfg.base_lr, t);
  } else {
    const auto k = std::count_if(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), [&](int d) { return d <= epoch; });
    lr = cfg.base_lr * std::pow(cfg.decay_factor, static_cast<double>(k));
  }
  // Snap to 15 significant digits so decimal settings land on the decimal
  // value (3e-4 * 0.1 would otherwise be 3.0000000000000004e-05).
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", lr);
  return std::strtod(buf, nullptr);
}

std::vector<std::vector<std::size_t>> pk_sampler(std::span<const int> labels, int P, int K, Rng& rng) {
  if (P < 1 || K < 1) throw ValidationError("pk_sampler: P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
  if (by_id.size() < static_cast<std::size_t>(P))
    throw ValidationError("pk_sampler: need at least " + std::to_string(P) + " identities, found " +
                          std::to_string(by_id.size()));

  auto chunk_of = [&](std::vector<std::size_t> pool) {
    std::vector<std::size_t> chunk = pool;
    while (chunk.size() < static_cast<std::size_t>(K)) chunk.push_back(pool[rng.below(pool.size())]);
    return chunk;
  };
  struct Entry {
    int id;
    std::vector<std::vector<std::size_t>> chunks;
  };
  std::vector<Entry> entries;
  for (auto& [id, idx] : by_id) {
    rng.shuffle(idx.begin(), idx.end());
    Entry e{id, {}};
    if (idx.size() < static_cast<std::size_t>(K)) {
      e.chunks.push_back(chunk_of(idx));
    } else {
      for (std::size_t s = 0; s + K <= idx.size(); s += K)
        e.chunks.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s), idx.begin() + static_cast<std::ptrdiff_t>(s + K));
    }
    entries.push_back(std::move(e));
  }

  std::vector<std::vector<std::size_t>> batches;
  for (;;) {
    std::vector<std::pair<std::size_t, std::uint64_t>> avail;  // (entry, random tie key)
    for (std::size_t e = 0; e < entries.size(); ++e)
      if (!entries[e].chunks.empty()) avail.emplace_back(e, rng.next());
    if (avail.empty()) break;
    std::sort(avail.begin(), avail.end(), [&](const auto& a, const auto& b) {
      const auto ca = entries[a.first].chunks.size(), cb = entries[b.first].chunks.size();
      return ca != cb ? ca > cb : a.second < b.second;
    });
    const bool full = avail.size() >= static_cast<std::size_t>(P);
    if (!full) {
      // Leftover identities are only kept if some of them have not been seen yet.
      bool unseen = false;
      std::set<int> seen;
      for (const auto& b : batches)
        for (std::size_t i : b) seen.insert(labels[i]);
      for (const auto& a : avail) unseen = unseen || !seen.count(entries[a.first].id);
      if (!unseen) break;
    }
    std::vector<std::size_t> batch;
    std::set<std::size_t> used;
    for (std::size_t j = 0; j < std::min<std::size_t>(avail.size(), static_cast<std::size_t>(P)); ++j) {
      auto& e = entries[avail[j].first];
      batch.insert(batch.end(), e.chunks.back().begin(), e.chunks.back().end());
      e.chunks.pop_back();
      used.insert(avail[j].first);
    }
    while (used.size() < static_cast<std::size_t>(P)) {
      const std::size_t e = rng.below(entries.size());
      if (!used.insert(e).second) continue;
      const auto& idx = by_id.at(entries[e].id);
      std::vector<std::size_t> pool = idx;
      std::vector<std::size_t> chunk;
      if (pool.size() >= static_cast<std::size_t>(K)) {
        rng.shuffle(pool.begin(), pool.end());
        chunk.assign(pool.begin(), pool.begin() + K);
      } else {
        chunk = chunk_of(pool);
      }
      batch.insert(batch.end(), chunk.begin(), chunk.end());
    }
    batches.push_back(std::move(batch));
    if (!full) break;
  }
  return batches;
}

Adam::Adam(double weight_decay, double beta1, double beta2, double eps)
    : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(Module& model, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : named_parameters(model)) {
    auto& [m, v] = moments_[name];
    if (m.shape() != p->value.shape()) {
      m = Tensor(p->value.shape());
      v = Tensor(p->value.shape());
    }
    const double wd = p->decay ? weight_decay_ : 0.0;
    double* w = p->value.data();
    const double* g0 = p->grad.data();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = g0[i] + wd * w[i];
      m[i] = beta1_ * m[i] + (1 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

void Adam::store(Archive& archive) const {
  for (const auto& [name, mv] : moments_) {
    archive.tensors["adam.m." + name] = mv.first;
    archive.tensors["adam.v." + name] = mv.second;
  }
  archive.tensors["adam.t"] = Tensor({1}, static_cast<double>(t_));
}

void Adam::load(const Archive& archive) {
  moments_.clear();
  const auto t = archive.tensors.find("adam.t");
  if (t == archive.tensors.end()) throw Error("checkpoint: optimizer state missing");
  t_ = static_cast<std::int64_t>(t->second[0]);
  for (const auto& [name, tensor] : archive.tensors) {
    if (name.rfind("adam.m.", 0) == 0) moments_[name.substr(7)].first = tensor;
    if (name.rfind("adam.v.", 0) == 0) moments_[name.substr(7)].second = tensor;
  }
}

void save_checkpoint(const fs::path& path, CsscModel& model, const Adam* adam, int epoch, std::int64_t step,
                     const std::string& config_snapshot) {
  Archive a;
  json meta;
  meta["kind"] = "checkpoint";
  meta["epoch"] = epoch;
  meta["step"] = step;
  meta["config"] = json::parse(config_snapshot);
  a.metadata = meta.dump();
  store_module(model, "model", a);
  if (adam) adam->store(a);
  write_archive(path, a);
}

CheckpointInfo load_checkpoint(const fs::path& path, CsscModel& model, Adam* adam) {
  const Archive a = read_archive(path);
  const json meta = json::parse(a.metadata);
  if (meta.value("kind", "") != "checkpoint") throw Error("not a checkpoint: " + path.string());
  const std::size_t expected = named_parameters(model).size() + named_buffers(model).size();
  const std::size_t loaded = load_module(model, "model", a, "model");
  if (loaded != expected)
    throw Error("checkpoint " + path.string() + " does not match the model architecture (" + std::to_string(loaded) +
                " of " + std::to_string(expected) + " tensors found)");
  if (adam) adam->load(a);
  return {meta.at("epoch").get<int>(), meta.at("step").get<std::int64_t>(), meta.at("config").dump()};
}

namespace {

// Name of the first tensor holding a NaN or infinity, in forward order.
std::string first_non_finite(const ForwardOutputs& out, CsscModel& model) {
  std::vector<std::pair<std::string, const Tensor*>> seq{{"backbone.features", &out.features}};
  auto add = [&](const std::string& slot, const SmrOutput* o) {
    if (!o) return;
    seq.emplace_back(slot + ".conv_map", &o->conv_map);
    seq.emplace_back(slot + ".global", &o->global);
    seq.emplace_back(slot + ".augmented", &o->augmented);
    if (o->logits) seq.emplace_back(slot + ".logits", &*o->logits);
    seq.emplace_back(slot + ".refined", &o->refined);
  };
  add(model.slot_path(1, 0), &out.branch1_first);
  add(model.slot_path(1, 1), out.branch1_second ? &*out.branch1_second : nullptr);
  add(model.slot_path(2, 0), out.branch2_first ? &*out.branch2_first : nullptr);
  add(model.slot_path(2, 1), out.branch2_second ? &*out.branch2_second : nullptr);
  seq.emplace_back("fusion.map", &out.fused_map);
  seq.emplace_back("embedding", &out.embedding);
  if (out.fusion_logits) seq.emplace_back("fusion.logits", &*out.fusion_logits);
  for (const auto& [name, t] : seq)
    if (!t->all_finite()) return name;
  for (const auto& [name, p] : named_parameters(model))
    if (!p->value.all_finite()) return name;
  return "loss";
}

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03d.ckpt", epoch);
  return buf;
}

}  // namespace

TrainResult train(CsscModel& model, const TrainConfig& cfg, const Manifest& manifest, const TrainOptions& opts) {
  cfg.validate();
  const auto train_idx = manifest.indices(Split::train);
  if (train_idx.empty()) throw ValidationError("manifest has no train split");
  if (manifest.num_identities != model.config().num_train_identities)
    throw ValidationError("model has " + std::to_string(model.config().num_train_identities) +
                          " identity classes but the manifest has " + std::to_string(manifest.num_identities) +
                          " train identities");
  std::vector<int> labels;
  for (std::size_t i : train_idx) labels.push_back(manifest.samples[i].identity);

  const auto& bcfg = model.config().backbone;
  ImageStore store(manifest, bcfg.input_height, bcfg.input_width);
  Adam adam(cfg.weight_decay);
  int start_epoch = 1;
  std::int64_t step = 0;
  if (!opts.resume_from.empty()) {
    const auto info = load_checkpoint(opts.resume_from, model, &adam);
    start_epoch = info.epoch + 1;
    step = info.step;
  }
  fs::create_directories(opts.out_dir);
  std::ofstream log;
  if (opts.write_log) {
    log.open(opts.out_dir / "train_log.jsonl", opts.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw Error("cannot write training log in " + opts.out_dir.string());
  }

  TrainResult result;
  const int last_epoch = opts.stop_after_epoch > 0 ? std::min(opts.stop_after_epoch, cfg.epochs) : cfg.epochs;
  const std::size_t per_image = bcfg.input_height * bcfg.input_width * 3;
  for (int epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const LossConfig loss_cfg = cfg.loss_config(epoch);
    Rng sampler_rng(derive_seed(cfg.seed, 0x5A3D1E, epoch));
    const auto batches = pk_sampler(labels, cfg.batch_ids, cfg.instances_per_id, sampler_rng);
    EpochSummary summary{epoch, lr, 0.0, 0.0, 0};
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      Tensor images({batch.size(), bcfg.input_height, bcfg.input_width, 3});
      std::vector<int> batch_labels;
      for (std::size_t slot = 0; slot < batch.size(); ++slot) {
        Rng aug_rng(derive_seed(cfg.seed, epoch, b, slot));
        const Tensor img = augment_train(store.get(train_idx[batch[slot]]), cfg.augment, aug_rng);
        std::copy(img.data(), img.data() + per_image, images.data() + slot * per_image);
        batch_labels.push_back(labels[batch[slot]]);
      }
      model.train();
      zero_grad(model);
      const ForwardOutputs out = model.forward(images);
      ModelGradients grads;
      const LossBundle bundle = total_loss(out, batch_labels, loss_cfg, &grads);
      if (!std::isfinite(bundle.total))
        throw Error("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                    "; first non-finite tensor: " + first_non_finite(out, model));
      model.backward(grads);
      adam.step(model, lr);

      if (opts.write_log) {
        json rec;
        rec["epoch"] = epoch;
        rec["step"] = step;
        rec["lr"] = lr;
        for (const auto& [k, v] : bundle.fields()) rec[k] = v;
        rec["triplet_active"] = bundle.triplet_active;
        log << rec.dump() << '\n';
      }
      summary.mean_total += bundle.total;
      summary.mean_triplet += bundle.triplet_sum();
      ++summary.steps;
      ++step;
    }
    summary.mean_total /= static_cast<double>(summary.steps);
    summary.mean_triplet /= static_cast<double>(summary.steps);
    if (log.is_open()) log.flush();

    const fs::path ckpt = opts.out_dir / (cfg.keep_checkpoints ? checkpoint_name(epoch) : "last.ckpt");
    save_checkpoint(ckpt, model, &adam, epoch, step, opts.config_snapshot);
    if (cfg.keep_checkpoints) fs::copy_file(ckpt, opts.out_dir / "last.ckpt", fs::copy_options::overwrite_existing);
    result.last_checkpoint = opts.out_dir / "last.ckpt";
    result.epochs.push_back(summary);
    if (opts.on_epoch) opts.on_epoch(summary);
  }
  model.eval();
  return result;
}

}  // namespace cssc
