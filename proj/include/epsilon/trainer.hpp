#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epsilon/datagen.hpp"
#include "epsilon/metrics.hpp"
#include "epsilon/model.hpp"
#include "epsilon/objective.hpp"

namespace epsilon {

struct OptimConfig {
  double lr = 1e-5;
  double weight_decay = 4e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 7;
  std::size_t batch_size = 96;
  std::size_t halve_at_epoch = 4;  // 1-based epoch where lr halves, once
  bool decay_weights_only = true;  // exclude biases, norm offsets and prompts
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

// Moment buffers aligned with EpsilonParams::named(); t counts completed
// optimizer steps.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};
AdamState make_adam_state(const EpsilonParams& params);

// Learning rate for a 1-based epoch: cfg.lr before halve_at_epoch, cfg.lr/2
// from it onward (a single halving).
double lr_schedule(std::size_t epoch, const OptimConfig& cfg);

// One bias-corrected Adam update with decoupled weight decay: the decay term
// lr * wd * theta is added to the step rather than folded into the gradient.
// Parameters without an accumulated gradient are treated as zero-gradient.
void adam_step(EpsilonParams& params, AdamState& state, const OptimConfig& cfg, double lr_now);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;  // per-sample mean over the epoch
  double zsl_map = 0.0;
  double gzsl_map = 0.0;
  std::vector<double> zsl_f1s, gzsl_f1s;  // aligned with the eval ks

  std::string to_json() const;  // one JSON object, no trailing newline
};

// Full training state: enough to resume bitwise or to run inference.
struct Checkpoint {
  ModelConfig model;
  OptimConfig optim;
  LossConfig loss;
  std::size_t epochs_completed = 0;
  EpsilonParams params;
  AdamState adam;
  std::uint64_t shuffle_rng_state = 0;
};

// Container: magic "EPSC", version byte, tensor count (u32 LE), then per
// tensor: name length (u16 LE), name, rank (u32 LE), dims (u32 LE each),
// row-major f64 LE payload. Optimizer moments and the config/progress scalars
// ride along as named tensors, so save -> load -> save is byte-identical.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainOptions {
  ModelConfig model;
  OptimConfig optim;
  LossConfig loss;
  std::vector<std::size_t> eval_ks = {3, 5};
  std::string checkpoint_path;  // final checkpoint destination; "" keeps it in memory
  std::string resume_from;      // checkpoint to continue from; "" starts fresh
};

struct TrainResult {
  ModelConfig model;  // effective configs (the checkpoint's when resuming)
  OptimConfig optim;
  LossConfig loss;
  EpsilonParams params;
  AdamState adam;
  std::vector<EpochRecord> history;  // epochs run by this call
  EvalReport final_zsl, final_gzsl;  // evaluation of the final parameters

  std::string history_jsonl() const;  // one line per record
};

// Scores every image of the split against the full vocabulary:
// score(i, c) = max over groups of <s_im, e_c>. Batch size never changes the
// bytes (per-sample arithmetic is batch-independent).
ScoreTable score_split(const Split& split, const EpsilonParams& params, const ModelConfig& cfg,
                       const LabelSpace& space, std::size_t eval_batch = 64);

// Epoch loop: seeded shuffle, batched forward/backward, Adam step, per-epoch
// evaluation on the test split. Aborts with a diagnostic naming the batch
// index if the loss turns non-finite. When resuming, every hyper-parameter
// except the target epoch count comes from the checkpoint.
TrainResult train(const Dataset& ds, const TrainOptions& opt);

}  // namespace epsilon
