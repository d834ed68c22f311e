#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qpareto/data.hpp"
#include "qpareto/layers.hpp"
#include "qpareto/optim.hpp"

namespace qpareto::nn {

struct TrainConfig {
  double lr = 0.05;
  int warmup_epochs = 5;
  int epochs = 300;
  int batch_size = 128;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
  std::string best_checkpoint_path;  // empty -> no checkpointing

  void validate() const;
};

struct TrainResult {
  std::vector<double> loss_trace;     // mean training loss per epoch
  std::vector<double> val_acc_trace;  // validation accuracy per epoch
  double best_val_acc = 0.0;
  int best_epoch = -1;
  long steps = 0;
};

/// Raised when a training step produces a non-finite loss; carries the epoch
/// and the first offending layer.
struct TrainDiverged : std::runtime_error {
  TrainDiverged(const std::string& msg, int epoch_, std::string layer_)
      : std::runtime_error(msg), epoch(epoch_), layer(std::move(layer_)) {}
  int epoch;
  std::string layer;
};

using StepHook = std::function<void(long step, Model& model)>;

double evaluate(Model& model, const data::Dataset& ds, int batch_size = 256);

/// Quantization-aware training loop: shuffled mini-batches, Nesterov SGD,
/// cosine schedule with linear warmup, per-epoch validation. Deterministic
/// for a fixed seed on one platform.
TrainResult train(Model& model, const data::Dataset& train_ds, const data::Dataset& val_ds,
                  const TrainConfig& cfg, const StepHook& hook = {});

/// Kaiming-style fan-in scaled Gaussian init for conv/dense weights.
void init_params(Model& model, std::uint64_t seed);

struct Checkpoint {
  int format_version = 1;
  std::string arch_id;
  std::vector<std::vector<double>> param_values;
  std::vector<std::vector<double>> layer_state;
  std::vector<std::vector<double>> velocity;
  std::string rng_state;
  int epoch = -1;
  std::vector<double> val_acc_trace;
};

Checkpoint snapshot(Model& model, const std::string& arch_id, const SgdNesterov* opt, int epoch,
                    const std::vector<double>& trace, const std::string& rng_state);
void restore(Model& model, const Checkpoint& ck);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace qpareto::nn
