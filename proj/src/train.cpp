#include "qpareto/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace qpareto::nn {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: bad epochs/batch");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw std::invalid_argument("TrainConfig: warmup_epochs must be < epochs");
  }
  if (weight_decay < 0.0 || momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("TrainConfig: bad weight_decay/momentum");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw std::invalid_argument("TrainConfig: label_smoothing must lie in [0, 1)");
  }
}

double evaluate(Model& model, const data::Dataset& ds, int batch_size) {
  std::vector<std::size_t> idx(ds.count());
  std::iota(idx.begin(), idx.end(), 0);
  std::size_t correct = 0;
  std::vector<int> labels;
  for (std::size_t at = 0; at < idx.size(); at += batch_size) {
    const std::size_t end = std::min(idx.size(), at + batch_size);
    const Tensor4 x = ds.gather(idx, at, end, &labels);
    const Tensor4 logits = model.forward(x, /*training=*/false);
    const int K = logits.shape().c;
    for (int n = 0; n < logits.shape().n; ++n) {
      int arg = 0;
      for (int k = 1; k < K; ++k) {
        if (logits.at(n, k, 0, 0) > logits.at(n, arg, 0, 0)) arg = k;
      }
      if (arg == labels[n]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.count());
}

TrainResult train(Model& model, const data::Dataset& train_ds, const data::Dataset& val_ds,
                  const TrainConfig& cfg, const StepHook& hook) {
  cfg.validate();
  if (train_ds.count() == 0) throw std::invalid_argument("train: empty training set");

  const long steps_per_epoch =
      static_cast<long>((train_ds.count() + cfg.batch_size - 1) / cfg.batch_size);
  LrSchedule sched{cfg.lr, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch};
  SgdNesterov opt(cfg.momentum, cfg.weight_decay);
  SoftmaxXent loss;

  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(train_ds.count());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  auto params = model.params();

  TrainResult res;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long batches = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), at + cfg.batch_size);
      const Tensor4 x = train_ds.gather(order, at, end, &labels);
      const Tensor4 logits = model.forward(x, /*training=*/true);
      const double l = loss.forward(logits, labels, cfg.label_smoothing);
      if (!std::isfinite(l)) {
        const std::string layer = model.first_nonfinite_layer(x);
        throw TrainDiverged("train: non-finite loss at epoch " + std::to_string(epoch) +
                                (layer.empty() ? std::string(" (loss layer)")
                                               : " in layer '" + layer + "'"),
                            epoch, layer);
      }
      loss_sum += l;
      ++batches;
      model.zero_grad();
      model.backward(loss.backward());
      opt.step(params, sched.at(step));
      ++step;
      if (hook) hook(step, model);
    }
    res.loss_trace.push_back(loss_sum / std::max(1L, batches));

    const double acc = evaluate(model, val_ds);
    res.val_acc_trace.push_back(acc);
    if (acc > res.best_val_acc || res.best_epoch < 0) {
      res.best_val_acc = acc;
      res.best_epoch = epoch;
      if (!cfg.best_checkpoint_path.empty()) {
        std::ostringstream rs;
        rs << rng;
        save_checkpoint(snapshot(model, "", &opt, epoch, res.val_acc_trace, rs.str()),
                        cfg.best_checkpoint_path);
      }
    }
  }
  res.steps = step;
  return res;
}

void init_params(Model& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Param* p : model.params()) {
    if (p->dims.size() < 2) continue;  // BN gains/biases and dense bias keep their defaults
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < p->dims.size(); ++i) fan_in *= static_cast<std::size_t>(p->dims[i]);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : p->value) v = dist(rng);
  }
}

Checkpoint snapshot(Model& model, const std::string& arch_id, const SgdNesterov* opt, int epoch,
                    const std::vector<double>& trace, const std::string& rng_state) {
  Checkpoint ck;
  ck.arch_id = arch_id;
  for (Param* p : model.params()) ck.param_values.push_back(p->value);
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    ck.layer_state.push_back(model.layer(i).state());
  }
  if (opt) ck.velocity = opt->velocity();
  ck.rng_state = rng_state;
  ck.epoch = epoch;
  ck.val_acc_trace = trace;
  return ck;
}

void restore(Model& model, const Checkpoint& ck) {
  auto params = model.params();
  if (params.size() != ck.param_values.size()) {
    throw std::runtime_error("restore: parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.size() != ck.param_values[i].size()) {
      throw std::runtime_error("restore: size mismatch for param " + params[i]->name);
    }
    params[i]->value = ck.param_values[i];
  }
  if (ck.layer_state.size() != model.layer_count()) {
    throw std::runtime_error("restore: layer count mismatch");
  }
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (!ck.layer_state[i].empty()) model.layer(i).set_state(ck.layer_state[i]);
  }
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = ck.format_version;
  j["arch_id"] = ck.arch_id;
  j["param_values"] = ck.param_values;
  j["layer_state"] = ck.layer_state;
  j["velocity"] = ck.velocity;
  j["rng_state"] = ck.rng_state;
  j["epoch"] = ck.epoch;
  j["val_acc_trace"] = ck.val_acc_trace;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << j.dump() << "\n";
  if (!f) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  f >> j;
  Checkpoint ck;
  ck.format_version = j.at("format_version").get<int>();
  if (ck.format_version != 1) {
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(ck.format_version));
  }
  ck.arch_id = j.at("arch_id").get<std::string>();
  ck.param_values = j.at("param_values").get<std::vector<std::vector<double>>>();
  ck.layer_state = j.at("layer_state").get<std::vector<std::vector<double>>>();
  ck.velocity = j.at("velocity").get<std::vector<std::vector<double>>>();
  ck.rng_state = j.at("rng_state").get<std::string>();
  ck.epoch = j.at("epoch").get<int>();
  ck.val_acc_trace = j.at("val_acc_trace").get<std::vector<double>>();
  return ck;
}

}  // namespace qpareto::nn
