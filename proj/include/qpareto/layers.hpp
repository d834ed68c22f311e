#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qpareto/quant.hpp"
#include "qpareto/tensor.hpp"

namespace qpareto::nn {

class Conv2d;

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor4 forward(const Tensor4& x, bool training) = 0;
  /// Consumes the upstream gradient, accumulates parameter gradients, and
  /// returns the gradient w.r.t. this layer's input.
  virtual Tensor4 backward(const Tensor4& dy) = 0;

  virtual std::vector<Param*> params() { return {}; }
  /// Applies fn to every Conv2d reachable from this layer, including those
  /// nested inside blocks.
  virtual void visit_convs(const std::function<void(Conv2d&)>&) {}
  /// Non-trainable state carried across steps (BN running stats, activation
  /// ranges). Flattened for checkpointing.
  virtual std::vector<double> state() const { return {}; }
  virtual void set_state(std::span<const double>) {}

  const std::string& name() const { return name_; }
  virtual void set_name(std::string n) { name_ = std::move(n); }

 protected:
  std::string name_ = "layer";
};

struct Conv2dOpts {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = -1;  // -1 -> (kernel - 1) / 2
  int groups = 1;
  quant::QuantSpec qspec;  // bitwidth == nullopt keeps full precision
};

/// Bias-free 2-D cross-correlation. Master weights stay real-valued; when a
/// bitwidth is set the forward pass runs on a per-output-filter quantized
/// copy and the backward pass applies the straight-through estimator, so the
/// weight gradient is exactly the one an unquantized layer would receive.
class Conv2d : public Layer {
 public:
  explicit Conv2d(const Conv2dOpts& opts);

  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;
  std::vector<Param*> params() override { return {&weight_}; }
  void visit_convs(const std::function<void(Conv2d&)>& fn) override { fn(*this); }

  Param& weight() { return weight_; }
  const Param& weight() const { return weight_; }
  const Conv2dOpts& opts() const { return opts_; }
  /// Elements per output filter: (C_in/groups) * K * K.
  int fan_in() const { return (opts_.in_channels / opts_.groups) * opts_.kernel * opts_.kernel; }
  std::span<const double> quantized_weights() const { return qweight_; }

  Shape4 output_shape(const Shape4& in) const;

 private:
  Conv2dOpts opts_;
  Param weight_;
  std::vector<double> qweight_;  // weights actually used by the last forward
  Tensor4 input_;
  std::vector<double> col_;  // im2col scratch, one sample at a time
};

class Dense : public Layer {
 public:
  Dense(int in_features, int out_features, quant::QuantSpec qspec = {});

  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;
  std::vector<Param*> params() override { return {&weight_, &bias_}; }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  int in_features() const { return in_features_; }

 private:
  int in_features_, out_features_;
  quant::QuantSpec qspec_;
  Param weight_;  // (out, in)
  Param bias_;    // (out), kept full precision
  std::vector<double> qweight_;
  Tensor4 input_;
  Shape4 in_shape_;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1);

  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;
  std::vector<Param*> params() override { return {&gamma_, &beta_}; }
  std::vector<double> state() const override;
  void set_state(std::span<const double> s) override;

 private:
  int channels_;
  double eps_, momentum_;
  Param gamma_, beta_;
  std::vector<double> running_mean_, running_var_;
  // saved by forward(training=true)
  Tensor4 xhat_;
  std::vector<double> inv_std_;
  bool last_training_ = false;
};

class ReLU : public Layer {
 public:
  ReLU() { name_ = "relu"; }
  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;

 private:
  std::vector<char> mask_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(int kernel = 2, int stride = 2);
  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;

 private:
  int kernel_, stride_;
  Shape4 in_shape_;
  std::vector<std::size_t> argmax_;  // gradient routes only to these
};

class GlobalAvgPool : public Layer {
 public:
  GlobalAvgPool() { name_ = "gap"; }
  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;

 private:
  Shape4 in_shape_;
};

/// Per-tensor affine fake quantizer for activations. Tracks min/max with an
/// EMA (decay 0.99) while training and freezes the range for evaluation.
class ActQuant : public Layer {
 public:
  explicit ActQuant(int bits, double decay = 0.99);
  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;
  std::vector<double> state() const override;
  void set_state(std::span<const double> s) override;

 private:
  int bits_;
  quant::ActRangeTracker tracker_;
  Tensor4 input_;
  double used_lo_ = 0.0, used_hi_ = 0.0;
};

/// CIFAR-style basic residual block: two 3x3 convolutions with batch norm,
/// identity shortcut. Downsampling uses the parameter-free route (stride-2
/// subsample plus channel zero-padding) so the block contributes exactly its
/// two convolutions to the model size.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(int in_channels, int out_channels, int stride, const quant::QuantSpec& qspec);

  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;
  std::vector<Param*> params() override;
  std::vector<double> state() const override;
  void set_state(std::span<const double> s) override;
  void set_name(std::string n) override;
  void visit_convs(const std::function<void(Conv2d&)>& fn) override;

  Conv2d& conv1() { return *conv1_; }
  Conv2d& conv2() { return *conv2_; }

 private:
  Tensor4 shortcut_forward(const Tensor4& x) const;
  Tensor4 shortcut_backward(const Tensor4& dy, const Shape4& in_shape) const;

  int in_channels_, out_channels_, stride_;
  std::unique_ptr<Conv2d> conv1_, conv2_;
  std::unique_ptr<BatchNorm2d> bn1_, bn2_;
  std::unique_ptr<ReLU> relu1_;
  Shape4 in_shape_;
  std::vector<char> out_mask_;  // final ReLU
};

/// Inverted residual: 1x1 expand -> 3x3 depth-wise -> 1x1 linear project,
/// with a skip connection when the spatial size and channel count carry over.
/// `expanded_channels` is explicit because the families here differ in how
/// the expansion scales with the width multiplier.
class InvertedResidualBlock : public Layer {
 public:
  InvertedResidualBlock(int in_channels, int out_channels, int expanded_channels, int stride,
                        const quant::QuantSpec& conv_qspec, const quant::QuantSpec& dw_qspec);

  Tensor4 forward(const Tensor4& x, bool training) override;
  Tensor4 backward(const Tensor4& dy) override;
  std::vector<Param*> params() override;
  std::vector<double> state() const override;
  void set_state(std::span<const double> s) override;
  void set_name(std::string n) override;
  void visit_convs(const std::function<void(Conv2d&)>& fn) override;

 private:
  int in_channels_, out_channels_, expanded_, stride_;
  bool has_expand_, has_skip_;
  std::unique_ptr<Conv2d> expand_, dw_, project_;
  std::unique_ptr<BatchNorm2d> bn0_, bn1_, bn2_;
  std::unique_ptr<ReLU> relu0_, relu1_;
  Tensor4 skip_input_;
};

/// Softmax cross-entropy with optional label smoothing; mean over the batch.
class SoftmaxXent {
 public:
  double forward(const Tensor4& logits, std::span<const int> labels, double label_smoothing);
  Tensor4 backward() const;  // gradient w.r.t. logits

 private:
  Tensor4 probs_;
  std::vector<int> labels_;
  double smoothing_ = 0.0;
};

class Model {
 public:
  Model() = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  std::size_t layer_count() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

  Tensor4 forward(const Tensor4& x, bool training);
  /// Backward from the gradient of the logits; returns gradient w.r.t. input.
  Tensor4 backward(const Tensor4& dlogits);

  std::vector<Param*> params();
  void zero_grad();
  /// Name of the first layer whose forward output contains a non-finite
  /// value, or empty if all outputs are finite. Diagnostic for NaN aborts.
  std::string first_nonfinite_layer(const Tensor4& x);

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace qpareto::nn
