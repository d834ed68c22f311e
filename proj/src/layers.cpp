#include "qpareto/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace qpareto::nn {

namespace {

// C(MxN) = A(MxK) * B(KxN), optionally accumulating into C
void gemm_nn(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<std::size_t>(M) * N, 0.0);
  for (int i = 0; i < M; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * K;
    double* c = C + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const double aik = a[k];
      if (aik == 0.0) continue;
      const double* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

// C(MxN) += A(MxK) * B(NxK)^T
void gemm_nt_acc(int M, int N, int K, const double* A, const double* B, double* C) {
  for (int i = 0; i < M; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * K;
    double* c = C + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const double* b = B + static_cast<std::size_t>(j) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C(MxN) = A(KxM)^T * B(KxN)
void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C) {
  std::fill(C, C + static_cast<std::size_t>(M) * N, 0.0);
  for (int k = 0; k < K; ++k) {
    const double* a = A + static_cast<std::size_t>(k) * M;
    const double* b = B + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const double aki = a[i];
      if (aki == 0.0) continue;
      double* c = C + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += aki * b[j];
    }
  }
}

// (C,H,W) sample -> (C*K*K) x (Ho*Wo) column matrix, zero padded
void im2col(const double* x, int C, int H, int W, int K, int stride, int pad, int Ho, int Wo,
            double* col) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < K; ++kh) {
      for (int kw = 0; kw < K; ++kw) {
        double* dst = col + static_cast<std::size_t>((c * K + kh) * K + kw) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) {
            std::fill(dst + oh * Wo, dst + (oh + 1) * Wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride + kw - pad;
            dst[oh * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

// scatter-add of a column matrix back onto the (C,H,W) input gradient
void col2im_acc(const double* col, int C, int H, int W, int K, int stride, int pad, int Ho, int Wo,
                double* dx) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < K; ++kh) {
      for (int kw = 0; kw < K; ++kw) {
        const double* src = col + static_cast<std::size_t>((c * K + kh) * K + kw) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride + kw - pad;
            if (iw >= 0 && iw < W) dst[iw] += src[oh * Wo + ow];
          }
        }
      }
    }
  }
}

// per-output-filter fake quantization of a weight matrix with `rows` rows
void quantize_weight_rows(const Param& w, const quant::QuantSpec& spec, int rows,
                          std::vector<double>& out) {
  out.resize(w.size());
  if (!spec.bitwidth) {
    std::copy(w.value.begin(), w.value.end(), out.begin());
    return;
  }
  const std::size_t row_len = w.size() / rows;
  for (int i = 0; i < rows; ++i) {
    std::span<const double> in(w.value.data() + i * row_len, row_len);
    std::span<double> dst(out.data() + i * row_len, row_len);
    quant::quantize_dispatch_into(in, spec, dst);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(const Conv2dOpts& opts) : opts_(opts) {
  if (opts_.padding < 0) opts_.padding = (opts_.kernel - 1) / 2;
  if (opts_.in_channels <= 0 || opts_.out_channels <= 0 || opts_.kernel <= 0 || opts_.stride <= 0 ||
      opts_.groups <= 0) {
    throw std::invalid_argument("Conv2d: non-positive dimension");
  }
  if (opts_.in_channels % opts_.groups != 0 || opts_.out_channels % opts_.groups != 0) {
    throw std::invalid_argument("Conv2d: channels not divisible by groups");
  }
  opts_.qspec.validate();
  name_ = "conv";
  weight_ = Param("conv.weight", {opts_.out_channels, opts_.in_channels / opts_.groups,
                                  opts_.kernel, opts_.kernel});
}

Shape4 Conv2d::output_shape(const Shape4& in) const {
  const int ho = (in.h + 2 * opts_.padding - opts_.kernel) / opts_.stride + 1;
  const int wo = (in.w + 2 * opts_.padding - opts_.kernel) / opts_.stride + 1;
  return {in.n, opts_.out_channels, ho, wo};
}

Tensor4 Conv2d::forward(const Tensor4& x, bool) {
  if (x.shape().c != opts_.in_channels) {
    throw std::invalid_argument("Conv2d(" + name_ + "): expected " +
                                std::to_string(opts_.in_channels) + " input channels, got " +
                                x.shape().str());
  }
  input_ = x;
  quantize_weight_rows(weight_, opts_.qspec, opts_.out_channels, qweight_);

  const Shape4 in = x.shape();
  const Shape4 os = output_shape(in);
  if (os.h <= 0 || os.w <= 0) {
    throw std::invalid_argument("Conv2d(" + name_ + "): input " + in.str() + " too small");
  }
  Tensor4 y(os);

  const int G = opts_.groups;
  const int K = opts_.kernel;
  const int cg = opts_.in_channels / G;   // input channels per group
  const int mg = opts_.out_channels / G;  // output channels per group
  const int klen = cg * K * K;
  const int P = os.h * os.w;
  col_.resize(static_cast<std::size_t>(opts_.in_channels) * K * K * P);

  for (int n = 0; n < in.n; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * in.c * in.h * in.w;
    im2col(xn, in.c, in.h, in.w, K, opts_.stride, opts_.padding, os.h, os.w, col_.data());
    double* yn = y.data() + static_cast<std::size_t>(n) * os.c * P;
    for (int g = 0; g < G; ++g) {
      gemm_nn(mg, P, klen, qweight_.data() + static_cast<std::size_t>(g) * mg * klen,
              col_.data() + static_cast<std::size_t>(g) * cg * K * K * P,
              yn + static_cast<std::size_t>(g) * mg * P, /*accumulate=*/false);
    }
  }
  return y;
}

Tensor4 Conv2d::backward(const Tensor4& dy) {
  const Shape4 in = input_.shape();
  const Shape4 os = output_shape(in);
  if (!(dy.shape() == os)) {
    throw std::invalid_argument("Conv2d(" + name_ + "): upstream gradient shape " +
                                dy.shape().str() + " does not match output " + os.str());
  }
  Tensor4 dx(in);
  const int G = opts_.groups;
  const int K = opts_.kernel;
  const int cg = opts_.in_channels / G;
  const int mg = opts_.out_channels / G;
  const int klen = cg * K * K;
  const int P = os.h * os.w;
  std::vector<double> dcol(static_cast<std::size_t>(opts_.in_channels) * K * K * P);

  for (int n = 0; n < in.n; ++n) {
    const double* xn = input_.data() + static_cast<std::size_t>(n) * in.c * in.h * in.w;
    im2col(xn, in.c, in.h, in.w, K, opts_.stride, opts_.padding, os.h, os.w, col_.data());
    const double* dyn = dy.data() + static_cast<std::size_t>(n) * os.c * P;
    for (int g = 0; g < G; ++g) {
      const std::size_t woff = static_cast<std::size_t>(g) * mg * klen;
      const std::size_t coff = static_cast<std::size_t>(g) * cg * K * K * P;
      // straight-through: master-weight gradient computed as if Q were identity
      gemm_nt_acc(mg, klen, P, dyn + static_cast<std::size_t>(g) * mg * P, col_.data() + coff,
                  weight_.grad.data() + woff);
      // input gradient flows through the weights the forward actually used
      gemm_tn(klen, P, mg, qweight_.data() + woff, dyn + static_cast<std::size_t>(g) * mg * P,
              dcol.data() + coff);
    }
    double* dxn = dx.data() + static_cast<std::size_t>(n) * in.c * in.h * in.w;
    col2im_acc(dcol.data(), in.c, in.h, in.w, K, opts_.stride, opts_.padding, os.h, os.w, dxn);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Dense

Dense::Dense(int in_features, int out_features, quant::QuantSpec qspec)
    : in_features_(in_features), out_features_(out_features), qspec_(qspec) {
  if (in_features <= 0 || out_features <= 0) throw std::invalid_argument("Dense: bad dimensions");
  qspec_.validate();
  name_ = "dense";
  weight_ = Param("dense.weight", {out_features, in_features});
  bias_ = Param("dense.bias", {out_features});
}

Tensor4 Dense::forward(const Tensor4& x, bool) {
  in_shape_ = x.shape();
  const int F = in_shape_.c * in_shape_.h * in_shape_.w;
  if (F != in_features_) {
    throw std::invalid_argument("Dense(" + name_ + "): expected " + std::to_string(in_features_) +
                                " features, got " + x.shape().str());
  }
  input_ = x;
  quantize_weight_rows(weight_, qspec_, out_features_, qweight_);

  Tensor4 y(in_shape_.n, out_features_, 1, 1);
  for (int n = 0; n < in_shape_.n; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * F;
    double* yn = y.data() + static_cast<std::size_t>(n) * out_features_;
    for (int o = 0; o < out_features_; ++o) {
      const double* w = qweight_.data() + static_cast<std::size_t>(o) * F;
      double acc = bias_.value[o];
      for (int f = 0; f < F; ++f) acc += w[f] * xn[f];
      yn[o] = acc;
    }
  }
  return y;
}

Tensor4 Dense::backward(const Tensor4& dy) {
  const int F = in_features_;
  if (dy.shape().c != out_features_ || dy.shape().n != in_shape_.n) {
    throw std::invalid_argument("Dense(" + name_ + "): upstream gradient shape mismatch");
  }
  Tensor4 dx(in_shape_);
  for (int n = 0; n < in_shape_.n; ++n) {
    const double* xn = input_.data() + static_cast<std::size_t>(n) * F;
    const double* dyn = dy.data() + static_cast<std::size_t>(n) * out_features_;
    double* dxn = dx.data() + static_cast<std::size_t>(n) * F;
    for (int o = 0; o < out_features_; ++o) {
      const double g = dyn[o];
      if (g == 0.0) continue;
      bias_.grad[o] += g;
      double* wg = weight_.grad.data() + static_cast<std::size_t>(o) * F;
      const double* w = qweight_.data() + static_cast<std::size_t>(o) * F;
      for (int f = 0; f < F; ++f) {
        wg[f] += g * xn[f];  // straight-through to master weights
        dxn[f] += g * w[f];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, double eps, double momentum)
    : channels_(channels), eps_(eps), momentum_(momentum) {
  name_ = "bn";
  gamma_ = Param("bn.gamma", {channels});
  beta_ = Param("bn.beta", {channels});
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  running_mean_.assign(channels, 0.0);
  running_var_.assign(channels, 1.0);
}

Tensor4 BatchNorm2d::forward(const Tensor4& x, bool training) {
  const Shape4 s = x.shape();
  if (s.c != channels_) throw std::invalid_argument("BatchNorm2d(" + name_ + "): channel mismatch");
  const int m = s.n * s.h * s.w;
  last_training_ = training;
  xhat_ = Tensor4(s);
  inv_std_.assign(channels_, 0.0);
  Tensor4 y(s);

  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (training) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < s.n; ++n)
        for (int h = 0; h < s.h; ++h)
          for (int w = 0; w < s.w; ++w) {
            const double v = x.at(n, c, h, w);
            sum += v;
            sq += v * v;
          }
      mean = sum / m;
      var = std::max(0.0, sq / m - mean * mean);
      const double unbiased = (m > 1) ? var * m / (m - 1.0) : var;
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    const double g = gamma_.value[c], b = beta_.value[c];
    for (int n = 0; n < s.n; ++n)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) {
          const double xh = (x.at(n, c, h, w) - mean) * inv;
          xhat_.at(n, c, h, w) = xh;
          y.at(n, c, h, w) = g * xh + b;
        }
  }
  return y;
}

Tensor4 BatchNorm2d::backward(const Tensor4& dy) {
  const Shape4 s = dy.shape();
  if (!(s == xhat_.shape())) throw std::invalid_argument("BatchNorm2d(" + name_ + "): shape mismatch");
  const double m = static_cast<double>(s.n) * s.h * s.w;
  Tensor4 dx(s);

  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) {
          const double g = dy.at(n, c, h, w);
          sum_dy += g;
          sum_dy_xhat += g * xhat_.at(n, c, h, w);
        }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;

    const double gam = gamma_.value[c];
    const double inv = inv_std_[c];
    if (last_training_) {
      const double k = gam * inv / m;
      for (int n = 0; n < s.n; ++n)
        for (int h = 0; h < s.h; ++h)
          for (int w = 0; w < s.w; ++w) {
            dx.at(n, c, h, w) = k * (m * dy.at(n, c, h, w) - sum_dy -
                                     xhat_.at(n, c, h, w) * sum_dy_xhat);
          }
    } else {
      // frozen statistics: plain affine transform
      const double k = gam * inv;
      for (int n = 0; n < s.n; ++n)
        for (int h = 0; h < s.h; ++h)
          for (int w = 0; w < s.w; ++w) dx.at(n, c, h, w) = k * dy.at(n, c, h, w);
    }
  }
  return dx;
}

std::vector<double> BatchNorm2d::state() const {
  std::vector<double> s(running_mean_);
  s.insert(s.end(), running_var_.begin(), running_var_.end());
  return s;
}

void BatchNorm2d::set_state(std::span<const double> s) {
  if (s.size() != static_cast<std::size_t>(2 * channels_)) {
    throw std::invalid_argument("BatchNorm2d: bad state size");
  }
  std::copy(s.begin(), s.begin() + channels_, running_mean_.begin());
  std::copy(s.begin() + channels_, s.end(), running_var_.begin());
}

// ---------------------------------------------------------------------------
// ReLU

Tensor4 ReLU::forward(const Tensor4& x, bool) {
  Tensor4 y(x.shape());
  mask_.assign(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0) {
      y[i] = x[i];
      mask_[i] = 1;
    }
  }
  return y;
}

Tensor4 ReLU::backward(const Tensor4& dy) {
  if (dy.size() != mask_.size()) throw std::invalid_argument("ReLU: shape mismatch");
  Tensor4 dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = mask_[i] ? dy[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// MaxPool2d

MaxPool2d::MaxPool2d(int kernel, int stride) : kernel_(kernel), stride_(stride) {
  name_ = "maxpool";
}

Tensor4 MaxPool2d::forward(const Tensor4& x, bool) {
  in_shape_ = x.shape();
  const int ho = (in_shape_.h - kernel_) / stride_ + 1;
  const int wo = (in_shape_.w - kernel_) / stride_ + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("MaxPool2d(" + name_ + "): input too small");
  Tensor4 y(in_shape_.n, in_shape_.c, ho, wo);
  argmax_.assign(y.size(), 0);

  std::size_t oi = 0;
  for (int n = 0; n < in_shape_.n; ++n)
    for (int c = 0; c < in_shape_.c; ++c)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int kh = 0; kh < kernel_; ++kh)
            for (int kw = 0; kw < kernel_; ++kw) {
              const int ih = oh * stride_ + kh;
              const int iw = ow * stride_ + kw;
              const double v = x.at(n, c, ih, iw);
              if (v > best) {  // ties keep the first position scanned
                best = v;
                best_idx = ((static_cast<std::size_t>(n) * in_shape_.c + c) * in_shape_.h + ih) *
                               in_shape_.w + iw;
              }
            }
          y[oi] = best;
          argmax_[oi] = best_idx;
        }
  return y;
}

Tensor4 MaxPool2d::backward(const Tensor4& dy) {
  if (dy.size() != argmax_.size()) throw std::invalid_argument("MaxPool2d: shape mismatch");
  Tensor4 dx(in_shape_);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

Tensor4 GlobalAvgPool::forward(const Tensor4& x, bool) {
  in_shape_ = x.shape();
  Tensor4 y(in_shape_.n, in_shape_.c, 1, 1);
  const double inv = 1.0 / (static_cast<double>(in_shape_.h) * in_shape_.w);
  for (int n = 0; n < in_shape_.n; ++n)
    for (int c = 0; c < in_shape_.c; ++c) {
      double acc = 0.0;
      for (int h = 0; h < in_shape_.h; ++h)
        for (int w = 0; w < in_shape_.w; ++w) acc += x.at(n, c, h, w);
      y.at(n, c, 0, 0) = acc * inv;
    }
  return y;
}

Tensor4 GlobalAvgPool::backward(const Tensor4& dy) {
  Tensor4 dx(in_shape_);
  const double inv = 1.0 / (static_cast<double>(in_shape_.h) * in_shape_.w);
  for (int n = 0; n < in_shape_.n; ++n)
    for (int c = 0; c < in_shape_.c; ++c) {
      const double g = dy.at(n, c, 0, 0) * inv;
      for (int h = 0; h < in_shape_.h; ++h)
        for (int w = 0; w < in_shape_.w; ++w) dx.at(n, c, h, w) = g;
    }
  return dx;
}

// ---------------------------------------------------------------------------
// ActQuant

ActQuant::ActQuant(int bits, double decay) : bits_(bits), tracker_(decay) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("ActQuant: bits must be 4 or 8");
  name_ = "actquant";
}

Tensor4 ActQuant::forward(const Tensor4& x, bool training) {
  if (training) tracker_.update(x.flat());
  input_ = x;
  used_lo_ = tracker_.lo();
  used_hi_ = tracker_.hi();
  Tensor4 y(x.shape());
  if (!tracker_.initialized()) {
    std::copy(x.flat().begin(), x.flat().end(), y.flat().begin());
    return y;
  }
  quant::fake_quantize_activation(x.flat(), bits_, used_lo_, used_hi_, y.flat());
  return y;
}

Tensor4 ActQuant::backward(const Tensor4& dy) {
  Tensor4 dx(dy.shape());
  quant::fake_quantize_activation_backward(input_.flat(), used_lo_, used_hi_, dy.flat(), dx.flat());
  return dx;
}

std::vector<double> ActQuant::state() const {
  return {tracker_.lo(), tracker_.hi(), tracker_.initialized() ? 1.0 : 0.0};
}

void ActQuant::set_state(std::span<const double> s) {
  if (s.size() != 3) throw std::invalid_argument("ActQuant: bad state size");
  tracker_.restore(s[0], s[1], s[2] != 0.0);
}

// ---------------------------------------------------------------------------
// ResidualBlock

ResidualBlock::ResidualBlock(int in_channels, int out_channels, int stride,
                             const quant::QuantSpec& qspec)
    : in_channels_(in_channels), out_channels_(out_channels), stride_(stride) {
  if (out_channels < in_channels) {
    throw std::invalid_argument("ResidualBlock: channel count must not shrink");
  }
  name_ = "block";
  conv1_ = std::make_unique<Conv2d>(
      Conv2dOpts{in_channels, out_channels, 3, stride, 1, 1, qspec});
  bn1_ = std::make_unique<BatchNorm2d>(out_channels);
  relu1_ = std::make_unique<ReLU>();
  conv2_ = std::make_unique<Conv2d>(Conv2dOpts{out_channels, out_channels, 3, 1, 1, 1, qspec});
  bn2_ = std::make_unique<BatchNorm2d>(out_channels);
  set_name(name_);
}

void ResidualBlock::set_name(std::string n) {
  name_ = std::move(n);
  conv1_->set_name(name_ + ".conv1");
  bn1_->set_name(name_ + ".bn1");
  conv2_->set_name(name_ + ".conv2");
  bn2_->set_name(name_ + ".bn2");
}

Tensor4 ResidualBlock::shortcut_forward(const Tensor4& x) const {
  if (stride_ == 1 && in_channels_ == out_channels_) return x;
  const Shape4 s = x.shape();
  const int ho = (s.h - 1) / stride_ + 1;
  const int wo = (s.w - 1) / stride_ + 1;
  Tensor4 y(s.n, out_channels_, ho, wo);  // extra channels stay zero
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < in_channels_; ++c)
      for (int h = 0; h < ho; ++h)
        for (int w = 0; w < wo; ++w) y.at(n, c, h, w) = x.at(n, c, h * stride_, w * stride_);
  return y;
}

Tensor4 ResidualBlock::shortcut_backward(const Tensor4& dy, const Shape4& in_shape) const {
  if (stride_ == 1 && in_channels_ == out_channels_) return dy;
  Tensor4 dx(in_shape);
  const Shape4 s = dy.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < in_channels_; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) dx.at(n, c, h * stride_, w * stride_) = dy.at(n, c, h, w);
  return dx;
}

Tensor4 ResidualBlock::forward(const Tensor4& x, bool training) {
  in_shape_ = x.shape();
  Tensor4 t = conv1_->forward(x, training);
  t = bn1_->forward(t, training);
  t = relu1_->forward(t, training);
  t = conv2_->forward(t, training);
  t = bn2_->forward(t, training);
  const Tensor4 sc = shortcut_forward(x);
  if (!(sc.shape() == t.shape())) {
    throw std::invalid_argument("ResidualBlock(" + name_ + "): shortcut shape mismatch");
  }
  out_mask_.assign(t.size(), 0);
  Tensor4 y(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i] + sc[i];
    if (v > 0.0) {
      y[i] = v;
      out_mask_[i] = 1;
    }
  }
  return y;
}

Tensor4 ResidualBlock::backward(const Tensor4& dy) {
  if (dy.size() != out_mask_.size()) {
    throw std::invalid_argument("ResidualBlock(" + name_ + "): gradient shape mismatch");
  }
  Tensor4 d(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) d[i] = out_mask_[i] ? dy[i] : 0.0;

  Tensor4 dmain = bn2_->backward(d);
  dmain = conv2_->backward(dmain);
  dmain = relu1_->backward(dmain);
  dmain = bn1_->backward(dmain);
  dmain = conv1_->backward(dmain);

  const Tensor4 dsc = shortcut_backward(d, in_shape_);
  for (std::size_t i = 0; i < dmain.size(); ++i) dmain[i] += dsc[i];
  return dmain;
}

void ResidualBlock::visit_convs(const std::function<void(Conv2d&)>& fn) {
  fn(*conv1_);
  fn(*conv2_);
}

std::vector<Param*> ResidualBlock::params() {
  std::vector<Param*> ps;
  for (Layer* l : std::initializer_list<Layer*>{conv1_.get(), bn1_.get(), conv2_.get(), bn2_.get()}) {
    for (Param* p : l->params()) ps.push_back(p);
  }
  return ps;
}

std::vector<double> ResidualBlock::state() const {
  std::vector<double> s = bn1_->state();
  const auto s2 = bn2_->state();
  s.insert(s.end(), s2.begin(), s2.end());
  return s;
}

void ResidualBlock::set_state(std::span<const double> s) {
  const std::size_t half = s.size() / 2;
  bn1_->set_state(s.subspan(0, half));
  bn2_->set_state(s.subspan(half));
}

// ---------------------------------------------------------------------------
// InvertedResidualBlock

InvertedResidualBlock::InvertedResidualBlock(int in_channels, int out_channels,
                                             int expanded_channels, int stride,
                                             const quant::QuantSpec& conv_qspec,
                                             const quant::QuantSpec& dw_qspec)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      expanded_(expanded_channels),
      stride_(stride) {
  name_ = "invblock";
  has_expand_ = expanded_channels != in_channels;
  has_skip_ = stride == 1 && in_channels == out_channels;
  if (has_expand_) {
    expand_ = std::make_unique<Conv2d>(
        Conv2dOpts{in_channels, expanded_, 1, 1, 0, 1, conv_qspec});
    bn0_ = std::make_unique<BatchNorm2d>(expanded_);
    relu0_ = std::make_unique<ReLU>();
  }
  dw_ = std::make_unique<Conv2d>(Conv2dOpts{expanded_, expanded_, 3, stride, 1, expanded_, dw_qspec});
  bn1_ = std::make_unique<BatchNorm2d>(expanded_);
  relu1_ = std::make_unique<ReLU>();
  project_ = std::make_unique<Conv2d>(Conv2dOpts{expanded_, out_channels, 1, 1, 0, 1, conv_qspec});
  bn2_ = std::make_unique<BatchNorm2d>(out_channels);
  set_name(name_);
}

void InvertedResidualBlock::set_name(std::string n) {
  name_ = std::move(n);
  if (has_expand_) {
    expand_->set_name(name_ + ".expand");
    bn0_->set_name(name_ + ".bn0");
  }
  dw_->set_name(name_ + ".dw");
  bn1_->set_name(name_ + ".bn1");
  project_->set_name(name_ + ".project");
  bn2_->set_name(name_ + ".bn2");
}

Tensor4 InvertedResidualBlock::forward(const Tensor4& x, bool training) {
  if (has_skip_) skip_input_ = x;
  Tensor4 t = x;
  if (has_expand_) {
    t = expand_->forward(t, training);
    t = bn0_->forward(t, training);
    t = relu0_->forward(t, training);
  }
  t = dw_->forward(t, training);
  t = bn1_->forward(t, training);
  t = relu1_->forward(t, training);
  t = project_->forward(t, training);
  t = bn2_->forward(t, training);
  if (has_skip_) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += skip_input_[i];
  }
  return t;
}

Tensor4 InvertedResidualBlock::backward(const Tensor4& dy) {
  Tensor4 d = bn2_->backward(dy);
  d = project_->backward(d);
  d = relu1_->backward(d);
  d = bn1_->backward(d);
  d = dw_->backward(d);
  if (has_expand_) {
    d = relu0_->backward(d);
    d = bn0_->backward(d);
    d = expand_->backward(d);
  }
  if (has_skip_) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
  }
  return d;
}

void InvertedResidualBlock::visit_convs(const std::function<void(Conv2d&)>& fn) {
  if (expand_) fn(*expand_);
  fn(*dw_);
  fn(*project_);
}

std::vector<Param*> InvertedResidualBlock::params() {
  std::vector<Param*> ps;
  auto absorb = [&ps](Layer* l) {
    if (!l) return;
    for (Param* p : l->params()) ps.push_back(p);
  };
  absorb(expand_.get());
  absorb(bn0_.get());
  absorb(dw_.get());
  absorb(bn1_.get());
  absorb(project_.get());
  absorb(bn2_.get());
  return ps;
}

std::vector<double> InvertedResidualBlock::state() const {
  std::vector<double> s;
  auto absorb = [&s](const Layer* l) {
    if (!l) return;
    const auto t = l->state();
    s.insert(s.end(), t.begin(), t.end());
  };
  absorb(bn0_.get());
  absorb(bn1_.get());
  absorb(bn2_.get());
  return s;
}

void InvertedResidualBlock::set_state(std::span<const double> s) {
  std::size_t off = 0;
  auto feed = [&](Layer* l) {
    if (!l) return;
    const std::size_t n = l->state().size();
    l->set_state(s.subspan(off, n));
    off += n;
  };
  feed(bn0_.get());
  feed(bn1_.get());
  feed(bn2_.get());
}

// ---------------------------------------------------------------------------
// SoftmaxXent

double SoftmaxXent::forward(const Tensor4& logits, std::span<const int> labels,
                            double label_smoothing) {
  const Shape4 s = logits.shape();
  if (s.h != 1 || s.w != 1) throw std::invalid_argument("SoftmaxXent: logits must be (N,K,1,1)");
  if (labels.size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("SoftmaxXent: label count mismatch");
  }
  const int K = s.c;
  smoothing_ = label_smoothing;
  labels_.assign(labels.begin(), labels.end());
  probs_ = Tensor4(s);

  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const double* z = logits.data() + static_cast<std::size_t>(n) * K;
    double zmax = z[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(z[k] - zmax);
    const double log_denom = std::log(denom);
    const int y = labels[n];
    if (y < 0 || y >= K) throw std::invalid_argument("SoftmaxXent: label out of range");
    for (int k = 0; k < K; ++k) {
      const double logp = z[k] - zmax - log_denom;
      probs_.at(n, k, 0, 0) = std::exp(logp);
      const double target = (k == y ? 1.0 - label_smoothing : 0.0) + label_smoothing / K;
      loss -= target * logp;
    }
  }
  return loss / s.n;
}

Tensor4 SoftmaxXent::backward() const {
  const Shape4 s = probs_.shape();
  const int K = s.c;
  Tensor4 dz(s);
  for (int n = 0; n < s.n; ++n) {
    const int y = labels_[n];
    for (int k = 0; k < K; ++k) {
      const double target = (k == y ? 1.0 - smoothing_ : 0.0) + smoothing_ / K;
      dz.at(n, k, 0, 0) = (probs_.at(n, k, 0, 0) - target) / s.n;
    }
  }
  return dz;
}

// ---------------------------------------------------------------------------
// Model

Tensor4 Model::forward(const Tensor4& x, bool training) {
  Tensor4 t = x;
  for (auto& l : layers_) t = l->forward(t, training);
  return t;
}

Tensor4 Model::backward(const Tensor4& dlogits) {
  Tensor4 d = dlogits;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
  return d;
}

std::vector<Param*> Model::params() {
  std::vector<Param*> ps;
  for (auto& l : layers_) {
    for (Param* p : l->params()) ps.push_back(p);
  }
  return ps;
}

void Model::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

std::string Model::first_nonfinite_layer(const Tensor4& x) {
  Tensor4 t = x;
  for (auto& l : layers_) {
    t = l->forward(t, /*training=*/true);
    if (!all_finite(t.flat())) return l->name();
  }
  return {};
}

}  // namespace qpareto::nn
