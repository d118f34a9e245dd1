#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "stnreid/rng.hpp"
#include "stnreid/tensor.hpp"

namespace stnreid {

// Trainable tensor plus its gradient and Adam moments. Frozen parameters
// accept no gradient and are skipped by the optimizer.
template <typename T>
struct ParameterT {
  TensorT<T> value;
  TensorT<T> grad;
  TensorT<T> adam_m;
  TensorT<T> adam_v;
  bool frozen = false;

  ParameterT() = default;

  explicit ParameterT(std::vector<int> dims)
      : value(dims), grad(dims), adam_m(dims), adam_v(std::move(dims)) {}

  void reset_dims(std::vector<int> dims) {
    value = TensorT<T>(dims);
    grad = TensorT<T>(dims);
    adam_m = TensorT<T>(dims);
    adam_v = TensorT<T>(std::move(dims));
  }

  void accumulate(const TensorT<T>& g) {
    if (frozen) return;
    grad.array() += g.array();
  }

  void zero_grad() { grad.zero(); }
};

using Parameter = ParameterT<float>;

template <typename T>
struct ParamRef {
  std::string name;
  ParameterT<T>* param;
};

// Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void kaiming_uniform(TensorT<T>& t, int fan_in, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-limit, limit));
}

// ---------------------------------------------------------------------------
// conv2d: x[N,Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout] -> y[N,Cout,H',W']
// H' = floor((H + 2 pad - kh)/stride) + 1, zero padding. Implemented as
// per-image im2col + GEMM; per-image math keeps results independent of how
// inputs are batched.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const TensorT<T>& x, int n, int kh, int kw, int stride, int pad, int oh_count,
            int ow_count, TensorT<T>& cols) {
  const int cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const long long ohw = static_cast<long long>(oh_count) * ow_count;
  T* col = cols.data();
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const long long k = (static_cast<long long>(c) * kh + ki) * kw + kj;
        T* dst = col + k * ohw;
        for (int oh = 0; oh < oh_count; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) {
            for (int ow = 0; ow < ow_count; ++ow) dst[oh * ow_count + ow] = T(0);
            continue;
          }
          const T* src = &x.at(n, c, ih, 0);
          for (int ow = 0; ow < ow_count; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[oh * ow_count + ow] = (iw >= 0 && iw < w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const TensorT<T>& cols, int n, int kh, int kw, int stride, int pad,
                       int oh_count, int ow_count, TensorT<T>& gx) {
  const int cin = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
  const long long ohw = static_cast<long long>(oh_count) * ow_count;
  const T* col = cols.data();
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const long long k = (static_cast<long long>(c) * kh + ki) * kw + kj;
        const T* src = col + k * ohw;
        for (int oh = 0; oh < oh_count; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          T* dst = &gx.at(n, c, ih, 0);
          for (int ow = 0; ow < ow_count; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) dst[iw] += src[oh * ow_count + ow];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_check(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad) {
  require(x.ndim() == 4 && w.ndim() == 4, "nnops", "conv2d expects rank-4 x and w");
  require(stride >= 1, "nnops", "conv2d stride must be >= 1");
  require(pad >= 0, "nnops", "conv2d pad must be >= 0");
  require(x.dim(1) == w.dim(1), "nnops",
          "conv2d channel mismatch: x " + x.dims_str() + " vs w " + w.dims_str());
  require(x.dim(2) + 2 * pad >= w.dim(2) && x.dim(3) + 2 * pad >= w.dim(3), "nnops",
          "conv2d kernel larger than padded input: x " + x.dims_str() + " vs w " + w.dims_str());
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad) {
  detail::conv2d_check(x, w, stride, pad);
  const int n = x.dim(0), cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (x.dim(2) + 2 * pad - kh) / stride + 1;
  const int ow = (x.dim(3) + 2 * pad - kw) / stride + 1;
  const long long k = static_cast<long long>(x.dim(1)) * kh * kw;
  const long long ohw = static_cast<long long>(oh) * ow;

  TensorT<T> y({n, cout, oh, ow});
  TensorT<T> cols({static_cast<int>(k), static_cast<int>(ohw)});
  auto wmat = w.mat(cout, k);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x, i, kh, kw, stride, pad, oh, ow, cols);
    typename TensorT<T>::MatMap ymat(&y.at(i, 0, 0, 0), cout, ohw);
    ymat.noalias() = wmat * cols.mat(k, ohw);
    for (int c = 0; c < cout; ++c) ymat.row(c).array() += b[c];
  }
  return y;
}

// Returns grad wrt x; accumulates grads into gw/gb when non-null.
template <typename T>
TensorT<T> conv2d_backward(const TensorT<T>& gy, const TensorT<T>& x, const TensorT<T>& w,
                           int stride, int pad, TensorT<T>* gw, TensorT<T>* gb) {
  const int n = x.dim(0), cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = gy.dim(2), ow = gy.dim(3);
  const long long k = static_cast<long long>(x.dim(1)) * kh * kw;
  const long long ohw = static_cast<long long>(oh) * ow;

  TensorT<T> gx(x.dims());
  TensorT<T> cols({static_cast<int>(k), static_cast<int>(ohw)});
  TensorT<T> gcols({static_cast<int>(k), static_cast<int>(ohw)});
  auto wmat = w.mat(cout, k);
  for (int i = 0; i < n; ++i) {
    typename TensorT<T>::ConstMatMap gymat(&gy.at(i, 0, 0, 0), cout, ohw);
    if (gw || gb) {
      detail::im2col(x, i, kh, kw, stride, pad, oh, ow, cols);
      if (gw) gw->mat(cout, k).noalias() += gymat * cols.mat(k, ohw).transpose();
      if (gb)
        for (int c = 0; c < cout; ++c) (*gb)[c] += gymat.row(c).sum();
    }
    gcols.mat(k, ohw).noalias() = wmat.transpose() * gymat;
    detail::col2im_accumulate(gcols, i, kh, kw, stride, pad, oh, ow, gx);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// maxpool 2x2 stride 2. Ties break to the first element in row-major window
// order; the winner index (0..3) is recorded for backward routing.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> maxpool2x2(const TensorT<T>& x, TensorT<int>& argmax) {
  require(x.ndim() == 4, "nnops", "maxpool2x2 expects rank-4 input");
  require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, "nnops",
          "maxpool2x2 requires even H and W, got " + x.dims_str());
  const int n = x.dim(0), c = x.dim(1), oh = x.dim(2) / 2, ow = x.dim(3) / 2;
  TensorT<T> y({n, c, oh, ow});
  argmax = TensorT<int>({n, c, oh, ow});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          const T v[4] = {x.at(i, ch, 2 * r, 2 * q), x.at(i, ch, 2 * r, 2 * q + 1),
                          x.at(i, ch, 2 * r + 1, 2 * q), x.at(i, ch, 2 * r + 1, 2 * q + 1)};
          int best = 0;
          for (int j = 1; j < 4; ++j)
            if (v[j] > v[best]) best = j;
          y.at(i, ch, r, q) = v[best];
          argmax.at(i, ch, r, q) = best;
        }
  return y;
}

template <typename T>
TensorT<T> maxpool2x2_backward(const TensorT<T>& gy, const TensorT<int>& argmax,
                               const std::vector<int>& input_dims) {
  TensorT<T> gx(input_dims);
  const int n = gy.dim(0), c = gy.dim(1), oh = gy.dim(2), ow = gy.dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          const int best = argmax.at(i, ch, r, q);
          gx.at(i, ch, 2 * r + best / 2, 2 * q + best % 2) += gy.at(i, ch, r, q);
        }
  return gx;
}

// ---------------------------------------------------------------------------
// linear: y[N,Dout] = x[N,Din] w[Din,Dout] + b[Dout]
//
// Accumulated k-outer (rank-1 updates), so each output element sums its
// products in the same order for every batch size: batched evaluation is
// bit-identical to row-by-row evaluation, and a weight row is streamed once
// per batch instead of once per row.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  require(x.ndim() == 2 && w.ndim() == 2, "nnops", "linear expects rank-2 x and w");
  require(x.dim(1) == w.dim(0), "nnops",
          "linear dim mismatch: x " + x.dims_str() + " vs w " + w.dims_str());
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  TensorT<T> y({n, dout});
  for (int i = 0; i < n; ++i) {
    typename TensorT<T>::MatMap yrow(&y.at(i, 0), 1, dout);
    yrow = b.mat(1, dout);
  }
  for (int k = 0; k < din; ++k) {
    typename TensorT<T>::ConstMatMap wrow(&w.at(k, 0), 1, dout);
    for (int i = 0; i < n; ++i) {
      typename TensorT<T>::MatMap yrow(&y.at(i, 0), 1, dout);
      yrow.array() += x.at(i, k) * wrow.array();
    }
  }
  return y;
}

template <typename T>
TensorT<T> linear_backward(const TensorT<T>& gy, const TensorT<T>& x, const TensorT<T>& w,
                           TensorT<T>* gw, TensorT<T>* gb) {
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  TensorT<T> gx({n, din});
  auto wmat = w.mat(din, dout);
  for (int i = 0; i < n; ++i) {
    typename TensorT<T>::ConstMatMap gyrow(&gy.at(i, 0), 1, dout);
    typename TensorT<T>::ConstMatMap xrow(&x.at(i, 0), 1, din);
    typename TensorT<T>::MatMap gxrow(&gx.at(i, 0), 1, din);
    gxrow.noalias() = gyrow * wmat.transpose();
    if (gw) gw->mat(din, dout).noalias() += xrow.transpose() * gyrow;
    if (gb) gb->mat(1, dout).array() += gyrow.array();
  }
  return gx;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> y(x.dims());
  y.array() = x.array().max(T(0));
  return y;
}

// Subgradient at exactly 0 is 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& gy, const TensorT<T>& x) {
  TensorT<T> gx(x.dims());
  for (long long i = 0; i < x.numel(); ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
  return gx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d. Train mode normalizes by batch statistics (biased variance)
// and updates running stats with momentum 0.1 (unbiased variance, so eval
// matches the usual convention); eval mode uses running stats per item.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNorm2d {
  ParameterT<T> gamma, beta;
  TensorT<T> running_mean, running_var;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  struct Acts {
    TensorT<T> xhat;
    std::vector<T> inv_std;  // per channel
    bool train = false;
  };

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma({channels}), beta({channels}), running_mean({channels}, T(0)),
        running_var({channels}, T(1)) {
    gamma.value.fill(T(1));
  }

  int channels() const { return gamma.value.dim(0); }

  TensorT<T> forward(const TensorT<T>& x, bool train, Acts& acts) {
    require(x.ndim() == 4 && x.dim(1) == channels(), "nnops",
            "batchnorm2d channel mismatch: " + x.dims_str());
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const long long m = static_cast<long long>(n) * h * w;
    if (train) require(m >= 2, "nnops", "batchnorm2d train mode needs N*H*W >= 2");

    TensorT<T> y(x.dims());
    acts.xhat = TensorT<T>(x.dims());
    acts.inv_std.assign(static_cast<size_t>(c), T(0));
    acts.train = train;

    for (int ch = 0; ch < c; ++ch) {
      T mean, inv_std;
      if (train) {
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i)
          for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) {
              double v = static_cast<double>(x.at(i, ch, r, q));
              sum += v;
              sq += v * v;
            }
        double mu = sum / static_cast<double>(m);
        double var = sq / static_cast<double>(m) - mu * mu;
        if (var < 0) var = 0;
        mean = static_cast<T>(mu);
        inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        double var_unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * static_cast<T>(mu);
        running_var[ch] =
            (T(1) - momentum) * running_var[ch] + momentum * static_cast<T>(var_unbiased);
      } else {
        mean = running_mean[ch];
        inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) +
                                                 static_cast<double>(eps)));
      }
      acts.inv_std[static_cast<size_t>(ch)] = inv_std;
      const T g = gamma.value[ch], bta = beta.value[ch];
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) {
            T xh = (x.at(i, ch, r, q) - mean) * inv_std;
            acts.xhat.at(i, ch, r, q) = xh;
            y.at(i, ch, r, q) = g * xh + bta;
          }
    }
    return y;
  }

  TensorT<T> backward(const Acts& acts, const TensorT<T>& gy) {
    const int n = gy.dim(0), c = gy.dim(1), h = gy.dim(2), w = gy.dim(3);
    const long long m = static_cast<long long>(n) * h * w;
    TensorT<T> gx(gy.dims());
    for (int ch = 0; ch < c; ++ch) {
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) {
            double g = static_cast<double>(gy.at(i, ch, r, q));
            sum_gy += g;
            sum_gy_xhat += g * static_cast<double>(acts.xhat.at(i, ch, r, q));
          }
      if (!gamma.frozen) {
        gamma.grad[ch] += static_cast<T>(sum_gy_xhat);
        beta.grad[ch] += static_cast<T>(sum_gy);
      }
      const T g = gamma.value[ch];
      const T inv_std = acts.inv_std[static_cast<size_t>(ch)];
      if (acts.train) {
        const T mean_gy = static_cast<T>(sum_gy / static_cast<double>(m));
        const T mean_gy_xhat = static_cast<T>(sum_gy_xhat / static_cast<double>(m));
        for (int i = 0; i < n; ++i)
          for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q)
              gx.at(i, ch, r, q) =
                  g * inv_std *
                  (gy.at(i, ch, r, q) - mean_gy - acts.xhat.at(i, ch, r, q) * mean_gy_xhat);
      } else {
        for (int i = 0; i < n; ++i)
          for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) gx.at(i, ch, r, q) = g * inv_std * gy.at(i, ch, r, q);
      }
    }
    return gx;
  }

  void set_frozen(bool f) {
    gamma.frozen = f;
    beta.frozen = f;
  }
};

// ---------------------------------------------------------------------------
// Adam with L2 added to the gradient before the moment updates. Gradients of
// updated parameters are zeroed afterward; frozen parameters are untouched.
// ---------------------------------------------------------------------------

template <typename T>
void adam_step(const std::vector<ParamRef<T>>& params, double lr, double beta1, double beta2,
               double eps, double weight_decay, int t) {
  require(t >= 1, "nnops", "adam_step needs t >= 1");
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (const auto& ref : params) {
    ParameterT<T>& p = *ref.param;
    if (p.frozen) continue;
    for (long long i = 0; i < p.value.numel(); ++i) {
      double g = static_cast<double>(p.grad[i]);
      if (!std::isfinite(g)) fail("nnops", "non-finite gradient in parameter " + ref.name);
      g += weight_decay * static_cast<double>(p.value[i]);
      double m = beta1 * static_cast<double>(p.adam_m[i]) + (1.0 - beta1) * g;
      double v = beta2 * static_cast<double>(p.adam_v[i]) + (1.0 - beta2) * g * g;
      p.adam_m[i] = static_cast<T>(m);
      p.adam_v[i] = static_cast<T>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) -
                                  lr * mhat / (std::sqrt(vhat) + eps));
    }
    p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Layer wrappers holding parameters; forward records what backward needs in
// an Acts struct so several passes can be in flight at once (the three ReID
// passes per step share parameters but not activations).
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
  ParameterT<T> w, b;
  int stride = 1, pad = 0;

  struct Acts {
    TensorT<T> input;
  };

  Conv2dLayer() = default;
  Conv2dLayer(int cout, int cin, int kh, int kw, int stride_, int pad_, Rng& rng)
      : w({cout, cin, kh, kw}), b({cout}), stride(stride_), pad(pad_) {
    kaiming_uniform(w.value, cin * kh * kw, rng);
  }

  TensorT<T> forward(const TensorT<T>& x, Acts& acts) const {
    acts.input = x;
    return conv2d(x, w.value, b.value, stride, pad);
  }

  TensorT<T> backward(const Acts& acts, const TensorT<T>& gy) {
    return conv2d_backward(gy, acts.input, w.value, stride, pad, w.frozen ? nullptr : &w.grad,
                           b.frozen ? nullptr : &b.grad);
  }

  void set_frozen(bool f) {
    w.frozen = f;
    b.frozen = f;
  }
};

template <typename T>
struct LinearLayer {
  ParameterT<T> w, b;

  struct Acts {
    TensorT<T> input;
  };

  LinearLayer() = default;
  LinearLayer(int din, int dout, Rng& rng) : w({din, dout}), b({dout}) {
    kaiming_uniform(w.value, din, rng);
  }

  TensorT<T> forward(const TensorT<T>& x, Acts& acts) const {
    acts.input = x;
    return linear(x, w.value, b.value);
  }

  TensorT<T> backward(const Acts& acts, const TensorT<T>& gy) {
    return linear_backward(gy, acts.input, w.value, w.frozen ? nullptr : &w.grad,
                           b.frozen ? nullptr : &b.grad);
  }

  void set_frozen(bool f) {
    w.frozen = f;
    b.frozen = f;
  }
};

}  // namespace stnreid
