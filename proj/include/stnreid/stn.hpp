#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "stnreid/nnops.hpp"

namespace stnreid {

// Identity affine parameters [t11, t12, t13, t21, t22, t23].
template <typename T>
TensorT<T> identity_theta(int batch) {
  TensorT<T> theta({batch, 6});
  for (int n = 0; n < batch; ++n) {
    theta.at(n, 0) = T(1);
    theta.at(n, 4) = T(1);
  }
  return theta;
}

// Channel concatenation, holistic channels first.
template <typename T>
TensorT<T> concat_pair(const TensorT<T>& holistic, const TensorT<T>& partial) {
  require(holistic.ndim() == 4 && holistic.same_dims(partial), "stn",
          "concat_pair dim mismatch: " + holistic.dims_str() + " vs " + partial.dims_str());
  const int n = holistic.dim(0), c = holistic.dim(1), h = holistic.dim(2), w = holistic.dim(3);
  TensorT<T> out({n, 2 * c, h, w});
  const long long chw = static_cast<long long>(c) * h * w;
  for (int i = 0; i < n; ++i) {
    std::copy(&holistic.at(i, 0, 0, 0), &holistic.at(i, 0, 0, 0) + chw, &out.at(i, 0, 0, 0));
    std::copy(&partial.at(i, 0, 0, 0), &partial.at(i, 0, 0, 0) + chw, &out.at(i, c, 0, 0));
  }
  return out;
}

template <typename T>
void split_pair_grad(const TensorT<T>& gpair, TensorT<T>& gholistic, TensorT<T>& gpartial) {
  const int n = gpair.dim(0), c2 = gpair.dim(1), h = gpair.dim(2), w = gpair.dim(3);
  const int c = c2 / 2;
  gholistic = TensorT<T>({n, c, h, w});
  gpartial = TensorT<T>({n, c, h, w});
  const long long chw = static_cast<long long>(c) * h * w;
  for (int i = 0; i < n; ++i) {
    std::copy(&gpair.at(i, 0, 0, 0), &gpair.at(i, 0, 0, 0) + chw, &gholistic.at(i, 0, 0, 0));
    std::copy(&gpair.at(i, c, 0, 0), &gpair.at(i, c, 0, 0) + chw, &gpartial.at(i, 0, 0, 0));
  }
}

// ---------------------------------------------------------------------------
// Grid generator. Target coordinates form a regular grid over [-1,1]^2
// (x along width, y along height, endpoints inclusive); source coordinates
// are [x_s; y_s] = A_theta [x_t; y_t; 1]. Grid layout: [N, H, W, 2] = (x, y).
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> grid_generate(const TensorT<T>& theta, int h_out, int w_out) {
  require(theta.ndim() == 2 && theta.dim(1) == 6, "stn", "theta must be [N,6]");
  require(h_out >= 2 && w_out >= 2, "stn", "grid size must be >= 2");
  const int n = theta.dim(0);
  TensorT<T> grid({n, h_out, w_out, 2});
  for (int i = 0; i < n; ++i) {
    const T t11 = theta.at(i, 0), t12 = theta.at(i, 1), t13 = theta.at(i, 2);
    const T t21 = theta.at(i, 3), t22 = theta.at(i, 4), t23 = theta.at(i, 5);
    for (int r = 0; r < h_out; ++r) {
      const T yt = T(-1) + T(2) * static_cast<T>(r) / static_cast<T>(h_out - 1);
      for (int q = 0; q < w_out; ++q) {
        const T xt = T(-1) + T(2) * static_cast<T>(q) / static_cast<T>(w_out - 1);
        grid.at(i, r, q, 0) = t11 * xt + t12 * yt + t13;
        grid.at(i, r, q, 1) = t21 * xt + t22 * yt + t23;
      }
    }
  }
  return grid;
}

template <typename T>
TensorT<T> grid_generate_backward(const TensorT<T>& ggrid) {
  const int n = ggrid.dim(0), h_out = ggrid.dim(1), w_out = ggrid.dim(2);
  TensorT<T> gtheta({n, 6});
  for (int i = 0; i < n; ++i) {
    double acc[6] = {0, 0, 0, 0, 0, 0};
    for (int r = 0; r < h_out; ++r) {
      const double yt = -1.0 + 2.0 * r / (h_out - 1);
      for (int q = 0; q < w_out; ++q) {
        const double xt = -1.0 + 2.0 * q / (w_out - 1);
        const double gx = ggrid.at(i, r, q, 0);
        const double gy = ggrid.at(i, r, q, 1);
        acc[0] += gx * xt;
        acc[1] += gx * yt;
        acc[2] += gx;
        acc[3] += gy * xt;
        acc[4] += gy * yt;
        acc[5] += gy;
      }
    }
    for (int j = 0; j < 6; ++j) gtheta.at(i, j) = static_cast<T>(acc[j]);
  }
  return gtheta;
}

// ---------------------------------------------------------------------------
// Bilinear sampling, align-corners convention: x=-1 maps to column 0 and
// x=+1 to column W-1. Out-of-frame taps contribute zero.
//
// Unprojected coordinates within the grid's own quantization radius of a
// pixel center are rounded onto it: a [-1,1] coordinate stored in T cannot
// distinguish such points from the exact center, and without the rounding
// an identity grid would smear each pixel by one ulp of the coordinate.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T unproject(T coord, T half_extent) {
  T p = (coord + T(1)) * half_extent;
  const T snap = std::round(p);
  if (std::abs(p - snap) <= T(4) * std::numeric_limits<T>::epsilon() * half_extent) p = snap;
  return p;
}

}  // namespace detail

template <typename T>
TensorT<T> bilinear_sample(const TensorT<T>& src, const TensorT<T>& grid) {
  require(src.ndim() == 4 && grid.ndim() == 4 && grid.dim(3) == 2, "stn",
          "bilinear_sample expects src [N,C,H,W] and grid [N,H,W,2]");
  require(src.dim(0) == grid.dim(0), "stn", "bilinear_sample batch mismatch");
  const int n = src.dim(0), c = src.dim(1), h = src.dim(2), w = src.dim(3);
  const int ho = grid.dim(1), wo = grid.dim(2);
  TensorT<T> out({n, c, ho, wo});
  const T sx = static_cast<T>(w - 1) / T(2);
  const T sy = static_cast<T>(h - 1) / T(2);
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < ho; ++r) {
      for (int q = 0; q < wo; ++q) {
        const T px = detail::unproject(grid.at(i, r, q, 0), sx);
        const T py = detail::unproject(grid.at(i, r, q, 1), sy);
        const int x0 = static_cast<int>(std::floor(px));
        const int y0 = static_cast<int>(std::floor(py));
        const T wx = px - static_cast<T>(x0);
        const T wy = py - static_cast<T>(y0);
        const bool x0v = x0 >= 0 && x0 < w, x1v = x0 + 1 >= 0 && x0 + 1 < w;
        const bool y0v = y0 >= 0 && y0 < h, y1v = y0 + 1 >= 0 && y0 + 1 < h;
        for (int ch = 0; ch < c; ++ch) {
          const T p00 = (x0v && y0v) ? src.at(i, ch, y0, x0) : T(0);
          const T p01 = (x1v && y0v) ? src.at(i, ch, y0, x0 + 1) : T(0);
          const T p10 = (x0v && y1v) ? src.at(i, ch, y0 + 1, x0) : T(0);
          const T p11 = (x1v && y1v) ? src.at(i, ch, y0 + 1, x0 + 1) : T(0);
          out.at(i, ch, r, q) = (T(1) - wy) * ((T(1) - wx) * p00 + wx * p01) +
                                wy * ((T(1) - wx) * p10 + wx * p11);
        }
      }
    }
  }
  return out;
}

// Accumulates into gsrc / ggrid when non-null (tensors must be pre-sized).
template <typename T>
void bilinear_sample_backward(const TensorT<T>& gy, const TensorT<T>& src, const TensorT<T>& grid,
                              TensorT<T>* gsrc, TensorT<T>* ggrid) {
  const int n = src.dim(0), c = src.dim(1), h = src.dim(2), w = src.dim(3);
  const int ho = grid.dim(1), wo = grid.dim(2);
  const T sx = static_cast<T>(w - 1) / T(2);
  const T sy = static_cast<T>(h - 1) / T(2);
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < ho; ++r) {
      for (int q = 0; q < wo; ++q) {
        const T px = detail::unproject(grid.at(i, r, q, 0), sx);
        const T py = detail::unproject(grid.at(i, r, q, 1), sy);
        const int x0 = static_cast<int>(std::floor(px));
        const int y0 = static_cast<int>(std::floor(py));
        const T wx = px - static_cast<T>(x0);
        const T wy = py - static_cast<T>(y0);
        const bool x0v = x0 >= 0 && x0 < w, x1v = x0 + 1 >= 0 && x0 + 1 < w;
        const bool y0v = y0 >= 0 && y0 < h, y1v = y0 + 1 >= 0 && y0 + 1 < h;
        T gpx = T(0), gpy = T(0);
        for (int ch = 0; ch < c; ++ch) {
          const T g = gy.at(i, ch, r, q);
          const T p00 = (x0v && y0v) ? src.at(i, ch, y0, x0) : T(0);
          const T p01 = (x1v && y0v) ? src.at(i, ch, y0, x0 + 1) : T(0);
          const T p10 = (x0v && y1v) ? src.at(i, ch, y0 + 1, x0) : T(0);
          const T p11 = (x1v && y1v) ? src.at(i, ch, y0 + 1, x0 + 1) : T(0);
          if (gsrc) {
            if (x0v && y0v) gsrc->at(i, ch, y0, x0) += g * (T(1) - wx) * (T(1) - wy);
            if (x1v && y0v) gsrc->at(i, ch, y0, x0 + 1) += g * wx * (T(1) - wy);
            if (x0v && y1v) gsrc->at(i, ch, y0 + 1, x0) += g * (T(1) - wx) * wy;
            if (x1v && y1v) gsrc->at(i, ch, y0 + 1, x0 + 1) += g * wx * wy;
          }
          gpx += g * ((T(1) - wy) * (p01 - p00) + wy * (p11 - p10));
          gpy += g * ((T(1) - wx) * (p10 - p00) + wx * (p11 - p01));
        }
        if (ggrid) {
          ggrid->at(i, r, q, 0) += gpx * sx;
          ggrid->at(i, r, q, 1) += gpy * sy;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Localization network: Conv(7x7,16,s2,p3)+BN+ReLU -> MaxPool2 ->
// Conv(3x3,32,s2,p1)+BN+ReLU -> MaxPool2 -> FC 512 -> FC 128 -> FC 32 -> FC 6.
// The final FC is a regression layer with no activation; it starts at zero
// weights with identity bias so a fresh network outputs identity theta.
// ---------------------------------------------------------------------------

template <typename T>
struct LocalizationNet {
  int in_channels = 6, in_h = 256, in_w = 128;
  int flat_len = 0;
  Conv2dLayer<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  LinearLayer<T> fc1, fc2, fc3, fc4;

  struct Acts {
    typename Conv2dLayer<T>::Acts conv1a, conv2a;
    typename BatchNorm2d<T>::Acts bn1a, bn2a;
    TensorT<T> z1, z2;        // pre-relu conv stacks
    TensorT<int> pool1_idx, pool2_idx;
    std::vector<int> pool1_in_dims, pool2_in_dims;
    TensorT<T> pooled1, pooled2;  // post-pool tensors (pooled2 feeds flatten)
    typename LinearLayer<T>::Acts fc1a, fc2a, fc3a, fc4a;
    TensorT<T> zf1, zf2, zf3;  // pre-relu fc outputs
    TensorT<T> theta;
  };

  LocalizationNet() = default;

  LocalizationNet(int channels, int h, int w, Rng& rng)
      : in_channels(channels), in_h(h), in_w(w) {
    conv1 = Conv2dLayer<T>(16, channels, 7, 7, 2, 3, rng);
    bn1 = BatchNorm2d<T>(16);
    conv2 = Conv2dLayer<T>(32, 16, 3, 3, 2, 1, rng);
    bn2 = BatchNorm2d<T>(32);
    const int h1 = (h + 6 - 7) / 2 + 1, w1 = (w + 6 - 7) / 2 + 1;
    require(h1 % 2 == 0 && w1 % 2 == 0, "stn", "localization net needs pool-compatible sizes");
    const int h2 = ((h1 / 2) + 2 - 3) / 2 + 1, w2 = ((w1 / 2) + 2 - 3) / 2 + 1;
    require(h2 % 2 == 0 && w2 % 2 == 0, "stn", "localization net needs pool-compatible sizes");
    flat_len = 32 * (h2 / 2) * (w2 / 2);
    fc1 = LinearLayer<T>(flat_len, 512, rng);
    fc2 = LinearLayer<T>(512, 128, rng);
    fc3 = LinearLayer<T>(128, 32, rng);
    fc4 = LinearLayer<T>(32, 6, rng);
    fc4.w.value.zero();
    fc4.b.value.zero();
    fc4.b.value[0] = T(1);
    fc4.b.value[4] = T(1);
  }

  TensorT<T> forward(const TensorT<T>& pair, bool train, Acts& acts) {
    require(pair.ndim() == 4 && pair.dim(1) == in_channels, "stn",
            "localization input channel mismatch: " + pair.dims_str());
    TensorT<T> c1 = conv1.forward(pair, acts.conv1a);
    acts.z1 = bn1.forward(c1, train, acts.bn1a);
    TensorT<T> r1 = relu(acts.z1);
    acts.pool1_in_dims = r1.dims();
    acts.pooled1 = maxpool2x2(r1, acts.pool1_idx);

    TensorT<T> c2 = conv2.forward(acts.pooled1, acts.conv2a);
    acts.z2 = bn2.forward(c2, train, acts.bn2a);
    TensorT<T> r2 = relu(acts.z2);
    acts.pool2_in_dims = r2.dims();
    acts.pooled2 = maxpool2x2(r2, acts.pool2_idx);

    const int n = pair.dim(0);
    const long long flat = acts.pooled2.numel() / n;
    require(flat == flat_len, "stn",
            "flatten length mismatch: got " + std::to_string(flat) + ", fc1 expects " +
                std::to_string(flat_len));
    TensorT<T> flatx = acts.pooled2.reshaped({n, flat_len});

    acts.zf1 = fc1.forward(flatx, acts.fc1a);
    TensorT<T> a1 = relu(acts.zf1);
    acts.zf2 = fc2.forward(a1, acts.fc2a);
    TensorT<T> a2 = relu(acts.zf2);
    acts.zf3 = fc3.forward(a2, acts.fc3a);
    TensorT<T> a3 = relu(acts.zf3);
    acts.theta = fc4.forward(a3, acts.fc4a);
    return acts.theta;
  }

  TensorT<T> backward(const Acts& acts, const TensorT<T>& gtheta) {
    TensorT<T> g = fc4.backward(acts.fc4a, gtheta);
    g = relu_backward(g, acts.zf3);
    g = fc3.backward(acts.fc3a, g);
    g = relu_backward(g, acts.zf2);
    g = fc2.backward(acts.fc2a, g);
    g = relu_backward(g, acts.zf1);
    g = fc1.backward(acts.fc1a, g);

    TensorT<T> gpool2 = g.reshaped(acts.pooled2.dims());
    TensorT<T> gr2 = maxpool2x2_backward(gpool2, acts.pool2_idx, acts.pool2_in_dims);
    gr2 = relu_backward(gr2, acts.z2);
    gr2 = bn2.backward(acts.bn2a, gr2);
    TensorT<T> gpool1 = conv2.backward(acts.conv2a, gr2);

    TensorT<T> gr1 = maxpool2x2_backward(gpool1, acts.pool1_idx, acts.pool1_in_dims);
    gr1 = relu_backward(gr1, acts.z1);
    gr1 = bn1.backward(acts.bn1a, gr1);
    return conv1.backward(acts.conv1a, gr1);
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, ParameterT<T>&)>& fn) {
    fn(prefix + "conv1.w", conv1.w);
    fn(prefix + "conv1.b", conv1.b);
    fn(prefix + "bn1.gamma", bn1.gamma);
    fn(prefix + "bn1.beta", bn1.beta);
    fn(prefix + "conv2.w", conv2.w);
    fn(prefix + "conv2.b", conv2.b);
    fn(prefix + "bn2.gamma", bn2.gamma);
    fn(prefix + "bn2.beta", bn2.beta);
    fn(prefix + "fc1.w", fc1.w);
    fn(prefix + "fc1.b", fc1.b);
    fn(prefix + "fc2.w", fc2.w);
    fn(prefix + "fc2.b", fc2.b);
    fn(prefix + "fc3.w", fc3.w);
    fn(prefix + "fc3.b", fc3.b);
    fn(prefix + "fc4.w", fc4.w);
    fn(prefix + "fc4.b", fc4.b);
  }

  // Running stats travel with checkpoints even though they are not trained.
  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    fn(prefix + "bn1.running_mean", bn1.running_mean);
    fn(prefix + "bn1.running_var", bn1.running_var);
    fn(prefix + "bn2.running_mean", bn2.running_mean);
    fn(prefix + "bn2.running_var", bn2.running_var);
  }

  void set_frozen(bool f) {
    conv1.set_frozen(f);
    conv2.set_frozen(f);
    bn1.set_frozen(f);
    bn2.set_frozen(f);
    fc1.set_frozen(f);
    fc2.set_frozen(f);
    fc3.set_frozen(f);
    fc4.set_frozen(f);
  }
};

// ---------------------------------------------------------------------------
// Full STN pass: concat -> localization -> grid -> sample. The affined image
// is sampled from the holistic image only.
// ---------------------------------------------------------------------------

template <typename T>
struct StnActs {
  typename LocalizationNet<T>::Acts loc;
  TensorT<T> holistic;  // bilinear source, cached for backward
  TensorT<T> theta;
  TensorT<T> grid;
};

template <typename T>
TensorT<T> stn_forward(LocalizationNet<T>& net, const TensorT<T>& holistic,
                       const TensorT<T>& partial, bool train, StnActs<T>& acts) {
  TensorT<T> pair = concat_pair(holistic, partial);
  acts.theta = net.forward(pair, train, acts.loc);
  acts.grid = grid_generate(acts.theta, holistic.dim(2), holistic.dim(3));
  acts.holistic = holistic;
  return bilinear_sample(holistic, acts.grid);
}

template <typename T>
struct StnInputGrads {
  TensorT<T> holistic;
  TensorT<T> partial;
};

template <typename T>
StnInputGrads<T> stn_backward(LocalizationNet<T>& net, const StnActs<T>& acts,
                              const TensorT<T>& gaffined) {
  TensorT<T> gsrc(acts.holistic.dims());
  TensorT<T> ggrid(acts.grid.dims());
  bilinear_sample_backward(gaffined, acts.holistic, acts.grid, &gsrc, &ggrid);
  TensorT<T> gtheta = grid_generate_backward(ggrid);
  TensorT<T> gpair = net.backward(acts.loc, gtheta);
  StnInputGrads<T> grads;
  split_pair_grad(gpair, grads.holistic, grads.partial);
  grads.holistic.array() += gsrc.array();
  return grads;
}

}  // namespace stnreid
