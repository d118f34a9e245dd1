#include "stnreid/battery.hpp"

#include <cmath>
#include <iostream>

#include "stnreid/reid.hpp"
#include "stnreid/stn.hpp"

namespace stnreid {

namespace {

TensorD rand_tensor(std::vector<int> dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(dims));
  for (long long i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Smooth test image: low-frequency pattern upsampled bilinearly, so second
// differences vanish almost everywhere and interpolation kinks stay tiny.
// With a 2x2 coarse grid the image is one global bilinear patch and sampling
// it is smooth everywhere inside the frame.
TensorD smooth_image(int c, int h, int w, Rng& rng, int ch = 3, int cw = 2) {
  TensorD out({1, c, h, w});
  for (int cc = 0; cc < c; ++cc) {
    double coarse[4][4];
    for (int i = 0; i < ch; ++i)
      for (int j = 0; j < cw; ++j) coarse[i][j] = rng.uniform(0.1, 0.9);
    for (int r = 0; r < h; ++r) {
      const double py = static_cast<double>(r) * (ch - 1) / (h - 1);
      const int y0 = std::min(static_cast<int>(py), ch - 1), y1 = std::min(y0 + 1, ch - 1);
      const double wy = py - y0;
      for (int q = 0; q < w; ++q) {
        const double px = static_cast<double>(q) * (cw - 1) / (w - 1);
        const int x0 = std::min(static_cast<int>(px), cw - 1), x1 = std::min(x0 + 1, cw - 1);
        const double wx = px - x0;
        out.at(0, cc, r, q) = (1 - wy) * ((1 - wx) * coarse[y0][x0] + wx * coarse[y0][x1]) +
                              wy * ((1 - wx) * coarse[y1][x0] + wx * coarse[y1][x1]);
      }
    }
  }
  return out;
}

double project(const TensorD& r, const TensorD& y) {
  double s = 0.0;
  for (long long i = 0; i < y.numel(); ++i) s += r[i] * y[i];
  return s;
}

// Fractional parts of sampling pixel coordinates must clear integer cell
// boundaries so finite differences stay inside one linear piece.
bool grid_clean(const TensorD& grid, int src_h, int src_w, double clearance) {
  const double sx = (src_w - 1) / 2.0, sy = (src_h - 1) / 2.0;
  for (long long i = 0; i < grid.numel(); i += 2) {
    const double px = (grid[i] + 1.0) * sx;
    const double py = (grid[i + 1] + 1.0) * sy;
    if (std::abs(px - std::round(px)) < clearance) return false;
    if (std::abs(py - std::round(py)) < clearance) return false;
  }
  return true;
}

bool acts_clean(const typename LocalizationNet<double>::Acts& acts, double z_clear,
                double pool_gap) {
  auto relu_ok = [&](const TensorD& z) {
    for (long long i = 0; i < z.numel(); ++i)
      if (std::abs(z[i]) < z_clear) return false;
    return true;
  };
  if (!relu_ok(acts.z1) || !relu_ok(acts.z2) || !relu_ok(acts.zf1) || !relu_ok(acts.zf2) ||
      !relu_ok(acts.zf3))
    return false;

  auto pool_ok = [&](const TensorD& z, const std::vector<int>& dims) {
    // post-relu values feed the pool; check the top-2 gap per window
    const int n = dims[0], c = dims[1], h = dims[2], w = dims[3];
    for (int i = 0; i < n; ++i)
      for (int cc = 0; cc < c; ++cc)
        for (int r = 0; r + 1 < h; r += 2)
          for (int q = 0; q + 1 < w; q += 2) {
            double v[4] = {std::max(0.0, z.at(i, cc, r, q)), std::max(0.0, z.at(i, cc, r, q + 1)),
                           std::max(0.0, z.at(i, cc, r + 1, q)),
                           std::max(0.0, z.at(i, cc, r + 1, q + 1))};
            double top = v[0], second = -1e300;
            for (int j = 1; j < 4; ++j) {
              if (v[j] > top) {
                second = top;
                top = v[j];
              } else if (v[j] > second) {
                second = v[j];
              }
            }
            if (top > 0.0 && top - second < pool_gap) return false;
          }
    return true;
  };
  return pool_ok(acts.z1, acts.pool1_in_dims) && pool_ok(acts.z2, acts.pool2_in_dims);
}

using CaseFn = GradCheckReport (*)(uint64_t seed, double rel_tol);

GradCheckReport check_relu(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD x;
  do {
    x = rand_tensor({2, 3, 4, 5}, rng);
  } while ([&] {
    for (long long i = 0; i < x.numel(); ++i)
      if (std::abs(x[i]) < 0.05) return true;
    return false;
  }());
  TensorD r = rand_tensor(x.dims(), rng);
  auto value = [&](const std::vector<TensorD>& in) { return project(r, relu(in[0])); };
  auto grads = [&](const std::vector<TensorD>& in) {
    return std::vector<TensorD>{relu_backward(r, in[0])};
  };
  return gradient_check(value, grads, {x}, 1e-3, rel_tol);
}

GradCheckReport check_linear(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD x = rand_tensor({3, 5}, rng);
  TensorD w = rand_tensor({5, 4}, rng);
  TensorD b = rand_tensor({4}, rng);
  TensorD r = rand_tensor({3, 4}, rng);
  auto value = [&](const std::vector<TensorD>& in) {
    return project(r, linear(in[0], in[1], in[2]));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD gw({5, 4}), gb({4});
    TensorD gx = linear_backward(r, in[0], in[1], &gw, &gb);
    return std::vector<TensorD>{gx, gw, gb};
  };
  return gradient_check(value, grads, {x, w, b}, 1e-3, rel_tol);
}

GradCheckReport check_conv2d(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  const int strides[3] = {1, 1, 2};
  const int pads[3] = {0, 1, 1};
  const int variant = static_cast<int>(seed % 3);
  const int stride = strides[variant], pad = pads[variant];
  TensorD x = rand_tensor({2, 3, 6, 6}, rng);
  TensorD w = rand_tensor({4, 3, 3, 3}, rng);
  TensorD b = rand_tensor({4}, rng);
  TensorD probe = conv2d(x, w, b, stride, pad);
  TensorD r = rand_tensor(probe.dims(), rng);
  auto value = [&](const std::vector<TensorD>& in) {
    return project(r, conv2d(in[0], in[1], in[2], stride, pad));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD gw(in[1].dims()), gb(in[2].dims());
    TensorD gx = conv2d_backward(r, in[0], in[1], stride, pad, &gw, &gb);
    return std::vector<TensorD>{gx, gw, gb};
  };
  return gradient_check(value, grads, {x, w, b}, 1e-3, rel_tol);
}

GradCheckReport check_maxpool(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD x;
  bool clean = false;
  while (!clean) {
    x = rand_tensor({2, 2, 4, 4}, rng);
    clean = true;
    for (int n = 0; n < 2 && clean; ++n)
      for (int c = 0; c < 2 && clean; ++c)
        for (int r = 0; r < 4 && clean; r += 2)
          for (int q = 0; q < 4 && clean; q += 2) {
            double v[4] = {x.at(n, c, r, q), x.at(n, c, r, q + 1), x.at(n, c, r + 1, q),
                          x.at(n, c, r + 1, q + 1)};
            std::sort(v, v + 4);
            if (v[3] - v[2] < 1e-2) clean = false;
          }
  }
  TensorD r = rand_tensor({2, 2, 2, 2}, rng);
  auto value = [&](const std::vector<TensorD>& in) {
    TensorT<int> idx;
    return project(r, maxpool2x2(in[0], idx));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorT<int> idx;
    maxpool2x2(in[0], idx);
    return std::vector<TensorD>{maxpool2x2_backward(r, idx, in[0].dims())};
  };
  return gradient_check(value, grads, {x}, 1e-3, rel_tol);
}

GradCheckReport check_batchnorm(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD x = rand_tensor({3, 4, 2, 2}, rng);
  TensorD gamma = rand_tensor({4}, rng, 0.5, 1.5);
  TensorD beta = rand_tensor({4}, rng, -0.5, 0.5);
  TensorD r = rand_tensor(x.dims(), rng);
  auto run = [&](const std::vector<TensorD>& in, bool want_grads,
                 std::vector<TensorD>* out_grads) {
    BatchNorm2d<double> bn(4);
    bn.gamma.value = in[1];
    bn.beta.value = in[2];
    typename BatchNorm2d<double>::Acts acts;
    TensorD y = bn.forward(in[0], true, acts);
    if (want_grads) {
      TensorD gx = bn.backward(acts, r);
      *out_grads = {gx, bn.gamma.grad, bn.beta.grad};
    }
    return project(r, y);
  };
  auto value = [&](const std::vector<TensorD>& in) { return run(in, false, nullptr); };
  auto grads = [&](const std::vector<TensorD>& in) {
    std::vector<TensorD> g;
    run(in, true, &g);
    return g;
  };
  return gradient_check(value, grads, {x, gamma, beta}, 1e-3, rel_tol);
}

GradCheckReport check_grid_generate(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD theta = rand_tensor({2, 6}, rng);
  TensorD r = rand_tensor({2, 5, 4, 2}, rng);
  auto value = [&](const std::vector<TensorD>& in) {
    return project(r, grid_generate(in[0], 5, 4));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    (void)in;
    return std::vector<TensorD>{grid_generate_backward(r)};
  };
  return gradient_check(value, grads, {theta}, 1e-3, rel_tol);
}

GradCheckReport check_bilinear(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  const int h = 6, w = 5, ho = 4, wo = 4;
  TensorD src = smooth_image(2, h, w, rng);
  // pixel coordinates with fractional part in [0.1, 0.9], some out of frame
  TensorD grid({1, ho, wo, 2});
  for (int r2 = 0; r2 < ho; ++r2)
    for (int q = 0; q < wo; ++q) {
      const double px = (rng.uniform_int(w + 2) - 1) + rng.uniform(0.1, 0.9);
      const double py = (rng.uniform_int(h + 2) - 1) + rng.uniform(0.1, 0.9);
      grid.at(0, r2, q, 0) = px / ((w - 1) / 2.0) - 1.0;
      grid.at(0, r2, q, 1) = py / ((h - 1) / 2.0) - 1.0;
    }
  TensorD r = rand_tensor({1, 2, ho, wo}, rng);
  auto value = [&](const std::vector<TensorD>& in) {
    return project(r, bilinear_sample(in[0], in[1]));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD gsrc(in[0].dims()), ggrid(in[1].dims());
    bilinear_sample_backward(r, in[0], in[1], &gsrc, &ggrid);
    return std::vector<TensorD>{gsrc, ggrid};
  };
  return gradient_check(value, grads, {src, grid}, 1e-4, rel_tol);
}

GradCheckReport check_theta_sample(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  const int h = 8, w = 6;
  TensorD src = smooth_image(2, h, w, rng);
  TensorD theta({1, 6});
  TensorD r = rand_tensor({1, 2, h, w}, rng);
  bool clean = false;
  while (!clean) {
    theta.at(0, 0) = rng.uniform(0.6, 0.9);
    theta.at(0, 1) = rng.uniform(-0.1, 0.1);
    theta.at(0, 2) = rng.uniform(-0.2, 0.2);
    theta.at(0, 3) = rng.uniform(-0.1, 0.1);
    theta.at(0, 4) = rng.uniform(0.6, 0.9);
    theta.at(0, 5) = rng.uniform(-0.2, 0.2);
    clean = grid_clean(grid_generate(theta, h, w), h, w, 0.02);
  }
  auto value = [&](const std::vector<TensorD>& in) {
    return project(r, bilinear_sample(in[1], grid_generate(in[0], h, w)));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD grid = grid_generate(in[0], h, w);
    TensorD gsrc(in[1].dims()), ggrid(grid.dims());
    bilinear_sample_backward(r, in[1], grid, &gsrc, &ggrid);
    return std::vector<TensorD>{grid_generate_backward(ggrid), gsrc};
  };
  return gradient_check(value, grads, {theta, src}, 1e-4, rel_tol);
}

GradCheckReport check_id_loss(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD logits = rand_tensor({4, 5}, rng, -2.0, 2.0);
  const std::vector<int> labels = {0, 2, 1, 4};
  auto value = [&](const std::vector<TensorD>& in) {
    return id_loss(in[0], labels, 0.1, static_cast<TensorD*>(nullptr));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD g;
    id_loss(in[0], labels, 0.1, &g);
    return std::vector<TensorD>{g};
  };
  return gradient_check(value, grads, {logits}, 1e-3, rel_tol);
}

GradCheckReport check_triplet(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  const double margin = 0.3;
  TensorD feats;
  bool clean = false;
  while (!clean) {
    feats = rand_tensor({6, 4}, rng);
    clean = true;
    // stay away from d=0 and from the hinge kink
    for (int i = 0; i < 6 && clean; ++i)
      for (int j = i + 1; j < 6 && clean; ++j) {
        double s = 0;
        for (int k = 0; k < 4; ++k) {
          const double d = feats.at(i, k) - feats.at(j, k);
          s += d * d;
        }
        if (std::sqrt(s) < 0.05) clean = false;
      }
    if (!clean) continue;
    // recompute per-anchor hinge via the loss on single anchors
    for (int a = 0; a < 6 && clean; ++a) {
      // cheap re-derivation: use the loss of a batch where only anchor a counts
      // is awkward; instead require the aggregate pieces directly
      std::vector<double> dp, dn;
      for (int j = 0; j < 6; ++j) {
        if (j == a) continue;
        double s = 0;
        for (int k = 0; k < 4; ++k) {
          const double d = feats.at(a, k) - feats.at(j, k);
          s += d * d;
        }
        (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(a)] ? dp : dn)
            .push_back(std::sqrt(s));
      }
      double zp = 0, zn = 0, sp = 0, sn = 0;
      for (double d : dp) zp += std::exp(d);
      for (double d : dp) sp += d * std::exp(d) / zp;
      for (double d : dn) zn += std::exp(-d);
      for (double d : dn) sn += d * std::exp(-d) / zn;
      if (std::abs(margin + sp - sn) < 0.02) clean = false;
    }
  }
  auto value = [&](const std::vector<TensorD>& in) {
    return adaptive_triplet_loss(in[0], labels, margin, static_cast<TensorD*>(nullptr));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD g;
    adaptive_triplet_loss(in[0], labels, margin, &g);
    return std::vector<TensorD>{g};
  };
  return gradient_check(value, grads, {feats}, 1e-4, rel_tol);
}

GradCheckReport check_stn_loss(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD fp = rand_tensor({3, 4}, rng);
  TensorD fa = rand_tensor({3, 4}, rng);
  auto value = [&](const std::vector<TensorD>& in) {
    return stn_feature_loss(in[0], in[1], static_cast<TensorD*>(nullptr),
                            static_cast<TensorD*>(nullptr));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    TensorD gp, ga;
    stn_feature_loss(in[0], in[1], &gp, &ga);
    return std::vector<TensorD>{gp, ga};
  };
  return gradient_check(value, grads, {fp, fa}, 1e-3, rel_tol);
}

// Full localization net on a reduced 1x6x32x16 input, parameters as the
// checked inputs (element-sampled; the net has ~100k parameters).
GradCheckReport check_locnet(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD pair = rand_tensor({1, 6, 32, 16}, rng, 0.0, 1.0);
  TensorD r = rand_tensor({1, 6}, rng);

  LocalizationNet<double> net;
  std::vector<std::string> names;
  bool clean = false;
  int attempts = 0;
  while (!clean) {
    require(++attempts < 300, "gradcheck", "could not draw a kink-free locnet instance");
    Rng init(hash_combine(seed, 0x10C0 + static_cast<uint64_t>(attempts)));
    net = LocalizationNet<double>(6, 32, 16, init);
    // the regression layer starts at zero; give it generic values here
    kaiming_uniform(net.fc4.w.value, 32, init);
    for (long long i = 0; i < 6; ++i) net.fc4.b.value[i] = init.uniform(-0.3, 0.3);
    typename LocalizationNet<double>::Acts acts;
    net.forward(pair, true, acts);
    clean = acts_clean(acts, 1e-3, 1e-3);
  }

  std::vector<TensorD> inputs;
  net.visit_params("", [&](const std::string& name, ParameterT<double>& p) {
    names.push_back(name);
    inputs.push_back(p.value);
  });

  auto load = [&](const std::vector<TensorD>& in) {
    size_t idx = 0;
    net.visit_params("", [&](const std::string&, ParameterT<double>& p) {
      p.value = in[idx++];
      p.zero_grad();
    });
  };
  auto value = [&](const std::vector<TensorD>& in) {
    load(in);
    typename LocalizationNet<double>::Acts acts;
    return project(r, net.forward(pair, true, acts));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    load(in);
    typename LocalizationNet<double>::Acts acts;
    net.forward(pair, true, acts);
    net.backward(acts, r);
    std::vector<TensorD> g;
    net.visit_params("", [&](const std::string&, ParameterT<double>& p) { g.push_back(p.grad); });
    return g;
  };
  Rng pick(hash_combine(seed, 0x5A3));
  return gradient_check_sampled(value, grads, inputs, 1e-4, rel_tol, 24, pick);
}

// Scalar loss through the whole stn_forward composition wrt localization
// parameters (the bilinear path, hence the looser tolerance). The holistic
// image is one global bilinear patch, so the sample map has no interior
// kinks; theta is kept inside the frame to avoid the zero-padding boundary.
GradCheckReport check_stn_forward(uint64_t seed, double rel_tol) {
  Rng rng(seed);
  TensorD holistic = smooth_image(3, 32, 16, rng, 2, 2);
  TensorD partial = smooth_image(3, 32, 16, rng);
  TensorD r = rand_tensor({1, 3, 32, 16}, rng);

  LocalizationNet<double> net;
  bool clean = false;
  int attempts = 0;
  while (!clean) {
    require(++attempts < 300, "gradcheck", "could not draw a kink-free stn instance");
    Rng init(hash_combine(seed, 0x57F0 + static_cast<uint64_t>(attempts)));
    net = LocalizationNet<double>(6, 32, 16, init);
    kaiming_uniform(net.fc4.w.value, 32, init);
    for (long long i = 0; i < net.fc4.w.value.numel(); ++i) net.fc4.w.value[i] *= 0.05;
    net.fc4.b.value[0] = init.uniform(0.55, 0.8);
    net.fc4.b.value[1] = init.uniform(-0.03, 0.03);
    net.fc4.b.value[2] = init.uniform(-0.1, 0.1);
    net.fc4.b.value[3] = init.uniform(-0.03, 0.03);
    net.fc4.b.value[4] = init.uniform(0.55, 0.8);
    net.fc4.b.value[5] = init.uniform(-0.1, 0.1);
    StnActs<double> acts;
    stn_forward(net, holistic, partial, true, acts);
    double max_coord = 0.0;
    for (long long i = 0; i < acts.grid.numel(); ++i)
      max_coord = std::max(max_coord, std::abs(acts.grid[i]));
    clean = acts_clean(acts.loc, 1e-3, 1e-3) && max_coord <= 0.95;
  }

  std::vector<TensorD> inputs;
  net.visit_params("", [&](const std::string&, ParameterT<double>& p) {
    inputs.push_back(p.value);
  });
  auto load = [&](const std::vector<TensorD>& in) {
    size_t idx = 0;
    net.visit_params("", [&](const std::string&, ParameterT<double>& p) {
      p.value = in[idx++];
      p.zero_grad();
    });
  };
  auto value = [&](const std::vector<TensorD>& in) {
    load(in);
    StnActs<double> acts;
    return project(r, stn_forward(net, holistic, partial, true, acts));
  };
  auto grads = [&](const std::vector<TensorD>& in) {
    load(in);
    StnActs<double> acts;
    stn_forward(net, holistic, partial, true, acts);
    stn_backward(net, acts, r);
    std::vector<TensorD> g;
    net.visit_params("", [&](const std::string&, ParameterT<double>& p) { g.push_back(p.grad); });
    return g;
  };
  Rng pick(hash_combine(seed, 0x5A4));
  return gradient_check_sampled(value, grads, inputs, 1e-4, rel_tol, 16, pick);
}

struct CaseDef {
  const char* name;
  CaseFn fn;
  double rel_tol;
};

const CaseDef kCases[] = {
    {"relu", check_relu, 1e-3},
    {"linear", check_linear, 1e-3},
    {"conv2d", check_conv2d, 1e-3},
    {"maxpool2x2", check_maxpool, 1e-3},
    {"batchnorm2d", check_batchnorm, 1e-3},
    {"grid_generate", check_grid_generate, 1e-3},
    {"bilinear_sample", check_bilinear, 1e-2},
    {"theta_grid_sample", check_theta_sample, 1e-2},
    {"id_loss", check_id_loss, 1e-3},
    {"adaptive_triplet_loss", check_triplet, 1e-3},
    {"stn_feature_loss", check_stn_loss, 1e-3},
    {"localization_net", check_locnet, 1e-3},
    {"stn_forward", check_stn_forward, 1e-2},
};

}  // namespace

std::vector<BatteryCase> run_gradient_battery(int instances_per_case, bool verbose) {
  std::vector<BatteryCase> out;
  int case_id = 0;
  for (const auto& def : kCases) {
    for (int inst = 0; inst < instances_per_case; ++inst) {
      const uint64_t seed = hash_combine(0xBA77E3, static_cast<uint64_t>(case_id * 100 + inst));
      BatteryCase bc;
      bc.name = def.name;
      bc.instance = inst;
      bc.rel_tol = def.rel_tol;
      bc.report = def.fn(seed, def.rel_tol);
      if (verbose) {
        std::cout << (bc.report.pass ? "pass" : "FAIL") << "  " << bc.name << "[" << inst
                  << "]  max_rel_err=" << bc.report.max_rel_err << " (tol " << bc.rel_tol
                  << ", " << bc.report.elements_checked << " elements)\n";
      }
      out.push_back(std::move(bc));
    }
    ++case_id;
  }
  return out;
}

bool battery_all_pass(const std::vector<BatteryCase>& cases) {
  for (const auto& c : cases)
    if (!c.report.pass) return false;
  return true;
}

}  // namespace stnreid
