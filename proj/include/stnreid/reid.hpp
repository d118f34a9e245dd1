#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stnreid/nnops.hpp"

namespace stnreid {

template <typename T>
struct ReidOut {
  TensorT<T> logits;   // [B, NumIds]; empty when the classifier head is off
  TensorT<T> feature;  // [B, D]
};

struct ExtractorSpec {
  std::vector<int> channels = {16, 32, 64, 128};
  int feature_dim = 128;
  bool classifier = true;
  int num_ids = 0;
};

// ---------------------------------------------------------------------------
// Desk-scale feature extractor: 4 x [Conv3x3 s2 p1 + BN + ReLU] -> global
// average pool -> feature -> Linear(D, NumIds) -> logits. Stands behind the
// (logits, feature) contract so a bigger backbone can be slotted in.
// ---------------------------------------------------------------------------

template <typename T>
struct Extractor {
  ExtractorSpec spec;
  std::vector<Conv2dLayer<T>> convs;
  std::vector<BatchNorm2d<T>> bns;
  LinearLayer<T> classifier;

  struct Acts {
    std::vector<typename Conv2dLayer<T>::Acts> conva;
    std::vector<typename BatchNorm2d<T>::Acts> bna;
    std::vector<TensorT<T>> z;  // pre-relu block outputs
    TensorT<T> last;            // post-relu output of the final block
    typename LinearLayer<T>::Acts clsa;
  };

  Extractor() = default;

  Extractor(const ExtractorSpec& s, Rng& rng) : spec(s) {
    require(!spec.channels.empty(), "reid", "extractor needs at least one conv block");
    require(spec.feature_dim == spec.channels.back(), "reid",
            "feature_dim must equal the last block's channel count");
    int cin = 3;
    for (int cout : spec.channels) {
      convs.emplace_back(cout, cin, 3, 3, 2, 1, rng);
      bns.emplace_back(cout);
      cin = cout;
    }
    if (spec.classifier) {
      require(spec.num_ids >= 2, "reid", "classifier head needs num_ids >= 2");
      classifier = LinearLayer<T>(spec.feature_dim, spec.num_ids, rng);
    }
  }

  ReidOut<T> forward(const TensorT<T>& images, bool train, Acts& acts) {
    require(images.ndim() == 4 && images.dim(1) == 3, "reid",
            "extractor expects [B,3,H,W], got " + images.dims_str());
    const int min_side = 1 << static_cast<int>(convs.size());
    require(images.dim(2) >= min_side && images.dim(3) >= min_side, "reid",
            "input too small for " + std::to_string(convs.size()) + " stride-2 stages: " +
                images.dims_str());
    const size_t nb = convs.size();
    acts.conva.resize(nb);
    acts.bna.resize(nb);
    acts.z.resize(nb);
    TensorT<T> x = images;
    for (size_t i = 0; i < nb; ++i) {
      TensorT<T> c = convs[i].forward(x, acts.conva[i]);
      acts.z[i] = bns[i].forward(c, train, acts.bna[i]);
      x = relu(acts.z[i]);
    }
    acts.last = x;

    const int b = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
    ReidOut<T> out;
    out.feature = TensorT<T>({b, d});
    const T scale = T(1) / static_cast<T>(h * w);
    for (int n = 0; n < b; ++n)
      for (int c = 0; c < d; ++c) {
        T sum = T(0);
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) sum += x.at(n, c, r, q);
        out.feature.at(n, c) = sum * scale;
      }
    if (spec.classifier) out.logits = classifier.forward(out.feature, acts.clsa);
    return out;
  }

  // Either gradient may be null; both default to zero contribution.
  TensorT<T> backward(const Acts& acts, const TensorT<T>* glogits, const TensorT<T>* gfeature) {
    const int b = acts.last.dim(0), d = acts.last.dim(1);
    const int h = acts.last.dim(2), w = acts.last.dim(3);
    TensorT<T> gfeat({b, d});
    if (glogits) {
      require(spec.classifier, "reid", "logits gradient without classifier head");
      gfeat = classifier.backward(acts.clsa, *glogits);
    }
    if (gfeature) gfeat.array() += gfeature->array();

    TensorT<T> g({b, d, h, w});
    const T scale = T(1) / static_cast<T>(h * w);
    for (int n = 0; n < b; ++n)
      for (int c = 0; c < d; ++c) {
        const T v = gfeat.at(n, c) * scale;
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) g.at(n, c, r, q) = v;
      }
    for (int i = static_cast<int>(convs.size()) - 1; i >= 0; --i) {
      g = relu_backward(g, acts.z[static_cast<size_t>(i)]);
      g = bns[static_cast<size_t>(i)].backward(acts.bna[static_cast<size_t>(i)], g);
      g = convs[static_cast<size_t>(i)].backward(acts.conva[static_cast<size_t>(i)], g);
    }
    return g;
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, ParameterT<T>&)>& fn) {
    for (size_t i = 0; i < convs.size(); ++i) {
      const std::string blk = prefix + "block" + std::to_string(i) + ".";
      fn(blk + "conv.w", convs[i].w);
      fn(blk + "conv.b", convs[i].b);
      fn(blk + "bn.gamma", bns[i].gamma);
      fn(blk + "bn.beta", bns[i].beta);
    }
    if (spec.classifier) {
      fn(prefix + "cls.w", classifier.w);
      fn(prefix + "cls.b", classifier.b);
    }
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    for (size_t i = 0; i < bns.size(); ++i) {
      const std::string blk = prefix + "block" + std::to_string(i) + ".";
      fn(blk + "bn.running_mean", bns[i].running_mean);
      fn(blk + "bn.running_var", bns[i].running_var);
    }
  }

  void set_frozen(bool f) {
    for (auto& c : convs) c.set_frozen(f);
    for (auto& bn : bns) bn.set_frozen(f);
    if (spec.classifier) classifier.set_frozen(f);
  }
};

// ---------------------------------------------------------------------------
// ID loss: softmax cross entropy against label-smoothed targets, mean over
// the batch. Smoothed target is 1 - eps + eps/N for the true class and eps/N
// elsewhere.
// ---------------------------------------------------------------------------

template <typename T>
T id_loss(const TensorT<T>& logits, const std::vector<int>& labels, T smoothing,
          TensorT<T>* grad = nullptr) {
  require(logits.ndim() == 2, "reid", "id_loss expects [B,N] logits");
  const int b = logits.dim(0), n = logits.dim(1);
  require(static_cast<int>(labels.size()) == b, "reid", "labels length must equal batch size");
  require(smoothing >= T(0) && smoothing < T(1), "reid", "smoothing must be in [0,1)");
  if (grad) *grad = TensorT<T>({b, n});

  double total = 0.0;
  std::vector<double> soft(static_cast<size_t>(n));
  const double eps_n = static_cast<double>(smoothing) / n;
  for (int i = 0; i < b; ++i) {
    const int label = labels[static_cast<size_t>(i)];
    require(label >= 0 && label < n, "reid",
            "label " + std::to_string(label) + " out of range [0," + std::to_string(n) + ")");
    double mx = logits.at(i, 0);
    for (int k = 1; k < n; ++k) mx = std::max(mx, static_cast<double>(logits.at(i, k)));
    double z = 0.0;
    for (int k = 0; k < n; ++k) {
      soft[static_cast<size_t>(k)] = std::exp(static_cast<double>(logits.at(i, k)) - mx);
      z += soft[static_cast<size_t>(k)];
    }
    const double logz = std::log(z);
    for (int k = 0; k < n; ++k) {
      const double q = eps_n + (k == label ? 1.0 - static_cast<double>(smoothing) : 0.0);
      const double log_p = static_cast<double>(logits.at(i, k)) - mx - logz;
      total -= q * log_p;
      if (grad) grad->at(i, k) = static_cast<T>((soft[static_cast<size_t>(k)] / z - q) / b);
    }
  }
  return static_cast<T>(total / b);
}

// ---------------------------------------------------------------------------
// Adaptive weighted triplet loss. Per anchor, positive and negative distances
// are aggregated under softmax weights (w_p ~ e^{d}, w_n ~ e^{-d}) inside a
// margin hinge; the result is averaged over anchors. Differentiable through
// the weights.
// ---------------------------------------------------------------------------

template <typename T>
T adaptive_triplet_loss(const TensorT<T>& features, const std::vector<int>& labels, T margin,
                        TensorT<T>* grad = nullptr) {
  require(features.ndim() == 2, "reid", "triplet loss expects [B,D] features");
  const int b = features.dim(0), d = features.dim(1);
  require(static_cast<int>(labels.size()) == b, "reid", "labels length must equal batch size");
  require(margin > T(0), "reid", "margin must be positive");
  if (grad) *grad = TensorT<T>({b, d});

  // Pairwise Euclidean distances on raw features.
  std::vector<double> dist(static_cast<size_t>(b) * b, 0.0);
  for (int i = 0; i < b; ++i)
    for (int j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = static_cast<double>(features.at(i, k)) - features.at(j, k);
        s += diff * diff;
      }
      const double dd = std::sqrt(s);
      dist[static_cast<size_t>(i) * b + j] = dd;
      dist[static_cast<size_t>(j) * b + i] = dd;
    }

  std::vector<double> gdist;  // dL/dd(a,j), summed over anchors
  if (grad) gdist.assign(static_cast<size_t>(b) * b, 0.0);

  double total = 0.0;
  std::vector<int> pos, neg;
  std::vector<double> wp, wn;
  for (int a = 0; a < b; ++a) {
    pos.clear();
    neg.clear();
    for (int j = 0; j < b; ++j) {
      if (j == a) continue;
      (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(a)] ? pos : neg).push_back(j);
    }
    require(!pos.empty() && !neg.empty(), "reid",
            "anchor " + std::to_string(a) + " lacks positives or negatives; batch must be PK");

    auto softmax_weights = [&](const std::vector<int>& idx, double sign, std::vector<double>& w) {
      w.resize(idx.size());
      double mx = -1e300;
      for (size_t k = 0; k < idx.size(); ++k)
        mx = std::max(mx, sign * dist[static_cast<size_t>(a) * b + idx[k]]);
      double z = 0.0;
      for (size_t k = 0; k < idx.size(); ++k) {
        w[k] = std::exp(sign * dist[static_cast<size_t>(a) * b + idx[k]] - mx);
        z += w[k];
      }
      for (auto& v : w) v /= z;
    };
    softmax_weights(pos, +1.0, wp);
    softmax_weights(neg, -1.0, wn);

    double sp = 0.0, sn = 0.0;
    for (size_t k = 0; k < pos.size(); ++k) sp += wp[k] * dist[static_cast<size_t>(a) * b + pos[k]];
    for (size_t k = 0; k < neg.size(); ++k) sn += wn[k] * dist[static_cast<size_t>(a) * b + neg[k]];
    const double hinge = static_cast<double>(margin) + sp - sn;
    if (hinge > 0.0) {
      total += hinge;
      if (grad) {
        // d(sp)/dd_q = w_q (1 + d_q - sp); d(sn)/dd_q = w_q (1 - d_q + sn)
        for (size_t k = 0; k < pos.size(); ++k) {
          const double dq = dist[static_cast<size_t>(a) * b + pos[k]];
          gdist[static_cast<size_t>(a) * b + pos[k]] += wp[k] * (1.0 + dq - sp);
        }
        for (size_t k = 0; k < neg.size(); ++k) {
          const double dq = dist[static_cast<size_t>(a) * b + neg[k]];
          gdist[static_cast<size_t>(a) * b + neg[k]] -= wn[k] * (1.0 - dq + sn);
        }
      }
    }
  }

  if (grad) {
    for (int a = 0; a < b; ++a)
      for (int j = 0; j < b; ++j) {
        if (j == a) continue;
        const double g = gdist[static_cast<size_t>(a) * b + j] / b;
        if (g == 0.0) continue;
        const double dd = std::max(dist[static_cast<size_t>(a) * b + j], 1e-12);
        for (int k = 0; k < d; ++k) {
          const double diff =
              (static_cast<double>(features.at(a, k)) - features.at(j, k)) / dd;
          grad->at(a, k) += static_cast<T>(g * diff);
          grad->at(j, k) -= static_cast<T>(g * diff);
        }
      }
  }
  return static_cast<T>(total / b);
}

// Mean over the batch of squared Euclidean distance between the partial and
// affined features.
template <typename T>
T stn_feature_loss(const TensorT<T>& f_partial, const TensorT<T>& f_affined,
                   TensorT<T>* g_partial = nullptr, TensorT<T>* g_affined = nullptr) {
  require(f_partial.same_dims(f_affined), "reid", "stn loss feature dims mismatch");
  const int b = f_partial.dim(0);
  double total = 0.0;
  for (long long i = 0; i < f_partial.numel(); ++i) {
    const double diff = static_cast<double>(f_partial[i]) - f_affined[i];
    total += diff * diff;
  }
  if (g_partial) {
    *g_partial = TensorT<T>(f_partial.dims());
    g_partial->array() = (f_partial.array() - f_affined.array()) * (T(2) / static_cast<T>(b));
  }
  if (g_affined) {
    *g_affined = TensorT<T>(f_affined.dims());
    g_affined->array() = (f_affined.array() - f_partial.array()) * (T(2) / static_cast<T>(b));
  }
  return static_cast<T>(total / b);
}

// ---------------------------------------------------------------------------
// Combined objective: L = L_R(I_h) + L_R(I_p) + L_R(I_a) + L_STN(I_p, I_a)
// with L_R = L_ID + L_Tri, terms toggled by config. Disabled terms are
// exactly zero and the reported terms sum to the total exactly.
// ---------------------------------------------------------------------------

template <typename T>
struct LossFlags {
  bool use_id = true;
  bool use_tri = false;
  T smoothing = T(0);   // 0 disables label smoothing
  T margin = static_cast<T>(0.3);
  bool detach_partial_in_stn_loss = false;
};

template <typename T>
struct LossBreakdown {
  T id_h = T(0), id_p = T(0), id_a = T(0);
  T tri_h = T(0), tri_p = T(0), tri_a = T(0);
  T stn = T(0);
  T total = T(0);
};

template <typename T>
struct TotalLossGrads {
  TensorT<T> glogits_h, glogits_p, glogits_a;
  TensorT<T> gfeat_h, gfeat_p, gfeat_a;
};

template <typename T>
LossBreakdown<T> total_loss(const ReidOut<T>& out_h, const ReidOut<T>& out_p,
                            const ReidOut<T>& out_a, const std::vector<int>& labels,
                            const LossFlags<T>& flags, TotalLossGrads<T>* grads = nullptr) {
  require(flags.use_id || flags.use_tri, "reid", "all loss terms disabled");
  LossBreakdown<T> bd;
  const int b = out_h.feature.dim(0), dfeat = out_h.feature.dim(1);

  if (grads) {
    grads->gfeat_h = TensorT<T>({b, dfeat});
    grads->gfeat_p = TensorT<T>({b, dfeat});
    grads->gfeat_a = TensorT<T>({b, dfeat});
  }

  if (flags.use_id) {
    bd.id_h = id_loss(out_h.logits, labels, flags.smoothing, grads ? &grads->glogits_h : nullptr);
    bd.id_p = id_loss(out_p.logits, labels, flags.smoothing, grads ? &grads->glogits_p : nullptr);
    bd.id_a = id_loss(out_a.logits, labels, flags.smoothing, grads ? &grads->glogits_a : nullptr);
  }
  if (flags.use_tri) {
    TensorT<T> g;
    bd.tri_h = adaptive_triplet_loss(out_h.feature, labels, flags.margin, grads ? &g : nullptr);
    if (grads) grads->gfeat_h.array() += g.array();
    bd.tri_p = adaptive_triplet_loss(out_p.feature, labels, flags.margin, grads ? &g : nullptr);
    if (grads) grads->gfeat_p.array() += g.array();
    bd.tri_a = adaptive_triplet_loss(out_a.feature, labels, flags.margin, grads ? &g : nullptr);
    if (grads) grads->gfeat_a.array() += g.array();
  }
  {
    TensorT<T> gp, ga;
    bd.stn = stn_feature_loss(out_p.feature, out_a.feature, grads ? &gp : nullptr,
                              grads ? &ga : nullptr);
    if (grads) {
      if (!flags.detach_partial_in_stn_loss) grads->gfeat_p.array() += gp.array();
      grads->gfeat_a.array() += ga.array();
    }
  }
  bd.total = bd.id_h + bd.id_p + bd.id_a + bd.tri_h + bd.tri_p + bd.tri_a + bd.stn;
  return bd;
}

}  // namespace stnreid
