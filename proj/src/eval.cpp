#include "stnreid/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>

namespace stnreid {

namespace {

float euclidean(const float* a, const float* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = static_cast<double>(a[i]) - b[i];
    s += diff * diff;
  }
  return static_cast<float>(std::sqrt(s));
}

enum class Metric { kEuclidean, kCosine };

Metric parse_metric(const std::string& name) {
  if (name == "euclidean") return Metric::kEuclidean;
  if (name == "cosine") return Metric::kCosine;
  fail("eval", "unknown metric: " + name);
}

float feature_distance(const float* a, const float* b, int d, Metric m) {
  if (m == Metric::kEuclidean) return euclidean(a, b, d);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < d; ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
  return static_cast<float>(std::max(0.0, 1.0 - dot / denom));
}

// Pair scores are pure functions of (probe entry, gallery entry); the
// protocol's repeated splits revisit the same pairs, so memoize them.
struct PairCache {
  std::unordered_map<uint64_t, float> distances;

  static uint64_t key(int probe, int gallery) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(probe)) << 32) |
           static_cast<uint32_t>(gallery);
  }
};

float score_one_pair(const StnReidModel& model, const Tensor& probe, const Tensor& probe_feat,
                     const Tensor& gallery_img, Metric metric = Metric::kEuclidean) {
  Tensor affined = model.stn_affined_eval(gallery_img, probe, nullptr);
  Tensor fa = model.reid_features(affined);
  return feature_distance(probe_feat.data(), fa.data(), probe_feat.dim(1), metric);
}

}  // namespace

Tensor extract_features_batch(const StnReidModel& model, const Tensor& images, int threads) {
  const int n = images.dim(0);
  Tensor features({n, model.cfg.feature_dim});
  parallel_for(n, threads, [&](int i) {
    Tensor img = slice_batch_item(images, i);
    Tensor f = model.reid_features(img);
    std::copy(f.data(), f.data() + model.cfg.feature_dim, &features.at(i, 0));
  });
  return features;
}

std::vector<float> score_pair_batch(const StnReidModel& model, const Tensor& probe_partial,
                                    const Tensor& gallery_holistics, int threads) {
  require(probe_partial.ndim() == 4 && probe_partial.dim(0) == 1, "eval",
          "probe must be a single [1,C,H,W] image");
  const int n = gallery_holistics.dim(0);
  Tensor probe_feat = model.reid_features(probe_partial);
  std::vector<float> distances(static_cast<size_t>(n));
  parallel_for(n, threads, [&](int g) {
    Tensor gal = slice_batch_item(gallery_holistics, g);
    distances[static_cast<size_t>(g)] = score_one_pair(model, probe_partial, probe_feat, gal);
  });
  return distances;
}

namespace {

DistanceMatrix score_matrix(const StnReidModel& model, const DatasetIndex& probes,
                            const DatasetIndex& gallery, const std::vector<int>& gallery_entries,
                            bool use_stn, int threads, PairCache* cache,
                            Metric metric = Metric::kEuclidean) {
  const int q = static_cast<int>(probes.entries.size());
  const int g = static_cast<int>(gallery_entries.size());
  DistanceMatrix dist;
  dist.values = Tensor({q, g});
  dist.probe_ids.resize(static_cast<size_t>(q));
  for (int i = 0; i < q; ++i) dist.probe_ids[static_cast<size_t>(i)] = probes.entries[static_cast<size_t>(i)].person_id;
  dist.gallery_ids.resize(static_cast<size_t>(g));
  for (int j = 0; j < g; ++j)
    dist.gallery_ids[static_cast<size_t>(j)] =
        gallery.entries[static_cast<size_t>(gallery_entries[static_cast<size_t>(j)])].person_id;

  // Probe features are needed either way.
  std::vector<Tensor> probe_feats(static_cast<size_t>(q));
  parallel_for(q, threads, [&](int i) {
    probe_feats[static_cast<size_t>(i)] =
        model.reid_features(unsqueeze(probes.entries[static_cast<size_t>(i)].image));
  });

  if (!use_stn) {
    std::vector<Tensor> gal_feats(static_cast<size_t>(g));
    parallel_for(g, threads, [&](int j) {
      gal_feats[static_cast<size_t>(j)] = model.reid_features(
          unsqueeze(gallery.entries[static_cast<size_t>(gallery_entries[static_cast<size_t>(j)])].image));
    });
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < g; ++j)
        dist.values.at(i, j) =
            feature_distance(probe_feats[static_cast<size_t>(i)].data(),
                             gal_feats[static_cast<size_t>(j)].data(), model.cfg.feature_dim,
                             metric);
    return dist;
  }

  // Collect pairs not in the cache, compute them in parallel, then fill.
  struct Job {
    int i, j, entry;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < g; ++j) {
      const int entry = gallery_entries[static_cast<size_t>(j)];
      if (cache && cache->distances.count(PairCache::key(i, entry))) continue;
      jobs.push_back({i, j, entry});
    }
  std::vector<float> results(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), threads, [&](int idx) {
    const Job& job = jobs[static_cast<size_t>(idx)];
    Tensor probe = unsqueeze(probes.entries[static_cast<size_t>(job.i)].image);
    Tensor gal = unsqueeze(gallery.entries[static_cast<size_t>(job.entry)].image);
    results[static_cast<size_t>(idx)] =
        score_one_pair(model, probe, probe_feats[static_cast<size_t>(job.i)], gal, metric);
  });
  if (cache)
    for (size_t idx = 0; idx < jobs.size(); ++idx)
      cache->distances[PairCache::key(jobs[idx].i, jobs[idx].entry)] = results[idx];

  for (int i = 0; i < q; ++i)
    for (int j = 0; j < g; ++j) {
      const int entry = gallery_entries[static_cast<size_t>(j)];
      if (cache) {
        dist.values.at(i, j) = cache->distances.at(PairCache::key(i, entry));
      } else {
        // without a cache every pair was a job, in row-major order
        dist.values.at(i, j) = results[static_cast<size_t>(i) * g + j];
      }
    }
  return dist;
}

}  // namespace

DistanceMatrix score_no_stn(const StnReidModel& model, const DatasetIndex& probes,
                            const DatasetIndex& gallery, const std::vector<int>& gallery_entries,
                            int threads) {
  return score_matrix(model, probes, gallery, gallery_entries, false, threads, nullptr);
}

DistanceMatrix score_with_stn(const StnReidModel& model, const DatasetIndex& probes,
                              const DatasetIndex& gallery,
                              const std::vector<int>& gallery_entries, int threads) {
  return score_matrix(model, probes, gallery, gallery_entries, true, threads, nullptr);
}

std::vector<float> cmc(const DistanceMatrix& dist, const std::vector<int>& ranks) {
  const int q = dist.values.dim(0), g = dist.values.dim(1);
  std::vector<float> acc(ranks.size(), 0.0f);
  std::vector<int> order(static_cast<size_t>(g));
  for (int i = 0; i < q; ++i) {
    const int pid = dist.probe_ids[static_cast<size_t>(i)];
    bool present = false;
    for (int j = 0; j < g; ++j)
      if (dist.gallery_ids[static_cast<size_t>(j)] == pid) present = true;
    require(present, "eval", "probe id " + std::to_string(pid) + " absent from gallery");

    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const float da = dist.values.at(i, a), db = dist.values.at(i, b);
      return da < db || (da == db && a < b);
    });
    int first_hit = g;
    for (int pos = 0; pos < g; ++pos)
      if (dist.gallery_ids[static_cast<size_t>(order[static_cast<size_t>(pos)])] == pid) {
        first_hit = pos;
        break;
      }
    for (size_t r = 0; r < ranks.size(); ++r)
      if (first_hit < ranks[r]) acc[r] += 1.0f;
  }
  for (auto& a : acc) a /= static_cast<float>(q);
  return acc;
}

CmcReport evaluate_protocol(const StnReidModel& model, const DatasetIndex& probes,
                            const DatasetIndex& gallery, const EvalOptions& opt) {
  require(opt.repeats >= 1, "eval", "repeats must be >= 1");
  require(gallery.num_ids >= 1, "eval", "empty gallery dataset");
  for (int id = 0; id < gallery.num_ids; ++id)
    require(!gallery.by_id[static_cast<size_t>(id)].empty(), "eval",
            "gallery id " + std::to_string(id) + " has no holistic image");
  require(!probes.entries.empty(), "eval", "no probes");

  CmcReport report;
  report.ranks = opt.ranks;
  report.num_repeats = opt.repeats;
  report.mean_accuracy.assign(opt.ranks.size(), 0.0f);
  report.std_accuracy.assign(opt.ranks.size(), 0.0f);

  PairCache cache;
  for (int rep = 0; rep < opt.repeats; ++rep) {
    Rng rng(hash_combine(opt.seed, 0xE7A1 + static_cast<uint64_t>(rep)));
    std::vector<int> gallery_entries;
    gallery_entries.reserve(static_cast<size_t>(gallery.num_ids));
    for (int id = 0; id < gallery.num_ids; ++id) {
      const auto& pool = gallery.by_id[static_cast<size_t>(id)];
      gallery_entries.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
    }
    DistanceMatrix dist = score_matrix(model, probes, gallery, gallery_entries, opt.use_stn,
                                       opt.threads, opt.use_stn ? &cache : nullptr,
                                       parse_metric(opt.metric));
    report.per_repeat.push_back(cmc(dist, opt.ranks));
  }

  for (size_t r = 0; r < opt.ranks.size(); ++r) {
    double sum = 0.0;
    for (const auto& row : report.per_repeat) sum += row[r];
    const double mean = sum / opt.repeats;
    double var = 0.0;
    for (const auto& row : report.per_repeat) var += (row[r] - mean) * (row[r] - mean);
    report.mean_accuracy[r] = static_cast<float>(mean);
    report.std_accuracy[r] = static_cast<float>(std::sqrt(var / opt.repeats));
  }
  return report;
}

DatasetIndex make_partial_probes(const DatasetIndex& holistics, uint64_t seed, float removed_min,
                                 float removed_max) {
  DatasetIndex probes;
  probes.num_ids = holistics.num_ids;
  probes.entries.reserve(holistics.entries.size());
  for (size_t i = 0; i < holistics.entries.size(); ++i) {
    Rng rng(hash_combine(seed, 0xBEEF00 + i));
    const auto& src = holistics.entries[i];
    auto [partial, spec] = generate_partial(unsqueeze(src.image), rng, removed_min, removed_max);
    DatasetEntry entry;
    entry.image = partial.reshaped({partial.dim(1), partial.dim(2), partial.dim(3)});
    entry.person_id = src.person_id;
    entry.cam_id = src.cam_id;
    entry.source = src.source + ":partial:" + direction_name(spec.direction);
    probes.entries.push_back(std::move(entry));
  }
  probes.rebuild_by_id();
  return probes;
}

float mean_theta_identity_deviation(const StnReidModel& model, const DatasetIndex& holistics,
                                    int n_pairs, uint64_t seed, float removed_min,
                                    float removed_max) {
  require(!holistics.entries.empty(), "eval", "empty dataset");
  Rng rng(hash_combine(seed, 0x7E7A));
  double total = 0.0;
  for (int i = 0; i < n_pairs; ++i) {
    const int idx = rng.uniform_int(static_cast<int>(holistics.entries.size()));
    Tensor holistic = unsqueeze(holistics.entries[static_cast<size_t>(idx)].image);
    Tensor partial = generate_partial(holistic, rng, removed_min, removed_max).first;
    Tensor theta = model.stn_theta_eval(holistic, partial);
    const float ident[6] = {1, 0, 0, 0, 1, 0};
    double sq = 0.0;
    for (int j = 0; j < 6; ++j) {
      const double d = theta.at(0, j) - ident[j];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return static_cast<float>(total / n_pairs);
}

std::vector<BenchRow> bench_matching(const StnReidModel& model, const Tensor& probe,
                                     const Tensor& gallery, const std::vector<int>& batch_sizes,
                                     int repeats, int threads) {
  const int g = gallery.dim(0);
  for (int n : batch_sizes)
    require(n >= 1 && n <= g, "eval", "batch size must be in [1, gallery size]");
  require(repeats >= 1, "eval", "repeats must be >= 1");

  std::vector<BenchRow> rows;
  for (int n : batch_sizes) {
    std::vector<double> times(static_cast<size_t>(repeats));
    for (int rep = 0; rep < repeats; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      for (int start = 0; start < g; start += n) {
        const int count = std::min(n, g - start);
        Tensor chunk({count, gallery.dim(1), gallery.dim(2), gallery.dim(3)});
        const long long chw =
            static_cast<long long>(gallery.dim(1)) * gallery.dim(2) * gallery.dim(3);
        std::copy(gallery.data() + start * chw, gallery.data() + (start + count) * chw,
                  chunk.data());
        volatile float sink = score_pair_batch(model, probe, chunk, threads)[0];
        (void)sink;
      }
      const auto t1 = std::chrono::steady_clock::now();
      times[static_cast<size_t>(rep)] = std::chrono::duration<double>(t1 - t0).count();
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    rows.push_back({n, median, median / g * 1e6});
  }
  return rows;
}

void write_cmc_csv(const std::string& path, const CmcReport& report) {
  std::ofstream os(path);
  require(os.is_open(), "eval", "cannot open for write: " + path);
  os << "rank,accuracy_mean,accuracy_std\n";
  for (size_t r = 0; r < report.ranks.size(); ++r)
    os << report.ranks[r] << "," << report.mean_accuracy[r] << "," << report.std_accuracy[r]
       << "\n";
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows, int threads) {
  std::ofstream os(path);
  require(os.is_open(), "eval", "cannot open for write: " + path);
  os << "# threads=" << threads << "\n";
  os << "batch_size,median_s,per_pair_us\n";
  for (const auto& row : rows)
    os << row.batch_size << "," << row.median_s << "," << row.per_pair_us << "\n";
}

void dump_affined_topk(const StnReidModel& model, const Tensor& probe_partial,
                       const DatasetIndex& gallery, const std::vector<int>& gallery_entries,
                       int k, const std::string& out_dir, const std::string& probe_tag,
                       int threads) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Tensor probe_feat = model.reid_features(probe_partial);
  std::vector<float> distances(gallery_entries.size());
  parallel_for(static_cast<int>(gallery_entries.size()), threads, [&](int j) {
    Tensor gal = unsqueeze(
        gallery.entries[static_cast<size_t>(gallery_entries[static_cast<size_t>(j)])].image);
    distances[static_cast<size_t>(j)] = score_one_pair(model, probe_partial, probe_feat, gal);
  });
  std::vector<int> order(gallery_entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return distances[static_cast<size_t>(a)] < distances[static_cast<size_t>(b)] ||
           (distances[static_cast<size_t>(a)] == distances[static_cast<size_t>(b)] && a < b);
  });
  write_ppm((fs::path(out_dir) / (probe_tag + "_probe.ppm")).string(), probe_partial);
  for (int rank = 0; rank < std::min<int>(k, static_cast<int>(order.size())); ++rank) {
    const int entry = gallery_entries[static_cast<size_t>(order[static_cast<size_t>(rank)])];
    Tensor gal = unsqueeze(gallery.entries[static_cast<size_t>(entry)].image);
    Tensor affined = model.stn_affined_eval(gal, probe_partial, nullptr);
    const int gid = gallery.entries[static_cast<size_t>(entry)].person_id;
    write_ppm((fs::path(out_dir) /
               (probe_tag + "_top" + std::to_string(rank + 1) + "_id" + std::to_string(gid) +
                ".ppm"))
                  .string(),
              affined);
  }
}

}  // namespace stnreid
