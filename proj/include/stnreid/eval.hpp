#pragma once

#include <string>
#include <vector>

#include "stnreid/data.hpp"
#include "stnreid/model.hpp"

namespace stnreid {

struct DistanceMatrix {
  Tensor values;  // [Q,G]
  std::vector<int> probe_ids;
  std::vector<int> gallery_ids;
};

struct CmcReport {
  std::vector<int> ranks;
  std::vector<float> mean_accuracy;
  std::vector<float> std_accuracy;
  int num_repeats = 0;
  std::vector<std::vector<float>> per_repeat;  // [repeat][rank index]

  float rank1() const { return mean_accuracy.empty() ? 0.0f : mean_accuracy.front(); }
};

struct EvalOptions {
  int repeats = 10;
  uint64_t seed = 0;
  bool use_stn = true;
  int threads = 1;
  std::vector<int> ranks = {1, 3, 5};
  std::string metric = "euclidean";  // or "cosine"
};

// Per-item feature extraction in eval mode; items may run on worker threads.
Tensor extract_features_batch(const StnReidModel& model, const Tensor& images, int threads);

// One partial probe against N gallery holistics: the probe feature is
// computed once, each gallery image is affined against the probe and scored
// by Euclidean feature distance. Results do not depend on N or threads.
std::vector<float> score_pair_batch(const StnReidModel& model, const Tensor& probe_partial,
                                    const Tensor& gallery_holistics, int threads);

// STN bypassed: direct distance between partial and holistic features.
DistanceMatrix score_no_stn(const StnReidModel& model, const DatasetIndex& probes,
                            const DatasetIndex& gallery, const std::vector<int>& gallery_entries,
                            int threads);

DistanceMatrix score_with_stn(const StnReidModel& model, const DatasetIndex& probes,
                              const DatasetIndex& gallery,
                              const std::vector<int>& gallery_entries, int threads);

// Rank-k accuracies; gallery sorted by ascending distance, ties broken by
// gallery index. Every probe id must occur in the gallery.
std::vector<float> cmc(const DistanceMatrix& dist, const std::vector<int>& ranks);

// Repeated single-shot protocol: per repeat one holistic per id is drawn
// into the gallery, all partials are probes; the report averages CMC over
// repeats.
CmcReport evaluate_protocol(const StnReidModel& model, const DatasetIndex& probes,
                            const DatasetIndex& gallery, const EvalOptions& opt);

// One partial probe per holistic entry, deterministic in seed.
DatasetIndex make_partial_probes(const DatasetIndex& holistics, uint64_t seed,
                                 float removed_min = 0.2f, float removed_max = 0.6f);

// Mean Euclidean norm of (theta - identity) over generated pairs; a trained
// STN moves away from the identity transform.
float mean_theta_identity_deviation(const StnReidModel& model, const DatasetIndex& holistics,
                                    int n_pairs, uint64_t seed, float removed_min = 0.2f,
                                    float removed_max = 0.6f);

struct BenchRow {
  int batch_size = 0;
  double median_s = 0;
  double per_pair_us = 0;
};

// Wall-clock per-probe identification time (probe feature extraction
// included) over the whole gallery, chunked at each requested batch size.
std::vector<BenchRow> bench_matching(const StnReidModel& model, const Tensor& probe,
                                     const Tensor& gallery, const std::vector<int>& batch_sizes,
                                     int repeats, int threads);

void write_cmc_csv(const std::string& path, const CmcReport& report);
void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows, int threads);

// Qualitative inspection: PPM dumps of the top-k affined gallery images for
// a probe (both positive and negative pairs show up as ranked).
void dump_affined_topk(const StnReidModel& model, const Tensor& probe_partial,
                       const DatasetIndex& gallery, const std::vector<int>& gallery_entries,
                       int k, const std::string& out_dir, const std::string& probe_tag,
                       int threads);

}  // namespace stnreid
