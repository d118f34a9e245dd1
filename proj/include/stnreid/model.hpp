#pragma once

#include <string>
#include <vector>

#include "stnreid/checkpoint.hpp"
#include "stnreid/reid.hpp"
#include "stnreid/stn.hpp"

namespace stnreid {

struct ModelConfig {
  int image_h = 256;
  int image_w = 128;
  int num_ids = 2;
  std::vector<int> reid_channels = {16, 32, 64, 128};
  int feature_dim = 128;
};

// The pair of sub-models the checkpoints, trainer, and eval paths all share.
struct StnReidModel {
  ModelConfig cfg;
  LocalizationNet<float> stn;
  Extractor<float> reid;
  bool stn_frozen = false;

  StnReidModel() = default;
  StnReidModel(const ModelConfig& config, uint64_t seed);

  std::vector<ParamRef<float>> param_refs();

  void freeze_stn();

  // Inference helpers (thread-safe across concurrent callers; eval mode only).
  Tensor reid_features(const Tensor& images) const;
  ReidOut<float> reid_forward_eval(const Tensor& images) const;
  Tensor stn_theta_eval(const Tensor& holistic, const Tensor& partial) const;
  Tensor stn_affined_eval(const Tensor& holistic, const Tensor& partial, Tensor* theta_out) const;

  Checkpoint to_checkpoint(int epoch, float loss_snapshot, const std::string& config_echo) const;
  void load_params(const Checkpoint& ckpt, const std::string& prefix_filter = "");

  static StnReidModel from_checkpoint(const Checkpoint& ckpt);
  static ModelConfig config_from_checkpoint(const Checkpoint& ckpt);
};

// Composite checkpoint from independently trained parts: reid.* tensors come
// from reid_ckpt, stn.* from stn_ckpt. No training happens.
Checkpoint merge_checkpoints(const Checkpoint& reid_ckpt, const Checkpoint& stn_ckpt);

}  // namespace stnreid
