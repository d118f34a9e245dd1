#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stnreid/data.hpp"
#include "stnreid/model.hpp"

namespace stnreid {

// Experiment-row configuration (flat key=value files, `#` comments, last
// key wins; multiple files compose with later files overriding).
struct TrainConfig {
  std::string pt_warmstart;  // checkpoint path emulating pretrained weights
  bool label_smooth = false;
  bool use_id = true;
  bool use_tri = false;
  float margin = 0.3f;
  float lr_initial = 2e-4f;
  float lr_decayed = 2e-5f;
  int decay_epoch = 15;
  int total_epochs = 30;
  int P = 8;
  int K = 4;
  float weight_decay = 5e-4f;
  int stage = 1;
  std::string mode = "pm";  // pm | mm | baseline
  uint64_t seed = 0;
  float crop_removed_min = 0.2f;
  float crop_removed_max = 0.6f;

  // artifact knobs beyond the paper's table
  float label_smooth_eps = 0.1f;
  bool augment_hflip = true;
  bool augment_crop = false;
  bool augment_partial = false;  // baseline-style partial augmentation
  bool stn_loss_detach_partial = false;
  std::string eval_metric = "euclidean";
  int feature_dim = 128;
  std::vector<int> reid_channels = {16, 32, 64, 128};
  int ckpt_every = 0;  // 0 = final checkpoint only

  void validate() const;
};

TrainConfig parse_config_text(const std::string& text, TrainConfig base = {});
TrainConfig parse_config_files(const std::vector<std::string>& paths, TrainConfig base = {});
std::string config_echo(const TrainConfig& cfg);

// Single step decay: lr_initial before decay_epoch, lr_decayed from it on.
float lr_schedule(int epoch, const TrainConfig& cfg);

LossFlags<float> loss_flags(const TrainConfig& cfg);

// One optimizer step on a PK batch of holistic images: partials are generated
// on the fly, the STN crops affined images, three extractor passes feed the
// combined loss. Frozen parameters receive no update.
LossBreakdown<float> train_step(StnReidModel& model, const Tensor& holistic,
                                const std::vector<int>& labels, const TrainConfig& cfg, Rng& rng,
                                float lr, int adam_t);

// Extractor-only step (no STN): the paper-style strong baseline, with partial
// images as augmentation when configured.
LossBreakdown<float> baseline_step(StnReidModel& model, const Tensor& images,
                                   const std::vector<int>& labels, const TrainConfig& cfg,
                                   float lr, int adam_t);

struct EpochStats {
  int epoch = 0;
  float lr = 0;
  LossBreakdown<float> avg;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Joint single-stage training of STN + ReID (Eq. 6 objective). Writes
// metrics.csv and ckpt files into out_dir when non-empty.
Checkpoint train_joint(const DatasetIndex& data, const TrainConfig& cfg,
                       const std::string& out_dir, const EpochCallback& cb = nullptr);

// Stage 1: joint training with a weak ReID module (ID loss only, no label
// smoothing, no warm start) to acquire a strong STN.
Checkpoint train_stage1(const DatasetIndex& data, const TrainConfig& cfg,
                        const std::string& out_dir, const EpochCallback& cb = nullptr);

// Stage 2, pipeline mode: the ReID module is (re)trained under the frozen
// stage-1 STN; STN parameters and BN statistics do not move.
Checkpoint train_stage2_pm(const DatasetIndex& data, const Checkpoint& stage1_ckpt,
                           const TrainConfig& cfg, const std::string& out_dir,
                           const EpochCallback& cb = nullptr);

// Stage 2, merge mode: compose a trained ReID model with a frozen STN.
// No training occurs.
Checkpoint train_stage2_mm(const Checkpoint& reid_ckpt, const Checkpoint& stn_ckpt);

// ReID module alone (STN untouched); source of "independently trained ReID
// model" checkpoints for merge mode and of warm-start donors.
Checkpoint train_baseline(const DatasetIndex& data, const TrainConfig& cfg,
                          const std::string& out_dir, const EpochCallback& cb = nullptr);

struct MatrixRow {
  std::string name;
  TrainConfig config;
};

struct MatrixResult {
  std::string name;
  float rank1_with_stn = 0;
  float rank1_without_stn = 0;
  float improvement = 0;
};

// Trains each row single-stage end to end, then evaluates CMC twice: STN
// active, and STN bypassed (affined := holistic).
std::vector<MatrixResult> run_experiment_matrix(const DatasetIndex& data,
                                                const std::vector<MatrixRow>& rows,
                                                const std::string& out_dir, int eval_repeats,
                                                uint64_t eval_seed, int threads);

// Ep1..Ep5 analogues of the confrontation table; rows with the pretrain flag
// warm-start from donor_ckpt_path.
std::vector<MatrixRow> default_matrix_rows(const TrainConfig& base,
                                           const std::string& donor_ckpt_path);

void write_manifest(const std::string& out_dir, const std::vector<std::pair<std::string, std::string>>& kv);

}  // namespace stnreid
