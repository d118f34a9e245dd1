#include "stnreid/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stnreid/eval.hpp"

namespace fs = std::filesystem;

namespace stnreid {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  require(use_id || use_tri, "config", "use_id and use_tri cannot both be false");
  require(decay_epoch < total_epochs, "config", "decay_epoch must be < total_epochs");
  require(total_epochs >= 1, "config", "total_epochs must be >= 1");
  require(P >= 2 && K >= 2, "config", "P and K must be >= 2");
  require(margin > 0, "config", "margin must be > 0");
  require(crop_removed_min >= 0 && crop_removed_max < 1 && crop_removed_min <= crop_removed_max,
          "config", "bad crop_removed range");
  require(stage == 1 || stage == 2, "config", "stage must be 1 or 2");
  require(mode == "pm" || mode == "mm" || mode == "baseline", "config",
          "mode must be pm, mm or baseline");
  require(eval_metric == "euclidean" || eval_metric == "cosine", "config",
          "eval_metric must be euclidean or cosine");
  require(!reid_channels.empty() && reid_channels.back() == feature_dim, "config",
          "feature_dim must equal the last reid channel");
  require(label_smooth_eps >= 0 && label_smooth_eps < 1, "config",
          "label_smooth_eps must be in [0,1)");
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail("config", "bad boolean for " + key + ": " + v);
}

void apply_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "pt_warmstart") cfg.pt_warmstart = value;
  else if (key == "label_smooth") cfg.label_smooth = parse_bool(key, value);
  else if (key == "use_id") cfg.use_id = parse_bool(key, value);
  else if (key == "use_tri") cfg.use_tri = parse_bool(key, value);
  else if (key == "margin") cfg.margin = std::stof(value);
  else if (key == "lr_initial") cfg.lr_initial = std::stof(value);
  else if (key == "lr_decayed") cfg.lr_decayed = std::stof(value);
  else if (key == "decay_epoch") cfg.decay_epoch = std::stoi(value);
  else if (key == "total_epochs") cfg.total_epochs = std::stoi(value);
  else if (key == "P") cfg.P = std::stoi(value);
  else if (key == "K") cfg.K = std::stoi(value);
  else if (key == "weight_decay") cfg.weight_decay = std::stof(value);
  else if (key == "stage") cfg.stage = std::stoi(value);
  else if (key == "mode") cfg.mode = value;
  else if (key == "seed") cfg.seed = std::stoull(value);
  else if (key == "crop_removed_min") cfg.crop_removed_min = std::stof(value);
  else if (key == "crop_removed_max") cfg.crop_removed_max = std::stof(value);
  else if (key == "label_smooth_eps") cfg.label_smooth_eps = std::stof(value);
  else if (key == "augment_hflip") cfg.augment_hflip = parse_bool(key, value);
  else if (key == "augment_crop") cfg.augment_crop = parse_bool(key, value);
  else if (key == "augment_partial") cfg.augment_partial = parse_bool(key, value);
  else if (key == "stn_loss_detach_partial") cfg.stn_loss_detach_partial = parse_bool(key, value);
  else if (key == "eval_metric") cfg.eval_metric = value;
  else if (key == "feature_dim") cfg.feature_dim = std::stoi(value);
  else if (key == "reid_channels") {
    cfg.reid_channels.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.reid_channels.push_back(std::stoi(item));
    require(!cfg.reid_channels.empty(), "config", "reid_channels must not be empty");
  }
  else if (key == "ckpt_every") cfg.ckpt_every = std::stoi(value);
  else fail("config", "unknown key: " + key);
}

}  // namespace

TrainConfig parse_config_text(const std::string& text, TrainConfig base) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string::npos, "config", "expected key = value, got: " + line);
    apply_kv(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

TrainConfig parse_config_files(const std::vector<std::string>& paths, TrainConfig base) {
  for (const auto& path : paths) {
    std::ifstream is(path);
    require(is.is_open(), "config", "cannot open config: " + path);
    std::stringstream buffer;
    buffer << is.rdbuf();
    base = parse_config_text(buffer.str(), base);
  }
  return base;
}

std::string config_echo(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "pt_warmstart=" << cfg.pt_warmstart << "\n";
  os << "label_smooth=" << (cfg.label_smooth ? "true" : "false") << "\n";
  os << "use_id=" << (cfg.use_id ? "true" : "false") << "\n";
  os << "use_tri=" << (cfg.use_tri ? "true" : "false") << "\n";
  os << "margin=" << cfg.margin << "\n";
  os << "lr_initial=" << cfg.lr_initial << "\n";
  os << "lr_decayed=" << cfg.lr_decayed << "\n";
  os << "decay_epoch=" << cfg.decay_epoch << "\n";
  os << "total_epochs=" << cfg.total_epochs << "\n";
  os << "P=" << cfg.P << "\n";
  os << "K=" << cfg.K << "\n";
  os << "weight_decay=" << cfg.weight_decay << "\n";
  os << "stage=" << cfg.stage << "\n";
  os << "mode=" << cfg.mode << "\n";
  os << "seed=" << cfg.seed << "\n";
  os << "crop_removed_min=" << cfg.crop_removed_min << "\n";
  os << "crop_removed_max=" << cfg.crop_removed_max << "\n";
  os << "label_smooth_eps=" << cfg.label_smooth_eps << "\n";
  os << "augment_hflip=" << (cfg.augment_hflip ? "true" : "false") << "\n";
  os << "augment_crop=" << (cfg.augment_crop ? "true" : "false") << "\n";
  os << "augment_partial=" << (cfg.augment_partial ? "true" : "false") << "\n";
  os << "stn_loss_detach_partial=" << (cfg.stn_loss_detach_partial ? "true" : "false") << "\n";
  os << "eval_metric=" << cfg.eval_metric << "\n";
  os << "feature_dim=" << cfg.feature_dim << "\n";
  os << "reid_channels=";
  for (size_t i = 0; i < cfg.reid_channels.size(); ++i)
    os << (i ? "," : "") << cfg.reid_channels[i];
  os << "\n";
  os << "ckpt_every=" << cfg.ckpt_every << "\n";
  return os.str();
}

float lr_schedule(int epoch, const TrainConfig& cfg) {
  require(epoch >= 0 && epoch < cfg.total_epochs, "trainer", "epoch out of range");
  return epoch < cfg.decay_epoch ? cfg.lr_initial : cfg.lr_decayed;
}

LossFlags<float> loss_flags(const TrainConfig& cfg) {
  LossFlags<float> flags;
  flags.use_id = cfg.use_id;
  flags.use_tri = cfg.use_tri;
  flags.smoothing = cfg.label_smooth ? cfg.label_smooth_eps : 0.0f;
  flags.margin = cfg.margin;
  flags.detach_partial_in_stn_loss = cfg.stn_loss_detach_partial;
  return flags;
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

namespace {

std::string breakdown_str(const LossBreakdown<float>& bd) {
  std::ostringstream os;
  os << "total=" << bd.total << " id_h=" << bd.id_h << " id_p=" << bd.id_p << " id_a=" << bd.id_a
     << " tri_h=" << bd.tri_h << " tri_p=" << bd.tri_p << " tri_a=" << bd.tri_a
     << " stn=" << bd.stn;
  return os.str();
}

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

}  // namespace

LossBreakdown<float> train_step(StnReidModel& model, const Tensor& holistic,
                                const std::vector<int>& labels, const TrainConfig& cfg, Rng& rng,
                                float lr, int adam_t) {
  const int b = holistic.dim(0);
  const int c = holistic.dim(1), h = holistic.dim(2), w = holistic.dim(3);
  Tensor partial({b, c, h, w});
  const long long chw = static_cast<long long>(c) * h * w;
  for (int i = 0; i < b; ++i) {
    Tensor one = slice_batch_item(holistic, i);
    Tensor part = generate_partial(one, rng, cfg.crop_removed_min, cfg.crop_removed_max).first;
    std::copy(part.data(), part.data() + chw, partial.data() + i * chw);
  }

  const bool stn_train = !model.stn_frozen;
  StnActs<float> stn_acts;
  Tensor affined = stn_forward(model.stn, holistic, partial, stn_train, stn_acts);

  typename Extractor<float>::Acts acts_h, acts_p, acts_a;
  ReidOut<float> out_h = model.reid.forward(holistic, true, acts_h);
  ReidOut<float> out_p = model.reid.forward(partial, true, acts_p);
  ReidOut<float> out_a = model.reid.forward(affined, true, acts_a);

  TotalLossGrads<float> grads;
  LossBreakdown<float> bd = total_loss(out_h, out_p, out_a, labels, loss_flags(cfg), &grads);
  if (!std::isfinite(bd.total)) fail("trainer", "non-finite loss: " + breakdown_str(bd));

  model.reid.backward(acts_h, cfg.use_id ? &grads.glogits_h : nullptr, &grads.gfeat_h);
  model.reid.backward(acts_p, cfg.use_id ? &grads.glogits_p : nullptr, &grads.gfeat_p);
  Tensor g_affined =
      model.reid.backward(acts_a, cfg.use_id ? &grads.glogits_a : nullptr, &grads.gfeat_a);
  if (!model.stn_frozen) stn_backward(model.stn, stn_acts, g_affined);

  auto refs = model.param_refs();
  adam_step(refs, lr, kAdamBeta1, kAdamBeta2, kAdamEps, cfg.weight_decay, adam_t);
  return bd;
}

LossBreakdown<float> baseline_step(StnReidModel& model, const Tensor& images,
                                   const std::vector<int>& labels, const TrainConfig& cfg,
                                   float lr, int adam_t) {
  typename Extractor<float>::Acts acts;
  ReidOut<float> out = model.reid.forward(images, true, acts);
  LossBreakdown<float> bd;
  TensorT<float> glogits, gfeat;
  if (cfg.use_id)
    bd.id_h = id_loss(out.logits, labels, cfg.label_smooth ? cfg.label_smooth_eps : 0.0f,
                      &glogits);
  if (cfg.use_tri) bd.tri_h = adaptive_triplet_loss(out.feature, labels, cfg.margin, &gfeat);
  bd.total = bd.id_h + bd.id_p + bd.id_a + bd.tri_h + bd.tri_p + bd.tri_a + bd.stn;
  if (!std::isfinite(bd.total)) fail("trainer", "non-finite loss: " + breakdown_str(bd));

  model.reid.backward(acts, cfg.use_id ? &glogits : nullptr, cfg.use_tri ? &gfeat : nullptr);
  auto refs = model.param_refs();
  adam_step(refs, lr, kAdamBeta1, kAdamBeta2, kAdamEps, cfg.weight_decay, adam_t);
  return bd;
}

// ---------------------------------------------------------------------------
// Epoch runner
// ---------------------------------------------------------------------------

namespace {

void add_breakdown(LossBreakdown<float>& acc, const LossBreakdown<float>& bd) {
  acc.id_h += bd.id_h;
  acc.id_p += bd.id_p;
  acc.id_a += bd.id_a;
  acc.tri_h += bd.tri_h;
  acc.tri_p += bd.tri_p;
  acc.tri_a += bd.tri_a;
  acc.stn += bd.stn;
  acc.total += bd.total;
}

void scale_breakdown(LossBreakdown<float>& acc, float s) {
  acc.id_h *= s;
  acc.id_p *= s;
  acc.id_a *= s;
  acc.tri_h *= s;
  acc.tri_p *= s;
  acc.tri_a *= s;
  acc.stn *= s;
  acc.total *= s;
}

Checkpoint run_training(const DatasetIndex& data, const TrainConfig& cfg,
                        const std::string& out_dir, bool baseline, StnReidModel& model,
                        const EpochCallback& cb) {
  cfg.validate();
  require(!data.entries.empty(), "trainer", "empty dataset");

  std::ofstream metrics;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics.open(fs::path(out_dir) / "metrics.csv");
    require(metrics.is_open(), "trainer", "cannot open metrics.csv in " + out_dir);
    metrics << "epoch,lr,loss_total,loss_id_h,loss_id_p,loss_id_a,loss_tri_h,loss_tri_p,"
               "loss_tri_a,loss_stn\n";
  }

  const int batch = cfg.P * cfg.K;
  const int steps_per_epoch =
      std::max(1, (static_cast<int>(data.entries.size()) + batch - 1) / batch);
  Rng rng(hash_combine(cfg.seed, 0x77AA));
  int adam_t = 0;
  float last_avg_total = 0.0f;

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const float lr = lr_schedule(epoch, cfg);
    LossBreakdown<float> epoch_sum;
    for (int step = 0; step < steps_per_epoch; ++step) {
      std::vector<int> batch_idx = pk_sample(data, cfg.P, cfg.K, rng);
      std::vector<int> labels;
      labels.reserve(batch_idx.size());
      for (int idx : batch_idx)
        labels.push_back(data.entries[static_cast<size_t>(idx)].person_id);
      Tensor images = stack_images(data, batch_idx);

      AugmentFlags af;
      af.hflip = cfg.augment_hflip;
      af.random_crop = cfg.augment_crop;
      af.partial_aug = baseline && cfg.augment_partial;
      af.removed_min = cfg.crop_removed_min;
      af.removed_max = cfg.crop_removed_max;
      if (af.hflip || af.random_crop || af.partial_aug) {
        const long long chw =
            static_cast<long long>(images.dim(1)) * images.dim(2) * images.dim(3);
        for (int i = 0; i < images.dim(0); ++i) {
          Tensor item = augment(slice_batch_item(images, i), rng, af);
          std::copy(item.data(), item.data() + chw, images.data() + i * chw);
        }
      }

      ++adam_t;
      LossBreakdown<float> bd = baseline
                                    ? baseline_step(model, images, labels, cfg, lr, adam_t)
                                    : train_step(model, images, labels, cfg, rng, lr, adam_t);
      add_breakdown(epoch_sum, bd);
    }
    scale_breakdown(epoch_sum, 1.0f / steps_per_epoch);
    last_avg_total = epoch_sum.total;

    if (metrics.is_open()) {
      metrics << epoch << "," << lr << "," << epoch_sum.total << "," << epoch_sum.id_h << ","
              << epoch_sum.id_p << "," << epoch_sum.id_a << "," << epoch_sum.tri_h << ","
              << epoch_sum.tri_p << "," << epoch_sum.tri_a << "," << epoch_sum.stn << "\n";
      metrics.flush();
    }
    if (cb) cb({epoch, lr, epoch_sum});

    if (!out_dir.empty() && cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0) {
      Checkpoint ck = model.to_checkpoint(epoch, last_avg_total, config_echo(cfg));
      ck.save((fs::path(out_dir) / ("ckpt_epoch_" + std::to_string(epoch) + ".stnt")).string());
    }
  }

  Checkpoint final_ck = model.to_checkpoint(cfg.total_epochs, last_avg_total, config_echo(cfg));
  if (!out_dir.empty()) final_ck.save((fs::path(out_dir) / "ckpt_final.stnt").string());
  return final_ck;
}

StnReidModel build_model(const DatasetIndex& data, const TrainConfig& cfg) {
  ModelConfig mc;
  mc.image_h = data.height();
  mc.image_w = data.width();
  mc.num_ids = data.num_ids;
  mc.feature_dim = cfg.feature_dim;
  mc.reid_channels = cfg.reid_channels;
  StnReidModel model(mc, cfg.seed);
  if (!cfg.pt_warmstart.empty()) {
    Checkpoint donor = Checkpoint::load(cfg.pt_warmstart);
    model.load_params(donor, "reid.");
  }
  return model;
}

}  // namespace

Checkpoint train_joint(const DatasetIndex& data, const TrainConfig& cfg,
                       const std::string& out_dir, const EpochCallback& cb) {
  StnReidModel model = build_model(data, cfg);
  return run_training(data, cfg, out_dir, /*baseline=*/false, model, cb);
}

Checkpoint train_stage1(const DatasetIndex& data, const TrainConfig& cfg,
                        const std::string& out_dir, const EpochCallback& cb) {
  require(cfg.use_id && !cfg.use_tri && !cfg.label_smooth && cfg.pt_warmstart.empty(), "trainer",
          "stage 1 trains a weak ReID: use_id only, no label smoothing, no warm start");
  return train_joint(data, cfg, out_dir, cb);
}

Checkpoint train_stage2_pm(const DatasetIndex& data, const Checkpoint& stage1_ckpt,
                           const TrainConfig& cfg, const std::string& out_dir,
                           const EpochCallback& cb) {
  require(stage1_ckpt.has("stn.conv1.w"), "trainer", "checkpoint lacks stn parameters");
  StnReidModel model = build_model(data, cfg);
  model.load_params(stage1_ckpt, "stn.");
  model.freeze_stn();
  return run_training(data, cfg, out_dir, /*baseline=*/false, model, cb);
}

Checkpoint train_stage2_mm(const Checkpoint& reid_ckpt, const Checkpoint& stn_ckpt) {
  return merge_checkpoints(reid_ckpt, stn_ckpt);
}

Checkpoint train_baseline(const DatasetIndex& data, const TrainConfig& cfg,
                          const std::string& out_dir, const EpochCallback& cb) {
  StnReidModel model = build_model(data, cfg);
  model.freeze_stn();  // untouched; only the extractor trains
  return run_training(data, cfg, out_dir, /*baseline=*/true, model, cb);
}

// ---------------------------------------------------------------------------
// Experiment matrix
// ---------------------------------------------------------------------------

std::vector<MatrixResult> run_experiment_matrix(const DatasetIndex& data,
                                                const std::vector<MatrixRow>& rows,
                                                const std::string& out_dir, int eval_repeats,
                                                uint64_t eval_seed, int threads) {
  require(!rows.empty(), "trainer", "matrix needs at least one row");
  DatasetIndex probes = make_partial_probes(data, hash_combine(eval_seed, 0x9E0B));

  std::vector<MatrixResult> results;
  for (const auto& row : rows) {
    const std::string row_dir =
        out_dir.empty() ? "" : (fs::path(out_dir) / row.name).string();
    Checkpoint ckpt = train_joint(data, row.config, row_dir);
    StnReidModel model = StnReidModel::from_checkpoint(ckpt);

    EvalOptions opt;
    opt.repeats = eval_repeats;
    opt.seed = eval_seed;
    opt.threads = threads;
    opt.metric = row.config.eval_metric;
    opt.use_stn = true;
    const float with_stn = evaluate_protocol(model, probes, data, opt).rank1();
    opt.use_stn = false;
    const float without_stn = evaluate_protocol(model, probes, data, opt).rank1();
    results.push_back({row.name, with_stn, without_stn, with_stn - without_stn});
    std::cout << "matrix row " << row.name << ": rank1 with stn " << with_stn << ", without "
              << without_stn << ", improvement " << with_stn - without_stn << "\n";
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "matrix.csv");
    os << "row,rank1_with_stn,rank1_without_stn,improvement\n";
    for (const auto& r : results)
      os << r.name << "," << r.rank1_with_stn << "," << r.rank1_without_stn << ","
         << r.improvement << "\n";
  }
  return results;
}

std::vector<MatrixRow> default_matrix_rows(const TrainConfig& base,
                                           const std::string& donor_ckpt_path) {
  struct RowDef {
    const char* name;
    bool pt, ls, id, tri;
  };
  // Confrontation settings: the ReID module strengthens from Ep1 to Ep5.
  const RowDef defs[5] = {{"ep1", false, false, true, false},
                          {"ep2", true, false, true, false},
                          {"ep3", true, true, true, false},
                          {"ep4", true, false, true, true},
                          {"ep5", true, true, true, true}};
  std::vector<MatrixRow> rows;
  for (const auto& def : defs) {
    TrainConfig cfg = base;
    cfg.pt_warmstart = def.pt ? donor_ckpt_path : "";
    cfg.label_smooth = def.ls;
    cfg.use_id = def.id;
    cfg.use_tri = def.tri;
    rows.push_back({def.name, cfg});
  }
  return rows;
}

void write_manifest(const std::string& out_dir,
                    const std::vector<std::pair<std::string, std::string>>& kv) {
  fs::create_directories(out_dir);
  std::ofstream os(fs::path(out_dir) / "run.txt");
  require(os.is_open(), "trainer", "cannot write manifest in " + out_dir);
  os << "version=" << STNREID_VERSION << "\n";
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
}

}  // namespace stnreid
