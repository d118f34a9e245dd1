#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stnreid/eval.hpp"
#include "stnreid/trainer.hpp"

using namespace stnreid;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path = fs::temp_directory_path() /
           ("stnreid_tr_" + std::to_string(tick % 100000) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.P = 2;
  cfg.K = 2;
  cfg.total_epochs = 2;
  cfg.decay_epoch = 1;
  cfg.lr_initial = 1e-3f;
  cfg.lr_decayed = 1e-4f;
  cfg.augment_hflip = false;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("config parsing with comments and last-wins override") {
  const std::string text =
      "# experiment\n"
      "use_id = true\n"
      "use_tri = false\n"
      "margin = 0.35  # inline comment\n"
      "P = 4\n"
      "K = 4\n"
      "seed = 123\n"
      "P = 6\n";
  TrainConfig cfg = parse_config_text(text);
  CHECK(cfg.use_id);
  CHECK_FALSE(cfg.use_tri);
  CHECK(cfg.margin == doctest::Approx(0.35f));
  CHECK(cfg.P == 6);
  CHECK(cfg.seed == 123);
}

TEST_CASE("config rejects unknown keys and bad lines") {
  CHECK_THROWS_AS(parse_config_text("lr = 0.1\n"), Error);
  CHECK_THROWS_AS(parse_config_text("just words\n"), Error);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.use_id = false;
  cfg.use_tri = false;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.decay_epoch = 50;
  cfg.total_epochs = 30;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.mode = "other";
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("config files compose with later files overriding") {
  TempDir tmp;
  {
    std::ofstream a(tmp.path / "a.cfg");
    a << "use_id = true\ntotal_epochs = 30\nseed = 1\n";
    std::ofstream b(tmp.path / "b.cfg");
    b << "total_epochs = 10\ndecay_epoch = 5\n";
  }
  TrainConfig cfg = parse_config_files(
      {(tmp.path / "a.cfg").string(), (tmp.path / "b.cfg").string()});
  CHECK(cfg.total_epochs == 10);
  CHECK(cfg.decay_epoch == 5);
  CHECK(cfg.seed == 1);
}

TEST_CASE("lr schedule boundaries") {
  TrainConfig cfg;
  cfg.lr_initial = 2e-4f;
  cfg.lr_decayed = 2e-5f;
  cfg.decay_epoch = 150;
  cfg.total_epochs = 300;
  CHECK(lr_schedule(0, cfg) == doctest::Approx(2e-4f));
  CHECK(lr_schedule(149, cfg) == doctest::Approx(2e-4f));
  CHECK(lr_schedule(150, cfg) == doctest::Approx(2e-5f));
  CHECK(lr_schedule(299, cfg) == doctest::Approx(2e-5f));
  CHECK_THROWS_AS(lr_schedule(300, cfg), Error);
}

TEST_CASE("train_step decreases loss on a repeated batch") {
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  ModelConfig mc;
  mc.image_h = 32;
  mc.image_w = 16;
  mc.num_ids = 4;
  StnReidModel model(mc, cfg.seed);

  Rng rng(3);
  auto batch = pk_sample(data, 2, 2, rng);
  std::vector<int> labels;
  for (int idx : batch) labels.push_back(data.entries[static_cast<size_t>(idx)].person_id);
  Tensor images = stack_images(data, batch);

  float loss5 = 0, loss20 = 0;
  for (int t = 1; t <= 20; ++t) {
    Rng step_rng(7);  // identical partials every step
    const LossBreakdown<float> bd = train_step(model, images, labels, cfg, step_rng, 1e-3f, t);
    if (t == 5) loss5 = bd.total;
    if (t == 20) loss20 = bd.total;
  }
  CHECK(loss20 < loss5);
}

TEST_CASE("train_step reports disabled terms as exactly zero") {
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();  // use_tri = false
  ModelConfig mc;
  mc.image_h = 32;
  mc.image_w = 16;
  mc.num_ids = 4;
  StnReidModel model(mc, cfg.seed);
  Rng rng(3);
  auto batch = pk_sample(data, 2, 2, rng);
  std::vector<int> labels;
  for (int idx : batch) labels.push_back(data.entries[static_cast<size_t>(idx)].person_id);
  Tensor images = stack_images(data, batch);
  const LossBreakdown<float> bd = train_step(model, images, labels, cfg, rng, 1e-3f, 1);
  CHECK(bd.tri_h == 0.0f);
  CHECK(bd.tri_p == 0.0f);
  CHECK(bd.tri_a == 0.0f);
  CHECK(bd.total ==
        bd.id_h + bd.id_p + bd.id_a + bd.tri_h + bd.tri_p + bd.tri_a + bd.stn);
}

TEST_CASE("frozen stn is bit-identical across train steps") {
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  ModelConfig mc;
  mc.image_h = 32;
  mc.image_w = 16;
  mc.num_ids = 4;
  StnReidModel model(mc, cfg.seed);
  model.freeze_stn();

  std::vector<Tensor> before;
  model.stn.visit_params("", [&](const std::string&, Parameter& p) { before.push_back(p.value); });

  Rng rng(3);
  for (int t = 1; t <= 3; ++t) {
    auto batch = pk_sample(data, 2, 2, rng);
    std::vector<int> labels;
    for (int idx : batch) labels.push_back(data.entries[static_cast<size_t>(idx)].person_id);
    Tensor images = stack_images(data, batch);
    train_step(model, images, labels, cfg, rng, 1e-3f, t);
  }

  size_t k = 0;
  model.stn.visit_params("", [&](const std::string&, Parameter& p) {
    const Tensor& b = before[k++];
    for (long long i = 0; i < b.numel(); ++i) {
      CHECK(p.value[i] == b[i]);
      CHECK(p.grad[i] == 0.0f);
      CHECK(p.adam_m[i] == 0.0f);
    }
  });
}

TEST_CASE("train_joint runs, writes metrics.csv with the exact header") {
  TempDir tmp;
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  Checkpoint ckpt = train_joint(data, cfg, tmp.path.string());
  CHECK(fs::exists(tmp.path / "metrics.csv"));
  CHECK(fs::exists(tmp.path / "ckpt_final.stnt"));

  std::ifstream is(tmp.path / "metrics.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header ==
        "epoch,lr,loss_total,loss_id_h,loss_id_p,loss_id_a,loss_tri_h,loss_tri_p,loss_tri_a,"
        "loss_stn");
  int rows = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == cfg.total_epochs);
}

TEST_CASE("stage-1 training moves theta measurably off identity" * doctest::timeout(900)) {
  // thin extractor keeps the ReID module weak; the detached alignment loss
  // keeps gradient on theta once features cluster
  DatasetIndex data = synth_dataset(10, 6, 48, 32, 4242);
  TrainConfig cfg;
  cfg.use_id = true;
  cfg.use_tri = false;
  cfg.label_smooth = false;
  cfg.reid_channels = {8, 16, 32, 128};
  cfg.stn_loss_detach_partial = true;
  cfg.total_epochs = 500;
  cfg.decay_epoch = 400;
  cfg.lr_initial = 1e-3f;
  cfg.lr_decayed = 1e-4f;
  cfg.augment_hflip = false;
  cfg.seed = 1;
  Checkpoint ckpt = train_stage1(data, cfg, "");
  StnReidModel model = StnReidModel::from_checkpoint(ckpt);
  const float dev = mean_theta_identity_deviation(model, data, 48, 2024);
  CHECK(dev > 0.05f);
}

TEST_CASE("ckpt_every writes per-epoch checkpoints") {
  TempDir tmp;
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  cfg.ckpt_every = 1;
  train_joint(data, cfg, tmp.path.string());
  CHECK(fs::exists(tmp.path / "ckpt_epoch_0.stnt"));
  CHECK(fs::exists(tmp.path / "ckpt_epoch_1.stnt"));
  CHECK(fs::exists(tmp.path / "ckpt_final.stnt"));
}

TEST_CASE("train_stage1 enforces the weak-reid precondition") {
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  cfg.use_tri = true;
  CHECK_THROWS_AS(train_stage1(data, cfg, ""), Error);
}

TEST_CASE("training determinism: same seed, same curves, same checkpoint bytes") {
  TempDir tmp1, tmp2;
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  cfg.total_epochs = 3;
  cfg.decay_epoch = 2;

  std::vector<float> curve1, curve2;
  train_joint(data, cfg, tmp1.path.string(),
              [&](const EpochStats& s) { curve1.push_back(s.avg.total); });
  train_joint(data, cfg, tmp2.path.string(),
              [&](const EpochStats& s) { curve2.push_back(s.avg.total); });
  REQUIRE(curve1.size() == curve2.size());
  for (size_t i = 0; i < curve1.size(); ++i)
    CHECK(std::abs(curve1[i] - curve2[i]) < 1e-6f);

  std::ifstream a(tmp1.path / "ckpt_final.stnt", std::ios::binary);
  std::ifstream b(tmp2.path / "ckpt_final.stnt", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
}

TEST_CASE("stage2 pm keeps the stn bit-identical between checkpoints") {
  TempDir tmp;
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig s1 = tiny_config();
  Checkpoint stage1 = train_stage1(data, s1, "");

  TrainConfig s2 = tiny_config();
  s2.use_tri = true;
  s2.label_smooth = true;
  s2.stage = 2;
  Checkpoint stage2 = train_stage2_pm(data, stage1, s2, tmp.path.string());

  for (const auto& [name, tensor] : stage1.tensors) {
    if (name.rfind("stn.", 0) != 0) continue;
    const Tensor& after = stage2.get(name);
    REQUIRE(after.numel() == tensor.numel());
    for (long long i = 0; i < tensor.numel(); ++i) CHECK(after[i] == tensor[i]);
  }
}

TEST_CASE("stage2 pm requires stn parameters in the checkpoint") {
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  Checkpoint bogus;
  bogus.set_scalar("meta.epoch", 1);
  CHECK_THROWS_AS(train_stage2_pm(data, bogus, tiny_config(), ""), Error);
}

TEST_CASE("baseline training leaves stn untouched and trains reid") {
  TempDir tmp;
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig cfg = tiny_config();
  cfg.use_tri = true;
  cfg.mode = "baseline";
  cfg.augment_partial = true;
  Checkpoint ckpt = train_baseline(data, cfg, tmp.path.string());
  CHECK(ckpt.has("reid.block0.conv.w"));
  CHECK(ckpt.has("stn.conv1.w"));
}

TEST_CASE("overfit baseline classifies its training set" * doctest::timeout(300)) {
  DatasetIndex data = synth_dataset(10, 6, 32, 16, 77);
  TrainConfig cfg;
  cfg.use_id = true;
  cfg.use_tri = true;
  cfg.label_smooth = true;
  cfg.mode = "baseline";
  cfg.total_epochs = 80;
  cfg.decay_epoch = 60;
  cfg.lr_initial = 1e-3f;
  cfg.lr_decayed = 1e-4f;
  cfg.augment_hflip = false;
  cfg.seed = 3;
  Checkpoint ckpt = train_baseline(data, cfg, "");
  StnReidModel model = StnReidModel::from_checkpoint(ckpt);

  int hits = 0;
  for (const auto& entry : data.entries) {
    ReidOut<float> out = model.reid_forward_eval(unsqueeze(entry.image));
    int best = 0;
    for (int k = 1; k < out.logits.dim(1); ++k)
      if (out.logits.at(0, k) > out.logits.at(0, best)) best = k;
    hits += best == entry.person_id;
  }
  CHECK(static_cast<double>(hits) / data.entries.size() >= 0.95);
}

TEST_CASE("pm training loss decreases across early epochs" * doctest::timeout(300)) {
  DatasetIndex data = synth_dataset(6, 4, 32, 16, 5);
  TrainConfig s1 = tiny_config();
  s1.P = 3;
  Checkpoint stage1 = train_stage1(data, s1, "");

  TrainConfig pm = tiny_config();
  pm.P = 3;
  pm.use_tri = true;
  pm.label_smooth = true;
  pm.stage = 2;
  pm.total_epochs = 8;
  pm.decay_epoch = 6;
  std::vector<float> losses;
  train_stage2_pm(data, stage1, pm, "",
                  [&](const EpochStats& s) { losses.push_back(s.avg.total); });
  int violations = 0;
  for (size_t e = 3; e < losses.size(); ++e)
    if (losses[e] > losses[e - 1]) ++violations;
  CHECK(violations <= 1);
}

TEST_CASE("experiment matrix reports both rank-1 columns per row" * doctest::timeout(300)) {
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig base = tiny_config();
  std::vector<MatrixRow> rows = {{"weak", base}, {"strong", base}};
  rows[1].config.use_tri = true;
  rows[1].config.label_smooth = true;
  auto results = run_experiment_matrix(data, rows, "", 3, 9, 1);
  REQUIRE(results.size() == 2);
  for (const auto& r : results) {
    CHECK(r.rank1_with_stn >= 0.0f);
    CHECK(r.rank1_with_stn <= 1.0f);
    CHECK(r.rank1_without_stn >= 0.0f);
    CHECK(r.rank1_without_stn <= 1.0f);
    CHECK(r.improvement == doctest::Approx(r.rank1_with_stn - r.rank1_without_stn));
  }
}

TEST_CASE("warm start loads reid parameters from the donor") {
  TempDir tmp;
  DatasetIndex data = synth_dataset(4, 4, 32, 16, 5);
  TrainConfig donor_cfg = tiny_config();
  donor_cfg.mode = "baseline";
  Checkpoint donor = train_baseline(data, donor_cfg, tmp.path.string());
  const std::string donor_path = (tmp.path / "ckpt_final.stnt").string();

  TrainConfig cfg = tiny_config();
  cfg.total_epochs = 1;
  cfg.decay_epoch = 0;
  cfg.pt_warmstart = donor_path;
  Checkpoint warm = train_joint(data, cfg, "");
  CHECK(warm.has("reid.block0.conv.w"));
}
