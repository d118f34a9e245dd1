#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "stnreid/battery.hpp"
#include "stnreid/data.hpp"
#include "stnreid/eval.hpp"
#include "stnreid/trainer.hpp"

namespace fs = std::filesystem;
using namespace stnreid;

namespace {

std::vector<std::pair<std::string, std::string>> config_pairs(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream is(config_echo(cfg));
  std::string line;
  while (std::getline(is, line)) {
    const size_t eq = line.find('=');
    if (eq != std::string::npos) kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return kv;
}

Checkpoint load_checkpoint_cli(const std::string& path, const std::string& role) {
  try {
    return Checkpoint::load(path);
  } catch (const Error& e) {
    fail("cli", "cannot load " + role + " checkpoint " + path + " (" + e.what() + ")");
  }
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  require(!out.empty(), "cli", "empty list: " + csv);
  return out;
}

std::vector<std::string> parse_name_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  require(!out.empty(), "cli", "empty list: " + csv);
  return out;
}

struct CommonArgs {
  std::vector<std::string> configs;
  std::string out;
  std::string data;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

TrainConfig resolve_config(const CommonArgs& common) {
  TrainConfig cfg = parse_config_files(common.configs);
  if (common.seed_set) cfg.seed = common.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"STN-based partial person matching: training, evaluation, benchmarks"};
  app.require_subcommand(1);

  CommonArgs common;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic identity dataset");
  int synth_ids = 10, synth_per_id = 6, synth_h = 256, synth_w = 128;
  synth->add_option("--ids", synth_ids, "number of identities");
  synth->add_option("--per-id", synth_per_id, "images per identity");
  synth->add_option("--height", synth_h, "image height");
  synth->add_option("--width", synth_w, "image width");
  synth->add_option("--out", common.out, "output directory")->required();
  synth->add_option("--seed", common.seed, "rng seed");

  // train
  auto* train = app.add_subcommand("train", "train (stage 1, stage 2 pm/mm, or baseline)");
  int train_stage = 1;
  std::string train_mode = "pm";
  std::string stn_from, reid_from;
  train->add_option("--config", common.configs, "config file(s), later files override");
  train->add_option("--stage", train_stage, "1 or 2");
  train->add_option("--mode", train_mode, "pm | mm | baseline");
  train->add_option("--data", common.data, "dataset directory");
  train->add_option("--out", common.out, "output directory")->required();
  train->add_option("--seed", common.seed, "seed override")->each([&](const std::string&) {
    common.seed_set = true;
  });
  train->add_option("--stn-from", stn_from, "checkpoint supplying the frozen STN (stage 2)");
  train->add_option("--reid-from", reid_from, "checkpoint supplying the ReID model (merge mode)");
  train->add_option("--threads", common.threads, "worker threads for evaluation paths");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "CMC evaluation of a checkpoint");
  std::string eval_ckpt, eval_metric = "euclidean";
  int eval_repeats = 10, dump_affined = 0;
  bool no_stn = false;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", common.data, "holistic gallery directory")->required();
  eval_cmd->add_option("--out", common.out, "output directory")->required();
  eval_cmd->add_option("--repeats", eval_repeats, "protocol repeats");
  eval_cmd->add_option("--seed", common.seed, "protocol seed");
  eval_cmd->add_option("--threads", common.threads, "worker threads");
  eval_cmd->add_option("--metric", eval_metric, "euclidean | cosine");
  eval_cmd->add_flag("--no-stn", no_stn, "bypass the STN (direct feature matching)");
  eval_cmd->add_option("--dump-affined", dump_affined,
                       "dump top-5 affined images for the first N probes");

  // bench
  auto* bench = app.add_subcommand("bench", "batched 1-N matching throughput");
  std::string bench_ckpt, batch_sizes_csv = "1,2,4,8,16,32";
  int bench_repeats = 5, gallery_size = 60;
  bench->add_option("--ckpt", bench_ckpt, "checkpoint file")->required();
  bench->add_option("--data", common.data, "gallery image directory")->required();
  bench->add_option("--out", common.out, "output directory")->required();
  bench->add_option("--batch-sizes", batch_sizes_csv, "comma-separated batch sizes");
  bench->add_option("--repeats", bench_repeats, "timing repeats (median reported)");
  bench->add_option("--gallery-size", gallery_size, "gallery size (entries cycled if needed)");
  bench->add_option("--seed", common.seed, "probe selection seed");
  bench->add_option("--threads", common.threads, "worker threads");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of all primitives");
  bool gc_all = false;
  int gc_instances = 5;
  gradcheck->add_flag("--all", gc_all, "run the full battery (default)");
  gradcheck->add_option("--instances", gc_instances, "instances per primitive");
  gradcheck->add_option("--out", common.out, "optional output directory");

  // matrix
  auto* matrix = app.add_subcommand("matrix", "confrontation experiment table (ep1..ep5)");
  int matrix_repeats = 10;
  std::string matrix_rows = "ep1,ep2,ep3,ep4,ep5";
  matrix->add_option("--config", common.configs, "base config file(s)");
  matrix->add_option("--data", common.data, "dataset directory")->required();
  matrix->add_option("--out", common.out, "output directory")->required();
  matrix->add_option("--seed", common.seed, "seed override")->each([&](const std::string&) {
    common.seed_set = true;
  });
  matrix->add_option("--repeats", matrix_repeats, "evaluation repeats per row");
  matrix->add_option("--rows", matrix_rows, "subset of rows, e.g. ep1,ep5");
  matrix->add_option("--threads", common.threads, "worker threads");

  // merge
  auto* merge = app.add_subcommand("merge", "compose a ReID checkpoint with a frozen STN");
  merge->add_option("--reid-from", reid_from, "trained ReID checkpoint")->required();
  merge->add_option("--stn-from", stn_from, "checkpoint supplying the STN")->required();
  merge->add_option("--out", common.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (synth->parsed()) {
      DatasetIndex data = synth_dataset(synth_ids, synth_per_id, synth_h, synth_w, common.seed);
      save_dataset(common.out, data);
      write_manifest(common.out, {{"command", "synth"},
                                  {"ids", std::to_string(synth_ids)},
                                  {"per_id", std::to_string(synth_per_id)},
                                  {"height", std::to_string(synth_h)},
                                  {"width", std::to_string(synth_w)},
                                  {"seed", std::to_string(common.seed)}});
      std::cout << "wrote " << data.entries.size() << " images to " << common.out << "\n";
    } else if (train->parsed()) {
      TrainConfig cfg = resolve_config(common);
      cfg.stage = train_stage;
      cfg.mode = train_mode;
      cfg.validate();

      Checkpoint ckpt;
      if (train_stage == 2 && train_mode == "mm") {
        require(!stn_from.empty() && !reid_from.empty(), "cli",
                "merge mode needs --stn-from and --reid-from");
        ckpt = train_stage2_mm(load_checkpoint_cli(reid_from, "reid"),
                               load_checkpoint_cli(stn_from, "stn"));
        fs::create_directories(common.out);
        ckpt.save((fs::path(common.out) / "ckpt_final.stnt").string());
      } else {
        require(!common.data.empty(), "cli", "training needs --data");
        DatasetIndex data = load_dataset(common.data);
        if (train_mode == "baseline") {
          ckpt = train_baseline(data, cfg, common.out);
        } else if (train_stage == 1) {
          ckpt = train_joint(data, cfg, common.out);
        } else {
          require(!stn_from.empty(), "cli", "stage 2 pipeline mode needs --stn-from");
          ckpt = train_stage2_pm(data, load_checkpoint_cli(stn_from, "stn"), cfg, common.out);
        }
      }
      auto kv = config_pairs(cfg);
      kv.insert(kv.begin(), {{"command", "train"},
                             {"data", common.data},
                             {"stn_from", stn_from},
                             {"reid_from", reid_from},
                             {"threads", std::to_string(common.threads)}});
      write_manifest(common.out, kv);
      std::cout << "training done; checkpoint in " << common.out << "\n";
    } else if (eval_cmd->parsed()) {
      Checkpoint ckpt = load_checkpoint_cli(eval_ckpt, "model");
      StnReidModel model = StnReidModel::from_checkpoint(ckpt);
      DatasetIndex gallery = load_dataset(common.data);
      DatasetIndex probes = make_partial_probes(gallery, hash_combine(common.seed, 0x9E0B));
      EvalOptions opt;
      opt.repeats = eval_repeats;
      opt.seed = common.seed;
      opt.use_stn = !no_stn;
      opt.threads = common.threads;
      opt.metric = eval_metric;
      CmcReport report = evaluate_protocol(model, probes, gallery, opt);
      fs::create_directories(common.out);
      write_cmc_csv((fs::path(common.out) / "cmc.csv").string(), report);
      for (size_t r = 0; r < report.ranks.size(); ++r)
        std::cout << "rank-" << report.ranks[r] << ": " << report.mean_accuracy[r] << " (std "
                  << report.std_accuracy[r] << ")\n";
      if (dump_affined > 0) {
        std::vector<int> gallery_entries;
        for (int id = 0; id < gallery.num_ids; ++id)
          gallery_entries.push_back(gallery.by_id[static_cast<size_t>(id)].front());
        for (int i = 0; i < std::min<int>(dump_affined, static_cast<int>(probes.entries.size()));
             ++i)
          dump_affined_topk(model, unsqueeze(probes.entries[static_cast<size_t>(i)].image),
                            gallery, gallery_entries, 5,
                            (fs::path(common.out) / "affined").string(),
                            "probe" + std::to_string(i), common.threads);
      }
      write_manifest(common.out, {{"command", "eval"},
                                  {"ckpt", eval_ckpt},
                                  {"data", common.data},
                                  {"repeats", std::to_string(eval_repeats)},
                                  {"seed", std::to_string(common.seed)},
                                  {"use_stn", no_stn ? "false" : "true"},
                                  {"metric", eval_metric},
                                  {"threads", std::to_string(common.threads)}});
    } else if (bench->parsed()) {
      Checkpoint ckpt = load_checkpoint_cli(bench_ckpt, "model");
      StnReidModel model = StnReidModel::from_checkpoint(ckpt);
      DatasetIndex data = load_dataset(common.data);
      const std::vector<int> sizes = parse_int_list(batch_sizes_csv);

      Rng rng(hash_combine(common.seed, 0xBE));
      Tensor probe =
          generate_partial(unsqueeze(data.entries[0].image), rng).first;
      Tensor gallery({gallery_size, 3, data.height(), data.width()});
      const long long chw = static_cast<long long>(3) * data.height() * data.width();
      for (int g = 0; g < gallery_size; ++g) {
        const auto& img = data.entries[static_cast<size_t>(g) % data.entries.size()].image;
        std::copy(img.data(), img.data() + chw, gallery.data() + g * chw);
      }
      auto rows = bench_matching(model, probe, gallery, sizes, bench_repeats, common.threads);
      fs::create_directories(common.out);
      write_bench_csv((fs::path(common.out) / "bench.csv").string(), rows, common.threads);
      for (const auto& row : rows)
        std::cout << "N=" << row.batch_size << "  " << row.median_s << " s/probe  "
                  << row.per_pair_us << " us/pair\n";
      write_manifest(common.out, {{"command", "bench"},
                                  {"ckpt", bench_ckpt},
                                  {"gallery_size", std::to_string(gallery_size)},
                                  {"batch_sizes", batch_sizes_csv},
                                  {"repeats", std::to_string(bench_repeats)},
                                  {"threads", std::to_string(common.threads)}});
    } else if (gradcheck->parsed()) {
      (void)gc_all;  // the battery is the only mode
      auto cases = run_gradient_battery(gc_instances, true);
      const bool pass = battery_all_pass(cases);
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        std::ofstream os(fs::path(common.out) / "gradcheck.csv");
        os << "case,instance,max_rel_err,tol,pass\n";
        for (const auto& c : cases)
          os << c.name << "," << c.instance << "," << c.report.max_rel_err << "," << c.rel_tol
             << "," << (c.report.pass ? 1 : 0) << "\n";
        write_manifest(common.out, {{"command", "gradcheck"},
                                    {"instances", std::to_string(gc_instances)}});
      }
      std::cout << (pass ? "all gradient checks passed" : "gradient checks FAILED") << "\n";
      if (!pass) fail("nnops", "gradient battery failed");
    } else if (matrix->parsed()) {
      TrainConfig base = resolve_config(common);
      DatasetIndex data = load_dataset(common.data);

      // Donor checkpoint stands in for pretrained weights: the same
      // extractor trained 3x longer on this data.
      TrainConfig donor_cfg = base;
      donor_cfg.use_id = true;
      donor_cfg.use_tri = true;
      donor_cfg.label_smooth = true;
      donor_cfg.augment_partial = true;
      donor_cfg.total_epochs = base.total_epochs * 3;
      donor_cfg.decay_epoch = base.total_epochs * 2;
      donor_cfg.mode = "baseline";
      const std::string donor_dir = (fs::path(common.out) / "donor").string();
      train_baseline(data, donor_cfg, donor_dir);
      const std::string donor_path = (fs::path(donor_dir) / "ckpt_final.stnt").string();

      auto all_rows = default_matrix_rows(base, donor_path);
      std::vector<MatrixRow> rows;
      for (const auto& name : parse_name_list(matrix_rows)) {
        bool found = false;
        for (const auto& row : all_rows)
          if (row.name == name) {
            rows.push_back(row);
            found = true;
          }
        require(found, "cli", "unknown matrix row: " + name);
      }
      auto results = run_experiment_matrix(data, rows, common.out, matrix_repeats,
                                           hash_combine(base.seed, 0xEA11), common.threads);
      auto kv = config_pairs(base);
      kv.insert(kv.begin(), {{"command", "matrix"},
                             {"rows", matrix_rows},
                             {"repeats", std::to_string(matrix_repeats)},
                             {"threads", std::to_string(common.threads)}});
      write_manifest(common.out, kv);
    } else if (merge->parsed()) {
      Checkpoint merged = train_stage2_mm(load_checkpoint_cli(reid_from, "reid"),
                                          load_checkpoint_cli(stn_from, "stn"));
      fs::create_directories(common.out);
      merged.save((fs::path(common.out) / "merged.stnt").string());
      write_manifest(common.out, {{"command", "merge"},
                                  {"reid_from", reid_from},
                                  {"stn_from", stn_from}});
      std::cout << "merged checkpoint written to " << common.out << "/merged.stnt\n";
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    const std::string prefix = e.module() + ":";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    std::cerr << "ERROR:" << e.module() << ":" << msg << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "ERROR:cli:" << e.what() << "\n";
    return 1;
  }
  return 0;
}
