#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "stnreid/model.hpp"

using namespace stnreid;
namespace fs = std::filesystem;

#ifndef STNREID_CLI_PATH
#error "STNREID_CLI_PATH must be defined"
#endif

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path = fs::temp_directory_path() /
           ("stnreid_cli_" + std::to_string(tick % 100000) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args) {
  const std::string cmd = std::string(STNREID_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

int count_files(const fs::path& dir, const std::string& ext) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ext) ++n;
  return n;
}

}  // namespace

TEST_CASE("synth writes the dataset and a manifest") {
  TempDir tmp;
  const std::string out = (tmp.path / "data").string();
  CHECK(run("synth --ids 10 --per-id 6 --height 32 --width 16 --seed 4 --out " + out) == 0);
  CHECK(count_files(out, ".ppm") == 60);
  CHECK(fs::exists(fs::path(out) / "run.txt"));
  std::ifstream is(fs::path(out) / "run.txt");
  std::string first;
  std::getline(is, first);
  CHECK(first.rfind("version=", 0) == 0);
}

TEST_CASE("invalid usage exits with 2") {
  CHECK(run("definitely-not-a-command") == 2);
  CHECK(run("synth") == 2);  // missing required --out
}

TEST_CASE("help exits with 0") {
  CHECK(run("--help") == 0);
}

TEST_CASE("merge of a corrupt checkpoint fails with exit 1 and ERROR:cli prefix") {
  TempDir tmp;
  const std::string bad = (tmp.path / "bad.stnt").string();
  std::ofstream os(bad, std::ios::binary);
  os << "not a checkpoint";
  os.close();

  const std::string cmd = std::string(STNREID_CLI_PATH) + " merge --reid-from " + bad +
                          " --stn-from " + bad + " --out " + (tmp.path / "out").string() +
                          " 2> " + (tmp.path / "err.txt").string();
  const int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 1);
  std::ifstream is(tmp.path / "err.txt");
  std::string line;
  std::getline(is, line);
  CHECK(line.rfind("ERROR:cli:", 0) == 0);
}

TEST_CASE("two-stage pipeline plus merge and eval through the cli" * doctest::timeout(300)) {
  TempDir tmp;
  const std::string data = (tmp.path / "data").string();
  REQUIRE(run("synth --ids 4 --per-id 4 --height 32 --width 16 --seed 4 --out " + data) == 0);

  std::ofstream cfg(tmp.path / "weak.cfg");
  cfg << "use_id = true\nuse_tri = false\nlabel_smooth = false\n"
      << "total_epochs = 2\ndecay_epoch = 1\nP = 2\nK = 2\nseed = 5\n"
      << "lr_initial = 1e-3\nlr_decayed = 1e-4\naugment_hflip = false\n";
  cfg.close();
  std::ofstream cfg2(tmp.path / "strong.cfg");
  cfg2 << "use_id = true\nuse_tri = true\nlabel_smooth = true\n"
       << "total_epochs = 2\ndecay_epoch = 1\nP = 2\nK = 2\nseed = 6\n"
       << "lr_initial = 1e-3\nlr_decayed = 1e-4\naugment_hflip = false\n";
  cfg2.close();

  const std::string s1 = (tmp.path / "s1").string();
  REQUIRE(run("train --config " + (tmp.path / "weak.cfg").string() + " --stage 1 --data " + data +
              " --out " + s1) == 0);
  REQUIRE(fs::exists(fs::path(s1) / "ckpt_final.stnt"));

  const std::string s2 = (tmp.path / "s2").string();
  REQUIRE(run("train --config " + (tmp.path / "strong.cfg").string() +
              " --stage 2 --mode pm --stn-from " + s1 + "/ckpt_final.stnt --data " + data +
              " --out " + s2) == 0);
  REQUIRE(fs::exists(fs::path(s2) / "ckpt_final.stnt"));

  const std::string base = (tmp.path / "base").string();
  REQUIRE(run("train --config " + (tmp.path / "strong.cfg").string() +
              " --mode baseline --data " + data + " --out " + base) == 0);

  const std::string merged = (tmp.path / "merged").string();
  REQUIRE(run("merge --reid-from " + base + "/ckpt_final.stnt --stn-from " + s1 +
              "/ckpt_final.stnt --out " + merged) == 0);
  REQUIRE(fs::exists(fs::path(merged) / "merged.stnt"));

  const std::string ev = (tmp.path / "eval").string();
  REQUIRE(run("eval --ckpt " + merged + "/merged.stnt --data " + data + " --out " + ev +
              " --repeats 2 --seed 3 --threads 2") == 0);
  CHECK(fs::exists(fs::path(ev) / "cmc.csv"));
  std::ifstream is(fs::path(ev) / "cmc.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "rank,accuracy_mean,accuracy_std");
}

TEST_CASE("gradcheck subcommand passes with exit 0" * doctest::timeout(300)) {
  CHECK(run("gradcheck --all --instances 2") == 0);
}

TEST_CASE("eval dump-affined writes ppm crops" * doctest::timeout(300)) {
  TempDir tmp;
  const std::string data = (tmp.path / "data").string();
  REQUIRE(run("synth --ids 3 --per-id 3 --height 32 --width 16 --seed 2 --out " + data) == 0);
  std::ofstream cfg(tmp.path / "c.cfg");
  cfg << "use_id = true\ntotal_epochs = 1\ndecay_epoch = 0\nP = 2\nK = 2\nseed = 1\n";
  cfg.close();
  const std::string s1 = (tmp.path / "s1").string();
  REQUIRE(run("train --config " + (tmp.path / "c.cfg").string() + " --stage 1 --data " + data +
              " --out " + s1) == 0);
  const std::string ev = (tmp.path / "ev").string();
  REQUIRE(run("eval --ckpt " + s1 + "/ckpt_final.stnt --data " + data + " --out " + ev +
              " --repeats 1 --dump-affined 1") == 0);
  CHECK(fs::exists(fs::path(ev) / "affined" / "probe0_probe.ppm"));
  const bool top1_written = fs::exists(fs::path(ev) / "affined" / "probe0_top1_id0.ppm") ||
                            fs::exists(fs::path(ev) / "affined" / "probe0_top1_id1.ppm") ||
                            fs::exists(fs::path(ev) / "affined" / "probe0_top1_id2.ppm");
  CHECK(top1_written);
}

TEST_CASE("matrix subcommand writes the table" * doctest::timeout(600)) {
  TempDir tmp;
  const std::string data = (tmp.path / "data").string();
  REQUIRE(run("synth --ids 4 --per-id 4 --height 32 --width 16 --seed 2 --out " + data) == 0);
  std::ofstream cfg(tmp.path / "m.cfg");
  cfg << "use_id = true\ntotal_epochs = 2\ndecay_epoch = 1\nP = 2\nK = 2\nseed = 1\n";
  cfg.close();
  const std::string out = (tmp.path / "mx").string();
  REQUIRE(run("matrix --config " + (tmp.path / "m.cfg").string() + " --data " + data +
              " --out " + out + " --rows ep1,ep5 --repeats 2") == 0);
  std::ifstream is(fs::path(out) / "matrix.csv");
  REQUIRE(is.is_open());
  std::string header;
  std::getline(is, header);
  CHECK(header == "row,rank1_with_stn,rank1_without_stn,improvement");
  int rows = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("bench subcommand writes timing csv" * doctest::timeout(600)) {
  TempDir tmp;
  const std::string data = (tmp.path / "data").string();
  REQUIRE(run("synth --ids 3 --per-id 3 --height 32 --width 16 --seed 2 --out " + data) == 0);
  std::ofstream cfg(tmp.path / "c.cfg");
  cfg << "use_id = true\ntotal_epochs = 1\ndecay_epoch = 0\nP = 2\nK = 2\nseed = 1\n";
  cfg.close();
  const std::string s1 = (tmp.path / "s1").string();
  REQUIRE(run("train --config " + (tmp.path / "c.cfg").string() + " --stage 1 --data " + data +
              " --out " + s1) == 0);
  const std::string out = (tmp.path / "bench").string();
  REQUIRE(run("bench --ckpt " + s1 + "/ckpt_final.stnt --data " + data + " --out " + out +
              " --batch-sizes 1,2 --repeats 1 --gallery-size 4 --threads 2") == 0);
  std::ifstream is(fs::path(out) / "bench.csv");
  REQUIRE(is.is_open());
  std::string line;
  std::getline(is, line);
  CHECK(line.rfind("# threads=", 0) == 0);
  std::getline(is, line);
  CHECK(line == "batch_size,median_s,per_pair_us");
}

TEST_CASE("cli merge equals in-process merge" * doctest::timeout(300)) {
  TempDir tmp;
  const std::string data = (tmp.path / "data").string();
  REQUIRE(run("synth --ids 4 --per-id 4 --height 32 --width 16 --seed 9 --out " + data) == 0);
  std::ofstream cfg(tmp.path / "c.cfg");
  cfg << "use_id = true\ntotal_epochs = 1\ndecay_epoch = 0\nP = 2\nK = 2\nseed = 1\n";
  cfg.close();

  const std::string a = (tmp.path / "a").string();
  const std::string b = (tmp.path / "b").string();
  REQUIRE(run("train --config " + (tmp.path / "c.cfg").string() + " --stage 1 --data " + data +
              " --out " + a) == 0);
  REQUIRE(run("train --config " + (tmp.path / "c.cfg").string() + " --mode baseline --data " +
              data + " --out " + b) == 0);

  const std::string merged = (tmp.path / "m").string();
  REQUIRE(run("merge --reid-from " + b + "/ckpt_final.stnt --stn-from " + a +
              "/ckpt_final.stnt --out " + merged) == 0);

  Checkpoint via_cli = Checkpoint::load(merged + "/merged.stnt");
  Checkpoint in_proc = merge_checkpoints(Checkpoint::load(b + "/ckpt_final.stnt"),
                                         Checkpoint::load(a + "/ckpt_final.stnt"));
  REQUIRE(via_cli.tensors.size() == in_proc.tensors.size());
  for (const auto& [name, tensor] : in_proc.tensors) {
    const Tensor& other = via_cli.get(name);
    for (long long i = 0; i < tensor.numel(); ++i) CHECK(other[i] == tensor[i]);
  }
}
