#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stnreid/checkpoint.hpp"
#include "stnreid/data.hpp"
#include "stnreid/model.hpp"

using namespace stnreid;
namespace fs = std::filesystem;

namespace {

std::string temp_file(const char* tag) {
  static int counter = 0;
  const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
  return (fs::temp_directory_path() / (std::string("stnreid_ck_") + tag + "_" +
                                       std::to_string(tick % 100000) + "_" +
                                       std::to_string(counter++)))
      .string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("stnt tensor round trip is bit exact") {
  Rng rng(1);
  Tensor t({2, 3, 4, 5});
  for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-10, 10));
  const std::string path = temp_file("tensor") + ".stnt";
  save_stnt(path, t);
  Tensor back = load_stnt(path);
  REQUIRE(back.dims() == t.dims());
  for (long long i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
  fs::remove(path);
}

TEST_CASE("stnt header layout is exactly as specified") {
  Tensor t({1, 2});
  t[0] = 1.0f;
  t[1] = -2.0f;
  std::ostringstream os(std::ios::binary);
  write_stnt(os, t);
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 1 + 1 + 2 * 4 + 2 * 4);
  CHECK(bytes[0] == 0x53);  // 'S'
  CHECK(bytes[1] == 0x54);  // 'T'
  CHECK(bytes[2] == 0x4E);  // 'N'
  CHECK(bytes[3] == 0x54);  // 'T'
  CHECK(bytes[4] == 1);     // version
  CHECK(bytes[5] == 2);     // ndim
  // little-endian dims 1, 2
  CHECK(static_cast<unsigned char>(bytes[6]) == 1);
  CHECK(static_cast<unsigned char>(bytes[10]) == 2);
}

TEST_CASE("corrupt magic is rejected") {
  const std::string path = temp_file("bad") + ".stnt";
  std::ofstream os(path, std::ios::binary);
  os << "JUNKJUNKJUNK";
  os.close();
  CHECK_THROWS_AS(load_stnt(path), Error);
  fs::remove(path);
}

TEST_CASE("checkpoint container round trips bit exactly") {
  Rng rng(2);
  Checkpoint ckpt;
  Tensor a({3, 4});
  for (long long i = 0; i < a.numel(); ++i) a[i] = static_cast<float>(rng.uniform(-1, 1));
  ckpt.tensors["model.w"] = a;
  ckpt.set_scalar("meta.epoch", 7.0f);
  ckpt.set_text("meta.config", "use_id=true\nseed=3\n");

  const std::string p1 = temp_file("ck1") + ".stnt";
  const std::string p2 = temp_file("ck2") + ".stnt";
  ckpt.save(p1);
  Checkpoint back = Checkpoint::load(p1);
  CHECK(back.get_scalar("meta.epoch") == 7.0f);
  CHECK(back.get_text("meta.config") == "use_id=true\nseed=3\n");
  back.save(p2);
  CHECK(file_bytes(p1) == file_bytes(p2));
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("model checkpoint restores parameters exactly") {
  ModelConfig mc;
  mc.image_h = 32;
  mc.image_w = 16;
  mc.num_ids = 4;
  StnReidModel model(mc, 11);
  Checkpoint ckpt = model.to_checkpoint(3, 1.5f, "cfg");
  StnReidModel back = StnReidModel::from_checkpoint(ckpt);
  CHECK(back.cfg.image_h == 32);
  CHECK(back.cfg.num_ids == 4);

  auto refs_a = model.param_refs();
  auto refs_b = back.param_refs();
  REQUIRE(refs_a.size() == refs_b.size());
  for (size_t i = 0; i < refs_a.size(); ++i) {
    const Tensor& va = refs_a[i].param->value;
    const Tensor& vb = refs_b[i].param->value;
    REQUIRE(va.numel() == vb.numel());
    for (long long j = 0; j < va.numel(); ++j) CHECK(va[j] == vb[j]);
  }
}

TEST_CASE("merge composes reid and stn parts and is idempotent") {
  ModelConfig mc;
  mc.image_h = 32;
  mc.image_w = 16;
  mc.num_ids = 4;
  StnReidModel reid_model(mc, 21);
  StnReidModel stn_model(mc, 22);
  Checkpoint reid_ck = reid_model.to_checkpoint(1, 0, "reid");
  Checkpoint stn_ck = stn_model.to_checkpoint(2, 0, "stn");

  Checkpoint merged = merge_checkpoints(reid_ck, stn_ck);
  // reid tensors come from the reid checkpoint bit-exactly
  const Tensor& w = merged.get("reid.block0.conv.w");
  const Tensor& w_src = reid_ck.get("reid.block0.conv.w");
  for (long long i = 0; i < w.numel(); ++i) CHECK(w[i] == w_src[i]);
  const Tensor& sw = merged.get("stn.conv1.w");
  const Tensor& sw_src = stn_ck.get("stn.conv1.w");
  for (long long i = 0; i < sw.numel(); ++i) CHECK(sw[i] == sw_src[i]);

  Checkpoint twice = merge_checkpoints(merged, merged);
  REQUIRE(twice.tensors.size() == merged.tensors.size());
  for (const auto& [name, tensor] : merged.tensors) {
    const Tensor& other = twice.get(name);
    for (long long i = 0; i < tensor.numel(); ++i) CHECK(other[i] == tensor[i]);
  }

  // merged model's reid features equal the standalone reid model's
  StnReidModel merged_model = StnReidModel::from_checkpoint(merged);
  DatasetIndex data = synth_dataset(2, 2, 32, 16, 9);
  Tensor img = unsqueeze(data.entries[0].image);
  Tensor fa = merged_model.reid_features(img);
  Tensor fb = reid_model.reid_features(img);
  for (long long i = 0; i < fa.numel(); ++i) CHECK(fa[i] == fb[i]);
}

TEST_CASE("merge rejects feature-dim mismatch") {
  ModelConfig a;
  a.image_h = 32;
  a.image_w = 16;
  a.num_ids = 4;
  ModelConfig b = a;
  b.reid_channels = {16, 32, 64};
  b.feature_dim = 64;
  StnReidModel ma(a, 1), mb(b, 2);
  Checkpoint ca = ma.to_checkpoint(0, 0, "");
  Checkpoint cb = mb.to_checkpoint(0, 0, "");
  CHECK_THROWS_AS(merge_checkpoints(ca, cb), Error);
}
