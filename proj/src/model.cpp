#include "stnreid/model.hpp"

namespace stnreid {

StnReidModel::StnReidModel(const ModelConfig& config, uint64_t seed) : cfg(config) {
  Rng rng(hash_combine(seed, 0x0D31));
  stn = LocalizationNet<float>(6, cfg.image_h, cfg.image_w, rng);
  ExtractorSpec spec;
  spec.channels = cfg.reid_channels;
  spec.feature_dim = cfg.feature_dim;
  spec.classifier = true;
  spec.num_ids = cfg.num_ids;
  reid = Extractor<float>(spec, rng);
}

std::vector<ParamRef<float>> StnReidModel::param_refs() {
  std::vector<ParamRef<float>> refs;
  stn.visit_params("stn.", [&](const std::string& name, Parameter& p) {
    refs.push_back({name, &p});
  });
  reid.visit_params("reid.", [&](const std::string& name, Parameter& p) {
    refs.push_back({name, &p});
  });
  return refs;
}

void StnReidModel::freeze_stn() {
  stn.set_frozen(true);
  stn_frozen = true;
}

Tensor StnReidModel::reid_features(const Tensor& images) const {
  auto& self = const_cast<StnReidModel&>(*this);  // eval mode mutates nothing
  typename Extractor<float>::Acts acts;
  return self.reid.forward(images, false, acts).feature;
}

ReidOut<float> StnReidModel::reid_forward_eval(const Tensor& images) const {
  auto& self = const_cast<StnReidModel&>(*this);
  typename Extractor<float>::Acts acts;
  return self.reid.forward(images, false, acts);
}

Tensor StnReidModel::stn_theta_eval(const Tensor& holistic, const Tensor& partial) const {
  auto& self = const_cast<StnReidModel&>(*this);
  typename LocalizationNet<float>::Acts acts;
  Tensor pair = concat_pair(holistic, partial);
  return self.stn.forward(pair, false, acts);
}

Tensor StnReidModel::stn_affined_eval(const Tensor& holistic, const Tensor& partial,
                                      Tensor* theta_out) const {
  auto& self = const_cast<StnReidModel&>(*this);
  StnActs<float> acts;
  Tensor affined = stn_forward(self.stn, holistic, partial, false, acts);
  if (theta_out) *theta_out = acts.theta;
  return affined;
}

Checkpoint StnReidModel::to_checkpoint(int epoch, float loss_snapshot,
                                       const std::string& config_echo) const {
  Checkpoint ckpt;
  auto& self = const_cast<StnReidModel&>(*this);
  self.stn.visit_params("stn.", [&](const std::string& name, Parameter& p) {
    ckpt.tensors[name] = p.value;
  });
  self.stn.visit_buffers("stn.", [&](const std::string& name, Tensor& t) {
    ckpt.tensors[name] = t;
  });
  self.reid.visit_params("reid.", [&](const std::string& name, Parameter& p) {
    ckpt.tensors[name] = p.value;
  });
  self.reid.visit_buffers("reid.", [&](const std::string& name, Tensor& t) {
    ckpt.tensors[name] = t;
  });

  ckpt.set_scalar("meta.epoch", static_cast<float>(epoch));
  ckpt.set_scalar("meta.loss_total", loss_snapshot);
  ckpt.set_text("meta.config", config_echo);
  Tensor hw({2});
  hw[0] = static_cast<float>(cfg.image_h);
  hw[1] = static_cast<float>(cfg.image_w);
  ckpt.tensors["meta.arch.image_hw"] = std::move(hw);
  ckpt.set_scalar("meta.arch.num_ids", static_cast<float>(cfg.num_ids));
  ckpt.set_scalar("meta.arch.feature_dim", static_cast<float>(cfg.feature_dim));
  Tensor ch({static_cast<int>(cfg.reid_channels.size())});
  for (size_t i = 0; i < cfg.reid_channels.size(); ++i)
    ch[static_cast<long long>(i)] = static_cast<float>(cfg.reid_channels[i]);
  ckpt.tensors["meta.arch.reid_channels"] = std::move(ch);
  return ckpt;
}

void StnReidModel::load_params(const Checkpoint& ckpt, const std::string& prefix_filter) {
  auto want = [&](const std::string& name) {
    return prefix_filter.empty() || name.rfind(prefix_filter, 0) == 0;
  };
  auto load_into = [&](const std::string& name, Tensor& dst) {
    if (!want(name)) return;
    const Tensor& src = ckpt.get(name);
    require(src.dims() == dst.dims(), "checkpoint",
            "dims mismatch for " + name + ": " + src.dims_str() + " vs " + dst.dims_str());
    dst = src;
  };
  stn.visit_params("stn.", [&](const std::string& name, Parameter& p) { load_into(name, p.value); });
  stn.visit_buffers("stn.", [&](const std::string& name, Tensor& t) { load_into(name, t); });
  reid.visit_params("reid.",
                    [&](const std::string& name, Parameter& p) { load_into(name, p.value); });
  reid.visit_buffers("reid.", [&](const std::string& name, Tensor& t) { load_into(name, t); });
}

ModelConfig StnReidModel::config_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg;
  const Tensor& hw = ckpt.get("meta.arch.image_hw");
  cfg.image_h = static_cast<int>(hw[0]);
  cfg.image_w = static_cast<int>(hw[1]);
  cfg.num_ids = static_cast<int>(ckpt.get_scalar("meta.arch.num_ids"));
  cfg.feature_dim = static_cast<int>(ckpt.get_scalar("meta.arch.feature_dim"));
  const Tensor& ch = ckpt.get("meta.arch.reid_channels");
  cfg.reid_channels.clear();
  for (long long i = 0; i < ch.numel(); ++i) cfg.reid_channels.push_back(static_cast<int>(ch[i]));
  return cfg;
}

StnReidModel StnReidModel::from_checkpoint(const Checkpoint& ckpt) {
  StnReidModel model(config_from_checkpoint(ckpt), 0);
  model.load_params(ckpt);
  return model;
}

Checkpoint merge_checkpoints(const Checkpoint& reid_ckpt, const Checkpoint& stn_ckpt) {
  require(reid_ckpt.has("meta.arch.feature_dim") && stn_ckpt.has("meta.arch.feature_dim"),
          "trainer", "checkpoints lack architecture metadata");
  const int d_reid = static_cast<int>(reid_ckpt.get_scalar("meta.arch.feature_dim"));
  const int d_stn = static_cast<int>(stn_ckpt.get_scalar("meta.arch.feature_dim"));
  require(d_reid == d_stn, "trainer",
          "feature-dim mismatch: reid model has " + std::to_string(d_reid) +
              ", stn model has " + std::to_string(d_stn));
  const Tensor& hw_r = reid_ckpt.get("meta.arch.image_hw");
  const Tensor& hw_s = stn_ckpt.get("meta.arch.image_hw");
  require(hw_r[0] == hw_s[0] && hw_r[1] == hw_s[1], "trainer",
          "image-size mismatch between reid and stn checkpoints");

  Checkpoint merged;
  for (const auto& [name, tensor] : reid_ckpt.tensors)
    if (name.rfind("stn.", 0) != 0) merged.tensors[name] = tensor;
  for (const auto& [name, tensor] : stn_ckpt.tensors)
    if (name.rfind("stn.", 0) == 0) merged.tensors[name] = tensor;
  require(merged.has("stn.conv1.w"), "trainer", "stn checkpoint lacks stn parameters");
  require(merged.has("reid.block0.conv.w"), "trainer", "reid checkpoint lacks reid parameters");
  return merged;
}

}  // namespace stnreid
