#pragma once

#include <map>
#include <string>

#include "stnreid/tensor.hpp"

namespace stnreid {

// Named-tensor container on top of the STNT format: each record is a u32 LE
// name length, the UTF-8 name, then one STNT tensor. Records are written in
// name order so identical contents serialize identically.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;

  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "checkpoint", "missing tensor: " + name);
    return it->second;
  }

  void set_scalar(const std::string& name, float v) {
    Tensor t({1});
    t[0] = v;
    tensors[name] = std::move(t);
  }

  float get_scalar(const std::string& name) const { return get(name)[0]; }

  // Text is stored byte-per-element; f32 holds 0..255 exactly.
  void set_text(const std::string& name, const std::string& text);
  std::string get_text(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace stnreid
