#include "stnreid/checkpoint.hpp"

#include <fstream>

namespace stnreid {

void Checkpoint::set_text(const std::string& name, const std::string& text) {
  Tensor t({std::max<int>(1, static_cast<int>(text.size()))});
  for (size_t i = 0; i < text.size(); ++i)
    t[static_cast<long long>(i)] = static_cast<float>(static_cast<unsigned char>(text[i]));
  tensors[name] = std::move(t);
}

std::string Checkpoint::get_text(const std::string& name) const {
  const Tensor& t = get(name);
  std::string out;
  out.reserve(static_cast<size_t>(t.numel()));
  for (long long i = 0; i < t.numel(); ++i) {
    const int c = static_cast<int>(t[i]);
    if (c > 0) out.push_back(static_cast<char>(c));
  }
  return out;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "checkpoint", "cannot open for write: " + path);
  for (const auto& [name, tensor] : tensors) {
    detail::write_u32_le(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_stnt(os, tensor);
  }
  require(os.good(), "checkpoint", "write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), "checkpoint", "cannot open for read: " + path);
  Checkpoint ckpt;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const uint32_t len = detail::read_u32_le(is);
    require(is.good() && len > 0 && len < 4096, "checkpoint", "corrupt record name in " + path);
    std::string name(len, '\0');
    is.read(name.data(), len);
    require(is.good(), "checkpoint", "corrupt record name in " + path);
    ckpt.tensors[name] = read_stnt(is);
  }
  require(!ckpt.tensors.empty(), "checkpoint", "empty checkpoint: " + path);
  return ckpt;
}

}  // namespace stnreid
