#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "stnreid/common.hpp"

namespace stnreid {

// Dense row-major tensor of rank 1..4, templated on scalar. Training runs on
// float; gradient checks instantiate the same code with double.
template <typename T>
class TensorT {
public:
  TensorT() = default;

  explicit TensorT(std::vector<int> dims, T fill = T(0)) : dims_(std::move(dims)) {
    validate_dims();
    data_.assign(static_cast<size_t>(numel()), fill);
  }

  TensorT(std::vector<int> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims();
    require(static_cast<long long>(data_.size()) == numel(), "tensor",
            "data length does not match dims product");
  }

  int ndim() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  const std::vector<int>& dims() const { return dims_; }

  long long numel() const {
    long long n = 1;
    for (int d : dims_) n *= d;
    return dims_.empty() ? 0 : n;
  }

  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](long long i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](long long i) const { return data_[static_cast<size_t>(i)]; }

  // Row-major accessors for the common ranks.
  T& at(int i) { return data_[static_cast<size_t>(i)]; }
  const T& at(int i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int i, int j) { return data_[static_cast<size_t>(i) * dims_[1] + j]; }
  const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * dims_[1] + j]; }

  T& at(int c, int h, int w) {
    return data_[(static_cast<size_t>(c) * dims_[1] + h) * dims_[2] + w];
  }
  const T& at(int c, int h, int w) const {
    return data_[(static_cast<size_t>(c) * dims_[1] + h) * dims_[2] + w];
  }

  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<size_t>(n) * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<size_t>(n) * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  // Same data, new dims (copy; tensors are small at desk scale).
  TensorT reshaped(std::vector<int> new_dims) const {
    TensorT out(std::move(new_dims));
    require(out.numel() == numel(), "tensor", "reshape changes element count");
    out.data_ = data_;
    return out;
  }

  // Eigen adapters over the flat storage.
  using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap =
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

  MatMap mat(long long rows, long long cols) {
    return MatMap(data_.data(), rows, cols);
  }
  ConstMatMap mat(long long rows, long long cols) const {
    return ConstMatMap(data_.data(), rows, cols);
  }
  ArrMap array() { return ArrMap(data_.data(), static_cast<long long>(data_.size())); }
  ConstArrMap array() const {
    return ConstArrMap(data_.data(), static_cast<long long>(data_.size()));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_dims(const TensorT& other) const { return dims_ == other.dims_; }

  std::string dims_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(dims_);
    for (size_t i = 0; i < data_.size(); ++i) out[static_cast<long long>(i)] = static_cast<U>(data_[i]);
    return out;
  }

private:
  void validate_dims() {
    require(!dims_.empty() && dims_.size() <= 4, "tensor", "rank must be 1..4");
    for (int d : dims_) require(d >= 1, "tensor", "all dims must be >= 1, got " + dims_str());
  }

  std::vector<int> dims_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// STNT binary tensor format: magic "STNT", u8 version (=1), u8 ndim,
// ndim x u32 little-endian dims, f32 little-endian row-major payload.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32_le(std::ostream& os, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  write_u32_le(os, v);
}

inline float read_f32_le(std::istream& is) {
  uint32_t v = read_u32_le(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace detail

inline void write_stnt(std::ostream& os, const Tensor& t) {
  static const char magic[4] = {0x53, 0x54, 0x4E, 0x54};  // "STNT"
  os.write(magic, 4);
  char version = 1;
  os.write(&version, 1);
  char ndim = static_cast<char>(t.ndim());
  os.write(&ndim, 1);
  for (int i = 0; i < t.ndim(); ++i) detail::write_u32_le(os, static_cast<uint32_t>(t.dim(i)));
  for (long long i = 0; i < t.numel(); ++i) detail::write_f32_le(os, t[i]);
}

inline Tensor read_stnt(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  require(is.good() && std::memcmp(magic, "STNT", 4) == 0, "tensor", "bad STNT magic");
  char version = 0, ndim = 0;
  is.read(&version, 1);
  is.read(&ndim, 1);
  require(version == 1, "tensor", "unsupported STNT version");
  require(ndim >= 1 && ndim <= 4, "tensor", "STNT ndim out of range");
  std::vector<int> dims(static_cast<size_t>(ndim));
  for (auto& d : dims) {
    d = static_cast<int>(detail::read_u32_le(is));
    require(d >= 1, "tensor", "STNT dim must be >= 1");
  }
  Tensor t(dims);
  for (long long i = 0; i < t.numel(); ++i) t[i] = detail::read_f32_le(is);
  require(is.good(), "tensor", "truncated STNT payload");
  return t;
}

inline void save_stnt(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "tensor", "cannot open for write: " + path);
  write_stnt(os, t);
}

inline Tensor load_stnt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), "tensor", "cannot open for read: " + path);
  return read_stnt(is);
}

}  // namespace stnreid
