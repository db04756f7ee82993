#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssctl/tensor.hpp"

namespace ssctl {

/// Flat named-array container behind every checkpoint. Binary layout: magic
/// "SSCTL1", then per entry — name length (u32 LE), UTF-8 name, dtype tag
/// (1 byte: 0 = f64, 1 = raw u8 blob), rank (u32 LE), dims (u32 LE each),
/// little-endian payload. Entry order is preserved, so save -> load -> save
/// is byte-identical.
struct NamedArrays {
  struct Entry {
    std::string name;
    std::uint8_t dtype = 0;
    std::vector<std::size_t> dims;
    std::vector<double> f64;
    std::vector<std::uint8_t> blob;
  };
  std::vector<Entry> entries;

  bool has(const std::string& name) const;
  const Entry& get(const std::string& name) const;  // FormatError if missing

  void put(const std::string& name, const Tensor& t);
  void put_scalar(const std::string& name, double v);
  void put_blob(const std::string& name, const std::string& bytes);

  Tensor tensor(const std::string& name) const;
  double scalar(const std::string& name) const;
  std::string blob(const std::string& name) const;
};

void save_arrays(const std::string& path, const NamedArrays& arrays);
NamedArrays load_arrays(const std::string& path);

}  // namespace ssctl
