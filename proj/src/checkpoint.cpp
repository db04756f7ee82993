#include "ssctl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace ssctl {

namespace {

constexpr char kMagic[6] = {'S', 'S', 'C', 'T', 'L', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint: " + what + " at offset " + std::to_string(pos));
  }
  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size()) fail(std::string("truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 8;
    return std::bit_cast<double>(bits);
  }
};

}  // namespace

bool NamedArrays::has(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

const NamedArrays::Entry& NamedArrays::get(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw FormatError("checkpoint: missing entry '" + name + "'");
}

void NamedArrays::put(const std::string& name, const Tensor& t) {
  Entry e;
  e.name = name;
  e.dtype = 0;
  e.dims = t.shape;
  e.f64 = t.data;
  entries.push_back(std::move(e));
}

void NamedArrays::put_scalar(const std::string& name, double v) {
  Entry e;
  e.name = name;
  e.dtype = 0;
  e.dims = {1};
  e.f64 = {v};
  entries.push_back(std::move(e));
}

void NamedArrays::put_blob(const std::string& name, const std::string& bytes) {
  Entry e;
  e.name = name;
  e.dtype = 1;
  e.dims = {bytes.size()};
  e.blob.assign(bytes.begin(), bytes.end());
  entries.push_back(std::move(e));
}

Tensor NamedArrays::tensor(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != 0) throw FormatError("checkpoint: entry '" + name + "' is not f64");
  Tensor t(e.dims);
  t.data = e.f64;
  return t;
}

double NamedArrays::scalar(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != 0 || e.f64.size() != 1) {
    throw FormatError("checkpoint: entry '" + name + "' is not a scalar");
  }
  return e.f64[0];
}

std::string NamedArrays::blob(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != 1) throw FormatError("checkpoint: entry '" + name + "' is not a blob");
  return std::string(e.blob.begin(), e.blob.end());
}

void save_arrays(const std::string& path, const NamedArrays& arrays) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  for (const auto& e : arrays.entries) {
    if (e.name.size() > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError("checkpoint: entry name too long");
    }
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.append(e.name);
    out.push_back(static_cast<char>(e.dtype));
    put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
    std::size_t count = 1;
    for (std::size_t d : e.dims) {
      put_u32(out, static_cast<std::uint32_t>(d));
      count *= d;
    }
    if (e.dtype == 0) {
      if (e.f64.size() != count) {
        throw FormatError("checkpoint: entry '" + e.name + "' payload/dims mismatch");
      }
      for (double v : e.f64) put_f64(out, v);
    } else if (e.dtype == 1) {
      if (e.blob.size() != count) {
        throw FormatError("checkpoint: entry '" + e.name + "' payload/dims mismatch");
      }
      out.append(reinterpret_cast<const char*>(e.blob.data()), e.blob.size());
    } else {
      throw FormatError("checkpoint: entry '" + e.name + "' has unknown dtype");
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("checkpoint: short write to '" + path + "'");
}

NamedArrays load_arrays(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};
  r.need(sizeof(kMagic), "magic");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0 in '" + path + "'");
  }
  r.pos = sizeof(kMagic);
  NamedArrays arrays;
  while (r.pos < buf.size()) {
    NamedArrays::Entry e;
    const std::uint32_t name_len = r.u32("name length");
    r.need(name_len, "name");
    e.name.assign(buf, r.pos, name_len);
    r.pos += name_len;
    e.dtype = r.u8("dtype");
    if (e.dtype > 1) r.fail("unknown dtype tag " + std::to_string(e.dtype));
    const std::uint32_t rank = r.u32("rank");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32("dim");
      e.dims.push_back(d);
      count *= d;
    }
    if (e.dtype == 0) {
      e.f64.reserve(count);
      for (std::size_t i = 0; i < count; ++i) e.f64.push_back(r.f64("f64 payload"));
    } else {
      r.need(count, "blob payload");
      e.blob.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                    buf.begin() + static_cast<std::ptrdiff_t>(r.pos + count));
      r.pos += count;
    }
    arrays.entries.push_back(std::move(e));
  }
  return arrays;
}

}  // namespace ssctl
