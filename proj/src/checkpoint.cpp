#include "mimodet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mimodet::ckpt {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'M', 'O', 'D', 'E', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                        (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("checkpoint " + path + ": truncated header field");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= std::size_t(d);
  return n;
}

}  // namespace

void save(const std::string& path, const std::vector<Entry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, std::uint32_t(entries.size()));
  for (const auto& e : entries) {
    if (e.dtype != 'f' && e.dtype != 'd')
      throw std::invalid_argument("checkpoint: bad dtype for " + e.name);
    if (numel(e.shape) != e.values.size())
      throw std::invalid_argument("checkpoint: shape/value size mismatch for " + e.name);
    put_u32(os, std::uint32_t(e.name.size()));
    os.write(e.name.data(), std::streamsize(e.name.size()));
    put_u32(os, std::uint32_t(e.shape.size()));
    for (int d : e.shape) put_u32(os, std::uint32_t(d));
    os.put(e.dtype);
  }
  // Raw values, little-endian, in manifest order.
  for (const auto& e : entries) {
    if (e.dtype == 'f') {
      for (double v : e.values) {
        const float f = float(v);
        os.write(reinterpret_cast<const char*>(&f), sizeof(float));
      }
    } else {
      os.write(reinterpret_cast<const char*>(e.values.data()),
               std::streamsize(e.values.size() * sizeof(double)));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<Entry> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint " + path + ": bad magic (expected MIMODET1)");
  const std::uint32_t count = get_u32(is, path);
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    const std::uint32_t name_len = get_u32(is, path);
    e.name.resize(name_len);
    if (!is.read(e.name.data(), name_len))
      throw std::runtime_error("checkpoint " + path + ": truncated name");
    const std::uint32_t ndim = get_u32(is, path);
    e.shape.resize(ndim);
    for (auto& d : e.shape) d = int(get_u32(is, path));
    const int dt = is.get();
    if (dt != 'f' && dt != 'd')
      throw std::runtime_error("checkpoint " + path + ": bad dtype for " + e.name);
    e.dtype = char(dt);
  }
  for (auto& e : entries) {
    const std::size_t n = numel(e.shape);
    e.values.resize(n);
    if (e.dtype == 'f') {
      std::vector<float> buf(n);
      if (!is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n * sizeof(float))))
        throw std::runtime_error("checkpoint " + path + ": truncated values for " + e.name);
      for (std::size_t i = 0; i < n; ++i) e.values[i] = double(buf[i]);
    } else {
      if (!is.read(reinterpret_cast<char*>(e.values.data()),
                   std::streamsize(n * sizeof(double))))
        throw std::runtime_error("checkpoint " + path + ": truncated values for " + e.name);
    }
  }
  return entries;
}

}  // namespace mimodet::ckpt
