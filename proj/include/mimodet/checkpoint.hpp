#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Checkpoint file: magic "MIMODET1", a manifest of (name, shape, dtype)
// entries, then the raw little-endian values concatenated in manifest order.

namespace mimodet::ckpt {

struct Entry {
  std::string name;
  std::vector<int> shape;
  char dtype = 'f';           // 'f' = float32, 'd' = float64
  std::vector<double> values; // held widened; narrowed on save for 'f'
};

void save(const std::string& path, const std::vector<Entry>& entries);
std::vector<Entry> load(const std::string& path);

}  // namespace mimodet::ckpt
