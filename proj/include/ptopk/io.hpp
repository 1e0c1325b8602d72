#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptopk/tensor.hpp"

namespace ptopk {

// "PTKT" tensor container: magic, version byte (=1), u32le rank,
// rank x u32le dims, row-major f32le payload.

inline void write_ptkt(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write("PTKT", 4);
  const char version = 1;
  f.write(&version, 1);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (int i = 0; i < t.rank(); ++i) {
    uint32_t d = static_cast<uint32_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
  if (!f) throw std::runtime_error("short write: " + path);
}

inline Tensor read_ptkt(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  f.seekg(0, std::ios::end);
  const int64_t file_size = static_cast<int64_t>(f.tellg());
  f.seekg(0);

  int64_t offset = 0;
  auto need = [&](int64_t bytes, const char* what) {
    if (file_size - offset < bytes)
      throw std::runtime_error(path + ": truncated while reading " + what + " at byte offset " +
                               std::to_string(offset) + " (need " +
                               std::to_string(bytes - (file_size - offset)) + " more bytes)");
  };

  char magic[4];
  need(4, "magic");
  f.read(magic, 4);
  if (std::memcmp(magic, "PTKT", 4) != 0)
    throw std::runtime_error(path + ": bad magic at byte offset 0");
  offset += 4;

  need(1, "version");
  char version = 0;
  f.read(&version, 1);
  if (version != 1)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(int(version)) +
                             " at byte offset " + std::to_string(offset));
  offset += 1;

  need(4, "rank");
  uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 4);
  offset += 4;
  if (rank > 8)
    throw std::runtime_error(path + ": implausible rank " + std::to_string(rank) +
                             " at byte offset " + std::to_string(offset - 4));

  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    need(4, "dims");
    uint32_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 4);
    offset += 4;
    shape[i] = static_cast<int>(d);
  }

  const int64_t count = shape_numel(shape);
  need(count * 4, "values");
  std::vector<float> data(static_cast<size_t>(count));
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 4));
  offset += count * 4;
  if (offset != file_size)
    throw std::runtime_error(path + ": " + std::to_string(file_size - offset) +
                             " trailing bytes at byte offset " + std::to_string(offset));
  return Tensor(std::move(shape), std::move(data));
}

// Plain key=value text files (config, manifests, dataset metadata).
// '#' starts a comment; blank lines are skipped; keys keep file order.

inline std::vector<std::pair<std::string, std::string>> read_kv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(first, eq - first);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::string val = line.substr(eq + 1);
    size_t vb = val.find_first_not_of(" \t");
    val = vb == std::string::npos ? "" : val.substr(vb);
    out.emplace_back(key, val);
  }
  return out;
}

inline void write_kv(const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& [k, v] : kv) f << k << "=" << v << "\n";
  if (!f) throw std::runtime_error("short write: " + path);
}

// Minimal CSV emitter with a pinned header.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) : f_(path, std::ios::trunc) {
    if (!f_) throw std::runtime_error("cannot open for write: " + path);
    f_ << header << "\n";
  }

  void row(const std::string& line) { f_ << line << "\n"; }

  void flush() { f_.flush(); }

 private:
  std::ofstream f_;
};

}  // namespace ptopk
