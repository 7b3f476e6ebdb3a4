#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eqnio/core.hpp"

// Parameter checkpoints: a text manifest next to a raw little-endian blob.
//   <stem>.manifest   "eqnio-checkpoint 1", meta lines, one line per tensor
//                     (name dtype rows cols byte-offset)
//   <stem>.blob       tensor payloads, column-major, in manifest order
// Works on little-endian hosts; the manifest records the layout so mixed
// f32/f64 checkpoints load into either precision.

namespace eqnio::checkpoint {

inline constexpr int kFormatVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "unsupported dtype");
    return "f64";
  }
}

template <typename T>
class Writer {
 public:
  explicit Writer(std::string stem) : stem_(std::move(stem)) {}

  void add_meta(const std::string& key, const std::string& value) {
    meta_.emplace_back(key, value);
  }

  void add(const std::string& name, const MatX<T>& m) {
    Record r;
    r.name = name;
    r.rows = m.rows();
    r.cols = m.cols();
    r.offset = blob_.size();
    records_.push_back(r);
    const char* bytes = reinterpret_cast<const char*>(m.data());
    blob_.insert(blob_.end(), bytes, bytes + sizeof(T) * m.size());
  }

  void finish() const {
    std::ofstream manifest(stem_ + ".manifest");
    if (!manifest) throw std::runtime_error("cannot write " + stem_ + ".manifest");
    manifest << "eqnio-checkpoint " << kFormatVersion << "\n";
    for (const auto& [k, v] : meta_) manifest << "meta " << k << " " << v << "\n";
    for (const auto& r : records_) {
      manifest << "tensor " << r.name << " " << dtype_name<T>() << " " << r.rows
               << " " << r.cols << " " << r.offset << "\n";
    }
    std::ofstream blob(stem_ + ".blob", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot write " + stem_ + ".blob");
    blob.write(blob_.data(), static_cast<std::streamsize>(blob_.size()));
  }

 private:
  struct Record {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    std::size_t offset = 0;
  };
  std::string stem_;
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<Record> records_;
  std::vector<char> blob_;
};

template <typename T>
struct Loaded {
  std::map<std::string, MatX<T>> tensors;
  std::map<std::string, std::string> meta;
};

/// Reads a checkpoint, converting tensor payloads to T when the stored
/// precision differs.
template <typename T>
Loaded<T> load(const std::string& stem) {
  std::ifstream manifest(stem + ".manifest");
  if (!manifest) throw std::runtime_error("cannot open " + stem + ".manifest");
  std::ifstream blob(stem + ".blob", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open " + stem + ".blob");

  std::string line;
  if (!std::getline(manifest, line) ||
      line.rfind("eqnio-checkpoint ", 0) != 0)
    throw std::runtime_error(stem + ": not a checkpoint manifest");
  if (std::stoi(line.substr(17)) != kFormatVersion)
    throw std::runtime_error(stem + ": unsupported checkpoint version");

  Loaded<T> out;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "meta") {
      std::string key, value;
      ss >> key;
      std::getline(ss, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      out.meta[key] = value;
    } else if (kind == "tensor") {
      std::string name, dtype;
      Eigen::Index rows, cols;
      std::size_t offset;
      if (!(ss >> name >> dtype >> rows >> cols >> offset))
        throw std::runtime_error(stem + ": malformed tensor line '" + line + "'");
      MatX<T> m(rows, cols);
      blob.seekg(static_cast<std::streamoff>(offset));
      if (dtype == dtype_name<T>()) {
        blob.read(reinterpret_cast<char*>(m.data()),
                  static_cast<std::streamsize>(sizeof(T) * m.size()));
      } else if (dtype == "f32") {
        MatX<float> tmp(rows, cols);
        blob.read(reinterpret_cast<char*>(tmp.data()),
                  static_cast<std::streamsize>(sizeof(float) * tmp.size()));
        m = tmp.template cast<T>();
      } else if (dtype == "f64") {
        MatX<double> tmp(rows, cols);
        blob.read(reinterpret_cast<char*>(tmp.data()),
                  static_cast<std::streamsize>(sizeof(double) * tmp.size()));
        m = tmp.template cast<T>();
      } else {
        throw std::runtime_error(stem + ": unknown dtype " + dtype);
      }
      if (!blob) throw std::runtime_error(stem + ": blob truncated at " + name);
      out.tensors.emplace(name, std::move(m));
    } else {
      throw std::runtime_error(stem + ": unknown manifest line '" + line + "'");
    }
  }
  return out;
}

}  // namespace eqnio::checkpoint
