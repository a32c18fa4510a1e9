// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary archive: the on-disk container for checkpoints and datasets.
//
// Layout (all integers and floats little-endian):
//   bytes [0, 8)    magic "LOOPARC1"
//   bytes [8, 16)   u64 header length L
//   bytes [16, 16+L) UTF-8 JSON header
//   then the payload: the concatenation of every array, in header order.
//
// Header: {"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset"}...]}
// where dtype is "f64" or "u8", shape is row-major, and offset is the byte
// offset of the array inside the payload.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace loop {

class ArchiveWriter {
 public:
  nlohmann::json& meta() { return meta_; }

  void add(const std::string& name, std::vector<double> values, std::vector<std::int64_t> shape);
  void add(const std::string& name, const Eigen::MatrixXd& m);  // stored row-major
  void add(const std::string& name, const Eigen::VectorXd& v);
  void add_bytes(const std::string& name, std::vector<std::uint8_t> values);

  void write(const std::filesystem::path& path) const;

 private:
  struct Entry {
    std::string name;
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::vector<double> f64;
    std::vector<std::uint8_t> u8;
  };
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<Entry> entries_;
};

class ArchiveReader {
 public:
  explicit ArchiveReader(const std::filesystem::path& path);

  const nlohmann::json& meta() const { return meta_; }
  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  std::vector<std::int64_t> shape(const std::string& name) const;
  std::vector<double> f64(const std::string& name) const;
  std::vector<std::uint8_t> u8(const std::string& name) const;
  Eigen::MatrixXd matrix(const std::string& name) const;
  Eigen::VectorXd vector(const std::string& name) const;

 private:
  struct Array {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
  };
  const Array& find(const std::string& name, const char* dtype) const;

  nlohmann::json meta_;
  std::map<std::string, Array> arrays_;
  std::vector<std::uint8_t> payload_;
};

}  // namespace loop
