// SPDX-License-Identifier: Apache-2.0
#include "loop/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace loop {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'O', 'O', 'P', 'A', 'R', 'C', '1'};

std::size_t element_count(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, std::int64_t d) { return acc * static_cast<std::size_t>(d); });
}

}  // namespace

void ArchiveWriter::add(const std::string& name, std::vector<double> values,
                        std::vector<std::int64_t> shape) {
  if (element_count(shape) != values.size())
    throw std::invalid_argument("archive: shape does not match value count for '" + name + "'");
  entries_.push_back({name, "f64", std::move(shape), std::move(values), {}});
}

void ArchiveWriter::add(const std::string& name, const Eigen::MatrixXd& m) {
  std::vector<double> values(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), m.rows(), m.cols()) = m;
  add(name, std::move(values), {m.rows(), m.cols()});
}

void ArchiveWriter::add(const std::string& name, const Eigen::VectorXd& v) {
  add(name, std::vector<double>(v.data(), v.data() + v.size()), {v.size()});
}

void ArchiveWriter::add_bytes(const std::string& name, std::vector<std::uint8_t> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  entries_.push_back({name, "u8", {n}, {}, std::move(values)});
}

void ArchiveWriter::write(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta_;
  header["arrays"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    header["arrays"].push_back({{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}});
    offset += e.dtype == "f64" ? e.f64.size() * sizeof(double) : e.u8.size();
  }
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("archive: cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries_) {
    if (e.dtype == "f64")
      out.write(reinterpret_cast<const char*>(e.f64.data()),
                static_cast<std::streamsize>(e.f64.size() * sizeof(double)));
    else
      out.write(reinterpret_cast<const char*>(e.u8.data()), static_cast<std::streamsize>(e.u8.size()));
  }
  if (!out) throw std::runtime_error("archive: write failed for " + path.string());
}

ArchiveReader::ArchiveReader(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive: cannot open " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("archive: bad magic in " + path.string());
  if (len > (1ULL << 32)) throw std::runtime_error("archive: implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("archive: truncated header in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("archive: corrupt header: ") + e.what());
  }
  meta_ = header.value("meta", nlohmann::json::object());

  payload_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  for (const auto& a : header.at("arrays")) {
    Array arr;
    arr.dtype = a.at("dtype").get<std::string>();
    arr.shape = a.at("shape").get<std::vector<std::int64_t>>();
    arr.offset = a.at("offset").get<std::size_t>();
    arr.count = element_count(arr.shape);
    const std::size_t bytes = arr.count * (arr.dtype == "f64" ? sizeof(double) : 1);
    if (arr.offset + bytes > payload_.size())
      throw std::runtime_error("archive: truncated payload for '" + a.at("name").get<std::string>() + "'");
    arrays_[a.at("name").get<std::string>()] = std::move(arr);
  }
}

const ArchiveReader::Array& ArchiveReader::find(const std::string& name, const char* dtype) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw std::runtime_error("archive: missing array '" + name + "'");
  if (it->second.dtype != dtype) throw std::runtime_error("archive: dtype mismatch for '" + name + "'");
  return it->second;
}

std::vector<std::int64_t> ArchiveReader::shape(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw std::runtime_error("archive: missing array '" + name + "'");
  return it->second.shape;
}

std::vector<double> ArchiveReader::f64(const std::string& name) const {
  const Array& a = find(name, "f64");
  std::vector<double> out(a.count);
  std::memcpy(out.data(), payload_.data() + a.offset, a.count * sizeof(double));
  return out;
}

std::vector<std::uint8_t> ArchiveReader::u8(const std::string& name) const {
  const Array& a = find(name, "u8");
  return {payload_.begin() + static_cast<std::ptrdiff_t>(a.offset),
          payload_.begin() + static_cast<std::ptrdiff_t>(a.offset + a.count)};
}

Eigen::MatrixXd ArchiveReader::matrix(const std::string& name) const {
  const auto s = shape(name);
  if (s.size() != 2) throw std::runtime_error("archive: '" + name + "' is not a matrix");
  const auto values = f64(name);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), s[0], s[1]);
}

Eigen::VectorXd ArchiveReader::vector(const std::string& name) const {
  const auto values = f64(name);
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace loop
