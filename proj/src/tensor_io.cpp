/*
 * Copyright 2026 The fsvlm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "fsvlm/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "fsvlm/error.hpp"

namespace fsvlm {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'V', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw IoError("truncated tensor file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  Json header = file.header;
  Json index = Json::array();
  for (const auto& [name, m] : file.tensors) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  header["tensors"] = index;
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : file.tensors) {
    for (Eigen::Index i = 0; i < m.size(); ++i) put_le<double>(out, m.data()[i]);
  }
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("'" + path.string() + "' is not a tensor file");
  }
  if (get_le<std::uint32_t>(in) != kVersion) throw IoError("unsupported tensor file version");
  const auto len = get_le<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated tensor file header");
  TensorFile file;
  try {
    file.header = Json::parse(text);
    for (const auto& t : file.header.at("tensors")) {
      nn::Matrix m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_le<double>(in);
      file.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const Json::exception& e) {
    throw IoError("bad tensor file header in '" + path.string() + "': " + e.what());
  }
  file.header.erase("tensors");
  return file;
}

}  // namespace fsvlm
