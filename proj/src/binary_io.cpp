// SPDX-License-Identifier: Apache-2.0
#include "dil/binary_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace dil::io {

std::vector<std::byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw NotFoundError("cannot open " + path);
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> buf(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(size))) {
    throw std::runtime_error("failed reading " + path);
  }
  return buf;
}

void write_file(const std::string& path, std::span<const std::byte> bytes) {
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (out) out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("failed writing " + path);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("failed to move " + tmp + " into place");
  }
}

}  // namespace dil::io
