// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace omni {

static_assert(std::endian::native == std::endian::little, "OEPT I/O assumes a little-endian host");

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated OEPT stream");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::uint8_t get_u8(std::istream& in) {
  char c;
  if (!in.get(c)) throw IoError("truncated OEPT stream");
  return static_cast<std::uint8_t>(c);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw ContractError("OEPT: rank exceeds 255");
  out.write("OEPT", 4);
  out.put(static_cast<char>(kOeptVersion));
  out.put(static_cast<char>(t.dtype()));
  out.put(static_cast<char>(t.rank()));
  for (auto e : t.shape()) {
    if (e < 0 || e > 0xffffffffLL) throw ContractError("OEPT: extent out of u32 range");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  std::visit(
      [&](const auto& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(v[0])));
      },
      t.buffer());
  if (!out) throw IoError("OEPT: write failed");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "OEPT", 4) != 0) throw IoError("OEPT: bad magic");
  const auto version = get_u8(in);
  if (version != kOeptVersion) throw IoError("OEPT: unsupported version " + std::to_string(version));
  const auto code = get_u8(in);
  if (code > 1) throw IoError("OEPT: unknown dtype code " + std::to_string(code));
  const auto dt = static_cast<DType>(code);
  const int rank = get_u8(in);
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) e = get_u32(in);
  Buffer data = make_buffer(dt, static_cast<std::size_t>(shape_numel(shape)));
  std::visit(
      [&](auto& v) {
        if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(v[0]))))
          throw IoError("OEPT: truncated payload");
      },
      data);
  return Tensor::from_buffer(shape, std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path + "'");
  write_tensor(f, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path + "'");
  return read_tensor(f);
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

NamedTensors Checkpoint::group(const std::string& prefix) const {
  NamedTensors out;
  for (const auto& [n, t] : tensors) {
    if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
  }
  return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  for (const auto& [k, v] : ckpt.header) {
    if (k.find('\n') != std::string::npos || v.find('\n') != std::string::npos || k == ".")
      throw ContractError("checkpoint header entry '" + k + "' is not single-line");
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint '" + path + "'");
    f << "OEPT-CHECKPOINT 1\n" << format_key_values(ckpt.header) << ".\n";
    put_u32(f, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      put_u32(f, static_cast<std::uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_tensor(f, t);
    }
    if (!f) throw IoError("checkpoint write failed: '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(f, line) || line != "OEPT-CHECKPOINT 1") throw IoError("'" + path + "' is not a checkpoint");
  std::string header;
  while (true) {
    if (!std::getline(f, line)) throw IoError("checkpoint header not terminated");
    if (line == ".") break;
    header += line + "\n";
  }
  Checkpoint ck;
  ck.header = parse_key_values(header, path);
  const auto count = get_u32(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_u32(f);
    std::string name(len, '\0');
    if (!f.read(name.data(), len)) throw IoError("truncated checkpoint");
    ck.tensors.emplace_back(std::move(name), read_tensor(f));
  }
  return ck;
}

}  // namespace omni
