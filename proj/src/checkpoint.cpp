#include "l2l/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace l2l::ckpt {

namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

}  // namespace

void save(const std::string& path, const std::string& magic,
          const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  if (magic.size() != 4) throw std::invalid_argument("checkpoint: magic must be 4 bytes");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    os.write(magic.data(), 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put_u32(os, static_cast<uint32_t>(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      put_u32(os, static_cast<uint32_t>(t->shape.size()));
      for (int64_t d : t->shape) {
        put_u32(os, static_cast<uint32_t>(d & 0xffffffffu));
        put_u32(os, static_cast<uint32_t>(uint64_t(d) >> 32));
      }
      os.write(reinterpret_cast<const char*>(t->data.data()),
               std::streamsize(t->data.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: rename to " + path + " failed");
}

std::map<std::string, Tensor> load(const std::string& path,
                                   const std::string& magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char got[4];
  is.read(got, 4);
  if (!is || std::string(got, 4) != magic)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (get_u32(is) != kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  const uint32_t count = get_u32(is);
  std::map<std::string, Tensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(is), '\0');
    is.read(name.data(), std::streamsize(name.size()));
    std::vector<int64_t> shape(get_u32(is));
    for (auto& d : shape) {
      uint64_t lo = get_u32(is), hi = get_u32(is);
      d = int64_t(lo | hi << 32);
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace l2l::ckpt
