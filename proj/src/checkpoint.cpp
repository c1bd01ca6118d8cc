#include "perc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "perc/errors.hpp"

namespace perc {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'P'};
constexpr uint8_t kVersion = 1;

void put_u16(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (!is) throw FormatError("checkpoint: truncated stream");
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("checkpoint: truncated stream");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

template <typename S>
void save_checkpoint(const std::string& path, const ParamList<S>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  for (const auto& p : params) {
    if (p.name.size() > 0xFFFF)
      throw std::invalid_argument("checkpoint: parameter name too long");
    put_u16(os, static_cast<uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& shape = p.tensor.shape();
    os.put(static_cast<char>(shape.size()));
    for (int d : shape) put_u32(os, static_cast<uint32_t>(d));
    for (S v : p.tensor.data()) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

std::vector<RawParam> read_checkpoint_raw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic");
  int version = is.get();
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  std::vector<RawParam> out;
  while (true) {
    int peek = is.peek();
    if (peek == EOF) break;
    RawParam p;
    uint16_t name_len = get_u16(is);
    p.name.resize(name_len);
    is.read(p.name.data(), name_len);
    if (!is) throw FormatError("checkpoint: truncated name");
    int rank = is.get();
    if (rank == EOF) throw FormatError("checkpoint: truncated rank");
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) {
      uint32_t d = get_u32(is);
      p.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    p.data.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      uint32_t bits = get_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      p.data[static_cast<size_t>(i)] = f;
    }
    out.push_back(std::move(p));
  }
  return out;
}

template <typename S>
void load_checkpoint(const std::string& path, ParamList<S>& params) {
  auto raw = read_checkpoint_raw(path);
  std::map<std::string, RawParam*> by_name;
  for (auto& r : raw) by_name[r.name] = &r;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw MismatchError("checkpoint: missing parameter " + p.name);
    RawParam& r = *it->second;
    if (r.shape != p.tensor.shape())
      throw MismatchError("checkpoint: shape mismatch for " + p.name + ": " +
                          shape_str(r.shape) + " vs " +
                          shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(r.data[i]);
  }
}

template void save_checkpoint<float>(const std::string&,
                                     const ParamList<float>&);
template void save_checkpoint<double>(const std::string&,
                                      const ParamList<double>&);
template void load_checkpoint<float>(const std::string&, ParamList<float>&);
template void load_checkpoint<double>(const std::string&, ParamList<double>&);

}  // namespace perc
