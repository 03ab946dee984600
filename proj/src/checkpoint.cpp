#include "feanet/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace feanet {

namespace {

constexpr std::size_t kMagicLength = sizeof(kCheckpointMagic) - 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

void put_f64(std::ostream& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

bool get_bytes(std::istream& in, char* dst, std::size_t count) {
  in.read(dst, static_cast<std::streamsize>(count));
  return static_cast<std::size_t>(in.gcount()) == count;
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> b;
  if (!get_bytes(in, reinterpret_cast<char*>(b.data()), 4)) {
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xffffffffu) throw std::invalid_argument("checkpoint: dimension exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kCheckpointMagic, kMagicLength);
  for (const auto& [name, t] : tensors) {
    put_u32(out, checked_u32(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = t.shape();
    put_u32(out, checked_u32(s.n));
    put_u32(out, checked_u32(s.c));
    put_u32(out, checked_u32(s.h));
    put_u32(out, checked_u32(s.w));
    for (double v : t.values()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

std::vector<NamedTensor> read_tensors(std::istream& in) {
  std::array<char, kMagicLength> magic{};
  if (!get_bytes(in, magic.data(), kMagicLength) ||
      std::memcmp(magic.data(), kCheckpointMagic, kMagicLength) != 0) {
    throw std::runtime_error("checkpoint: missing FEAN1 magic");
  }
  std::vector<NamedTensor> result;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = get_u32(in, "name length");
    std::string name(len, '\0');
    if (!get_bytes(in, name.data(), len)) throw std::runtime_error("checkpoint: truncated name");
    Shape s;
    s.n = get_u32(in, "dims");
    s.c = get_u32(in, "dims");
    s.h = get_u32(in, "dims");
    s.w = get_u32(in, "dims");
    Tensor t(s);
    std::array<unsigned char, 8> b;
    for (auto& v : t.values()) {
      if (!get_bytes(in, reinterpret_cast<char*>(b.data()), 8)) {
        throw std::runtime_error("checkpoint: truncated values of '" + name + "'");
      }
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
    result.push_back({std::move(name), std::move(t)});
  }
  return result;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  write_tensors(out, tensors);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return read_tensors(in);
}

}  // namespace feanet
