#include "bevd/io.hpp"

#include <bit>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "bevd/rng.hpp"

namespace bevd {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'B', 'D', 'T', '1'};

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t read_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<uint8_t> tensor_bytes(const Tensor& t) {
  const Shape& s = t.shape();
  std::vector<uint8_t> out;
  out.reserve(4 + 4 + 4 * s.size() + 8 * t.data().size());
  out.insert(out.end(), kMagic, kMagic + 4);
  append_u32(out, static_cast<uint32_t>(s.size()));
  for (int d : s) append_u32(out, static_cast<uint32_t>(d));
  const auto d = t.data();
  size_t off = out.size();
  out.resize(off + d.size() * 8);
  std::memcpy(out.data() + off, d.data(), d.size() * 8);
  return out;
}

Tensor tensor_from_bytes(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("tensor container: bad magic");
  uint32_t rank = read_u32(bytes.data() + 4);
  if (rank > 8) throw std::runtime_error("tensor container: implausible rank");
  size_t need = 8 + 4 * static_cast<size_t>(rank);
  if (bytes.size() < need) throw std::runtime_error("tensor container: truncated header");
  Shape shape(rank);
  size_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = read_u32(bytes.data() + 8 + 4 * i);
    if (d == 0 || d > (1u << 24)) throw std::runtime_error("tensor container: bad dim");
    shape[i] = static_cast<int>(d);
    numel *= d;
  }
  if (bytes.size() != need + numel * 8)
    throw std::runtime_error("tensor container: payload size mismatch");
  std::vector<double> data(numel);
  std::memcpy(data.data(), bytes.data() + need, numel * 8);
  return Tensor::from_data(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file_bytes(path, tensor_bytes(t));
}

Tensor read_tensor(const std::filesystem::path& path) {
  return tensor_from_bytes(read_file_bytes(path));
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  auto size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw std::runtime_error("read failed: " + path.string());
  return bytes;
}

void write_file_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::string read_file_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  auto size = f.tellg();
  f.seekg(0);
  std::string text(static_cast<size_t>(size), '\0');
  f.read(text.data(), size);
  if (!f) throw std::runtime_error("read failed: " + path.string());
  return text;
}

uint64_t hash_bytes(const std::vector<uint8_t>& bytes) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

uint64_t hash_file(const std::filesystem::path& path) {
  return hash_bytes(read_file_bytes(path));
}

std::string format_double(double v) {
  char buf[64];
  // Shortest decimal that parses back to the same bits. Judged by string
  // length, not %g precision, so 60 wins over 6e+01.
  std::string best;
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v && (best.empty() || std::strlen(buf) < best.size()))
      best = buf;
  }
  if (!best.empty()) return best;
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s.empty()) throw std::runtime_error("empty number");
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw std::runtime_error("bad number: " + s);
  return v;
}

}  // namespace bevd
