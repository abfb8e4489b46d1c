#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <vector>

#include "bevd/io.hpp"
#include "bevd/rng.hpp"

using namespace bevd;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  fs::path p = fs::temp_directory_path() / "bevd_io_test";
  fs::create_directories(p);
  return p;
}

void push_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>((x >> (8 * i)) & 0xff));
}

void push_f64(std::vector<uint8_t>& v, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, 8);
  for (int i = 0; i < 8; ++i) v.push_back(static_cast<uint8_t>((bits >> (8 * i)) & 0xff));
}

}  // namespace

TEST_CASE("tensor container layout is frozen") {
  // built by hand: magic, rank, dims, little-endian f64 payload
  std::vector<uint8_t> want = {'B', 'D', 'T', '1'};
  push_u32(want, 2);
  push_u32(want, 2);
  push_u32(want, 2);
  for (double v : {1.0, 2.0, 3.0, 4.0}) push_f64(want, v);

  Tensor t = Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  std::vector<uint8_t> got = tensor_bytes(t);
  REQUIRE(got.size() == want.size());
  CHECK(got == want);
  CHECK(hash_bytes(got) == 0xd9a122211aa63a51ull);

  Tensor back = tensor_from_bytes(want);
  CHECK(back.shape() == Shape{2, 2});
  CHECK(back.at({1, 1}) == 4.0);
}

TEST_CASE("tensor file round-trip is byte-exact") {
  fs::path dir = tmp_dir();
  Rng rng(31);
  std::vector<double> data(24);
  for (auto& v : data) v = rng.normal(0.0, 3.0);
  Tensor t = Tensor::from_data({2, 3, 4}, data);

  fs::path f = dir / "t.bdt1";
  write_tensor(f, t);
  Tensor back = read_tensor(f);
  CHECK(back.shape() == t.shape());
  auto a = t.data();
  auto b = back.data();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  CHECK(read_file_bytes(f) == tensor_bytes(t));
  CHECK(hash_file(f) == hash_bytes(tensor_bytes(t)));
}

TEST_CASE("scalar and rank-1 tensors round-trip") {
  for (const Tensor& t : {Tensor::scalar(-0.125), Tensor::from_data({3}, {1e-300, 0.0, 1e300})}) {
    Tensor back = tensor_from_bytes(tensor_bytes(t));
    CHECK(back.shape() == t.shape());
    auto a = t.data();
    auto b = back.data();
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("malformed tensor bytes are rejected") {
  Tensor t = Tensor::from_data({2}, {1.0, 2.0});
  std::vector<uint8_t> good = tensor_bytes(t);

  std::vector<uint8_t> bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS(tensor_from_bytes(bad_magic));

  std::vector<uint8_t> truncated(good.begin(), good.end() - 3);
  CHECK_THROWS(tensor_from_bytes(truncated));

  CHECK_THROWS(tensor_from_bytes(std::vector<uint8_t>{}));
}

TEST_CASE("byte and text file helpers") {
  fs::path dir = tmp_dir();
  std::vector<uint8_t> payload = {0, 1, 255, 42, 0, 7};
  write_file_bytes(dir / "b.bin", payload);
  CHECK(read_file_bytes(dir / "b.bin") == payload);

  std::string text = "line one\nline two\n";
  write_file_text(dir / "t.txt", text);
  CHECK(read_file_text(dir / "t.txt") == text);

  CHECK_THROWS(read_file_bytes(dir / "does_not_exist.bin"));
  CHECK_THROWS(read_tensor(dir / "does_not_exist.bdt1"));
}

TEST_CASE("hash_bytes frozen pairs") {
  CHECK(hash_bytes({}) == 0x14650fb0739d0383ull);
  std::vector<uint8_t> abc = {'a', 'b', 'c'};
  CHECK(hash_bytes(abc) == 0xe16801510db89efdull);
  std::vector<uint8_t> hw(11);
  std::memcpy(hw.data(), "hello world", 11);
  CHECK(hash_bytes(hw) == 0xe1d7a701437f78f9ull);

  // order sensitivity
  std::vector<uint8_t> cba = {'c', 'b', 'a'};
  CHECK(hash_bytes(abc) != hash_bytes(cba));
}

TEST_CASE("format_double survives a round-trip") {
  std::vector<double> tricky = {0.0,
                                -0.0,
                                1.0,
                                -1.0,
                                0.1,
                                1.0 / 3.0,
                                3.141592653589793,
                                2.2250738585072014e-308,
                                1.7976931348623157e308,
                                5e-324,
                                -123456.789,
                                1e-12,
                                0.30000000000000004};
  for (double v : tricky) {
    std::string s = format_double(v);
    double back = parse_double(s);
    CHECK(std::memcmp(&back, &v, 8) == 0);
  }
}

TEST_CASE("format_double prefers short spellings") {
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(2.0) == "2");
  CHECK(format_double(-3.0) == "-3");
  CHECK(format_double(0.25) == "0.25");
}
