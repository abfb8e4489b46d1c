#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bevd/tensor.hpp"

namespace bevd {

/// Binary tensor container: magic "BDT1", u32 rank, u32 dims, f64 payload,
/// everything little-endian, payload row-major.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<uint8_t> tensor_bytes(const Tensor& t);
Tensor tensor_from_bytes(const std::vector<uint8_t>& bytes);

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_text(const std::filesystem::path& path, const std::string& text);
std::string read_file_text(const std::filesystem::path& path);

uint64_t hash_bytes(const std::vector<uint8_t>& bytes);
uint64_t hash_file(const std::filesystem::path& path);

std::string format_double(double v);  // shortest round-trippable decimal
double parse_double(const std::string& s);

}  // namespace bevd
