#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "confit/tensor.hpp"

namespace confit {

/// Tensor file format "CFT1":
///   magic "CFT1" | u8 dtype (0 = f32, 1 = f64) | u8 ndim |
///   ndim x u32 dims (little-endian) | raw little-endian payload.
/// f32 payload is 4 bytes per value, f64 is 8.
std::vector<std::uint8_t> encode_cft(const Tensor& t);
Tensor decode_cft(const std::vector<std::uint8_t>& bytes,
                  const std::string& what = "tensor");

void write_cft(const std::string& path, const Tensor& t);
Tensor read_cft(const std::string& path);

std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64_file(const std::string& path);
std::string hex64(std::uint64_t v);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path,
                      const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace confit
