#include "confit/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "confit/error.hpp"

namespace confit {

namespace {

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_cft(const Tensor& t) {
  if (t.rank() == 0 || t.rank() > 255) {
    throw IoError("cannot encode tensor of rank " + std::to_string(t.rank()));
  }
  std::vector<std::uint8_t> out;
  out.reserve(6 + 4 * t.rank() + 8 * t.size());
  out.push_back('C');
  out.push_back('F');
  out.push_back('T');
  out.push_back('1');
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw IoError("dimension too large for format");
    put_u32_le(out, static_cast<std::uint32_t>(d));
  }
  if (t.dtype() == Dtype::f32) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      put_u32_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
    }
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      put_u64_le(out, std::bit_cast<std::uint64_t>(t[i]));
    }
  }
  return out;
}

Tensor decode_cft(const std::vector<std::uint8_t>& bytes,
                  const std::string& what) {
  if (bytes.size() < 6) throw IoError(what + ": truncated header");
  if (bytes[0] != 'C' || bytes[1] != 'F' || bytes[2] != 'T' || bytes[3] != '1') {
    throw IoError(what + ": bad magic (not a CFT1 file)");
  }
  const std::uint8_t dtype_code = bytes[4];
  if (dtype_code > 1) {
    throw IoError(what + ": unknown dtype code " + std::to_string(dtype_code));
  }
  const Dtype dtype = static_cast<Dtype>(dtype_code);
  const std::size_t ndim = bytes[5];
  if (ndim == 0) throw IoError(what + ": zero-rank tensor");
  std::size_t pos = 6;
  if (bytes.size() < pos + 4 * ndim) throw IoError(what + ": truncated dims");
  std::vector<std::size_t> shape(ndim);
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    shape[i] = get_u32_le(bytes.data() + pos);
    if (shape[i] == 0) throw IoError(what + ": zero dimension");
    count *= shape[i];
    pos += 4;
  }
  const std::size_t elem = dtype == Dtype::f32 ? 4 : 8;
  if (bytes.size() != pos + elem * count) {
    throw IoError(what + ": payload size mismatch (expected " +
                  std::to_string(pos + elem * count) + " bytes, got " +
                  std::to_string(bytes.size()) + ")");
  }
  std::vector<double> data(count);
  if (dtype == Dtype::f32) {
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = static_cast<double>(
          std::bit_cast<float>(get_u32_le(bytes.data() + pos + 4 * i)));
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<double>(get_u64_le(bytes.data() + pos + 8 * i));
    }
  }
  return Tensor::from_data(std::move(shape), std::move(data), dtype);
}

void write_cft(const std::string& path, const Tensor& t) {
  write_file_bytes(path, encode_cft(t));
}

Tensor read_cft(const std::string& path) {
  return decode_cft(read_file_bytes(path), path);
}

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a64_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return fnv1a64(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  return bytes;
}

void write_file_bytes(const std::string& path,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path + "'");
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write failure on '" + path + "'");
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  return text;
}

}  // namespace confit
