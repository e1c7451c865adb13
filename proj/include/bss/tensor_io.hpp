// BST1 container and the JSON tensor form.
//
// BST1 layout, little-endian throughout:
//   bytes 0..3   magic "BST1"
//   byte  4      version, = 1
//   byte  5      dtype code, = 1 (32-bit float)
//   byte  6      rank
//   byte  7      pad, = 0
//   next         rank x u32 dims
//   payload      product(dims) x f32, row-major
//
// Feature maps are rank 4; parameter vectors rank 1; conv matrices rank 2.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bss/errors.hpp"
#include "bss/tensor.hpp"

#include <nlohmann/json.hpp>

namespace bss {

inline constexpr char kBstMagic[4] = {'B', 'S', 'T', '1'};
inline constexpr std::uint8_t kBstVersion = 1;
inline constexpr std::uint8_t kBstDtypeF32 = 1;

struct BstArray {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::uint64_t elems() const {
    std::uint64_t p = 1;
    for (auto d : dims) p *= d;
    return p;
  }
};

namespace detail {

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> bst_serialize(const BstArray& a) {
  if (a.dims.empty() || a.dims.size() > 8) {
    throw IoError("BST1 rank must be in [1,8], got " + std::to_string(a.dims.size()));
  }
  if (a.elems() != a.data.size()) {
    throw IoError("BST1 payload length does not match dims product");
  }
  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 * a.dims.size() + 4 * a.data.size());
  out.insert(out.end(), kBstMagic, kBstMagic + 4);
  out.push_back(kBstVersion);
  out.push_back(kBstDtypeF32);
  out.push_back(static_cast<std::uint8_t>(a.dims.size()));
  out.push_back(0);
  for (auto d : a.dims) detail::put_u32le(out, d);
  for (float f : a.data) detail::put_u32le(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline BstArray bst_deserialize(const std::vector<std::uint8_t>& buf,
                                const std::string& origin = "<buffer>") {
  auto fail = [&](const std::string& why) -> BstArray {
    throw ParseError(origin + ": " + why);
  };
  if (buf.size() < 8) return fail("truncated BST1 header");
  if (std::memcmp(buf.data(), kBstMagic, 4) != 0) return fail("bad BST1 magic");
  if (buf[4] != kBstVersion) {
    return fail("unsupported BST1 version " + std::to_string(buf[4]));
  }
  if (buf[5] != kBstDtypeF32) {
    return fail("unsupported BST1 dtype code " + std::to_string(buf[5]));
  }
  const std::uint8_t rank = buf[6];
  if (rank < 1 || rank > 8) return fail("BST1 rank out of range");
  if (buf[7] != 0) return fail("nonzero BST1 pad byte");
  const std::size_t header = 8 + 4ull * rank;
  if (buf.size() < header) return fail("truncated BST1 dims");
  BstArray a;
  a.dims.resize(rank);
  for (int i = 0; i < rank; ++i) {
    a.dims[i] = detail::get_u32le(buf.data() + 8 + 4ull * i);
    if (a.dims[i] == 0) return fail("zero BST1 dim");
  }
  const std::uint64_t elems = a.elems();
  if (buf.size() != header + 4 * elems) {
    return fail("BST1 payload length mismatch");
  }
  a.data.resize(elems);
  for (std::uint64_t i = 0; i < elems; ++i) {
    a.data[i] = std::bit_cast<float>(detail::get_u32le(buf.data() + header + 4 * i));
  }
  return a;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return buf;
}

// All artifact writes go through here: temp file in the same directory,
// rename into place, so failures never leave a partial output behind.
inline void write_file_atomic(const std::filesystem::path& path,
                              const void* data, std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string());
  }
}

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline void bst_write(const std::filesystem::path& path, const BstArray& a) {
  auto bytes = bst_serialize(a);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline BstArray bst_read(const std::filesystem::path& path) {
  return bst_deserialize(read_file_bytes(path), path.string());
}

inline BstArray to_bst(const Tensor& t) {
  BstArray a;
  a.dims = {static_cast<std::uint32_t>(t.dims().n), static_cast<std::uint32_t>(t.dims().c),
            static_cast<std::uint32_t>(t.dims().h), static_cast<std::uint32_t>(t.dims().w)};
  a.data = t.raw();
  return a;
}

inline Tensor tensor_from_bst(const BstArray& a, const std::string& origin = "<buffer>") {
  if (a.dims.size() != 4) {
    throw ParseError(origin + ": feature maps must be rank 4, got rank " +
                     std::to_string(a.dims.size()));
  }
  Shape4 d{static_cast<int>(a.dims[0]), static_cast<int>(a.dims[1]),
           static_cast<int>(a.dims[2]), static_cast<int>(a.dims[3])};
  return Tensor(d, a.data);
}

inline std::vector<float> vector_from_bst(const BstArray& a,
                                          const std::string& origin = "<buffer>") {
  if (a.dims.size() != 1) {
    throw ParseError(origin + ": expected rank-1 BST1 vector, got rank " +
                     std::to_string(a.dims.size()));
  }
  return a.data;
}

// {"dims":[n,c,h,w],"data":[...]} with row-major data.
inline Tensor tensor_from_json(const nlohmann::json& j, const std::string& origin) {
  if (!j.is_object() || !j.contains("dims") || !j.contains("data")) {
    throw ParseError(origin + ": JSON tensor needs \"dims\" and \"data\"");
  }
  const auto& jd = j.at("dims");
  if (!jd.is_array() || jd.size() != 4) {
    throw ParseError(origin + ": \"dims\" must be [n,c,h,w]");
  }
  Shape4 d{jd[0].get<int>(), jd[1].get<int>(), jd[2].get<int>(), jd[3].get<int>()};
  std::vector<float> data;
  data.reserve(j.at("data").size());
  for (const auto& v : j.at("data")) data.push_back(v.get<float>());
  try {
    return Tensor(d, std::move(data));
  } catch (const ShapeError& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline nlohmann::ordered_json tensor_to_json(const Tensor& t) {
  nlohmann::ordered_json j;
  j["dims"] = {t.dims().n, t.dims().c, t.dims().h, t.dims().w};
  j["data"] = t.raw();
  return j;
}

// Extension dispatch used by the CLI: .json reads the JSON tensor form,
// anything else is BST1.
inline Tensor read_tensor_file(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    return tensor_from_json(j, path.string());
  }
  return tensor_from_bst(bst_read(path), path.string());
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  if (path.extension() == ".json") {
    write_file_atomic(path, tensor_to_json(t).dump(2) + "\n");
  } else {
    bst_write(path, to_bst(t));
  }
}

}  // namespace bss
