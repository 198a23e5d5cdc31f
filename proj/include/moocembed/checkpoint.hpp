// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "nn.hpp"

namespace moocembed {

/// Named arrays in file order.
using NamedArrays = std::vector<std::pair<std::string, Array>>;

// Layout (all integers u64 little-endian, values IEEE-754 binary64 little-endian):
//   magic "MEMBCKP1" | count | count x { name_len | name bytes | rank | dims[rank] | values }
inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'M', 'B', 'C', 'K', 'P', '1'};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ParseError(0, "truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_arrays(const NamedArrays& arrays, std::ostream& out) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u64(out, arrays.size());
  for (const auto& [name, a] : arrays) {
    detail::put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(out, a.rank());
    for (auto d : a.shape()) detail::put_u64(out, d);
    for (double v : a.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

inline NamedArrays read_arrays(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError(0, "not a checkpoint file");
  const auto count = detail::get_u64(in);
  NamedArrays out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = detail::get_u64(in);
    if (len > (1u << 20)) throw ParseError(0, "implausible name length in checkpoint");
    std::string name(len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(len))) throw ParseError(0, "truncated checkpoint");
    const auto rank = detail::get_u64(in);
    if (rank == 0 || rank > 3) throw ParseError(0, "bad rank in checkpoint entry " + name);
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(detail::get_u64(in));
    Array a(shape);
    for (auto& v : a.data()) v = std::bit_cast<double>(detail::get_u64(in));
    out.emplace_back(std::move(name), std::move(a));
  }
  return out;
}

inline void save_params(const ParamRefs& params, std::ostream& out) {
  NamedArrays arrays;
  for (const Param* p : params) arrays.emplace_back(p->name, p->value);
  write_arrays(arrays, out);
}

/// Restores values by name; every parameter must be present with a matching shape.
inline void load_params(const ParamRefs& params, std::istream& in) {
  auto arrays = read_arrays(in);
  for (Param* p : params) {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const auto& e) { return e.first == p->name; });
    if (it == arrays.end()) throw ReferenceError("checkpoint lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape())
      throw ShapeError("checkpoint shape mismatch for " + p->name + ": " + to_string(it->second.shape()) +
                       " vs " + to_string(p->value.shape()));
    p->value = it->second;
  }
}

inline void save_params(const ParamRefs& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  save_params(params, f);
}

inline void load_params(const ParamRefs& params, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  load_params(params, f);
}

}  // namespace moocembed
