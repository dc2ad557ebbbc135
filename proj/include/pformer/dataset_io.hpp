#pragma once

// Episode dataset file:
//
//   "PFMDSET\0"  magic (8 bytes)
//   u32          format version
//   string       TaskSpec echo as `key = value` text (u32 length + bytes)
//   u32          episode count
//   per episode: u32 T, u32 N, u32 M, (N+M) material code bytes, then T frames
//                of (N+M)×3 positions followed by (N+M)×3 motions, row-major
//                little-endian f64
//
// Object rows precede effector rows in every frame.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "pformer/simulator.hpp"

namespace pformer {

inline constexpr char kDatasetMagic[8] = {'P', 'F', 'M', 'D', 'S', 'E', 'T', '\0'};
inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::string bytes, const std::string& source = "<memory>");

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// 64-bit FNV-1a digest as 16 hex digits.
std::string digest_hex(std::string_view bytes);

}  // namespace pformer
