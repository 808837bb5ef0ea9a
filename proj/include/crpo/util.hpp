#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace crpo {

/// 64-bit FNV-1a. Used for content keys and the mock backends; not a
/// cryptographic hash.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Lower-case, zero-padded 16-character hex.
std::string to_hex(std::uint64_t value);

std::string trim(std::string_view text);

/// Number of UTF-8 code points (continuation bytes are not counted).
std::size_t utf8_length(std::string_view text);

/// Longest prefix holding at most `max_chars` code points.
std::string_view utf8_prefix(std::string_view text, std::size_t max_chars);

/// Throws FileNotFound / IoError.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace crpo
