#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace modse {

/// Writes `content` to `<path>.tmp` and renames it onto `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::filesystem::path temp_path_for(const std::filesystem::path& path);

namespace le {

void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32(std::string& out, float v);
std::uint32_t get_u32(const unsigned char* p);
std::uint64_t get_u64(const unsigned char* p);
float get_f32(const unsigned char* p);

}  // namespace le

}  // namespace modse
