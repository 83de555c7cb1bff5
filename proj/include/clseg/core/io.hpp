#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "clseg/core/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw payload I/O assumes a little-endian host");

namespace clseg {

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    CLSEG_CHECK(f.good(), ErrorCode::IoError, "cannot open " + path.string());
    f.seekg(0, std::ios::end);
    std::vector<uint8_t> buf(static_cast<size_t>(f.tellg()));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    CLSEG_CHECK(f.good(), ErrorCode::IoError, "short read from " + path.string());
    return buf;
}

inline void write_file_bytes(const std::filesystem::path& path, const void* data, size_t size) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    CLSEG_CHECK(f.good(), ErrorCode::IoError, "cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
    CLSEG_CHECK(f.good(), ErrorCode::IoError, "short write to " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    write_file_bytes(path, text.data(), text.size());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace clseg
