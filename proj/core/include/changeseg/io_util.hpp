#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace changeseg {

// Whole-file read; throws FormatError naming the path when it cannot be read.
std::string read_file(const std::filesystem::path& path);

// Writes to "<path>.tmp" and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace changeseg
