#pragma once

#include <filesystem>
#include <string>

namespace pkd {

std::string read_text_file(const std::filesystem::path& path);

/// Writes `content` to `path`, creating parent directories as needed.
void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace pkd
