#pragma once

#include <filesystem>
#include <string>

namespace corl {

// Write-temp-then-rename so readers never observe partial files.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

} // namespace corl
