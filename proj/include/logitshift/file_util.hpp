#ifndef LOGITSHIFT_FILE_UTIL_HPP
#define LOGITSHIFT_FILE_UTIL_HPP

#include <filesystem>
#include <string>
#include <string_view>

namespace logitshift {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

} // namespace logitshift

#endif
