#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ctxdet {

// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

// Shortest round-trip decimal form ("%.17g"); "nan" for NaN.
std::string format_double(double v);

// Splits comma-separated text into rows of fields. No quoting support; the
// first row is returned like any other.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace ctxdet
