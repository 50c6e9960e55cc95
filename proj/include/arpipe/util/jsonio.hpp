#pragma once

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace arpipe {

using json = nlohmann::json;
/// Preserves insertion order; used for on-disk records so field order is the
/// declared one and output stays byte-stable.
using ojson = nlohmann::ordered_json;

/// Fatal error with a message meant for the operator. The CLI maps these to
/// exit codes; library code throws and does not log.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace util {

std::string read_file(const std::filesystem::path& path);

/// Write via temp file + rename so readers never observe partial content.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

void append_line(const std::filesystem::path& path, std::string_view line);

/// Calls fn(line_number, line) for every line; line numbers start at 1.
/// Returns false if the file does not exist.
bool for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, std::string_view)>& fn);

void ensure_dir(const std::filesystem::path& dir);

} // namespace util
} // namespace arpipe
