#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace arpipe::util {

/// True for code points with the Unicode White_Space property.
bool is_unicode_space(char32_t cp);

/// Number of maximal runs of non-whitespace characters, with whitespace
/// decided per Unicode code point. Malformed UTF-8 bytes count as
/// non-whitespace so the result is total (never throws).
long long word_count(std::string_view text);

/// The words themselves, as views into `text`.
std::vector<std::string_view> split_words(std::string_view text);

/// Split on '\n'; a trailing newline does not produce a final empty line.
/// '\r' before the newline is stripped.
std::vector<std::string_view> split_lines(std::string_view text);

std::string_view trim(std::string_view s);

/// ASCII-only case fold; non-ASCII bytes pass through untouched.
std::string fold_case(std::string_view s);

/// Case-folded substring test.
bool contains_folded(std::string_view haystack, std::string_view needle);

bool starts_with(std::string_view s, std::string_view prefix);

} // namespace arpipe::util
