#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace slmaudit::text {

bool is_space(char c);
std::string_view trim(std::string_view s);

// Splits on '\n' and drops a trailing '\r' from each line.
std::vector<std::string_view> split_lines(std::string_view s);

// Byte offset at which the final `count` UTF-8 code points of `s` begin.
std::size_t utf8_tail_offset(std::string_view s, std::size_t count);

// The first UTF-8 code point of `s` (empty when `s` is empty).
std::string_view first_codepoint(std::string_view s);

// printf-style fixed formatting; signed variant always carries a sign.
std::string fixed(double value, int decimals);
std::string signed_fixed(double value, int decimals);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace slmaudit::text
