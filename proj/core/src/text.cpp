#include "slmaudit/text.hpp"

#include <cmath>
#include <cstdio>

namespace slmaudit::text {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s) {
  std::size_t begin = 0;
  while (begin < s.size() && is_space(s[begin])) ++begin;
  std::size_t end = s.size();
  while (end > begin && is_space(s[end - 1])) --end;
  return s.substr(begin, end - begin);
}

std::vector<std::string_view> split_lines(std::string_view s) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t nl = s.find('\n', start);
    if (nl == std::string_view::npos) nl = s.size();
    std::string_view line = s.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }
  return lines;
}

namespace {
bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }
}  // namespace

std::size_t utf8_tail_offset(std::string_view s, std::size_t count) {
  std::size_t pos = s.size();
  std::size_t seen = 0;
  while (pos > 0 && seen < count) {
    --pos;
    while (pos > 0 && is_continuation(static_cast<unsigned char>(s[pos]))) --pos;
    ++seen;
  }
  return pos;
}

std::string_view first_codepoint(std::string_view s) {
  if (s.empty()) return s;
  std::size_t len = 1;
  while (len < s.size() && is_continuation(static_cast<unsigned char>(s[len]))) ++len;
  return s.substr(0, len);
}

std::string fixed(double value, int decimals) {
  char buf[64];
  // Avoid printing "-0.000" for tiny negatives.
  const double scale = std::pow(10.0, decimals);
  if (std::round(value * scale) == 0.0) value = 0.0;
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, value);
  return buf;
}

std::string signed_fixed(double value, int decimals) {
  std::string body = fixed(value, decimals);
  if (body.front() != '-') body.insert(body.begin(), '+');
  return body;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

}  // namespace slmaudit::text
