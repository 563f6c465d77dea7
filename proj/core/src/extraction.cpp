#include "slmaudit/extraction.hpp"

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <regex>
#include <set>
#include <vector>

#include "slmaudit/error.hpp"
#include "slmaudit/text.hpp"

namespace slmaudit {

namespace {

constexpr std::string_view kBullet = "\xE2\x80\xA2";  // U+2022

bool is_ascii_punct(char c) {
  return static_cast<unsigned char>(c) < 0x80 && std::ispunct(static_cast<unsigned char>(c));
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Word characters for boundary tests; non-ASCII bytes count as word characters.
bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u >= 0x80 || std::isalnum(u);
}

// Drops whitespace, bullets ("-", "*", "•"), numbered prefixes ("1.", "2)")
// and any other leading ASCII punctuation.
std::string_view strip_leading_markers(std::string_view s) {
  for (;;) {
    const std::size_t before = s.size();
    s = text::trim(s);
    if (s.substr(0, kBullet.size()) == kBullet) {
      s.remove_prefix(kBullet.size());
      continue;
    }
    std::size_t digits = 0;
    while (digits < s.size() && is_digit(s[digits])) ++digits;
    if (digits > 0 && digits < s.size() && (s[digits] == '.' || s[digits] == ')') &&
        (digits + 1 == s.size() || text::is_space(s[digits + 1]))) {
      s.remove_prefix(digits + 1);
      continue;
    }
    if (!s.empty() && is_ascii_punct(s.front())) {
      s.remove_prefix(1);
      continue;
    }
    if (s.size() == before) return s;
  }
}

// A line that is just a label letter with at most one trailing '.', ')' or ':'
// once markers and markdown emphasis are stripped.
std::optional<char> standalone_line_letter(std::string_view line, const LabelSet& labels) {
  std::string_view s = strip_leading_markers(line);
  while (!s.empty() && (text::is_space(s.back()) || s.back() == '*' || s.back() == '_')) {
    s.remove_suffix(1);
  }
  if (s.empty() || !labels.contains(s.front())) return std::nullopt;
  if (s.size() == 1) return s.front();
  if (s.size() == 2 && (s[1] == '.' || s[1] == ')' || s[1] == ':')) return s.front();
  return std::nullopt;
}

// Case-insensitive literal as explicit character classes so the captured
// answer letter itself can stay case-sensitive.
std::string ci(std::string_view word) {
  std::string out;
  for (char c : word) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      out += '[';
      out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out += ']';
    } else if (c == ' ') {
      out += R"([\s*_]+)";
    } else {
      out += c;
    }
  }
  return out;
}

const std::vector<std::regex>& marker_patterns() {
  static const std::vector<std::regex> patterns = [] {
    const std::string gap = R"([\s*_]*)";
    const std::string letter = R"([\(\[]?[\s*_]*([A-J])(?![A-Za-z0-9]))";
    const std::string colon_or_is = gap + "(?::|" + ci("is") + "(?![A-Za-z]))" + gap;
    const std::string optional_colon_or_is = gap + "(?::|" + ci("is") + "(?![A-Za-z]))?" + gap;
    return std::vector<std::regex>{
        std::regex(ci("final answer") + optional_colon_or_is + letter),
        std::regex(ci("the correct answer is") + R"([\s*_:]*)" + letter),
        std::regex(R"((?:^|[^A-Za-z]))" + ci("answer") + colon_or_is + letter),
    };
  }();
  return patterns;
}

}  // namespace

EvaluatorVerdict extract_pred_letter(std::string_view generation, const LabelSet& labels) {
  const auto lines = text::split_lines(generation);

  for (std::string_view line : lines) {
    if (text::trim(line).empty()) continue;
    const std::string_view stripped = strip_leading_markers(line);
    if (!stripped.empty() && labels.contains(stripped.front())) {
      return {stripped.front(), Rule::kFirstChar, std::nullopt, {}};
    }
    break;
  }

  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    if (auto letter = standalone_line_letter(*it, labels)) {
      return {*letter, Rule::kLineScan, std::nullopt, {}};
    }
  }

  EvaluatorVerdict fallback;
  fallback.rule_fired = Rule::kFallbackFirstChar;
  fallback.raw_first_char = std::string(text::first_codepoint(text::trim(generation)));
  if (fallback.raw_first_char.size() == 1 && labels.contains(fallback.raw_first_char[0])) {
    fallback.predicted_letter = fallback.raw_first_char[0];
  }
  return fallback;
}

EvaluatorVerdict regex_reparse(std::string_view generation, const LabelSet& labels) {
  const std::string owned(generation);
  for (const auto& pattern : marker_patterns()) {
    std::optional<char> last;
    for (auto it = std::sregex_iterator(owned.begin(), owned.end(), pattern);
         it != std::sregex_iterator(); ++it) {
      const char letter = (*it)[1].str().front();
      if (labels.contains(letter)) last = letter;
    }
    if (last) return {*last, Rule::kRegexMarker, std::nullopt, {}};
  }

  const std::size_t window_start = text::utf8_tail_offset(generation, kTailScanWindow);
  for (std::size_t i = generation.size(); i-- > window_start;) {
    const char c = generation[i];
    if (!labels.contains(c)) continue;
    const bool left_ok = i == 0 || !is_word_char(generation[i - 1]);
    const bool right_ok = i + 1 == generation.size() || !is_word_char(generation[i + 1]);
    if (left_ok && right_ok) return {c, Rule::kRegexTailScan, std::nullopt, {}};
  }

  return extract_pred_letter(generation, labels);
}

std::string build_constrained_continuation(std::string_view generation) {
  std::string out(generation);
  out += kConstrainedSuffix;
  return out;
}

EvaluatorVerdict evaluate_offline(Evaluator evaluator, std::string_view generation,
                                  const LabelSet& labels) {
  switch (evaluator) {
    case Evaluator::kFirstChar:
      return extract_pred_letter(generation, labels);
    case Evaluator::kRegex:
      return regex_reparse(generation, labels);
    case Evaluator::kConstrained:
      break;
  }
  throw std::invalid_argument("the constrained evaluator needs an inference backend");
}

// verbal confidence

std::string_view to_string(VerbalForm form) {
  switch (form) {
    case VerbalForm::kPercent:
      return "percent";
    case VerbalForm::kDecimal:
      return "decimal";
    case VerbalForm::kOutOf100:
      return "out_of_100";
  }
  return "unknown";
}

namespace {

bool iequals_prefix(std::string_view s, std::size_t pos, std::string_view word) {
  if (pos + word.size() > s.size()) return false;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[pos + i])) != word[i]) return false;
  }
  return true;
}

std::size_t skip_spaces(std::string_view s, std::size_t pos) {
  while (pos < s.size() && text::is_space(s[pos])) ++pos;
  return pos;
}

// If "out of 100" follows at `pos` (after optional spaces), the index just past
// it; otherwise npos.
std::size_t match_out_of_100(std::string_view s, std::size_t pos) {
  pos = skip_spaces(s, pos);
  if (!iequals_prefix(s, pos, "out")) return std::string_view::npos;
  std::size_t p = pos + 3;
  if (p >= s.size() || !text::is_space(s[p])) return std::string_view::npos;
  p = skip_spaces(s, p);
  if (!iequals_prefix(s, p, "of")) return std::string_view::npos;
  p += 2;
  if (p >= s.size() || !text::is_space(s[p])) return std::string_view::npos;
  p = skip_spaces(s, p);
  if (s.substr(p, 3) != "100") return std::string_view::npos;
  p += 3;
  if (p < s.size() && (is_digit(s[p]) || (s[p] == '.' && p + 1 < s.size() && is_digit(s[p + 1])))) {
    return std::string_view::npos;
  }
  return p;
}

struct Candidates {
  std::vector<double> percent;
  std::vector<double> decimal;
  std::vector<double> out_of_100;
};

Candidates collect_candidates(std::string_view s) {
  Candidates c;
  std::size_t i = 0;
  while (i < s.size()) {
    const bool starts_number =
        is_digit(s[i]) || (s[i] == '.' && i + 1 < s.size() && is_digit(s[i + 1]));
    if (!starts_number) {
      ++i;
      continue;
    }
    const std::size_t begin = i;
    std::size_t end = i;
    while (end < s.size() && is_digit(s[end])) ++end;
    bool has_point = false;
    if (end + 1 < s.size() && s[end] == '.' && is_digit(s[end + 1])) {
      has_point = true;
      ++end;
      while (end < s.size() && is_digit(s[end])) ++end;
    }
    i = end;

    // Numbers glued to words or to other numbers ("v2", "3.5.1") are not values.
    if (begin > 0 && (is_word_char(s[begin - 1]) || s[begin - 1] == '.')) continue;
    if (end < s.size() && (std::isalpha(static_cast<unsigned char>(s[end])) || s[end] == '_')) {
      continue;
    }
    // "0." with nothing after the point is a partial token.
    if (!has_point && end < s.size() && s[end] == '.' &&
        (end + 1 == s.size() || !is_digit(s[end + 1]))) {
      continue;
    }
    double value = 0.0;
    std::from_chars(s.data() + begin, s.data() + end, value);
    if (begin > 0 && s[begin - 1] == '-') value = -value;

    std::size_t after = end;
    if (after < s.size() && s[after] == ' ') ++after;
    if (after < s.size() && s[after] == '%') {
      c.percent.push_back(value);
      i = after + 1;
      continue;
    }
    if (iequals_prefix(s, after, "percent")) {
      c.percent.push_back(value);
      i = after + 7;
      continue;
    }
    if (const std::size_t past = match_out_of_100(s, end); past != std::string_view::npos) {
      c.out_of_100.push_back(value);
      i = past;
      continue;
    }
    c.decimal.push_back(value);
  }
  return c;
}

// Single distinct value of the form, or nullopt when the form is multi-valued.
std::optional<double> single_value(const std::vector<double>& values) {
  const std::set<double> distinct(values.begin(), values.end());
  if (distinct.size() != 1) return std::nullopt;
  return *distinct.begin();
}

VerbalParse accept(std::optional<double> value, double scale, VerbalForm form) {
  if (!value) return {};
  const double normalised = *value / scale;
  // Out-of-range values are malformed; only float fuzz at the bounds is clipped.
  if (normalised < -1e-9 || normalised > 1.0 + 1e-9) return {};
  return {std::clamp(normalised, 0.0, 1.0), form};
}

}  // namespace

VerbalParse parse_verbal_confidence(std::string_view response, Phrasing) {
  const Candidates c = collect_candidates(response);
  if (!c.percent.empty()) {
    return accept(single_value(c.percent), 100.0, VerbalForm::kPercent);
  }
  if (!c.decimal.empty()) {
    return accept(single_value(c.decimal), 1.0, VerbalForm::kDecimal);
  }
  if (!c.out_of_100.empty()) {
    return accept(single_value(c.out_of_100), 100.0, VerbalForm::kOutOf100);
  }
  return {};
}

VerbalParse parse_verbal(const TranscriptRecord& record) {
  if (!record.verbal_response_text) return {};
  return parse_verbal_confidence(*record.verbal_response_text, record.cell.phrasing);
}

double verbal_parse_rate(std::span<const TranscriptRecord> records) {
  if (records.empty()) throw DataError("verbal parse rate of an empty cell");
  std::size_t parsed = 0;
  for (const auto& r : records) {
    if (r.cell != records.front().cell) {
      throw DataError("verbal parse rate over records from more than one cell");
    }
    if (parse_verbal(r).parseable()) ++parsed;
  }
  return static_cast<double>(parsed) / static_cast<double>(records.size());
}

}  // namespace slmaudit
