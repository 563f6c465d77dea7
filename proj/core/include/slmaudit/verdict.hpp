#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace slmaudit {

// Which rule of an evaluator produced the predicted letter.
enum class Rule {
  kFirstChar,
  kLineScan,
  kFallbackFirstChar,
  kRegexMarker,
  kRegexTailScan,
  kConstrained,
};

// The three verdict pipelines. Names double as keys of the `verdicts` field.
enum class Evaluator { kFirstChar, kRegex, kConstrained };

std::string_view to_string(Rule rule);
std::optional<Rule> parse_rule(std::string_view name);
std::string_view to_string(Evaluator evaluator);
std::optional<Evaluator> parse_evaluator(std::string_view name);

struct EvaluatorVerdict {
  // Present only when the extracted character is in the record's label set.
  std::optional<char> predicted_letter;
  Rule rule_fired = Rule::kFallbackFirstChar;
  // Unset until compared against the gold letter.
  std::optional<bool> correct;
  // The raw character returned by the fallback rule, kept even when it is not
  // a label letter (e.g. "L" for "Looking at the options...").
  std::string raw_first_char;

  bool operator==(const EvaluatorVerdict&) const = default;
};

// Sets `correct` from the gold letter and returns the verdict.
EvaluatorVerdict grade(EvaluatorVerdict verdict, char gold_letter);

}  // namespace slmaudit
