#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "slmaudit/datamodel.hpp"
#include "slmaudit/verdict.hpp"

namespace slmaudit {

// Characters of decoded text inspected by the regex tail scan.
inline constexpr std::size_t kTailScanWindow = 150;

inline constexpr std::string_view kConstrainedSuffix = "\n\nFinal answer:";

// First-character evaluator with line scan and raw-first-character fallback.
EvaluatorVerdict extract_pred_letter(std::string_view generation, const LabelSet& labels);

// Answer-marker regexes, then a reverse scan of the last 150 characters, then
// extract_pred_letter.
EvaluatorVerdict regex_reparse(std::string_view generation, const LabelSet& labels);

// generation + "\n\nFinal answer:". The caller must not apply it twice.
std::string build_constrained_continuation(std::string_view generation);

// Offline evaluators only; the constrained evaluator lives in the client.
EvaluatorVerdict evaluate_offline(Evaluator evaluator, std::string_view generation,
                                  const LabelSet& labels);

enum class VerbalForm { kPercent, kDecimal, kOutOf100 };

std::string_view to_string(VerbalForm form);

struct VerbalParse {
  std::optional<double> value;
  std::optional<VerbalForm> matched_form;

  bool parseable() const { return value.has_value(); }
  bool operator==(const VerbalParse&) const = default;
};

// Strict and total: a response that does not parse yields an empty VerbalParse.
// Precedence is percent ("75%", "75 percent"), then decimal ("0.75", ".75"),
// then "X out of 100". Two or more distinct values of the winning form, an
// out-of-range value, or a partial token ("0.", "%") do not parse. The parser
// does not depend on the phrasing that elicited the response.
VerbalParse parse_verbal_confidence(std::string_view response,
                                    Phrasing phrasing = Phrasing::kDecimal01);

// Parse of the record's verbal response; empty when the record has none.
VerbalParse parse_verbal(const TranscriptRecord& record);

// Fraction of a cell's records whose verbal response parses. Records without a
// verbal response count as non-parses. Throws DataError on an empty cell or on
// records from more than one cell.
double verbal_parse_rate(std::span<const TranscriptRecord> records);

}  // namespace slmaudit
