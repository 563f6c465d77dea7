#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slmaudit/verdict.hpp"

namespace slmaudit {

enum class Variant {
  kSurfaceParaphrase,
  kInstructionReorder,
  kFewshot3,
  kFormatChange,
  kImplicitFraming,
};

enum class Phrasing { kDecimal01, kPercent0100 };

inline constexpr Variant kAllVariants[] = {
    Variant::kSurfaceParaphrase, Variant::kInstructionReorder, Variant::kFewshot3,
    Variant::kFormatChange, Variant::kImplicitFraming};

// The variants that enter prompt-perturbation spread.
inline constexpr Variant kSpreadVariants[] = {
    Variant::kSurfaceParaphrase, Variant::kInstructionReorder, Variant::kFewshot3,
    Variant::kImplicitFraming};

inline constexpr Phrasing kAllPhrasings[] = {Phrasing::kDecimal01,
                                             Phrasing::kPercent0100};

std::string_view to_string(Variant variant);
std::string_view to_string(Phrasing phrasing);
std::optional<Variant> parse_variant(std::string_view name);
std::optional<Phrasing> parse_phrasing(std::string_view name);

// Ordered answer-letter set: a contiguous prefix of A..J, 2 to 10 letters.
class LabelSet {
 public:
  LabelSet() = default;

  // Throws DataError unless `letters` is "AB", "ABC", ... "ABCDEFGHIJ".
  static LabelSet from_letters(std::string_view letters);
  static LabelSet first(std::size_t count);

  bool contains(char c) const;
  std::string_view letters() const { return letters_; }
  std::size_t size() const { return letters_.size(); }
  bool empty() const { return letters_.empty(); }

  bool operator==(const LabelSet&) const = default;

 private:
  explicit LabelSet(std::string letters) : letters_(std::move(letters)) {}
  std::string letters_;
};

struct Choice {
  char letter = 'A';
  std::string text;

  bool operator==(const Choice&) const = default;
};

struct ExampleRecord {
  std::string example_id;
  std::string dataset_id;
  std::string question_text;
  std::vector<Choice> choices;
  char gold_letter = 'A';

  LabelSet labels() const;
  bool operator==(const ExampleRecord&) const = default;
};

struct CellKey {
  std::string model_id;
  std::string dataset_id;
  Variant variant = Variant::kSurfaceParaphrase;
  Phrasing phrasing = Phrasing::kDecimal01;

  // "model/dataset/variant/phrasing"; used as a stable seeding context.
  std::string to_string() const;

  auto operator<=>(const CellKey&) const = default;
};

// First-generation-step distribution over the returned top-k window.
// Log-probabilities are what is stored on disk; linear probabilities are
// derived once at construction.
class TopKDistribution {
 public:
  using Map = std::map<std::string, double, std::less<>>;

  TopKDistribution() = default;

  // Throws DataError when a probability falls outside (0, 1], the total mass
  // exceeds 1 + 1e-9, the window is larger than k, or k is zero.
  static TopKDistribution from_logprobs(Map logprobs, std::size_t k);
  static TopKDistribution from_probabilities(Map probabilities, std::size_t k);

  const Map& probabilities() const { return probabilities_; }
  const Map& logprobs() const { return logprobs_; }
  std::size_t k() const { return k_; }
  std::size_t size() const { return probabilities_.size(); }
  bool empty() const { return probabilities_.empty(); }

  // 0 when the token is not in the window.
  double probability(std::string_view token) const;
  // Smallest in-window probability; 0 for an empty window.
  double smallest() const;
  double total_mass() const;

  // Window size is not persisted, so identity is the stored log-probabilities.
  bool operator==(const TopKDistribution& other) const {
    return logprobs_ == other.logprobs_;
  }

 private:
  void validate() const;

  Map logprobs_;
  Map probabilities_;
  std::size_t k_ = 0;
};

struct TranscriptRecord {
  CellKey cell;
  std::string example_id;
  std::string rendered_prompt;
  std::string generation_text;
  std::optional<TopKDistribution> first_step_topk;
  std::optional<std::string> verbal_response_text;
  char gold_letter = 'A';
  LabelSet label_set;
  // Keyed by evaluator name ("first_char", "regex", "constrained").
  std::map<std::string, EvaluatorVerdict, std::less<>> verdicts;

  bool operator==(const TranscriptRecord&) const = default;
};

// One row of the audit output. Token fields are absent when the cell carries
// no usable top-k data; verbal fields are absent unless VPR clears the
// inclusion threshold (see `verbal_exclusion`).
struct CellMetrics {
  CellKey cell;
  std::size_t n = 0;
  double accuracy = 0.0;

  std::optional<double> ece_token_raw;
  std::optional<double> ece_token_norm;
  std::optional<double> mean_token_conf_norm;
  std::size_t n_token_rows = 0;
  std::size_t n_token_degenerate = 0;
  std::size_t n_token_unpredicted = 0;

  double vpr = 0.0;
  std::size_t n_verbal_parsed = 0;
  std::optional<double> ece_verbal;
  std::optional<double> mean_verbal_conf;
  std::optional<double> overconf_vs_acc;
  std::optional<double> overconf_vs_token;
  std::optional<double> ece_gap;
  std::optional<std::string> verbal_exclusion;

  double coverage_full_fraction = 0.0;
  double coverage_mass_ratio = 0.0;

  bool operator==(const CellMetrics&) const = default;
};

using CellGroups = std::map<CellKey, std::vector<TranscriptRecord>>;

// Corpus files: one JSON object per line. Any malformed line rejects the
// whole file with a DataError naming the line.
std::vector<ExampleRecord> read_examples(const std::filesystem::path& path);
std::vector<ExampleRecord> parse_examples(std::istream& in, std::string_view source);
std::string serialize_example(const ExampleRecord& record);
void write_examples(const std::filesystem::path& path,
                    std::span<const ExampleRecord> records);

std::vector<TranscriptRecord> read_transcripts(const std::filesystem::path& path);
std::vector<TranscriptRecord> parse_transcripts(std::istream& in,
                                                std::string_view source);
std::string serialize_transcript(const TranscriptRecord& record);
void write_transcripts(const std::filesystem::path& path,
                       std::span<const TranscriptRecord> records);

// Partition by cell, preserving input order inside each cell.
CellGroups group_by_cell(std::span<const TranscriptRecord> records);

}  // namespace slmaudit
