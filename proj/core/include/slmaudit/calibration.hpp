#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "slmaudit/datamodel.hpp"
#include "slmaudit/extraction.hpp"

namespace slmaudit {

inline constexpr std::size_t kDefaultBins = 10;
inline constexpr double kDefaultVprThreshold = 0.80;

// Raw and label-set-normalised first-token confidence of the predicted letter.
struct ConfidencePair {
  double raw = 0.0;
  double normalised = 0.0;
  char predicted_letter = 'A';
  // Total in-window probability of all valid label letters.
  double observed_label_mass = 0.0;
  // No label letter in the window: normalisation is undefined, row excluded.
  bool degenerate = false;
};

// Probability of a label letter in the window, summing the bare token and
// single-leading-whitespace variants (" A", "\tA", "\nA").
double letter_mass(const TopKDistribution& topk, char letter);

// Throws std::invalid_argument when the predicted letter is not a label.
ConfidencePair token_confidence(const TopKDistribution& topk, char predicted_letter,
                                const LabelSet& labels);

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;  // 0 for an empty bin
  double accuracy = 0.0;         // 0 for an empty bin

  bool operator==(const ReliabilityBin&) const = default;
};

struct BinnedReliability {
  std::size_t n_bins = kDefaultBins;
  std::size_t n = 0;
  std::vector<ReliabilityBin> bins;
  double ece = 0.0;

  bool operator==(const BinnedReliability&) const = default;
};

// Equal-width bin of a confidence in [0, 1]: bin b holds [b/n, (b+1)/n), the
// last bin is closed on the right.
std::size_t reliability_bin(double confidence, std::size_t n_bins);

// Throws DataError on empty input, a length mismatch, or a confidence outside
// [0, 1].
BinnedReliability ece(std::span<const double> confidences, const std::vector<bool>& correct,
                      std::size_t n_bins = kDefaultBins);

// A cell's rows paired with one evaluator's verdicts and the verbal parses.
struct ScoredCell {
  CellKey cell;
  std::vector<TranscriptRecord> records;
  std::vector<EvaluatorVerdict> verdicts;
  std::vector<VerbalParse> parses;
};

// Uses the verdict stored under the evaluator's name when present, otherwise
// scores offline. Throws DataError when constrained verdicts are missing.
ScoredCell score_cell(const CellKey& cell, std::vector<TranscriptRecord> records,
                      Evaluator evaluator);

struct CalibrationOptions {
  double vpr_threshold = kDefaultVprThreshold;
  std::size_t n_bins = kDefaultBins;
};

// Per-row quantities shared by cell metrics and their bootstrap intervals.
struct CellRows {
  std::vector<bool> correct;
  // Rows with a non-degenerate token confidence.
  std::vector<double> token_raw;
  std::vector<double> token_norm;
  std::vector<bool> token_correct;
  // Rows whose verbal response parsed, with the normalised token confidence of
  // the same row when it exists.
  std::vector<double> verbal_conf;
  std::vector<bool> verbal_correct;
  std::vector<std::optional<double>> verbal_token_norm;
  std::size_t degenerate = 0;
  std::size_t unpredicted = 0;
};

CellRows cell_rows(const ScoredCell& cell);

// Throws DataError on an empty cell, mixed cells, or misaligned inputs.
CellMetrics cell_calibration(std::span<const TranscriptRecord> records,
                             std::span<const EvaluatorVerdict> verdicts,
                             std::span<const VerbalParse> parses,
                             const CalibrationOptions& options = {});
CellMetrics cell_calibration(const ScoredCell& cell, const CalibrationOptions& options = {});

struct ShiftStats {
  std::size_t n = 0;
  double mean_abs = 0.0;
  double median = 0.0;
  double max = 0.0;
  double frac_above_005 = 0.0;
  double frac_above_020 = 0.0;
  std::vector<double> abs_deltas;

  bool operator==(const ShiftStats&) const = default;
};

struct NormalisationShift {
  ShiftStats all;
  std::vector<std::pair<Variant, ShiftStats>> per_variant;

  bool operator==(const NormalisationShift&) const = default;
};

// Summary of |ece_token_raw - ece_token_norm|. Throws DataError when empty.
ShiftStats shift_stats(std::span<const double> abs_deltas);
// Cells without token ECE are skipped; throws DataError if none remain.
NormalisationShift normalisation_shift(std::span<const CellMetrics> cells);

struct TopKCoverage {
  std::size_t n = 0;
  double full_coverage_fraction = 0.0;
  // Mean of M / (M + missing * smallest window probability), M the observed
  // label mass: a lower bound on the captured share of label mass.
  double mass_ratio = 0.0;
};

// Records without top-k data are skipped; throws DataError if none have it.
TopKCoverage topk_coverage(std::span<const TranscriptRecord> records);

}  // namespace slmaudit
