#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slmaudit/bootstrap.hpp"
#include "slmaudit/calibration.hpp"
#include "slmaudit/datamodel.hpp"
#include "slmaudit/robustness.hpp"

namespace slmaudit {

// (repaired - firstchar) / (nonfc_mean - firstchar) as a percentage. Throws
// DataError when nonfc_mean <= firstchar.
double gap_recovery(double nonfc_mean, double firstchar, double repaired);

struct ReportOptions {
  Evaluator evaluator = Evaluator::kFirstChar;
  double vpr_threshold = kDefaultVprThreshold;
  std::size_t n_bins = kDefaultBins;
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t seed = kDefaultSeed;
  std::vector<double> sensitivity_thresholds{0.70, 0.80, 0.90};
  std::map<std::string, double> model_sizes;
  // False when some generations were dropped after scoring.
  bool generations_retained = true;
};

struct GapRecoveryRow {
  std::string model_id;  // "Mean" on the per-dataset mean row
  std::string dataset_id;
  bool mean_row = false;
  double nonfc_mean = 0.0;
  double firstchar = 0.0;
  std::optional<double> repaired_regex;
  std::optional<double> recovery_regex;
  std::optional<double> repaired_constrained;
  std::optional<double> recovery_constrained;
  // surface_paraphrase vs format_change under first_char, paired by example.
  std::optional<BootstrapResult> drop_ci;

  bool operator==(const GapRecoveryRow&) const = default;
};

struct ShiftRow {
  std::string label;  // variant name or "all"
  ShiftStats stats;
  BootstrapResult mean_ci;

  bool operator==(const ShiftRow&) const = default;
};

struct CoverageRow {
  std::string dataset_id;
  std::size_t cells_full = 0;
  std::size_t cells_total = 0;
  double example_coverage = 0.0;
  double min_mass_ratio = 0.0;

  bool operator==(const CoverageRow&) const = default;
};

struct VprEntry {
  CellKey cell;
  double vpr = 0.0;
  bool below_threshold = false;
  BootstrapResult ci;

  bool operator==(const VprEntry&) const = default;
};

// Per (model, dataset, phrasing) means over the included verbal cells.
struct CalibrationSummaryRow {
  std::string model_id;
  std::string dataset_id;
  Phrasing phrasing = Phrasing::kDecimal01;
  std::size_t n_cells = 0;
  double accuracy = 0.0;
  std::optional<double> ece_token;
  double ece_verbal = 0.0;
  std::optional<double> ece_gap;
  double overconf_vs_acc = 0.0;
  std::optional<double> overconf_vs_token;

  bool operator==(const CalibrationSummaryRow&) const = default;
};

struct SignedCellRow {
  CellKey cell;
  BootstrapResult overconf_vs_acc;
  std::optional<BootstrapResult> overconf_vs_token;

  bool operator==(const SignedCellRow&) const = default;
};

struct SpreadRow {
  SpreadRecord record;
  std::optional<double> size_billions;
  BootstrapResult ci;

  bool operator==(const SpreadRow&) const = default;
};

struct PanelRow {
  std::string dataset_id;
  CorrelationResult result;

  bool operator==(const PanelRow&) const = default;
};

struct SensitivityRow {
  std::string model_id;
  std::string dataset_id;
  Phrasing phrasing = Phrasing::kDecimal01;
  // One entry per threshold; the mean is absent when no cell passes.
  std::vector<std::optional<double>> means;
  std::vector<std::size_t> counts;
  // No cell passes any threshold.
  bool empty = false;

  bool operator==(const SensitivityRow&) const = default;
};

struct ThresholdSensitivity {
  std::vector<double> thresholds;
  std::vector<SensitivityRow> rows;

  bool operator==(const ThresholdSensitivity&) const = default;
};

// Per-model overconf_vs_acc means recomputed from rows at each threshold.
// Only cells whose variant is in `variants` take part.
ThresholdSensitivity threshold_sensitivity(std::span<const ScoredCell> cells,
                                           std::span<const double> thresholds,
                                           std::span<const Variant> variants = kSpreadVariants);

struct Exclusion {
  CellKey cell;
  std::string reason;

  bool operator==(const Exclusion&) const = default;
};

// Pooled over a (model, dataset, phrasing)'s included verbal cells.
struct ReliabilityCurve {
  std::string model_id;
  std::string dataset_id;
  Phrasing phrasing = Phrasing::kDecimal01;
  std::optional<BinnedReliability> token;
  BinnedReliability verbal;

  bool operator==(const ReliabilityCurve&) const = default;
};

struct ChecklistItem {
  int number = 0;
  std::string topic;
  bool satisfied = false;
  std::string detail;

  bool operator==(const ChecklistItem&) const = default;
};

struct AuditReport {
  std::string evaluator;
  double vpr_threshold = kDefaultVprThreshold;
  std::size_t n_bins = kDefaultBins;
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t seed = kDefaultSeed;
  std::size_t n_records = 0;
  bool generations_retained = true;
  std::vector<CellMetrics> cells;
  std::vector<GapRecoveryRow> gap_recovery_table;
  std::vector<ShiftRow> shift_summary;
  std::vector<CoverageRow> coverage;
  std::vector<VprEntry> vpr_matrix;
  std::vector<CalibrationSummaryRow> calibration_summary;
  std::vector<SignedCellRow> signed_cells;
  std::vector<SpreadRow> spread_table;
  std::vector<PanelRow> panel;
  ThresholdSensitivity sensitivity;
  std::vector<Exclusion> exclusions;
  std::vector<ReliabilityCurve> reliability;
  std::vector<ChecklistItem> checklist;

  bool operator==(const AuditReport&) const = default;
};

// Scores every cell of `records` and assembles all tables. Deterministic.
AuditReport build_report(std::span<const TranscriptRecord> records, const ReportOptions& options = {});

// Exactly six items, filled from the report.
std::vector<ChecklistItem> checklist(const AuditReport& report);

enum class ReportFormat { kMarkdown, kCsv, kJson };
std::string_view to_string(ReportFormat format);
std::optional<ReportFormat> parse_report_format(std::string_view name);

// Writes the report into `out_dir` (created if needed) and returns the files
// written. Reliability CSVs named <model>_<dataset>_<phrasing>_reliability.csv
// accompany every format. Throws DataError when the directory is unwritable.
std::vector<std::filesystem::path> emit_report(const AuditReport& report, ReportFormat format,
                                               const std::filesystem::path& out_dir);

std::string render_markdown(const AuditReport& report);
std::string report_to_json(const AuditReport& report);
AuditReport report_from_json(std::string_view json);
AuditReport read_report_json(const std::filesystem::path& path);

// Table layouts shared by the CLI.
std::string spread_table_text(std::span<const SpreadRow> rows);
std::string panel_table_text(std::span<const PanelRow> rows);
std::string panel_table_csv(std::span<const PanelRow> rows);

// Per-cell metrics as JSON lines.
std::string serialize_metrics(const CellMetrics& metrics);
void write_metrics(const std::filesystem::path& path, std::span<const CellMetrics> metrics);
std::vector<CellMetrics> read_metrics(const std::filesystem::path& path);

}  // namespace slmaudit
