#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slmaudit/client.hpp"
#include "slmaudit/datamodel.hpp"
#include "slmaudit/prompts.hpp"
#include "slmaudit/report.hpp"

namespace slmaudit {

struct DatasetConfig {
  std::string id;
  std::filesystem::path examples;
  TaskType task_type = TaskType::kReasoning;
};

struct ModelConfig {
  std::string id;
  // Name sent to the backend; defaults to the id.
  std::string served_name;
};

struct RunConfig {
  std::vector<DatasetConfig> datasets;
  std::vector<ModelConfig> models;
  std::vector<Variant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
  std::vector<Phrasing> phrasings{std::begin(kAllPhrasings), std::end(kAllPhrasings)};
  // Pre-recorded transcript files; when set, scoring reads them instead of
  // the output of `generate`.
  std::vector<std::filesystem::path> transcripts;
  std::optional<BackendConfig> backend;
  std::optional<std::filesystem::path> templates_dir;
  std::size_t sample_size = 500;
  std::uint64_t seed = 42;
  double vpr_threshold = 0.80;
  std::size_t n_bins = 10;
  std::size_t n_resamples = 1000;
  Evaluator evaluator = Evaluator::kFirstChar;
  std::map<std::string, double> model_sizes;
  std::vector<double> sensitivity_thresholds{0.70, 0.80, 0.90};
  ReportFormat report_format = ReportFormat::kMarkdown;

  ReportOptions report_options() const;
};

// Relative paths resolve against `base_dir`. Throws UsageError on unknown
// keys, wrong types or invalid values.
RunConfig parse_run_config(std::string_view json, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

// FNV-1a over the protocol-relevant fields only (not paths, backend address or
// output format).
std::uint64_t config_hash(const RunConfig& config);
std::string hex64(std::uint64_t value);

enum class Stage { kSample, kRender, kGenerate, kScore, kRepair, kMetrics, kSpread, kReport };
inline constexpr Stage kAllStages[] = {Stage::kSample, Stage::kRender,  Stage::kGenerate, Stage::kScore,
                                       Stage::kRepair, Stage::kMetrics, Stage::kSpread,   Stage::kReport};
std::string_view to_string(Stage stage);
std::optional<Stage> parse_stage(std::string_view name);

enum class StageStatus { kRan, kUpToDate, kSkipped };
std::string_view to_string(StageStatus status);

struct StageOutcome {
  Stage stage = Stage::kSample;
  StageStatus status = StageStatus::kRan;
  std::string message;
};

// Artifact names inside the run directory.
namespace artifacts {
inline constexpr std::string_view kManifest = "manifest.json";
inline constexpr std::string_view kSampleDir = "sample";
inline constexpr std::string_view kPromptDir = "prompts";
inline constexpr std::string_view kTranscripts = "transcripts.jsonl";
inline constexpr std::string_view kScored = "scored.jsonl";
inline constexpr std::string_view kRepaired = "repaired.jsonl";
inline constexpr std::string_view kMetrics = "metrics.jsonl";
inline constexpr std::string_view kSpread = "spread.md";
inline constexpr std::string_view kPanel = "panel.csv";
inline constexpr std::string_view kReportDir = "report";
}  // namespace artifacts

struct PipelineOptions {
  // Overrides for the report stage.
  std::optional<ReportFormat> report_format;
  std::optional<std::filesystem::path> report_dir;
  std::ostream* log = nullptr;
};

// Runs the stages in canonical order. A stage whose recorded input digest
// matches is a no-op. Throws DataError when the run directory was produced
// under a different config hash or an upstream artifact is missing, and
// BackendError when `generate` has no backend.
std::vector<StageOutcome> run_pipeline(const RunConfig& config, const std::filesystem::path& run_dir,
                                       std::span<const Stage> stages, const PipelineOptions& options = {});

// The scored records a run directory currently holds (repaired if present).
std::vector<TranscriptRecord> read_scored(const std::filesystem::path& run_dir);

// Fills offline verdicts (first_char, regex); stored constrained verdicts are
// kept.
std::vector<TranscriptRecord> score_records(std::vector<TranscriptRecord> records);

}  // namespace slmaudit
