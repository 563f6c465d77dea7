#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "slmaudit/calibration.hpp"
#include "slmaudit/error.hpp"
#include "slmaudit/pipeline.hpp"
#include "slmaudit/report.hpp"
#include "slmaudit/robustness.hpp"
#include "slmaudit/text.hpp"

namespace fs = std::filesystem;
using namespace slmaudit;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitBackend = 3;

struct GlobalFlags {
  std::string config;
  std::string run_dir = "run";
  std::optional<std::uint64_t> seed;
  std::string base_url;
  std::string transcripts;
};

RunConfig load_config(const GlobalFlags& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.transcripts.empty()) c.transcripts = {fs::absolute(g.transcripts)};
  if (!g.base_url.empty()) {
    BackendConfig b = c.backend.value_or(BackendConfig{});
    b.base_url = g.base_url;
    if (b.model_name.empty()) b.model_name = "unset";
    b.validate();
    c.backend = b;
  }
  return c;
}

int run_stages(const GlobalFlags& g, std::vector<Stage> stages, PipelineOptions options = {}) {
  const RunConfig config = load_config(g);
  options.log = &std::cerr;
  run_pipeline(config, g.run_dir, stages, options);
  return 0;
}

void print_accuracy(const fs::path& run_dir, Evaluator evaluator) {
  const auto records = read_scored(run_dir);
  std::cout << "cell\tn\taccuracy (" << to_string(evaluator) << ")\n";
  for (auto& [key, recs] : group_by_cell(records)) {
    const ScoredCell cell = score_cell(key, recs, evaluator);
    std::size_t hits = 0;
    for (const auto& v : cell.verdicts) hits += v.correct.value_or(false) ? 1 : 0;
    std::cout << key.to_string() << '\t' << recs.size() << '\t'
              << text::fixed(static_cast<double>(hits) / static_cast<double>(recs.size()), 3) << '\n';
  }
}

// model,dataset,spread[,size] rows with a header line.
std::vector<PanelRow> panel_from_csv(const fs::path& path, std::map<std::string, double> sizes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const bool has_size = line.find("size") != std::string::npos;
  std::vector<SpreadRecord> records;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (text::trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.emplace_back(text::trim(f));
    if (fields.size() < (has_size ? 4u : 3u)) throw DataError(path.string() + ":" + std::to_string(n) + ": too few fields");
    SpreadRecord r;
    r.model_id = fields[0];
    r.dataset_id = fields[1];
    try {
      r.spread = std::stod(fields[2]);
      if (has_size) sizes[r.model_id] = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": not a number");
    }
    records.push_back(std::move(r));
  }
  std::vector<PanelRow> rows;
  for (auto& [dataset, result] : size_spread_panel(records, sizes)) rows.push_back({dataset, result});
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reliability audit for small language models"};
  app.require_subcommand(1);
  GlobalFlags g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--run-dir", g.run_dir, "Directory holding stage artifacts")->capture_default_str();
  auto* seed_opt = app.add_option("--seed", seed, "Override the sampling and bootstrap seed");
  app.add_option("--base-url", g.base_url, "OpenAI-compatible backend, e.g. http://127.0.0.1:8000");
  app.add_option("--transcripts", g.transcripts, "Pre-recorded transcripts (JSON lines)")->check(CLI::ExistingFile);

  std::vector<std::pair<CLI::App*, Stage>> stage_commands;
  auto* sample = app.add_subcommand("sample", "Draw the seeded evaluation sample per dataset");
  stage_commands.emplace_back(sample, Stage::kSample);
  auto* render = app.add_subcommand("render", "Render the prompt variants for the sample");
  stage_commands.emplace_back(render, Stage::kRender);
  auto* generate = app.add_subcommand("generate", "Collect generations, top-k windows and verbal confidence");
  stage_commands.emplace_back(generate, Stage::kGenerate);
  auto* score = app.add_subcommand("score", "Score transcripts under the offline evaluators");
  std::string evaluator_name;
  score->add_option("--evaluator", evaluator_name, "Also print per-cell accuracy under this evaluator")
      ->check(CLI::IsMember({"first_char", "regex", "constrained"}));
  auto* repair = app.add_subcommand("repair", "Constrained finalization of format_change generations");
  stage_commands.emplace_back(repair, Stage::kRepair);
  auto* metrics = app.add_subcommand("metrics", "Per-cell calibration metrics");
  stage_commands.emplace_back(metrics, Stage::kMetrics);
  auto* spread = app.add_subcommand("spread", "Prompt-perturbation spread table");
  auto* panel = app.add_subcommand("panel", "Size-spread Spearman panel");
  std::string table = "text";
  std::string spreads_csv;
  panel->add_option("--table", table, "Output layout")->check(CLI::IsMember({"text", "csv"}))->capture_default_str();
  panel->add_option("--spreads", spreads_csv, "CSV of model,dataset,spread[,size] instead of the run directory")
      ->check(CLI::ExistingFile);
  auto* report = app.add_subcommand("report", "Emit the audit report");
  std::string format;
  std::string out_dir;
  report->add_option("--format", format, "markdown, csv or json")->check(CLI::IsMember({"markdown", "csv", "json"}));
  report->add_option("--out", out_dir, "Output directory (default <run-dir>/report)");
  auto* run = app.add_subcommand("run", "Run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (*seed_opt) g.seed = seed;

  try {
    for (const auto& [cmd, stage] : stage_commands) {
      if (*cmd) return run_stages(g, {stage});
    }
    if (*score) {
      run_stages(g, {Stage::kScore});
      if (!evaluator_name.empty()) print_accuracy(g.run_dir, *parse_evaluator(evaluator_name));
      return 0;
    }
    if (*spread) {
      run_stages(g, {Stage::kSpread});
      std::ifstream in(fs::path(g.run_dir) / artifacts::kSpread);
      std::cout << in.rdbuf();
      return 0;
    }
    if (*panel) {
      const RunConfig config = load_config(g);
      std::vector<PanelRow> rows;
      if (!spreads_csv.empty()) {
        rows = panel_from_csv(spreads_csv, config.model_sizes);
      } else {
        rows = build_report(read_scored(g.run_dir), config.report_options()).panel;
      }
      std::cout << (table == "csv" ? panel_table_csv(rows) : panel_table_text(rows));
      return 0;
    }
    if (*report) {
      PipelineOptions options;
      if (!format.empty()) options.report_format = parse_report_format(format);
      if (!out_dir.empty()) options.report_dir = fs::path(out_dir);
      return run_stages(g, {Stage::kReport}, options);
    }
    if (*run) {
      return run_stages(g, std::vector<Stage>(std::begin(kAllStages), std::end(kAllStages)));
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return kExitBackend;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
