#include "slmaudit/report.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "slmaudit/error.hpp"
#include "slmaudit/text.hpp"

namespace slmaudit {

double gap_recovery(double nonfc_mean, double firstchar, double repaired) {
  const double denominator = nonfc_mean - firstchar;
  if (!(denominator > 0.0)) {
    throw DataError("gap recovery needs nonfc_mean above firstchar (got " + text::fixed(nonfc_mean, 3) +
                    " vs " + text::fixed(firstchar, 3) + ")");
  }
  return (repaired - firstchar) / denominator * 100.0;
}

namespace {

using ModelDataset = std::pair<std::string, std::string>;
using RunKey = std::tuple<std::string, std::string, Phrasing>;

RunKey run_key(const CellKey& k) { return {k.model_id, k.dataset_id, k.phrasing}; }

CellKey with_variant(CellKey key, Variant v) {
  key.variant = v;
  return key;
}

double mean_bools(const std::vector<bool>& v) {
  std::size_t k = 0;
  for (bool b : v) k += b ? 1 : 0;
  return static_cast<double>(k) / static_cast<double>(v.size());
}

std::vector<bool> correctness(const ScoredCell& cell) {
  std::vector<bool> out;
  out.reserve(cell.verdicts.size());
  for (std::size_t i = 0; i < cell.verdicts.size(); ++i) {
    const auto& v = cell.verdicts[i];
    out.push_back(v.correct.value_or(v.predicted_letter && *v.predicted_letter == cell.records[i].gold_letter));
  }
  return out;
}

CorrectnessColumn column(const ScoredCell& cell) {
  CorrectnessColumn c;
  c.cell = cell.cell;
  for (const auto& r : cell.records) c.example_ids.push_back(r.example_id);
  c.correct = correctness(cell);
  return c;
}

BootstrapOptions boot(const ReportOptions& o, std::string context) {
  BootstrapOptions b;
  b.n_resamples = o.n_resamples;
  b.seed = o.seed;
  b.context = std::move(context);
  return b;
}

bool has_all_verdicts(const std::vector<TranscriptRecord>& records, Evaluator e) {
  const std::string_view name = to_string(e);
  return !records.empty() && std::all_of(records.begin(), records.end(), [&](const TranscriptRecord& r) {
           return r.verdicts.count(name) > 0;
         });
}

bool is_spread_variant(Variant v) {
  return std::find(std::begin(kSpreadVariants), std::end(kSpreadVariants), v) != std::end(kSpreadVariants);
}

struct Builder {
  const ReportOptions& options;
  CellGroups groups;
  std::map<CellKey, ScoredCell> scored;
  std::map<CellKey, CellMetrics> metrics;
  // Accuracy and token quantities do not depend on the elicitation phrasing, so
  // those tables read one phrasing per (model, dataset): the first present.
  std::map<ModelDataset, Phrasing> primary;

  Builder(std::span<const TranscriptRecord> records, const ReportOptions& o)
      : options(o), groups(group_by_cell(records)) {
    CalibrationOptions cal{options.vpr_threshold, options.n_bins};
    for (auto& [key, recs] : groups) {
      ScoredCell cell = score_cell(key, recs, options.evaluator);
      metrics.emplace(key, cell_calibration(cell, cal));
      scored.emplace(key, std::move(cell));
      const ModelDataset md{key.model_id, key.dataset_id};
      auto it = primary.find(md);
      if (it == primary.end() || key.phrasing < it->second) primary[md] = key.phrasing;
    }
  }

  bool is_primary(const CellKey& k) const { return primary.at({k.model_id, k.dataset_id}) == k.phrasing; }

  const ScoredCell* find(const CellKey& k) const {
    auto it = scored.find(k);
    return it == scored.end() ? nullptr : &it->second;
  }

  std::optional<ScoredCell> rescore(const CellKey& k, Evaluator e) const {
    auto it = groups.find(k);
    if (it == groups.end()) return std::nullopt;
    if (e == options.evaluator) return scored.at(k);
    if (e == Evaluator::kConstrained && !has_all_verdicts(it->second, e)) return std::nullopt;
    return score_cell(k, it->second, e);
  }

  std::vector<GapRecoveryRow> gap_table() const {
    std::map<std::string, std::vector<GapRecoveryRow>> by_dataset;
    for (const auto& [md, phrasing] : primary) {
      CellKey fc{md.first, md.second, Variant::kFormatChange, phrasing};
      if (!groups.count(fc)) continue;
      std::vector<double> nonfc;
      for (Variant v : kSpreadVariants) {
        if (auto c = rescore(with_variant(fc, v), Evaluator::kFirstChar)) nonfc.push_back(mean_bools(correctness(*c)));
      }
      if (nonfc.size() != std::size(kSpreadVariants)) continue;

      GapRecoveryRow row;
      row.model_id = md.first;
      row.dataset_id = md.second;
      row.nonfc_mean = (nonfc[0] + nonfc[1] + nonfc[2] + nonfc[3]) / 4.0;
      const ScoredCell first = *rescore(fc, Evaluator::kFirstChar);
      row.firstchar = mean_bools(correctness(first));
      const bool recoverable = row.nonfc_mean > row.firstchar;
      row.repaired_regex = mean_bools(correctness(*rescore(fc, Evaluator::kRegex)));
      if (recoverable) row.recovery_regex = gap_recovery(row.nonfc_mean, row.firstchar, *row.repaired_regex);
      if (auto c = rescore(fc, Evaluator::kConstrained)) {
        row.repaired_constrained = mean_bools(correctness(*c));
        if (recoverable) {
          row.recovery_constrained = gap_recovery(row.nonfc_mean, row.firstchar, *row.repaired_constrained);
        }
      }
      const ScoredCell sp = *rescore(with_variant(fc, Variant::kSurfaceParaphrase), Evaluator::kFirstChar);
      const auto pairs = pair_examples(column(sp), column(first));
      row.drop_ci = paired_drop_ci(pairs, boot(options, fc.to_string() + "/paired_drop"));
      by_dataset[md.second].push_back(std::move(row));
    }

    std::vector<GapRecoveryRow> out;
    for (auto& [dataset, rows] : by_dataset) {
      GapRecoveryRow mean;
      mean.model_id = "Mean";
      mean.dataset_id = dataset;
      mean.mean_row = true;
      const double n = static_cast<double>(rows.size());
      double regex = 0.0, constrained = 0.0;
      bool all_constrained = true;
      for (const auto& r : rows) {
        mean.nonfc_mean += r.nonfc_mean / n;
        mean.firstchar += r.firstchar / n;
        regex += *r.repaired_regex / n;
        if (r.repaired_constrained) {
          constrained += *r.repaired_constrained / n;
        } else {
          all_constrained = false;
        }
      }
      // The mean row applies gap_recovery to the column means.
      const bool recoverable = mean.nonfc_mean > mean.firstchar;
      mean.repaired_regex = regex;
      if (recoverable) mean.recovery_regex = gap_recovery(mean.nonfc_mean, mean.firstchar, regex);
      if (all_constrained) {
        mean.repaired_constrained = constrained;
        if (recoverable) mean.recovery_constrained = gap_recovery(mean.nonfc_mean, mean.firstchar, constrained);
      }
      for (auto& r : rows) out.push_back(std::move(r));
      out.push_back(std::move(mean));
    }
    return out;
  }

  std::vector<ShiftRow> shift_table() const {
    std::vector<CellMetrics> cells;
    for (const auto& [k, m] : metrics) {
      if (is_primary(k) && m.ece_token_raw && m.ece_token_norm) cells.push_back(m);
    }
    if (cells.empty()) return {};
    const NormalisationShift shift = normalisation_shift(cells);
    std::vector<ShiftRow> out;
    auto add = [&](std::string label, const ShiftStats& stats) {
      ShiftRow row;
      row.mean_ci = bootstrap_ci(stats.abs_deltas, mean_of, boot(options, "normalisation_shift/" + label),
                                 ResamplingUnit::kCell);
      row.label = std::move(label);
      row.stats = stats;
      out.push_back(std::move(row));
    };
    for (const auto& [v, stats] : shift.per_variant) add(std::string(to_string(v)), stats);
    add("all", shift.all);
    return out;
  }

  std::vector<CoverageRow> coverage_table() const {
    std::map<std::string, CoverageRow> rows;
    std::map<std::string, std::pair<double, std::size_t>> examples;
    for (const auto& [k, recs] : groups) {
      if (!is_primary(k)) continue;
      if (std::none_of(recs.begin(), recs.end(), [](const auto& r) { return r.first_step_topk.has_value(); })) {
        continue;
      }
      const TopKCoverage cov = topk_coverage(recs);
      CoverageRow& row = rows[k.dataset_id];
      if (row.cells_total == 0) row.min_mass_ratio = cov.mass_ratio;
      row.dataset_id = k.dataset_id;
      ++row.cells_total;
      if (cov.full_coverage_fraction == 1.0) ++row.cells_full;
      row.min_mass_ratio = std::min(row.min_mass_ratio, cov.mass_ratio);
      auto& [full, n] = examples[k.dataset_id];
      full += cov.full_coverage_fraction * static_cast<double>(cov.n);
      n += cov.n;
    }
    std::vector<CoverageRow> out;
    for (auto& [dataset, row] : rows) {
      const auto& [full, n] = examples.at(dataset);
      row.example_coverage = full / static_cast<double>(n);
      out.push_back(row);
    }
    return out;
  }

  std::vector<VprEntry> vpr_table() const {
    std::vector<VprEntry> out;
    for (const auto& [k, cell] : scored) {
      VprEntry e;
      e.cell = k;
      e.vpr = metrics.at(k).vpr;
      e.below_threshold = e.vpr < options.vpr_threshold;
      std::vector<double> parsed;
      for (const auto& p : cell.parses) parsed.push_back(p.parseable() ? 1.0 : 0.0);
      e.ci = bootstrap_ci(parsed, mean_of, boot(options, k.to_string() + "/vpr"));
      out.push_back(std::move(e));
    }
    return out;
  }

  // Cells that enter verbal summaries: non-format_change, VPR above threshold.
  bool included(const CellKey& k) const {
    return is_spread_variant(k.variant) && metrics.at(k).ece_verbal.has_value();
  }

  std::vector<CalibrationSummaryRow> calibration_table() const {
    std::map<RunKey, std::vector<const CellMetrics*>> runs;
    for (const auto& [k, m] : metrics) {
      if (included(k)) runs[run_key(k)].push_back(&m);
    }
    std::vector<CalibrationSummaryRow> out;
    for (const auto& [rk, cells] : runs) {
      CalibrationSummaryRow row;
      std::tie(row.model_id, row.dataset_id, row.phrasing) = rk;
      row.n_cells = cells.size();
      const double n = static_cast<double>(cells.size());
      bool token = true, vs_token = true;
      double ece_token = 0.0, gap = 0.0, ovt = 0.0;
      for (const CellMetrics* m : cells) {
        row.accuracy += m->accuracy / n;
        row.ece_verbal += *m->ece_verbal / n;
        row.overconf_vs_acc += *m->overconf_vs_acc / n;
        if (m->ece_token_norm && m->ece_gap) {
          ece_token += *m->ece_token_norm / n;
          gap += *m->ece_gap / n;
        } else {
          token = false;
        }
        if (m->overconf_vs_token) {
          ovt += *m->overconf_vs_token / n;
        } else {
          vs_token = false;
        }
      }
      if (token) {
        row.ece_token = ece_token;
        row.ece_gap = gap;
      }
      if (vs_token) row.overconf_vs_token = ovt;
      out.push_back(std::move(row));
    }
    return out;
  }

  std::vector<SignedCellRow> signed_table() const {
    std::vector<SignedCellRow> out;
    for (const auto& [k, cell] : scored) {
      if (!included(k)) continue;
      const CellRows rows = cell_rows(cell);
      std::vector<double> vs_acc, vs_token;
      for (std::size_t i = 0; i < rows.verbal_conf.size(); ++i) {
        vs_acc.push_back(rows.verbal_conf[i] - (rows.verbal_correct[i] ? 1.0 : 0.0));
        if (rows.verbal_token_norm[i]) vs_token.push_back(rows.verbal_conf[i] - *rows.verbal_token_norm[i]);
      }
      SignedCellRow row;
      row.cell = k;
      row.overconf_vs_acc = bootstrap_ci(vs_acc, mean_of, boot(options, k.to_string() + "/overconf_vs_acc"));
      if (!vs_token.empty()) {
        row.overconf_vs_token =
            bootstrap_ci(vs_token, mean_of, boot(options, k.to_string() + "/overconf_vs_token"));
      }
      out.push_back(std::move(row));
    }
    return out;
  }

  std::vector<SpreadRow> spread_table() const {
    std::vector<SpreadRow> out;
    for (const auto& [md, phrasing] : primary) {
      VariantAccuracy acc;
      std::vector<CorrectnessColumn> columns;
      for (Variant v : kSpreadVariants) {
        const ScoredCell* c = find({md.first, md.second, v, phrasing});
        if (!c) break;
        acc[v] = metrics.at(c->cell).accuracy;
        columns.push_back(column(*c));
      }
      if (columns.size() != std::size(kSpreadVariants)) continue;
      SpreadRow row;
      row.record = make_spread_record(md.first, md.second, std::move(acc));
      if (auto s = options.model_sizes.find(md.first); s != options.model_sizes.end()) {
        row.size_billions = s->second;
      }
      row.ci = spread_ci(columns, boot(options, md.first + "/" + md.second + "/spread"));
      out.push_back(std::move(row));
    }
    return out;
  }

  std::vector<PanelRow> panel(const std::vector<SpreadRow>& spreads) const {
    std::map<std::string, std::vector<SpreadRecord>> by_dataset;
    for (const auto& s : spreads) {
      if (s.size_billions) by_dataset[s.record.dataset_id].push_back(s.record);
    }
    std::vector<PanelRow> out;
    for (const auto& [dataset, records] : by_dataset) {
      if (records.size() < 3) continue;
      try {
        for (auto& [d, result] : size_spread_panel(records, options.model_sizes)) out.push_back({d, result});
      } catch (const DataError&) {
        // Constant spreads or sizes: no correlation to report.
      }
    }
    return out;
  }

  std::vector<ReliabilityCurve> reliability() const {
    std::map<RunKey, std::vector<const ScoredCell*>> runs;
    for (const auto& [k, cell] : scored) {
      if (included(k)) runs[run_key(k)].push_back(&cell);
    }
    std::vector<ReliabilityCurve> out;
    for (const auto& [rk, cells] : runs) {
      std::vector<double> vc, tc;
      std::vector<bool> vok, tok;
      for (const ScoredCell* c : cells) {
        const CellRows rows = cell_rows(*c);
        vc.insert(vc.end(), rows.verbal_conf.begin(), rows.verbal_conf.end());
        vok.insert(vok.end(), rows.verbal_correct.begin(), rows.verbal_correct.end());
        tc.insert(tc.end(), rows.token_norm.begin(), rows.token_norm.end());
        tok.insert(tok.end(), rows.token_correct.begin(), rows.token_correct.end());
      }
      ReliabilityCurve curve;
      std::tie(curve.model_id, curve.dataset_id, curve.phrasing) = rk;
      curve.verbal = ece(vc, vok, options.n_bins);
      if (!tc.empty()) curve.token = ece(tc, tok, options.n_bins);
      out.push_back(std::move(curve));
    }
    return out;
  }
};

}  // namespace

ThresholdSensitivity threshold_sensitivity(std::span<const ScoredCell> cells,
                                           std::span<const double> thresholds,
                                           std::span<const Variant> variants) {
  ThresholdSensitivity out;
  out.thresholds.assign(thresholds.begin(), thresholds.end());
  struct CellStat {
    double vpr;
    std::optional<double> overconf;
  };
  std::map<RunKey, std::vector<CellStat>> runs;
  for (const ScoredCell& cell : cells) {
    if (std::find(variants.begin(), variants.end(), cell.cell.variant) == variants.end()) continue;
    const CellRows rows = cell_rows(cell);
    CellStat stat{static_cast<double>(rows.verbal_conf.size()) / static_cast<double>(cell.records.size()),
                  std::nullopt};
    if (!rows.verbal_conf.empty()) {
      stat.overconf = mean_of(rows.verbal_conf) - mean_bools(rows.verbal_correct);
    }
    runs[run_key(cell.cell)].push_back(stat);
  }
  for (const auto& [rk, stats] : runs) {
    SensitivityRow row;
    std::tie(row.model_id, row.dataset_id, row.phrasing) = rk;
    row.empty = true;
    for (double t : thresholds) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const CellStat& s : stats) {
        if (s.overconf && s.vpr >= t) {
          sum += *s.overconf;
          ++n;
        }
      }
      row.counts.push_back(n);
      row.means.push_back(n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt);
      if (n) row.empty = false;
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::vector<ChecklistItem> checklist(const AuditReport& report) {
  std::vector<ChecklistItem> items;

  ChecklistItem norm{1, "ECE_token normalisation", false, ""};
  const auto all_shift = std::find_if(report.shift_summary.begin(), report.shift_summary.end(),
                                      [](const ShiftRow& r) { return r.label == "all"; });
  if (all_shift != report.shift_summary.end()) {
    norm.satisfied = true;
    norm.detail = "label-set normalised P(l*)/sum P(l); unnormalised-definition shift mean |d| " +
                  text::fixed(all_shift->stats.mean_abs, 3) + " [" + text::fixed(all_shift->mean_ci.lo, 3) +
                  ", " + text::fixed(all_shift->mean_ci.hi, 3) + "] over " +
                  std::to_string(all_shift->stats.n) + " cells";
  } else {
    norm.detail = "no token-level data; ECE_token not computed";
  }
  items.push_back(norm);

  std::string repair = "first_char, regex";
  if (std::any_of(report.gap_recovery_table.begin(), report.gap_recovery_table.end(),
                  [](const GapRecoveryRow& r) { return r.repaired_constrained.has_value(); })) {
    repair += ", constrained";
  }
  items.push_back({2, "Evaluator logic per table", true,
                   "calibration, VPR, spread: " + report.evaluator +
                       (report.gap_recovery_table.empty() ? std::string() : "; gap recovery: " + repair)});

  items.push_back({3, "Raw generations retained", report.generations_retained,
                   report.generations_retained
                       ? std::to_string(report.n_records) + " generations retained for re-scoring"
                       : "generations were dropped; re-scoring is not possible"});

  std::size_t excluded = 0;
  bool footnoted = true;
  for (const auto& v : report.vpr_matrix) {
    const auto m = std::find_if(report.cells.begin(), report.cells.end(),
                                [&](const CellMetrics& c) { return c.cell == v.cell; });
    if (m == report.cells.end() || !m->verbal_exclusion) continue;
    ++excluded;
    footnoted = footnoted && std::any_of(report.exclusions.begin(), report.exclusions.end(),
                                         [&](const Exclusion& e) { return e.cell == v.cell; });
  }
  items.push_back({4, "Per-cell VPR with exclusions and a signed quantity",
                   !report.vpr_matrix.empty() && footnoted,
                   std::to_string(report.vpr_matrix.size()) + " cells reported, " + std::to_string(excluded) +
                       " excluded and footnoted; signed quantity: overconf_vs_acc on " +
                       std::to_string(report.signed_cells.size()) + " cells"});

  std::set<Phrasing> phrasings;
  for (const auto& c : report.cells) phrasings.insert(c.cell.phrasing);
  std::vector<std::string> names;
  for (Phrasing p : phrasings) names.emplace_back(to_string(p));
  items.push_back({5, "Elicitation phrasings", phrasings.size() >= 2,
                   phrasings.size() >= 2
                       ? std::to_string(phrasings.size()) + " phrasings: " + text::join(names, ", ")
                       : std::to_string(phrasings.size()) + " phrasing (replication missing)"});

  items.push_back({6, "Spread alongside accuracy", !report.spread_table.empty(),
                   std::to_string(report.spread_table.size()) +
                       " model-dataset spreads reported with per-variant accuracy"});
  return items;
}

AuditReport build_report(std::span<const TranscriptRecord> records, const ReportOptions& options) {
  if (records.empty()) throw DataError("report over zero transcript records");
  const Builder b(records, options);
  AuditReport report;
  report.evaluator = std::string(to_string(options.evaluator));
  report.vpr_threshold = options.vpr_threshold;
  report.n_bins = options.n_bins;
  report.n_resamples = options.n_resamples;
  report.seed = options.seed;
  report.n_records = records.size();
  report.generations_retained = options.generations_retained;
  for (const auto& [k, m] : b.metrics) {
    report.cells.push_back(m);
    if (m.verbal_exclusion) report.exclusions.push_back({k, *m.verbal_exclusion});
  }
  report.gap_recovery_table = b.gap_table();
  report.shift_summary = b.shift_table();
  report.coverage = b.coverage_table();
  report.vpr_matrix = b.vpr_table();
  report.calibration_summary = b.calibration_table();
  report.signed_cells = b.signed_table();
  report.spread_table = b.spread_table();
  report.panel = b.panel(report.spread_table);
  std::vector<ScoredCell> cells;
  for (const auto& [k, c] : b.scored) cells.push_back(c);
  report.sensitivity = threshold_sensitivity(cells, options.sensitivity_thresholds);
  report.reliability = b.reliability();
  report.checklist = checklist(report);
  return report;
}

}  // namespace slmaudit
