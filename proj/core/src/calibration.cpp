#include "slmaudit/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "slmaudit/error.hpp"
#include "slmaudit/text.hpp"

namespace slmaudit {

double letter_mass(const TopKDistribution& topk, char letter) {
  const char bare[] = {letter, '\0'};
  double mass = topk.probability(bare);
  for (char ws : {' ', '\t', '\n'}) {
    const char spaced[] = {ws, letter, '\0'};
    mass += topk.probability(spaced);
  }
  return mass;
}

ConfidencePair token_confidence(const TopKDistribution& topk, char predicted_letter,
                                const LabelSet& labels) {
  if (!labels.contains(predicted_letter)) {
    throw std::invalid_argument(std::string("predicted letter '") + predicted_letter +
                                "' is not in the label set");
  }
  ConfidencePair pair;
  pair.predicted_letter = predicted_letter;
  pair.raw = letter_mass(topk, predicted_letter);
  for (char c : labels.letters()) pair.observed_label_mass += letter_mass(topk, c);
  if (pair.observed_label_mass > 0.0) {
    pair.normalised = std::min(1.0, pair.raw / pair.observed_label_mass);
  } else {
    pair.degenerate = true;
  }
  return pair;
}

std::size_t reliability_bin(double confidence, std::size_t n_bins) {
  const double n = static_cast<double>(n_bins);
  auto edge = [n](std::size_t b) { return static_cast<double>(b) / n; };
  std::size_t b = static_cast<std::size_t>(std::clamp(std::floor(confidence * n), 0.0, n - 1));
  // Settle rounding in confidence * n against the exact edge values.
  while (b > 0 && confidence < edge(b)) --b;
  while (b + 1 < n_bins && confidence >= edge(b + 1)) ++b;
  return b;
}

BinnedReliability ece(std::span<const double> confidences, const std::vector<bool>& correct,
                      std::size_t n_bins) {
  if (confidences.empty()) throw DataError("ECE of an empty sample");
  if (confidences.size() != correct.size()) {
    throw DataError("ECE inputs differ in length");
  }
  if (n_bins == 0) throw std::invalid_argument("ECE needs at least one bin");

  std::vector<double> conf_sum(n_bins, 0.0);
  std::vector<std::size_t> hits(n_bins, 0);
  BinnedReliability out;
  out.n_bins = n_bins;
  out.n = confidences.size();
  out.bins.resize(n_bins);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DataError("confidence outside [0,1]");
    const std::size_t b = reliability_bin(c, n_bins);
    ++out.bins[b].count;
    conf_sum[b] += c;
    if (correct[i]) ++hits[b];
  }
  const double total = static_cast<double>(out.n);
  for (std::size_t b = 0; b < n_bins; ++b) {
    ReliabilityBin& bin = out.bins[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(n_bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    if (bin.count == 0) continue;
    const double count = static_cast<double>(bin.count);
    bin.mean_confidence = conf_sum[b] / count;
    bin.accuracy = static_cast<double>(hits[b]) / count;
    out.ece += (count / total) * std::abs(bin.accuracy - bin.mean_confidence);
  }
  return out;
}

ScoredCell score_cell(const CellKey& cell, std::vector<TranscriptRecord> records,
                      Evaluator evaluator) {
  ScoredCell out;
  out.cell = cell;
  out.verdicts.reserve(records.size());
  out.parses.reserve(records.size());
  const std::string_view name = to_string(evaluator);
  for (const auto& r : records) {
    if (r.cell != cell) throw DataError("record " + r.example_id + " belongs to another cell");
    auto stored = r.verdicts.find(name);
    if (stored != r.verdicts.end()) {
      out.verdicts.push_back(grade(stored->second, r.gold_letter));
    } else if (evaluator == Evaluator::kConstrained) {
      throw DataError("no constrained verdict for " + r.example_id + " in " + cell.to_string());
    } else {
      out.verdicts.push_back(
          grade(evaluate_offline(evaluator, r.generation_text, r.label_set), r.gold_letter));
    }
    out.parses.push_back(parse_verbal(r));
  }
  out.records = std::move(records);
  return out;
}

namespace {

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double mean_bool(const std::vector<bool>& v) {
  std::size_t k = 0;
  for (bool b : v) k += b ? 1 : 0;
  return static_cast<double>(k) / static_cast<double>(v.size());
}

CellRows rows_from(std::span<const TranscriptRecord> records,
                   std::span<const EvaluatorVerdict> verdicts,
                   std::span<const VerbalParse> parses) {
  if (records.empty()) throw DataError("calibration of an empty cell");
  if (verdicts.size() != records.size() || parses.size() != records.size()) {
    throw DataError("verdicts and parses must align with the cell's records");
  }
  CellRows rows;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const TranscriptRecord& r = records[i];
    if (r.cell != records.front().cell) throw DataError("records span more than one cell");
    const EvaluatorVerdict& v = verdicts[i];
    const bool correct =
        v.correct.value_or(v.predicted_letter.has_value() && *v.predicted_letter == r.gold_letter);
    rows.correct.push_back(correct);

    std::optional<double> norm;
    if (r.first_step_topk) {
      if (!v.predicted_letter) {
        ++rows.unpredicted;
      } else {
        const ConfidencePair pair = token_confidence(*r.first_step_topk, *v.predicted_letter, r.label_set);
        if (pair.degenerate) {
          ++rows.degenerate;
        } else {
          rows.token_raw.push_back(pair.raw);
          rows.token_norm.push_back(pair.normalised);
          rows.token_correct.push_back(correct);
          norm = pair.normalised;
        }
      }
    }
    if (parses[i].parseable()) {
      rows.verbal_conf.push_back(*parses[i].value);
      rows.verbal_correct.push_back(correct);
      rows.verbal_token_norm.push_back(norm);
    }
  }
  return rows;
}

}  // namespace

CellRows cell_rows(const ScoredCell& cell) {
  return rows_from(cell.records, cell.verdicts, cell.parses);
}

CellMetrics cell_calibration(std::span<const TranscriptRecord> records,
                             std::span<const EvaluatorVerdict> verdicts,
                             std::span<const VerbalParse> parses,
                             const CalibrationOptions& options) {
  const CellRows rows = rows_from(records, verdicts, parses);
  CellMetrics m;
  m.cell = records.front().cell;
  m.n = records.size();
  m.accuracy = mean_bool(rows.correct);
  m.n_token_rows = rows.token_norm.size();
  m.n_token_degenerate = rows.degenerate;
  m.n_token_unpredicted = rows.unpredicted;
  if (!rows.token_norm.empty()) {
    m.ece_token_raw = ece(rows.token_raw, rows.token_correct, options.n_bins).ece;
    m.ece_token_norm = ece(rows.token_norm, rows.token_correct, options.n_bins).ece;
    m.mean_token_conf_norm = mean(rows.token_norm);
  }

  m.n_verbal_parsed = rows.verbal_conf.size();
  m.vpr = static_cast<double>(m.n_verbal_parsed) / static_cast<double>(m.n);
  if (m.n_verbal_parsed == 0) {
    m.verbal_exclusion = "no parseable verbal confidence";
  } else if (m.vpr < options.vpr_threshold) {
    m.verbal_exclusion = "VPR " + text::fixed(m.vpr, 3) + " below threshold " +
                         text::fixed(options.vpr_threshold, 2);
  } else {
    m.ece_verbal = ece(rows.verbal_conf, rows.verbal_correct, options.n_bins).ece;
    m.mean_verbal_conf = mean(rows.verbal_conf);
    m.overconf_vs_acc = *m.mean_verbal_conf - mean_bool(rows.verbal_correct);
    double verbal_sum = 0.0, token_sum = 0.0;
    std::size_t paired = 0;
    for (std::size_t i = 0; i < rows.verbal_conf.size(); ++i) {
      if (!rows.verbal_token_norm[i]) continue;
      verbal_sum += rows.verbal_conf[i];
      token_sum += *rows.verbal_token_norm[i];
      ++paired;
    }
    if (paired > 0) {
      m.overconf_vs_token = (verbal_sum - token_sum) / static_cast<double>(paired);
    }
    if (m.ece_token_norm) m.ece_gap = *m.ece_verbal - *m.ece_token_norm;
  }

  bool any_topk = std::any_of(records.begin(), records.end(),
                              [](const TranscriptRecord& r) { return r.first_step_topk.has_value(); });
  if (any_topk) {
    const TopKCoverage cov = topk_coverage(records);
    m.coverage_full_fraction = cov.full_coverage_fraction;
    m.coverage_mass_ratio = cov.mass_ratio;
  }
  return m;
}

CellMetrics cell_calibration(const ScoredCell& cell, const CalibrationOptions& options) {
  return cell_calibration(cell.records, cell.verdicts, cell.parses, options);
}

ShiftStats shift_stats(std::span<const double> abs_deltas) {
  if (abs_deltas.empty()) throw DataError("normalisation shift over zero cells");
  ShiftStats s;
  s.n = abs_deltas.size();
  s.abs_deltas.assign(abs_deltas.begin(), abs_deltas.end());
  s.mean_abs = mean(abs_deltas);
  std::vector<double> sorted(abs_deltas.begin(), abs_deltas.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  s.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  s.max = sorted.back();
  const double n = static_cast<double>(s.n);
  s.frac_above_005 = static_cast<double>(std::count_if(sorted.begin(), sorted.end(), [](double d) { return d > 0.05; })) / n;
  s.frac_above_020 = static_cast<double>(std::count_if(sorted.begin(), sorted.end(), [](double d) { return d > 0.20; })) / n;
  return s;
}

NormalisationShift normalisation_shift(std::span<const CellMetrics> cells) {
  std::vector<double> all;
  std::vector<std::vector<double>> by_variant(std::size(kAllVariants));
  for (const auto& c : cells) {
    if (!c.ece_token_raw || !c.ece_token_norm) continue;
    const double d = std::abs(*c.ece_token_raw - *c.ece_token_norm);
    all.push_back(d);
    by_variant[static_cast<std::size_t>(c.cell.variant)].push_back(d);
  }
  NormalisationShift out;
  out.all = shift_stats(all);
  for (Variant v : kAllVariants) {
    const auto& deltas = by_variant[static_cast<std::size_t>(v)];
    if (!deltas.empty()) out.per_variant.emplace_back(v, shift_stats(deltas));
  }
  return out;
}

TopKCoverage topk_coverage(std::span<const TranscriptRecord> records) {
  TopKCoverage out;
  std::size_t full = 0;
  double ratio_sum = 0.0;
  for (const auto& r : records) {
    if (!r.first_step_topk) continue;
    const TopKDistribution& topk = *r.first_step_topk;
    double observed = 0.0;
    std::size_t missing = 0;
    for (char c : r.label_set.letters()) {
      const double m = letter_mass(topk, c);
      if (m > 0.0) {
        observed += m;
      } else {
        ++missing;
      }
    }
    ++out.n;
    if (missing == 0) {
      ++full;
      ratio_sum += 1.0;
    } else {
      const double bound = observed + static_cast<double>(missing) * topk.smallest();
      ratio_sum += bound > 0.0 ? observed / bound : 0.0;
    }
  }
  if (out.n == 0) throw DataError("top-k coverage needs records with top-k data");
  out.full_coverage_fraction = static_cast<double>(full) / static_cast<double>(out.n);
  out.mass_ratio = ratio_sum / static_cast<double>(out.n);
  return out;
}

}  // namespace slmaudit
