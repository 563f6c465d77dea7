#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "builders.hpp"
#include "slmaudit/calibration.hpp"
#include "slmaudit/error.hpp"
#include "slmaudit/extraction.hpp"
#include "slmaudit/rng.hpp"

using namespace slmaudit;
using testing::cell_key;
using testing::make_record;
using testing::probs;

namespace {

const LabelSet kABCD = LabelSet::from_letters("ABCD");

// Written from the definition: visit each bin, collect its rows by edge test.
double oracle_ece(const std::vector<double>& conf, const std::vector<bool>& correct, std::size_t n_bins) {
  const double n = static_cast<double>(n_bins);
  double total = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    const double lo = static_cast<double>(b) / n;
    const double hi = static_cast<double>(b + 1) / n;
    double sum = 0.0;
    std::size_t count = 0, hits = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool last = b + 1 == n_bins;
      if (conf[i] >= lo && (conf[i] < hi || (last && conf[i] <= 1.0))) {
        sum += conf[i];
        ++count;
        if (correct[i]) ++hits;
      }
    }
    if (count == 0) continue;
    const double c = static_cast<double>(count);
    total += (c / static_cast<double>(conf.size())) * std::abs(static_cast<double>(hits) / c - sum / c);
  }
  return total;
}

std::vector<TranscriptRecord> gap_cell() {
  // Eight rows, two correct. Verbal 0.875 everywhere; token 0.335 normalised.
  std::vector<TranscriptRecord> rows;
  for (int i = 0; i < 8; ++i) {
    auto r = make_record(cell_key(), "e" + std::to_string(i), "A", i < 2 ? 'A' : 'B');
    r.first_step_topk = probs({{"A", 0.335}, {"B", 0.665}});
    r.verbal_response_text = "0.875";
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

TEST_CASE("token confidence") {
  auto c = token_confidence(probs({{"A", 0.20}, {"B", 0.10}, {"The", 0.50}}), 'A', kABCD);
  CHECK(c.raw == doctest::Approx(0.20));
  CHECK(c.normalised == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(c.observed_label_mass == doctest::Approx(0.30));
  CHECK_FALSE(c.degenerate);

  c = token_confidence(probs({{"A", 0.9}}), 'A', kABCD);
  CHECK(c.raw == doctest::Approx(0.9));
  CHECK(c.normalised == 1.0);

  c = token_confidence(probs({{"The", 0.99}}), 'A', kABCD);
  CHECK(c.degenerate);
  CHECK(c.raw == 0.0);

  // Leading-whitespace variants of a letter count towards it.
  c = token_confidence(probs({{"A", 0.2}, {" A", 0.1}, {"\nB", 0.1}, {"Apple", 0.3}}), 'A', kABCD);
  CHECK(c.raw == doctest::Approx(0.3));
  CHECK(c.observed_label_mass == doctest::Approx(0.4));
  CHECK(c.normalised == doctest::Approx(0.75));

  // Letters outside the label set do not enter the denominator.
  c = token_confidence(probs({{"A", 0.2}, {"E", 0.6}}), 'A', kABCD);
  CHECK(c.normalised == doctest::Approx(1.0));

  CHECK_THROWS_AS(token_confidence(probs({{"A", 0.2}}), 'E', kABCD), std::invalid_argument);
}

TEST_CASE("ECE worked examples") {
  const std::vector<double> conf{0.95, 0.85, 0.65, 0.55};
  const auto r = ece(conf, {true, true, false, false});
  CHECK(r.ece == doctest::Approx(0.35));
  CHECK(r.bins.size() == 10);
  CHECK(r.bins[9].count == 1);
  CHECK(r.bins[5].count == 1);

  const std::vector<double> ones(5, 1.0);
  CHECK(ece(ones, std::vector<bool>(5, true)).ece == 0.0);
  CHECK(ece(ones, std::vector<bool>(5, false)).ece == 1.0);
  CHECK(ece(ones, std::vector<bool>(5, true)).bins[9].count == 5);
}

TEST_CASE("ECE input errors") {
  const std::vector<double> none;
  CHECK_THROWS_AS(ece(none, {}), DataError);
  const std::vector<double> two{0.5, 0.5};
  CHECK_THROWS_AS(ece(two, {true}), DataError);
  const std::vector<double> bad{1.5};
  CHECK_THROWS_AS(ece(bad, {true}), DataError);
}

TEST_CASE("bin edges") {
  CHECK(reliability_bin(0.0, 10) == 0);
  CHECK(reliability_bin(0.1, 10) == 1);
  CHECK(reliability_bin(0.3, 10) == 3);
  CHECK(reliability_bin(0.7, 10) == 7);
  CHECK(reliability_bin(std::nextafter(0.3, 0.0), 10) == 2);
  CHECK(reliability_bin(1.0, 10) == 9);
  CHECK(reliability_bin(0.5, 1) == 0);
  for (int i = 0; i <= 100; ++i) {
    const double c = i / 100.0;
    const auto b = reliability_bin(c, 10);
    CHECK(c >= b / 10.0);
    if (b < 9) CHECK(c < (b + 1) / 10.0);
  }
}

TEST_CASE("ECE matches the per-bin oracle exactly") {
  Xoshiro256 gen(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = 1 + uniform_index(gen, 50);
    std::vector<double> conf(n);
    std::vector<bool> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Mix of continuous values and exact bin edges.
      conf[i] = uniform_index(gen, 4) == 0 ? static_cast<double>(uniform_index(gen, 11)) / 10.0 : uniform_unit(gen);
      correct[i] = uniform_index(gen, 2) == 1;
    }
    const auto got = ece(conf, correct, 10);
    REQUIRE(got.ece == oracle_ece(conf, correct, 10));
    std::size_t total = 0;
    for (const auto& b : got.bins) total += b.count;
    CHECK(total == n);
  }
}

TEST_CASE("ECE is invariant under row permutation") {
  Xoshiro256 gen(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 2 + uniform_index(gen, 40);
    std::vector<double> conf(n);
    std::vector<bool> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
      conf[i] = uniform_unit(gen);
      correct[i] = uniform_index(gen, 3) == 0;
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(gen, i + 1)]);
    std::vector<double> pc(n);
    std::vector<bool> pk(n);
    for (std::size_t i = 0; i < n; ++i) {
      pc[i] = conf[order[i]];
      pk[i] = correct[order[i]];
    }
    CHECK(ece(conf, correct).ece == doctest::Approx(ece(pc, pk).ece).epsilon(1e-12));
  }
}

TEST_CASE("cell calibration: gap example") {
  const auto rows = gap_cell();
  const auto scored = score_cell(rows.front().cell, rows, Evaluator::kFirstChar);
  const auto m = cell_calibration(scored);
  CHECK(m.n == 8);
  CHECK(m.accuracy == 0.25);
  CHECK(m.vpr == 1.0);
  REQUIRE(m.ece_verbal);
  REQUIRE(m.ece_token_norm);
  CHECK(*m.ece_verbal == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(*m.ece_token_norm == doctest::Approx(0.085).epsilon(1e-12));
  REQUIRE(m.ece_gap);
  CHECK(*m.ece_gap == doctest::Approx(0.540).epsilon(1e-12));
  CHECK(*m.overconf_vs_acc == doctest::Approx(0.625));
  CHECK(*m.overconf_vs_token == doctest::Approx(0.875 - 0.335));
  CHECK_FALSE(m.verbal_exclusion);
}

TEST_CASE("cell calibration: threshold gates verbal fields only") {
  auto rows = gap_cell();
  rows[0].verbal_response_text = "high";
  rows[1].verbal_response_text.reset();
  const auto scored = score_cell(rows.front().cell, rows, Evaluator::kFirstChar);
  const auto at80 = cell_calibration(scored, {0.80, 10});
  const auto at70 = cell_calibration(scored, {0.70, 10});
  CHECK(at80.vpr == 0.75);
  CHECK_FALSE(at80.ece_verbal);
  CHECK_FALSE(at80.overconf_vs_acc);
  CHECK_FALSE(at80.ece_gap);
  REQUIRE(at80.verbal_exclusion);
  CHECK(at80.verbal_exclusion->find("VPR") != std::string::npos);
  REQUIRE(at70.ece_verbal);
  CHECK_FALSE(at70.verbal_exclusion);
  // Everything not verbal is identical.
  CHECK(at80.accuracy == at70.accuracy);
  CHECK(at80.ece_token_raw == at70.ece_token_raw);
  CHECK(at80.ece_token_norm == at70.ece_token_norm);
  CHECK(at80.vpr == at70.vpr);
  CHECK(at80.n_verbal_parsed == at70.n_verbal_parsed);
}

TEST_CASE("cell calibration: perfection and exclusions") {
  std::vector<TranscriptRecord> rows;
  for (int i = 0; i < 5; ++i) {
    auto r = make_record(cell_key(), "e" + std::to_string(i), "B", 'B');
    r.first_step_topk = probs({{"B", 0.7}, {"The", 0.2}});
    r.verbal_response_text = "100%";
    rows.push_back(std::move(r));
  }
  auto m = cell_calibration(score_cell(rows.front().cell, rows, Evaluator::kFirstChar));
  CHECK(m.accuracy == 1.0);
  CHECK(*m.ece_token_norm == 0.0);
  CHECK(*m.ece_verbal == 0.0);
  CHECK(*m.ece_gap == 0.0);
  CHECK(*m.ece_token_raw == doctest::Approx(0.3));

  // No parse at all.
  for (auto& r : rows) r.verbal_response_text = "unsure";
  m = cell_calibration(score_cell(rows.front().cell, rows, Evaluator::kFirstChar), {0.0, 10});
  CHECK_FALSE(m.ece_verbal);
  REQUIRE(m.verbal_exclusion);

  // Degenerate and unpredicted rows are counted, not scored.
  rows[0].first_step_topk = probs({{"The", 0.9}});
  rows[1].generation_text = "Looking closer";
  m = cell_calibration(score_cell(rows.front().cell, rows, Evaluator::kFirstChar));
  CHECK(m.n_token_degenerate == 1);
  CHECK(m.n_token_unpredicted == 1);
  CHECK(m.n_token_rows == 3);
  CHECK(m.accuracy == doctest::Approx(0.8));

  // No top-k anywhere: token fields absent.
  for (auto& r : rows) r.first_step_topk.reset();
  m = cell_calibration(score_cell(rows.front().cell, rows, Evaluator::kFirstChar));
  CHECK_FALSE(m.ece_token_norm);
  CHECK_FALSE(m.ece_token_raw);
}

TEST_CASE("cell calibration errors") {
  CHECK_THROWS_AS(cell_calibration(std::span<const TranscriptRecord>(), {}, {}), DataError);
  auto rows = gap_cell();
  rows[3].cell.model_id = "other";
  CHECK_THROWS_AS(cell_calibration(score_cell(rows.front().cell, rows, Evaluator::kFirstChar)), DataError);
  auto ok = gap_cell();
  auto scored = score_cell(ok.front().cell, ok, Evaluator::kFirstChar);
  scored.parses.pop_back();
  CHECK_THROWS_AS(cell_calibration(scored), DataError);
  CHECK_THROWS_AS(score_cell(ok.front().cell, ok, Evaluator::kConstrained), DataError);
}

TEST_CASE("stored verdicts are preferred and regraded") {
  auto rows = gap_cell();
  for (auto& r : rows) r.verdicts["constrained"] = {'B', Rule::kConstrained, std::nullopt, "B"};
  const auto scored = score_cell(rows.front().cell, rows, Evaluator::kConstrained);
  const auto m = cell_calibration(scored);
  CHECK(m.accuracy == 0.75);
}

TEST_CASE("normalised confidence dominates raw") {
  Xoshiro256 gen(8);
  for (int i = 0; i < 2000; ++i) {
    TopKDistribution::Map p;
    double left = 1.0;
    for (char c : std::string("ABCD")) {
      if (uniform_index(gen, 3) == 0) continue;
      const double v = uniform_unit(gen) * left * 0.9 + 1e-6;
      left -= v;
      p.emplace(std::string(1, c), v);
    }
    p.emplace("The", left * uniform_unit(gen) + 1e-9);
    const auto topk = TopKDistribution::from_probabilities(p, p.size());
    for (char c : std::string("ABCD")) {
      const auto pair = token_confidence(topk, c, kABCD);
      if (pair.degenerate) continue;
      CHECK(pair.normalised >= pair.raw);
      CHECK(pair.normalised <= 1.0);
    }
  }
}

TEST_CASE("normalisation shift summary") {
  const std::vector<double> deltas{0.1, 0.0, 0.3};
  const auto s = shift_stats(deltas);
  CHECK(s.mean_abs == doctest::Approx(0.1333).epsilon(1e-3));
  CHECK(s.median == doctest::Approx(0.1));
  CHECK(s.max == doctest::Approx(0.3));
  CHECK(s.frac_above_005 == doctest::Approx(2.0 / 3.0));
  CHECK(s.frac_above_020 == doctest::Approx(1.0 / 3.0));

  const std::vector<double> zeros(4, 0.0);
  const auto z = shift_stats(zeros);
  CHECK(z.mean_abs == 0.0);
  CHECK(z.max == 0.0);
  CHECK(z.frac_above_005 == 0.0);

  const std::vector<double> single{0.825};
  CHECK(shift_stats(single).max == doctest::Approx(0.825));
  CHECK_THROWS_AS(shift_stats(std::span<const double>()), DataError);

  std::vector<CellMetrics> cells(3);
  const double raw[] = {0.4, 0.2, 0.5};
  const double norm[] = {0.3, 0.2, 0.2};
  const Variant variants[] = {Variant::kSurfaceParaphrase, Variant::kSurfaceParaphrase, Variant::kFormatChange};
  for (int i = 0; i < 3; ++i) {
    cells[i].cell = cell_key("m", "d", variants[i]);
    cells[i].ece_token_raw = raw[i];
    cells[i].ece_token_norm = norm[i];
  }
  cells.push_back(CellMetrics{});
  const auto shift = normalisation_shift(cells);
  CHECK(shift.all.n == 3);
  CHECK(shift.all.mean_abs == doctest::Approx(0.4 / 3.0));
  REQUIRE(shift.per_variant.size() == 2);
  CHECK(shift.per_variant[0].first == Variant::kSurfaceParaphrase);
  CHECK(shift.per_variant[0].second.n == 2);
  CHECK(shift.per_variant[1].second.max == doctest::Approx(0.3));
  std::vector<CellMetrics> empty(1);
  CHECK_THROWS_AS(normalisation_shift(empty), DataError);
}

TEST_CASE("top-k coverage") {
  auto a = make_record(cell_key(), "1", "A", 'A');
  a.first_step_topk = probs({{"A", 0.4}, {"B", 0.3}, {"C", 0.2}, {"D", 0.1}});
  auto b = make_record(cell_key(), "2", "A", 'A');
  b.first_step_topk = probs({{"A", 0.5}, {"B", 0.3}, {"C", 0.19}, {"x", 0.001}});
  std::vector<TranscriptRecord> full{a, a};
  auto cov = topk_coverage(full);
  CHECK(cov.full_coverage_fraction == 1.0);
  CHECK(cov.mass_ratio == 1.0);

  std::vector<TranscriptRecord> half{a, b};
  cov = topk_coverage(half);
  CHECK(cov.n == 2);
  CHECK(cov.full_coverage_fraction == 0.5);
  CHECK(cov.mass_ratio == doctest::Approx((1.0 + 0.99 / 0.991) / 2.0));
  CHECK(cov.mass_ratio > 0.999);

  auto c = make_record(cell_key(), "3", "A", 'A');
  c.first_step_topk = probs({{"The", 0.6}, {"So", 0.2}});
  std::vector<TranscriptRecord> none{c};
  cov = topk_coverage(none);
  CHECK(cov.full_coverage_fraction == 0.0);
  CHECK(cov.mass_ratio == 0.0);

  std::vector<TranscriptRecord> bare{make_record(cell_key(), "4", "A", 'A')};
  CHECK_THROWS_AS(topk_coverage(bare), DataError);
}
