// Acceptance checks. One PASS/FAIL line per criterion; exit status is nonzero
// when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mock_backend.hpp"
#include "slmaudit/bootstrap.hpp"
#include "slmaudit/calibration.hpp"
#include "slmaudit/client.hpp"
#include "slmaudit/datamodel.hpp"
#include "slmaudit/extraction.hpp"
#include "slmaudit/report.hpp"
#include "slmaudit/rng.hpp"
#include "slmaudit/robustness.hpp"
#include "verbal_corpus.hpp"

using namespace slmaudit;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = SLMAUDIT_FIXTURE_DIR;

// Tolerances and limits.
constexpr double kRhoTol = 0.001;
constexpr double kPTol = 0.02;
constexpr double kRecoveryTol = 0.1;
constexpr double kFirstCharMax = 0.05;
constexpr double kRegexMin = 0.99;
constexpr double kConstrainedMin = 1.00;
constexpr double kCoverageLo = 0.93;
constexpr double kCoverageHi = 0.97;
constexpr double kSensitivityMaxChange = 0.020;
constexpr double kEqualityEps = 1e-12;

constexpr double kLimitPanel = 1.0;
constexpr double kLimitGap = 1.0;
constexpr double kLimitEce = 5.0;
constexpr double kLimitDominance = 5.0;
constexpr double kLimitCot = 10.0;
constexpr double kLimitCoverage = 60.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Outcome criterion_1() {
  std::ifstream in(kFixtures / "size_spreads.csv");
  std::string line;
  std::getline(in, line);
  std::vector<SpreadRecord> spreads;
  std::map<std::string, double> sizes;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string model, dataset, spread, size;
    std::getline(ss, model, ',');
    std::getline(ss, dataset, ',');
    std::getline(ss, spread, ',');
    std::getline(ss, size, ',');
    SpreadRecord r;
    r.model_id = model;
    r.dataset_id = dataset;
    r.spread = std::stod(spread);
    spreads.push_back(r);
    sizes[model] = std::stod(size);
  }
  const auto panel = size_spread_panel(spreads, sizes);
  const std::vector<std::tuple<std::string, double, double>> want = {
      {"sst2", 0.261, 0.466}, {"mnli", 0.474, 0.166}, {"agnews", -0.244, 0.497},
      {"arc", 0.015, 0.967},  {"mmlu_pro", 0.304, 0.393}};
  Outcome o{true, ""};
  for (const auto& [dataset, rho, p] : want) {
    const auto it = panel.find(dataset);
    if (it == panel.end()) return {false, "no panel row for " + dataset};
    const CorrelationResult& r = it->second;
    const bool ok = std::abs(r.rho - rho) <= kRhoTol && std::abs(r.p_value_t - p) <= kPTol && r.n == 10;
    o.pass = o.pass && ok;
    o.detail += dataset + " rho " + fmt("%+.4f", r.rho) + " p " + fmt("%.3f", r.p_value_t) + (ok ? "" : " (off)") +
                "; ";
  }
  return o;
}

Outcome criterion_2() {
  struct Row {
    const char* model;
    double nonfc, firstchar, regex, rec_regex, constrained, rec_constrained;
  };
  // Reference rows, including the mean row.
  const Row rows[] = {
      {"llama-3.2-3b", 0.751, 0.098, 0.712, 94.0, 0.732, 97.1},
      {"phi-4-mini", 0.842, 0.180, 0.848, 100.9, 0.862, 103.0},
      {"gemma-3-4b", 0.705, 0.198, 0.758, 110.5, 0.786, 116.0},
      {"mistral-7b", 0.783, 0.128, 0.748, 94.7, 0.766, 97.4},
      {"qwen-2.5-7b", 0.897, 0.104, 0.710, 76.4, 0.896, 99.9},
      {"Mean", 0.796, 0.142, 0.755, 93.8, 0.808, 102.7},
  };
  Outcome o{true, ""};
  for (const Row& r : rows) {
    const double a = gap_recovery(r.nonfc, r.firstchar, r.regex);
    const double b = gap_recovery(r.nonfc, r.firstchar, r.constrained);
    const bool ok = std::abs(a - r.rec_regex) <= kRecoveryTol && std::abs(b - r.rec_constrained) <= kRecoveryTol;
    o.pass = o.pass && ok;
    if (!ok || std::string(r.model) == "Mean") {
      o.detail += std::string(r.model) + " " + fmt("%.2f", a) + "% / " + fmt("%.2f", b) + "% vs " +
                  fmt("%.1f", r.rec_regex) + "% / " + fmt("%.1f", r.rec_constrained) + "%; ";
    }
  }
  // The shipped ARC transcripts recompute the same rows from generations.
  const auto records = read_transcripts(kFixtures / "transcripts_arc.jsonl");
  const AuditReport report = build_report(records);
  for (const auto& row : report.gap_recovery_table) {
    if (row.mean_row) {
      o.detail += "fixture mean " + fmt("%.2f", *row.recovery_regex) + "% / " +
                  fmt("%.2f", *row.recovery_constrained) + "%";
    }
  }
  if (o.pass) o.detail = "all rows within 0.1 pt; " + o.detail;
  return o;
}

// Per-bin brute force straight from the binning rule: [i/B, (i+1)/B), last bin
// closed.
double brute_force_ece(const std::vector<double>& conf, const std::vector<bool>& correct, std::size_t bins) {
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / static_cast<double>(bins);
    const double hi = static_cast<double>(b + 1) / static_cast<double>(bins);
    double conf_sum = 0.0;
    std::size_t n = 0, hits = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool in_bin = conf[i] >= lo && (b + 1 == bins ? conf[i] <= hi : conf[i] < hi);
      if (!in_bin) continue;
      ++n;
      conf_sum += conf[i];
      hits += correct[i] ? 1 : 0;
    }
    if (n == 0) continue;
    const double nb = static_cast<double>(n);
    total += nb / static_cast<double>(conf.size()) * std::abs(static_cast<double>(hits) / nb - conf_sum / nb);
  }
  return total;
}

Outcome criterion_3() {
  Xoshiro256 gen(derive_seed(3, "acceptance/ece"));
  std::size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + uniform_index(gen, 50);
    std::vector<double> conf(n);
    std::vector<bool> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Half the rows sit on or next to bin edges.
      switch (uniform_index(gen, 4)) {
        case 0:
          conf[i] = static_cast<double>(uniform_index(gen, 11)) / 10.0;
          break;
        case 1:
          conf[i] = static_cast<double>(uniform_index(gen, 21)) / 20.0;
          break;
        default:
          conf[i] = uniform_unit(gen);
      }
      correct[i] = uniform_index(gen, 2) == 1;
    }
    if (ece(conf, correct, 10).ece != brute_force_ece(conf, correct, 10)) ++mismatches;
  }
  return {mismatches == 0, std::to_string(1000 - mismatches) + "/1000 instances identical"};
}

Outcome criterion_4() {
  Xoshiro256 gen(derive_seed(4, "acceptance/dominance"));
  const LabelSet labels = LabelSet::from_letters("ABCD");
  const std::vector<std::string> vocabulary = {"A", "B", "C", "D", " A", " B", " C", " D",
                                               "The", "Let", "E", "First", "\n", "So"};
  std::size_t instances = 0, dominance_violations = 0, iff_violations = 0, equal_rows = 0;
  std::size_t alt_violations = 0;
  while (instances < 10000) {
    const std::size_t k = 1 + uniform_index(gen, vocabulary.size());
    std::vector<std::string> tokens = vocabulary;
    for (std::size_t i = 0; i < k; ++i) std::swap(tokens[i], tokens[i + uniform_index(gen, tokens.size() - i)]);
    std::vector<double> weights(k);
    double sum = 0.0;
    for (auto& w : weights) sum += (w = uniform_unit(gen) + 1e-3);
    const double budget = 0.05 + 0.95 * uniform_unit(gen);
    std::map<std::string, double, std::less<>> probs;
    for (std::size_t i = 0; i < k; ++i) probs[tokens[i]] = weights[i] / sum * budget;
    const TopKDistribution topk = TopKDistribution::from_probabilities(probs, k);
    const char predicted = labels.letters()[uniform_index(gen, 4)];
    const ConfidencePair c = token_confidence(topk, predicted, labels);
    if (c.degenerate) continue;
    ++instances;
    const double p_star = letter_mass(topk, predicted);
    const double mass = c.observed_label_mass;
    if (c.normalised < c.raw - kEqualityEps) ++dominance_violations;
    const bool equal = std::abs(c.normalised - c.raw) <= kEqualityEps;
    equal_rows += equal ? 1 : 0;
    if (equal != (std::abs(mass - p_star) <= kEqualityEps)) ++iff_violations;
    // p* / M == p* exactly when p* = 0 or M = 1.
    if (equal != (p_star <= kEqualityEps || std::abs(mass - 1.0) <= kEqualityEps)) ++alt_violations;
  }
  return {dominance_violations == 0 && iff_violations == 0,
          "normalised >= raw violated " + std::to_string(dominance_violations) + "x; 'equal iff M = P(l*)' violated " +
              std::to_string(iff_violations) + "/10000 (" + std::to_string(equal_rows) +
              " equal rows); 'equal iff P(l*) = 0 or M = 1' violated " + std::to_string(alt_violations) + "x"};
}

Outcome criterion_5() {
  const LabelSet labels = LabelSet::from_letters("ABCD");
  const char* openers[] = {"The", "Looking", "Let", "First", "So", "We", "Given", "Reading"};
  Xoshiro256 gen(derive_seed(5, "acceptance/cot"));
  std::vector<TranscriptRecord> records;
  for (int i = 0; i < 500; ++i) {
    TranscriptRecord r;
    r.cell = {"synthetic", "arc", Variant::kFormatChange, Phrasing::kDecimal01};
    r.example_id = "cot-" + std::to_string(i);
    r.gold_letter = labels.letters()[uniform_index(gen, 4)];
    const char other = labels.letters()[uniform_index(gen, 4)];
    r.label_set = labels;
    r.rendered_prompt = "Question " + std::to_string(i) + "\nReasoning and answer:";
    r.generation_text = std::string(openers[uniform_index(gen, std::size(openers))]) +
                        " question asks which option fits. Option " + other +
                        " looks plausible at first, but the details rule it out.\nFinal answer: " + r.gold_letter;
    records.push_back(std::move(r));
  }

  // The scripted backend finalizes with the letter the chain of thought
  // already committed to.
  slmaudit::testing::MockBackend mock([](const nlohmann::json& req, std::size_t) {
    const std::string prompt = req.at("prompt").get<std::string>();
    const auto at = prompt.find("Final answer: ");
    return slmaudit::testing::completion(at == std::string::npos ? "A" : prompt.substr(at + 14, 1));
  });
  BackendConfig bc;
  bc.base_url = mock.url();
  bc.model_name = "synthetic";
  bc.max_in_flight = 8;
  CompletionClient client(bc);

  std::size_t fc_hits = 0, regex_hits = 0, constrained_hits = 0;
  std::vector<std::pair<bool, bool>> pairs;
  for (const auto& r : records) {
    const bool fc = grade(evaluate_offline(Evaluator::kFirstChar, r.generation_text, labels), r.gold_letter).correct.value();
    const bool rx = grade(evaluate_offline(Evaluator::kRegex, r.generation_text, labels), r.gold_letter).correct.value();
    const bool cd = grade(client.constrained_finalize(r.generation_text, labels), r.gold_letter).correct.value();
    fc_hits += fc;
    regex_hits += rx;
    constrained_hits += cd;
    pairs.emplace_back(rx, fc);
  }
  const double n = 500.0;
  const double fc = fc_hits / n, rx = regex_hits / n, cd = constrained_hits / n;
  const BootstrapResult drop = paired_drop_ci(pairs, {kDefaultResamples, kDefaultSeed, "acceptance/cot/drop", 1});
  const bool ok = fc <= kFirstCharMax && rx >= kRegexMin && cd >= kConstrainedMin && drop.lo > 0.0 &&
                  mock.call_count() == 500;
  return {ok, "first_char " + fmt("%.3f", fc) + ", regex " + fmt("%.3f", rx) + ", constrained " + fmt("%.3f", cd) +
                  ", drop " + fmt("%.3f", drop.point) + " [" + fmt("%.3f", drop.lo) + ", " + fmt("%.3f", drop.hi) +
                  "]"};
}

Outcome criterion_6() {
  std::size_t failures = 0, total = 0;
  std::string first_failure;
  for (const auto& c : slmaudit::testing::kVerbalCorpus) {
    for (Phrasing ph : kAllPhrasings) {
      ++total;
      const VerbalParse got = parse_verbal_confidence(c.response, ph);
      bool ok = got.parseable() == c.value.has_value() && got.matched_form == c.form;
      if (ok && c.value) ok = std::abs(*got.value - *c.value) <= 1e-12;
      if (!ok) {
        ++failures;
        if (first_failure.empty()) first_failure = std::string(" first failure: \"") + c.response + "\"";
      }
    }
  }
  std::vector<TranscriptRecord> cell;
  const char* responses[] = {"0.9", "75%", "80 out of 100", "very sure"};
  for (int i = 0; i < 4; ++i) {
    TranscriptRecord r;
    r.cell = {"m", "d", Variant::kSurfaceParaphrase, Phrasing::kDecimal01};
    r.example_id = "e" + std::to_string(i);
    r.generation_text = "A";
    r.label_set = LabelSet::from_letters("AB");
    r.verbal_response_text = responses[i];
    cell.push_back(r);
  }
  const double vpr = verbal_parse_rate(cell);
  const std::size_t cases = std::size(slmaudit::testing::kVerbalCorpus);
  return {failures == 0 && cases >= 55 && vpr == 0.75,
          std::to_string(total - failures) + "/" + std::to_string(total) + " corpus checks (" + std::to_string(cases) +
              " cases x 2 phrasings), VPR " + fmt("%.2f", vpr) + first_failure};
}

Outcome criterion_7() {
  std::size_t covered = 0;
  bool identical = true;
  for (int t = 0; t < 200; ++t) {
    Xoshiro256 gen(derive_seed(7, "acceptance/bernoulli/" + std::to_string(t)));
    std::vector<double> data(500);
    for (auto& x : data) x = uniform_unit(gen) < 0.7 ? 1.0 : 0.0;
    BootstrapOptions opts;
    opts.seed = 7000 + static_cast<std::uint64_t>(t);
    opts.context = "acceptance/coverage";
    opts.threads = 1;
    const BootstrapResult one = bootstrap_ci(data, mean_of, opts);
    if (one.lo <= 0.7 && 0.7 <= one.hi) ++covered;
    if (t % 10 == 0) {
      for (unsigned threads : {2u, 8u}) {
        opts.threads = threads;
        const BootstrapResult many = bootstrap_ci(data, mean_of, opts);
        identical = identical && many.lo == one.lo && many.hi == one.hi && many.point == one.point;
      }
    }
  }
  const double coverage = covered / 200.0;
  return {coverage >= kCoverageLo && coverage <= kCoverageHi && identical,
          "coverage " + fmt("%.3f", coverage) + " (" + std::to_string(covered) + "/200), threads 1/2/8 " +
              (identical ? "bit-identical" : "DIFFER")};
}

Outcome criterion_8() {
  const auto records = read_transcripts(kFixtures / "transcripts_mmlu_pro.jsonl");
  std::vector<ScoredCell> cells;
  for (auto& [key, recs] : group_by_cell(records)) {
    if (key.phrasing != Phrasing::kDecimal01) continue;
    cells.push_back(score_cell(key, recs, Evaluator::kFirstChar));
  }
  const std::vector<double> thresholds{0.70, 0.80, 0.90};
  const ThresholdSensitivity s = threshold_sensitivity(cells, thresholds);
  Outcome o{!s.rows.empty(), ""};
  for (const auto& row : s.rows) {
    double lo = 1e9, hi = -1e9;
    bool positive = true;
    for (const auto& m : row.means) {
      if (!m) {
        positive = false;
        continue;
      }
      lo = std::min(lo, *m);
      hi = std::max(hi, *m);
      positive = positive && *m > 0.0;
    }
    const bool ok = positive && hi - lo <= kSensitivityMaxChange;
    o.pass = o.pass && ok;
    o.detail += row.model_id + " " + fmt("%+.3f", row.means[0].value_or(0.0)) + "/" +
                fmt("%+.3f", row.means[1].value_or(0.0)) + "/" + fmt("%+.3f", row.means[2].value_or(0.0)) +
                " change " + fmt("%.4f", hi - lo) + (ok ? "" : " (off)") + "; ";
  }
  return o;
}

struct Criterion {
  int number;
  const char* name;
  double limit_seconds;  // 0 = no runtime bound
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "Spearman size-spread panel", kLimitPanel, criterion_1},
    {2, "gap recovery arithmetic", kLimitGap, criterion_2},
    {3, "ECE oracle equivalence", kLimitEce, criterion_3},
    {4, "normalisation dominance", kLimitDominance, criterion_4},
    {5, "first-character collapse and repair", kLimitCot, criterion_5},
    {6, "verbal parser golden corpus", 0.0, criterion_6},
    {7, "bootstrap coverage and determinism", kLimitCoverage, criterion_7},
    {8, "VPR threshold sensitivity", 0.0, criterion_8},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-8)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  bool all_pass = true;
  for (const Criterion& c : kCriteria) {
    if (only != 0 && c.number != only) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.limit_seconds == 0.0 || seconds < c.limit_seconds;
    const bool pass = o.pass && in_time;
    all_pass = all_pass && pass;
    std::string timing = fmt("%.3f s", seconds);
    if (c.limit_seconds > 0.0) timing += fmt(" (limit %.0f s)", c.limit_seconds);
    std::cout << "criterion " << c.number << ": " << (pass ? "PASS" : "FAIL") << "  " << c.name << "  [" << timing
              << "]  " << o.detail << std::endl;
  }
  return all_pass ? 0 : 1;
}
