#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "slmaudit/extraction.hpp"

namespace {

using namespace slmaudit;

std::vector<std::string> cot_generations() {
  std::vector<std::string> out;
  const char* letters = "ABCD";
  for (int i = 0; i < 64; ++i) {
    std::string g = "Looking at the question, option ";
    g += letters[i % 4];
    g += " seems close.";
    for (int k = 0; k < i % 8; ++k) g += " Checking the remaining details against each choice once more.";
    if (i % 3 == 0) {
      g += "\nFinal answer: ";
      g += letters[(i + 1) % 4];
    } else if (i % 3 == 1) {
      g += " So the correct answer is ";
      g += letters[(i + 2) % 4];
      g += ".";
    }
    out.push_back(std::move(g));
  }
  return out;
}

void BM_RegexReparse(benchmark::State& state) {
  const auto gens = cot_generations();
  const LabelSet labels = LabelSet::from_letters("ABCD");
  for (auto _ : state) {
    for (const auto& g : gens) benchmark::DoNotOptimize(regex_reparse(g, labels));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(gens.size()));
}
BENCHMARK(BM_RegexReparse);

void BM_FirstChar(benchmark::State& state) {
  const auto gens = cot_generations();
  const LabelSet labels = LabelSet::from_letters("ABCD");
  for (auto _ : state) {
    for (const auto& g : gens) benchmark::DoNotOptimize(extract_pred_letter(g, labels));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(gens.size()));
}
BENCHMARK(BM_FirstChar);

void BM_VerbalParse(benchmark::State& state) {
  const std::vector<std::string> responses = {"0.85", "I am about 85% sure.", "80 out of 100",
                                              "between 60% and 80%", "high", "Confidence: 0.", ".75"};
  for (auto _ : state) {
    for (const auto& r : responses) benchmark::DoNotOptimize(parse_verbal_confidence(r));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(responses.size()));
}
BENCHMARK(BM_VerbalParse);

}  // namespace
