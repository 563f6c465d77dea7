#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slmaudit/datamodel.hpp"

namespace slmaudit {

using VariantAccuracy = std::map<Variant, double>;

struct SpreadRecord {
  std::string model_id;
  std::string dataset_id;
  VariantAccuracy per_variant_accuracy;
  double spread = 0.0;

  bool operator==(const SpreadRecord&) const = default;
};

// max - min over the four non-format_change variants. Throws DataError when a
// variant is missing or format_change is present.
double spread(const VariantAccuracy& per_variant_accuracy);
SpreadRecord make_spread_record(std::string model_id, std::string dataset_id,
                                VariantAccuracy per_variant_accuracy);

// One record per (model, dataset) whose four spread variants all have a cell
// under `phrasing`; incomplete groups are skipped.
std::vector<SpreadRecord> spread_records(std::span<const CellMetrics> cells,
                                         Phrasing phrasing = Phrasing::kDecimal01);

struct CorrelationResult {
  double rho = 0.0;
  double p_value_t = 1.0;
  std::optional<double> p_value_perm;
  std::size_t n = 0;

  bool operator==(const CorrelationResult&) const = default;
};

inline constexpr std::size_t kExactPermutationLimit = 10;
inline constexpr std::size_t kMonteCarloPermutations = 10000;

// Average ranks, 1-based.
std::vector<double> midranks(std::span<const double> values);

// Spearman rho as the Pearson correlation of midranks. The t-approximation
// p-value uses n - 2 degrees of freedom; the permutation p-value is exact for
// n <= 10 and Monte-Carlo (seeded) above. Throws DataError for n < 3, unequal
// lengths, or constant ranks.
CorrelationResult spearman(std::span<const double> x, std::span<const double> y,
                           std::uint64_t seed = 42);

// Dataset -> correlation of model size against spread. Throws DataError when a
// model has no configured size.
std::map<std::string, CorrelationResult> size_spread_panel(
    std::span<const SpreadRecord> spreads, const std::map<std::string, double>& sizes);

}  // namespace slmaudit
