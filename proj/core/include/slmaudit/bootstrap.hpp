#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "slmaudit/datamodel.hpp"

namespace slmaudit {

enum class ResamplingUnit { kExample, kPairedExample, kCell };
std::string_view to_string(ResamplingUnit unit);

inline constexpr std::size_t kDefaultResamples = 1000;
inline constexpr std::uint64_t kDefaultSeed = 42;

struct BootstrapOptions {
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t seed = kDefaultSeed;
  // Mixed into the seed; the serialized CellKey plus the statistic name.
  std::string context;
  // Worker threads for evaluating resamples. Results do not depend on it.
  unsigned threads = 1;
};

struct BootstrapResult {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t seed = kDefaultSeed;
  ResamplingUnit unit = ResamplingUnit::kExample;
  std::string context;
  // Whether the full-sample statistic lies inside [lo, hi].
  bool point_in_ci = true;

  bool operator==(const BootstrapResult&) const = default;
};

// Linear interpolation between order statistics ("type 7"). `sorted` must be
// non-empty and ascending.
double quantile_type7(std::span<const double> sorted, double p);

// Generic engine over `n_units` resampling units. `statistic` receives the
// resampled unit indices. Resample r draws from its own generator seeded by
// (seed, context, r), so evaluation order cannot change the result.
using IndexStatistic = std::function<double(std::span<const std::size_t>)>;
BootstrapResult bootstrap_indices(std::size_t n_units, const IndexStatistic& statistic,
                                  const BootstrapOptions& options = {},
                                  ResamplingUnit unit = ResamplingUnit::kExample);

using Statistic = std::function<double(std::span<const double>)>;
// Throws DataError on empty data.
BootstrapResult bootstrap_ci(std::span<const double> data, const Statistic& statistic,
                             const BootstrapOptions& options = {},
                             ResamplingUnit unit = ResamplingUnit::kExample);

double mean_of(std::span<const double> values);

// acc_a - acc_b under paired example resampling.
BootstrapResult paired_drop_ci(std::span<const std::pair<bool, bool>> pairs,
                               const BootstrapOptions& options = {});

// max - min of the four per-variant accuracies, row indices resampled jointly.
// Throws DataError unless exactly the four spread variants are given with
// equal lengths.
BootstrapResult spread_ci(const std::map<Variant, std::vector<bool>>& correct_by_variant,
                          const BootstrapOptions& options = {});

// Per-example correctness of one cell, in record order.
struct CorrectnessColumn {
  CellKey cell;
  std::vector<std::string> example_ids;
  std::vector<bool> correct;
};

// Joins two cells of the same model, dataset and phrasing on example_id, in
// the order of `a`. Cross-phrasing runs are never paired: a phrasing mismatch
// throws DataError, as does an empty join.
std::vector<std::pair<bool, bool>> pair_examples(const CorrectnessColumn& a,
                                                 const CorrectnessColumn& b);

// Aligns the four spread-variant columns of one (model, dataset, phrasing) on
// the example ids they share, then runs spread_ci.
BootstrapResult spread_ci(std::span<const CorrectnessColumn> columns,
                          const BootstrapOptions& options = {});

}  // namespace slmaudit
