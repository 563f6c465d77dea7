#include "slmaudit/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "slmaudit/error.hpp"
#include "slmaudit/rng.hpp"

namespace slmaudit {

double spread(const VariantAccuracy& per_variant_accuracy) {
  if (per_variant_accuracy.count(Variant::kFormatChange)) {
    throw DataError("format_change does not enter spread");
  }
  double lo = 1.0, hi = 0.0;
  for (Variant v : kSpreadVariants) {
    auto it = per_variant_accuracy.find(v);
    if (it == per_variant_accuracy.end()) {
      throw DataError("spread needs variant " + std::string(to_string(v)));
    }
    lo = std::min(lo, it->second);
    hi = std::max(hi, it->second);
  }
  return hi - lo;
}

SpreadRecord make_spread_record(std::string model_id, std::string dataset_id,
                                VariantAccuracy per_variant_accuracy) {
  SpreadRecord r;
  r.spread = spread(per_variant_accuracy);
  r.model_id = std::move(model_id);
  r.dataset_id = std::move(dataset_id);
  r.per_variant_accuracy = std::move(per_variant_accuracy);
  return r;
}

std::vector<SpreadRecord> spread_records(std::span<const CellMetrics> cells, Phrasing phrasing) {
  std::map<std::pair<std::string, std::string>, VariantAccuracy> groups;
  for (const auto& c : cells) {
    if (c.cell.phrasing != phrasing || c.cell.variant == Variant::kFormatChange) continue;
    groups[{c.cell.model_id, c.cell.dataset_id}][c.cell.variant] = c.accuracy;
  }
  std::vector<SpreadRecord> out;
  for (auto& [key, acc] : groups) {
    if (acc.size() != std::size(kSpreadVariants)) continue;
    out.push_back(make_spread_record(key.first, key.second, std::move(acc)));
  }
  return out;
}

std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

namespace {

// Permutation tallies run on doubled ranks, which are integers, so the
// statistic n * sum(rx * ry) - sum(rx) * sum(ry) is exact.
std::int64_t centred(std::int64_t n, std::int64_t dot, std::int64_t sx, std::int64_t sy) {
  const std::int64_t v = n * dot - sx * sy;
  return v < 0 ? -v : v;
}

double exact_permutation_p(const std::vector<std::int64_t>& rx, std::vector<std::int64_t> ry) {
  const std::size_t n = rx.size();
  const std::int64_t sx = std::accumulate(rx.begin(), rx.end(), std::int64_t{0});
  const std::int64_t sy = std::accumulate(ry.begin(), ry.end(), std::int64_t{0});
  std::int64_t dot = 0;
  for (std::size_t i = 0; i < n; ++i) dot += rx[i] * ry[i];
  const std::int64_t observed = centred(static_cast<std::int64_t>(n), dot, sx, sy);

  // Heap's algorithm: each step swaps two positions of ry, so the dot product
  // updates in constant time.
  std::uint64_t total = 1, extreme = 1;
  std::vector<std::size_t> c(n, 0);
  std::size_t i = 1;
  while (i < n) {
    if (c[i] < i) {
      const std::size_t j = (i % 2 == 0) ? 0 : c[i];
      dot += (rx[j] - rx[i]) * (ry[i] - ry[j]);
      std::swap(ry[i], ry[j]);
      ++total;
      if (centred(static_cast<std::int64_t>(n), dot, sx, sy) >= observed) ++extreme;
      ++c[i];
      i = 1;
    } else {
      c[i] = 0;
      ++i;
    }
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

double monte_carlo_permutation_p(const std::vector<std::int64_t>& rx, std::vector<std::int64_t> ry,
                                 std::uint64_t seed) {
  const std::size_t n = rx.size();
  const std::int64_t sx = std::accumulate(rx.begin(), rx.end(), std::int64_t{0});
  const std::int64_t sy = std::accumulate(ry.begin(), ry.end(), std::int64_t{0});
  auto stat = [&](const std::vector<std::int64_t>& y) {
    std::int64_t dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += rx[i] * y[i];
    return centred(static_cast<std::int64_t>(n), dot, sx, sy);
  };
  const std::int64_t observed = stat(ry);
  Xoshiro256 gen(derive_seed(seed, "spearman-permutation"));
  std::size_t extreme = 0;
  for (std::size_t b = 0; b < kMonteCarloPermutations; ++b) {
    for (std::size_t i = n - 1; i > 0; --i) {
      std::swap(ry[i], ry[uniform_index(gen, i + 1)]);
    }
    if (stat(ry) >= observed) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(kMonteCarloPermutations + 1);
}

std::vector<std::int64_t> doubled(const std::vector<double>& ranks) {
  std::vector<std::int64_t> out;
  out.reserve(ranks.size());
  for (double r : ranks) out.push_back(std::llround(2.0 * r));
  return out;
}

}  // namespace

CorrelationResult spearman(std::span<const double> x, std::span<const double> y,
                           std::uint64_t seed) {
  if (x.size() != y.size()) throw DataError("spearman inputs differ in length");
  if (x.size() < 3) throw DataError("spearman needs at least 3 points");
  const std::vector<double> rx = midranks(x);
  const std::vector<double> ry = midranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) throw DataError("spearman: zero rank variance");

  CorrelationResult out;
  out.n = x.size();
  out.rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double dof = n - 2.0;
  if (std::abs(out.rho) >= 1.0) {
    out.p_value_t = 0.0;
  } else {
    const double t = out.rho * std::sqrt(dof / (1.0 - out.rho * out.rho));
    const boost::math::students_t dist(dof);
    out.p_value_t = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
  }
  out.p_value_perm = out.n <= kExactPermutationLimit
                         ? exact_permutation_p(doubled(rx), doubled(ry))
                         : monte_carlo_permutation_p(doubled(rx), doubled(ry), seed);
  return out;
}

std::map<std::string, CorrelationResult> size_spread_panel(
    std::span<const SpreadRecord> spreads, const std::map<std::string, double>& sizes) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_dataset;
  for (const auto& r : spreads) {
    auto size = sizes.find(r.model_id);
    if (size == sizes.end()) throw DataError("no configured size for model " + r.model_id);
    auto& [xs, ys] = by_dataset[r.dataset_id];
    xs.push_back(size->second);
    ys.push_back(r.spread);
  }
  std::map<std::string, CorrelationResult> panel;
  for (const auto& [dataset, xy] : by_dataset) {
    panel.emplace(dataset, spearman(xy.first, xy.second));
  }
  return panel;
}

}  // namespace slmaudit
