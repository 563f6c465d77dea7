#include "slmaudit/bootstrap.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "slmaudit/error.hpp"
#include "slmaudit/rng.hpp"

namespace slmaudit {

std::string_view to_string(ResamplingUnit unit) {
  switch (unit) {
    case ResamplingUnit::kExample: return "example";
    case ResamplingUnit::kPairedExample: return "paired_example";
    case ResamplingUnit::kCell: return "cell";
  }
  return "example";
}

double quantile_type7(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

double mean_of(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

namespace {

std::uint64_t resample_seed(std::uint64_t base, std::size_t r) {
  SplitMix64 mix(base ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(r) + 1)));
  return mix();
}

}  // namespace

BootstrapResult bootstrap_indices(std::size_t n_units, const IndexStatistic& statistic,
                                  const BootstrapOptions& options, ResamplingUnit unit) {
  if (n_units == 0) throw DataError("bootstrap of empty data");
  if (options.n_resamples == 0) throw std::invalid_argument("bootstrap needs resamples");
  const std::uint64_t base = derive_seed(options.seed, options.context);
  std::vector<double> stats(options.n_resamples);

  auto run = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(n_units);
    for (std::size_t r = begin; r < end; ++r) {
      Xoshiro256 gen(resample_seed(base, r));
      for (auto& i : idx) i = static_cast<std::size_t>(uniform_index(gen, n_units));
      stats[r] = statistic(idx);
    }
  };
  const unsigned threads =
      std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(options.n_resamples)));
  if (threads == 1) {
    run(0, options.n_resamples);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (options.n_resamples + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(options.n_resamples, begin + chunk);
      if (begin < end) pool.emplace_back(run, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  std::vector<std::size_t> all(n_units);
  for (std::size_t i = 0; i < n_units; ++i) all[i] = i;
  BootstrapResult out;
  out.point = statistic(all);
  std::sort(stats.begin(), stats.end());
  out.lo = quantile_type7(stats, 0.025);
  out.hi = quantile_type7(stats, 0.975);
  out.n_resamples = options.n_resamples;
  out.seed = options.seed;
  out.unit = unit;
  out.context = options.context;
  out.point_in_ci = out.lo <= out.point && out.point <= out.hi;
  return out;
}

BootstrapResult bootstrap_ci(std::span<const double> data, const Statistic& statistic,
                             const BootstrapOptions& options, ResamplingUnit unit) {
  if (data.empty()) throw DataError("bootstrap of empty data");
  // One buffer per thread: the index statistic may run concurrently.
  auto stat = [&](std::span<const std::size_t> idx) {
    thread_local std::vector<double> local;
    local.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) local[i] = data[idx[i]];
    return statistic(local);
  };
  return bootstrap_indices(data.size(), stat, options, unit);
}

BootstrapResult paired_drop_ci(std::span<const std::pair<bool, bool>> pairs,
                               const BootstrapOptions& options) {
  if (pairs.empty()) throw DataError("paired bootstrap of no pairs");
  auto stat = [&](std::span<const std::size_t> idx) {
    long diff = 0;
    for (std::size_t i : idx) diff += static_cast<int>(pairs[i].first) - static_cast<int>(pairs[i].second);
    return static_cast<double>(diff) / static_cast<double>(idx.size());
  };
  return bootstrap_indices(pairs.size(), stat, options, ResamplingUnit::kPairedExample);
}

BootstrapResult spread_ci(const std::map<Variant, std::vector<bool>>& correct_by_variant,
                          const BootstrapOptions& options) {
  std::vector<const std::vector<bool>*> columns;
  for (Variant v : kSpreadVariants) {
    auto it = correct_by_variant.find(v);
    if (it == correct_by_variant.end()) {
      throw DataError("spread interval needs variant " + std::string(to_string(v)));
    }
    columns.push_back(&it->second);
  }
  if (correct_by_variant.size() != columns.size()) {
    throw DataError("format_change does not enter spread");
  }
  const std::size_t n = columns.front()->size();
  for (const auto* c : columns) {
    if (c->size() != n) throw DataError("spread interval: variant vectors differ in length");
  }
  auto stat = [&](std::span<const std::size_t> idx) {
    double lo = 1.0, hi = 0.0;
    for (const auto* c : columns) {
      std::size_t hits = 0;
      for (std::size_t i : idx) hits += (*c)[i] ? 1 : 0;
      const double acc = static_cast<double>(hits) / static_cast<double>(idx.size());
      lo = std::min(lo, acc);
      hi = std::max(hi, acc);
    }
    return hi - lo;
  };
  return bootstrap_indices(n, stat, options, ResamplingUnit::kExample);
}

namespace {

void check_same_run(const CellKey& a, const CellKey& b) {
  if (a.phrasing != b.phrasing) {
    throw DataError("refusing to pair " + a.to_string() + " with " + b.to_string() +
                    ": different phrasings are bootstrapped independently");
  }
  if (a.model_id != b.model_id || a.dataset_id != b.dataset_id) {
    throw DataError("refusing to pair cells of different models or datasets");
  }
}

}  // namespace

std::vector<std::pair<bool, bool>> pair_examples(const CorrectnessColumn& a,
                                                 const CorrectnessColumn& b) {
  check_same_run(a.cell, b.cell);
  std::unordered_map<std::string, bool> lookup;
  for (std::size_t i = 0; i < b.example_ids.size(); ++i) lookup.emplace(b.example_ids[i], b.correct.at(i));
  std::vector<std::pair<bool, bool>> pairs;
  for (std::size_t i = 0; i < a.example_ids.size(); ++i) {
    auto it = lookup.find(a.example_ids[i]);
    if (it != lookup.end()) pairs.emplace_back(a.correct.at(i), it->second);
  }
  if (pairs.empty()) throw DataError("no shared examples to pair");
  return pairs;
}

BootstrapResult spread_ci(std::span<const CorrectnessColumn> columns,
                          const BootstrapOptions& options) {
  if (columns.empty()) throw DataError("spread interval of no cells");
  for (const auto& c : columns) check_same_run(columns.front().cell, c.cell);

  std::set<std::string> shared(columns.front().example_ids.begin(), columns.front().example_ids.end());
  for (const auto& c : columns) {
    std::set<std::string> ids(c.example_ids.begin(), c.example_ids.end());
    std::set<std::string> kept;
    std::set_intersection(shared.begin(), shared.end(), ids.begin(), ids.end(),
                          std::inserter(kept, kept.begin()));
    shared = std::move(kept);
  }
  std::map<Variant, std::vector<bool>> by_variant;
  for (const auto& c : columns) {
    if (by_variant.count(c.cell.variant)) throw DataError("duplicate variant in spread interval");
    auto& out = by_variant[c.cell.variant];
    std::map<std::string, bool> lookup;
    for (std::size_t i = 0; i < c.example_ids.size(); ++i) lookup[c.example_ids[i]] = c.correct.at(i);
    for (const auto& id : shared) out.push_back(lookup.at(id));
  }
  if (shared.empty()) throw DataError("spread interval: cells share no examples");
  return spread_ci(by_variant, options);
}

}  // namespace slmaudit
