#include <doctest.h>

#include <cmath>
#include <numeric>

#include "builders.hpp"
#include "slmaudit/bootstrap.hpp"
#include "slmaudit/error.hpp"
#include "slmaudit/rng.hpp"

using namespace slmaudit;

namespace {

std::vector<double> bernoulli(std::size_t n, double p, std::uint64_t seed) {
  Xoshiro256 gen(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = uniform_unit(gen) < p ? 1.0 : 0.0;
  return out;
}

}  // namespace

TEST_CASE("type-7 quantiles") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(quantile_type7(v, 0.0) == 1.0);
  CHECK(quantile_type7(v, 1.0) == 4.0);
  CHECK(quantile_type7(v, 0.5) == doctest::Approx(2.5));
  CHECK(quantile_type7(v, 0.025) == doctest::Approx(1.075));
  CHECK(quantile_type7(v, 0.975) == doctest::Approx(3.925));
  const std::vector<double> one{7};
  CHECK(quantile_type7(one, 0.3) == 7.0);
}

TEST_CASE("bootstrap CI of a mean") {
  const auto data = bernoulli(500, 0.7, 1);
  BootstrapOptions opt;
  opt.context = "unit/mean";
  const auto r = bootstrap_ci(data, mean_of, opt);
  CHECK(r.point == doctest::Approx(mean_of(data)));
  CHECK(r.lo < r.point);
  CHECK(r.hi > r.point);
  CHECK(r.hi - r.lo == doctest::Approx(2 * 1.96 * std::sqrt(0.21 / 500)).epsilon(0.2));
  CHECK(r.n_resamples == 1000);
  CHECK(r.seed == 42);
  CHECK(r.unit == ResamplingUnit::kExample);
  CHECK(r.point_in_ci);
  CHECK(r.context == "unit/mean");
}

TEST_CASE("bootstrap is seed-deterministic and thread-invariant") {
  const auto data = bernoulli(300, 0.4, 2);
  BootstrapOptions opt;
  opt.context = "cell";
  const auto base = bootstrap_ci(data, mean_of, opt);
  for (unsigned t : {2u, 3u, 8u}) {
    opt.threads = t;
    const auto r = bootstrap_ci(data, mean_of, opt);
    CHECK(r.lo == base.lo);
    CHECK(r.hi == base.hi);
  }
  opt.threads = 1;
  opt.context = "other cell";
  const auto other = bootstrap_ci(data, mean_of, opt);
  CHECK((other.lo != base.lo || other.hi != base.hi));
  opt.context = "cell";
  opt.seed = 43;
  const auto reseeded = bootstrap_ci(data, mean_of, opt);
  CHECK((reseeded.lo != base.lo || reseeded.hi != base.hi));
}

TEST_CASE("bootstrap errors") {
  CHECK_THROWS_AS(bootstrap_ci(std::span<const double>(), mean_of), DataError);
  const std::vector<double> one{1.0};
  BootstrapOptions opt;
  opt.n_resamples = 0;
  CHECK_THROWS(bootstrap_ci(one, mean_of, opt));
}

TEST_CASE("point outside the interval is flagged") {
  // 1 when every unit appears exactly once: true for the full sample, almost
  // never for a resample.
  const auto all_distinct = [](std::span<const std::size_t> idx) {
    std::vector<bool> seen(idx.size(), false);
    for (auto i : idx) {
      if (seen[i]) return 0.0;
      seen[i] = true;
    }
    return 1.0;
  };
  const auto r = bootstrap_indices(20, all_distinct);
  CHECK(r.point == 1.0);
  CHECK(r.hi == 0.0);
  CHECK_FALSE(r.point_in_ci);
}

TEST_CASE("paired drop interval") {
  std::vector<std::pair<bool, bool>> pairs;
  for (int i = 0; i < 400; ++i) pairs.emplace_back(i % 10 < 8, i % 10 < 1);
  const auto r = paired_drop_ci(pairs);
  CHECK(r.point == doctest::Approx(0.7));
  CHECK(r.lo > 0.6);
  CHECK(r.hi < 0.8);
  CHECK(r.unit == ResamplingUnit::kPairedExample);
  CHECK_THROWS_AS(paired_drop_ci(std::span<const std::pair<bool, bool>>()), DataError);
}

TEST_CASE("spread interval over jointly resampled rows") {
  std::map<Variant, std::vector<bool>> by;
  for (Variant v : kSpreadVariants) by[v] = std::vector<bool>(200, false);
  for (int i = 0; i < 200; ++i) {
    by[Variant::kSurfaceParaphrase][i] = i < 100;
    by[Variant::kInstructionReorder][i] = i < 120;
    by[Variant::kFewshot3][i] = i < 140;
    by[Variant::kImplicitFraming][i] = i < 160;
  }
  const auto r = spread_ci(by);
  CHECK(r.point == doctest::Approx(0.3));
  CHECK(r.lo <= 0.3);
  CHECK(r.hi >= 0.3);
  CHECK(r.hi - r.lo < 0.15);

  auto bad = by;
  bad[Variant::kFormatChange] = std::vector<bool>(200, true);
  CHECK_THROWS_AS(spread_ci(bad), DataError);
  bad = by;
  bad.erase(Variant::kFewshot3);
  CHECK_THROWS_AS(spread_ci(bad), DataError);
  bad = by;
  bad[Variant::kFewshot3].pop_back();
  CHECK_THROWS_AS(spread_ci(bad), DataError);
}

TEST_CASE("example pairing") {
  CorrectnessColumn a{testing::cell_key("m", "d", Variant::kSurfaceParaphrase), {"1", "2", "3"}, {true, false, true}};
  CorrectnessColumn b{testing::cell_key("m", "d", Variant::kFormatChange), {"3", "1", "9"}, {false, true, true}};
  const auto pairs = pair_examples(a, b);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0] == std::make_pair(true, true));
  CHECK(pairs[1] == std::make_pair(true, false));

  auto other_phrasing = b;
  other_phrasing.cell.phrasing = Phrasing::kPercent0100;
  CHECK_THROWS_AS(pair_examples(a, other_phrasing), DataError);
  auto other_model = b;
  other_model.cell.model_id = "n";
  CHECK_THROWS_AS(pair_examples(a, other_model), DataError);
  auto disjoint = b;
  disjoint.example_ids = {"7", "8", "9"};
  CHECK_THROWS_AS(pair_examples(a, disjoint), DataError);
}

TEST_CASE("spread interval from columns intersects example ids") {
  std::vector<CorrectnessColumn> cols;
  int k = 0;
  for (Variant v : kSpreadVariants) {
    CorrectnessColumn c{testing::cell_key("m", "d", v), {}, {}};
    for (int i = 0; i < 100; ++i) {
      c.example_ids.push_back(std::to_string(i));
      c.correct.push_back(i < 50 + 10 * k);
    }
    ++k;
    cols.push_back(std::move(c));
  }
  cols[2].example_ids.push_back("extra");
  cols[2].correct.push_back(true);
  const auto r = spread_ci(cols);
  CHECK(r.point == doctest::Approx(0.3));
}
