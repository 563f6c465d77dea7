#include <doctest.h>

#include <optional>
#include <string>

#include "slmaudit/extraction.hpp"
#include "slmaudit/rng.hpp"
#include "verbal_corpus.hpp"

using namespace slmaudit;
using slmaudit::testing::kVerbalCorpus;

TEST_CASE("verbal confidence golden corpus") {
  CHECK(std::size(kVerbalCorpus) >= 60);
  for (const auto& c : kVerbalCorpus) {
    CAPTURE(c.response);
    for (Phrasing ph : kAllPhrasings) {
      const VerbalParse got = parse_verbal_confidence(c.response, ph);
      CHECK(got.parseable() == c.value.has_value());
      CHECK(got.matched_form == c.form);
      if (c.value && got.value) CHECK(*got.value == doctest::Approx(*c.value).epsilon(1e-12));
    }
  }
}

TEST_CASE("parser is total and bounded on random input") {
  Xoshiro256 gen(2024);
  const std::string alphabet = "0123456789.% -outfOUT10 percentabc\n,";
  for (int i = 0; i < 20000; ++i) {
    std::string s;
    const auto len = uniform_index(gen, 24);
    for (std::uint64_t j = 0; j < len; ++j) s += alphabet[uniform_index(gen, alphabet.size())];
    VerbalParse v;
    CHECK_NOTHROW(v = parse_verbal_confidence(s));
    CHECK(v.value.has_value() == v.matched_form.has_value());
    if (v.value) {
      CHECK(*v.value >= 0.0);
      CHECK(*v.value <= 1.0);
    }
  }
}

TEST_CASE("float fuzz at the bounds is clipped") {
  const auto v = parse_verbal_confidence("1.0000000000001");
  REQUIRE(v.value);
  CHECK(*v.value == 1.0);
  CHECK_FALSE(parse_verbal_confidence("1.001").value);
}
