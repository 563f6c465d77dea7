#include <doctest.h>

#include <cmath>
#include <sstream>

#include "builders.hpp"
#include "slmaudit/datamodel.hpp"
#include "slmaudit/error.hpp"

using namespace slmaudit;
using testing::TempDir;

namespace {

const char* kGoodRecord =
    R"({"model":"m","dataset":"arc","variant":"format_change","phrasing":"decimal_01",)"
    R"("example_id":"e1","prompt":"Q\nAnswer:","generation":"Let me think. Final answer: B",)"
    R"("topk_logprobs":{"Let":-0.3,"B":-2.0},"verbal_response":"0.9","gold":"B","labels":["A","B","C","D"],)"
    R"("verdicts":{"constrained":{"letter":"B","rule":"constrained","correct":null}}})";

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  return s.replace(pos, from.size(), to);
}

std::vector<TranscriptRecord> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_transcripts(in, "mem");
}

}  // namespace

TEST_CASE("variant and phrasing names round-trip") {
  for (Variant v : kAllVariants) CHECK(parse_variant(to_string(v)) == v);
  for (Phrasing p : kAllPhrasings) CHECK(parse_phrasing(to_string(p)) == p);
  CHECK_FALSE(parse_variant("paraphrase"));
  CHECK(to_string(Variant::kFewshot3) == "fewshot_3");
  CHECK(to_string(Phrasing::kPercent0100) == "percent_0_100");
  CHECK(std::size(kSpreadVariants) == 4);
  for (Variant v : kSpreadVariants) CHECK(v != Variant::kFormatChange);
}

TEST_CASE("label sets are contiguous prefixes of A..J") {
  CHECK(LabelSet::from_letters("AB").size() == 2);
  CHECK(LabelSet::first(10).letters() == "ABCDEFGHIJ");
  CHECK_THROWS_AS(LabelSet::from_letters("A"), DataError);
  CHECK_THROWS_AS(LabelSet::from_letters("ABD"), DataError);
  CHECK_THROWS_AS(LabelSet::from_letters("ABCDEFGHIJK"), DataError);
  const auto abc = LabelSet::from_letters("ABC");
  CHECK(abc.contains('C'));
  CHECK_FALSE(abc.contains('D'));
  CHECK_FALSE(abc.contains('a'));
}

TEST_CASE("top-k distribution validation") {
  auto d = TopKDistribution::from_logprobs({{"A", std::log(0.5)}, {" B", std::log(0.25)}}, 5);
  CHECK(d.probability("A") == doctest::Approx(0.5));
  CHECK(d.probability("C") == 0.0);
  CHECK(d.total_mass() == doctest::Approx(0.75));
  CHECK(d.smallest() == doctest::Approx(0.25));
  CHECK(d.k() == 5);
  CHECK_THROWS_AS(TopKDistribution::from_logprobs({{"A", 0.1}}, 1), DataError);
  CHECK_THROWS_AS(TopKDistribution::from_probabilities({{"A", 0.7}, {"B", 0.4}}, 2), DataError);
  CHECK_THROWS_AS(TopKDistribution::from_probabilities({{"A", 0.1}, {"B", 0.1}}, 1), DataError);
  CHECK_THROWS_AS(TopKDistribution::from_probabilities({{"A", 0.0}}, 1), DataError);
  CHECK_THROWS_AS(TopKDistribution::from_probabilities({{"A", 0.5}}, 0), DataError);
  // Float fuzz at the total is tolerated.
  CHECK_NOTHROW(TopKDistribution::from_probabilities({{"A", 0.5}, {"B", 0.5 + 1e-12}}, 2));
}

TEST_CASE("transcript ingest round-trips") {
  const auto records = parse(kGoodRecord);
  REQUIRE(records.size() == 1);
  const auto& r = records[0];
  CHECK(r.cell.variant == Variant::kFormatChange);
  CHECK(r.gold_letter == 'B');
  CHECK(r.label_set.letters() == "ABCD");
  REQUIRE(r.first_step_topk);
  CHECK(r.first_step_topk->probability("Let") == doctest::Approx(std::exp(-0.3)));
  REQUIRE(r.verdicts.count("constrained"));
  CHECK(r.verdicts.at("constrained").predicted_letter == 'B');
  CHECK_FALSE(r.verdicts.at("constrained").correct);

  const std::string line = serialize_transcript(r);
  const auto again = parse(line);
  REQUIRE(again.size() == 1);
  CHECK(again[0] == r);
  CHECK(serialize_transcript(again[0]) == line);
}

TEST_CASE("transcript files round-trip through disk") {
  TempDir dir("datamodel");
  auto records = parse(std::string(kGoodRecord) + "\n\n" + replace(kGoodRecord, "\"e1\"", "\"e2\""));
  REQUIRE(records.size() == 2);
  write_transcripts(dir.path() / "t.jsonl", records);
  CHECK(read_transcripts(dir.path() / "t.jsonl") == records);
}

TEST_CASE("malformed transcripts are rejected with a line number") {
  const std::string good = kGoodRecord;
  const std::vector<std::string> bad = {
      replace(good, R"("gold":"B")", R"("gold":"E")"),
      replace(good, R"("gold":"B")", R"("gold":"b")"),
      replace(good, R"("variant":"format_change")", R"("variant":"cot")"),
      replace(good, R"("phrasing":"decimal_01")", R"("phrasing":"fraction")"),
      replace(good, R"("labels":["A","B","C","D"])", R"("labels":["A","C"])"),
      replace(good, R"("Let":-0.3)", R"("Let":0.3)"),
      replace(good, R"("Let":-0.3)", R"("Let":"x")"),
      replace(good, R"("B":-2.0)", R"("B":-0.01)"),
      replace(good, R"("rule":"constrained")", R"("rule":"guess")"),
      replace(good, R"("letter":"B","rule")", R"("letter":"Z","rule")"),
      replace(good, R"({"constrained":)", R"({"oracle":)"),
      replace(good, R"("example_id":"e1",)", ""),
      replace(good, R"("generation":)", R"("extra":1,"generation":)"),
      good.substr(0, good.size() - 1),
  };
  for (const auto& line : bad) {
    CAPTURE(line);
    const std::string text = good + "\n" + line + "\n";
    try {
      parse(replace(text, "\"e1\"", "\"e0\""));
      FAIL("accepted a malformed line");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).rfind("mem:2:", 0) == 0);
    }
  }
}

TEST_CASE("duplicate example ids within a cell are rejected") {
  CHECK_THROWS_AS(parse(std::string(kGoodRecord) + "\n" + kGoodRecord), DataError);
  // Same id in another cell is fine.
  CHECK(parse(std::string(kGoodRecord) + "\n" + replace(kGoodRecord, "\"model\":\"m\"", "\"model\":\"n\"")).size() ==
        2);
}

TEST_CASE("examples ingest") {
  const std::string line =
      R"({"example_id":"x1","dataset_id":"arc","question":"Why?","choices":[{"letter":"A","text":"a"},)"
      R"({"letter":"B","text":"b"}],"gold":"B"})";
  std::istringstream in(line + "\n");
  const auto ex = parse_examples(in, "ex");
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].labels().letters() == "AB");
  CHECK(serialize_example(ex[0]) == line);

  std::istringstream bad(replace(line, R"("gold":"B")", R"("gold":"C")"));
  CHECK_THROWS_AS(parse_examples(bad, "ex"), DataError);
  std::istringstream dup(line + "\n" + line);
  CHECK_THROWS_AS(parse_examples(dup, "ex"), DataError);
  CHECK_THROWS_AS(read_examples("/nonexistent/examples.jsonl"), DataError);
}

TEST_CASE("group_by_cell keeps input order") {
  auto a = testing::make_record(testing::cell_key("m", "d", Variant::kFewshot3), "2", "A", 'A');
  auto b = testing::make_record(testing::cell_key("m", "d", Variant::kSurfaceParaphrase), "1", "A", 'A');
  auto c = testing::make_record(testing::cell_key("m", "d", Variant::kFewshot3), "1", "A", 'A');
  std::vector<TranscriptRecord> all{a, b, c};
  const auto groups = group_by_cell(all);
  REQUIRE(groups.size() == 2);
  const auto& few = groups.at(a.cell);
  REQUIRE(few.size() == 2);
  CHECK(few[0].example_id == "2");
  CHECK(few[1].example_id == "1");
}

TEST_CASE("grade sets correctness from the gold letter") {
  EvaluatorVerdict v{'C', Rule::kFirstChar, std::nullopt, {}};
  CHECK(grade(v, 'C').correct == true);
  CHECK(grade(v, 'A').correct == false);
  EvaluatorVerdict none;
  CHECK(grade(none, 'A').correct == false);
}
