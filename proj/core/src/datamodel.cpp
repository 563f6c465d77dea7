#include "slmaudit/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json_util.hpp"
#include "slmaudit/error.hpp"

namespace slmaudit {

namespace detail {

void expect_fields(const Json& obj, std::initializer_list<std::string_view> required,
                   std::initializer_list<std::string_view> optional) {
  if (!obj.is_object()) throw DataError("expected a JSON object");
  for (std::string_view key : required) {
    if (!obj.contains(key)) throw DataError("missing field '" + std::string(key) + "'");
  }
  for (const auto& [key, value] : obj.items()) {
    const bool known =
        std::find(required.begin(), required.end(), key) != required.end() ||
        std::find(optional.begin(), optional.end(), key) != optional.end();
    if (!known) throw DataError("unexpected field '" + key + "'");
  }
}

const std::string& get_string(const Json& obj, std::string_view key) {
  const Json& v = obj.at(key);
  if (!v.is_string()) throw DataError("field '" + std::string(key) + "' must be a string");
  return v.get_ref<const std::string&>();
}

char to_letter(const Json& value, std::string_view what) {
  if (!value.is_string()) throw DataError(std::string(what) + " must be a string");
  const auto& s = value.get_ref<const std::string&>();
  if (s.size() != 1 || s[0] < 'A' || s[0] > 'J') {
    throw DataError(std::string(what) + " must be a single letter A-J, got '" + s + "'");
  }
  return s[0];
}

char get_letter(const Json& obj, std::string_view key) {
  return to_letter(obj.at(key), "field '" + std::string(key) + "'");
}

double get_number(const Json& obj, std::string_view key) {
  const Json& v = obj.at(key);
  if (!v.is_number()) throw DataError("field '" + std::string(key) + "' must be a number");
  return v.get<double>();
}

}  // namespace detail

using detail::Json;
using detail::OrderedJson;

namespace {

constexpr std::string_view kVariantNames[] = {
    "surface_paraphrase", "instruction_reorder", "fewshot_3", "format_change",
    "implicit_framing"};
constexpr std::string_view kPhrasingNames[] = {"decimal_01", "percent_0_100"};
constexpr std::string_view kRuleNames[] = {"first_char",   "line_scan",
                                           "fallback_first_char", "regex_marker",
                                           "regex_tail_scan", "constrained"};
constexpr std::string_view kEvaluatorNames[] = {"first_char", "regex", "constrained"};

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(const std::string_view (&names)[N], std::string_view name) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == name) return static_cast<Enum>(i);
  }
  return std::nullopt;
}

std::string letter_string(char c) { return std::string(1, c); }

// Reads every non-blank line; a blank line is not a record. Errors carry
// "<source>:<line>: ".
template <typename Fn>
void for_each_line(std::istream& in, std::string_view source, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      Json obj = Json::parse(line);
      fn(obj, line_no);
    } catch (const Json::exception& e) {
      throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                      ": malformed JSON: " + e.what());
    } catch (const DataError& e) {
      throw DataError(std::string(source) + ":" + std::to_string(line_no) + ": " +
                      e.what());
    }
  }
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& line : lines) out << line << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

OrderedJson verdict_to_json(const EvaluatorVerdict& v) {
  OrderedJson j;
  j["letter"] = v.predicted_letter ? OrderedJson(letter_string(*v.predicted_letter))
                                   : OrderedJson(nullptr);
  j["rule"] = std::string(to_string(v.rule_fired));
  j["correct"] = v.correct ? OrderedJson(*v.correct) : OrderedJson(nullptr);
  if (!v.raw_first_char.empty()) j["raw"] = v.raw_first_char;
  return j;
}

EvaluatorVerdict verdict_from_json(const Json& j, const LabelSet& labels) {
  detail::expect_fields(j, {"letter", "rule", "correct"}, {"raw"});
  EvaluatorVerdict v;
  if (!j.at("letter").is_null()) {
    v.predicted_letter = detail::to_letter(j.at("letter"), "verdict letter");
    if (!labels.contains(*v.predicted_letter)) {
      throw DataError("verdict letter outside the label set");
    }
  }
  auto rule = parse_rule(detail::get_string(j, "rule"));
  if (!rule) throw DataError("unknown verdict rule '" + detail::get_string(j, "rule") + "'");
  v.rule_fired = *rule;
  if (!j.at("correct").is_null()) {
    if (!j.at("correct").is_boolean()) throw DataError("verdict 'correct' must be boolean");
    v.correct = j.at("correct").get<bool>();
  }
  if (j.contains("raw")) v.raw_first_char = detail::get_string(j, "raw");
  return v;
}

}  // namespace

std::string_view to_string(Variant v) { return kVariantNames[static_cast<int>(v)]; }
std::string_view to_string(Phrasing p) { return kPhrasingNames[static_cast<int>(p)]; }
std::string_view to_string(Rule r) { return kRuleNames[static_cast<int>(r)]; }
std::string_view to_string(Evaluator e) { return kEvaluatorNames[static_cast<int>(e)]; }

std::optional<Variant> parse_variant(std::string_view n) { return lookup<Variant>(kVariantNames, n); }
std::optional<Phrasing> parse_phrasing(std::string_view n) { return lookup<Phrasing>(kPhrasingNames, n); }
std::optional<Rule> parse_rule(std::string_view n) { return lookup<Rule>(kRuleNames, n); }
std::optional<Evaluator> parse_evaluator(std::string_view n) { return lookup<Evaluator>(kEvaluatorNames, n); }

EvaluatorVerdict grade(EvaluatorVerdict verdict, char gold_letter) {
  verdict.correct = verdict.predicted_letter.has_value() && *verdict.predicted_letter == gold_letter;
  return verdict;
}

// LabelSet

LabelSet LabelSet::from_letters(std::string_view letters) {
  if (letters.size() < 2 || letters.size() > 10) {
    throw DataError("label set must have 2 to 10 letters, got " +
                    std::to_string(letters.size()));
  }
  for (std::size_t i = 0; i < letters.size(); ++i) {
    if (letters[i] != static_cast<char>('A' + i)) {
      throw DataError("label set must be a contiguous prefix of A..J, got '" +
                      std::string(letters) + "'");
    }
  }
  return LabelSet(std::string(letters));
}

LabelSet LabelSet::first(std::size_t count) {
  std::string letters;
  for (std::size_t i = 0; i < count; ++i) letters.push_back(static_cast<char>('A' + i));
  return from_letters(letters);
}

bool LabelSet::contains(char c) const {
  return letters_.find(c) != std::string::npos;
}

LabelSet ExampleRecord::labels() const {
  std::string letters;
  for (const auto& c : choices) letters.push_back(c.letter);
  return LabelSet::from_letters(letters);
}

std::string CellKey::to_string() const {
  return model_id + "/" + dataset_id + "/" + std::string(slmaudit::to_string(variant)) +
         "/" + std::string(slmaudit::to_string(phrasing));
}

// TopKDistribution

TopKDistribution TopKDistribution::from_logprobs(Map logprobs, std::size_t k) {
  TopKDistribution d;
  d.k_ = k;
  for (const auto& [token, lp] : logprobs) {
    if (!std::isfinite(lp) || lp > 0.0) {
      throw DataError("probability outside (0,1] for token '" + token + "'");
    }
    d.probabilities_.emplace(token, std::exp(lp));
  }
  d.logprobs_ = std::move(logprobs);
  d.validate();
  return d;
}

TopKDistribution TopKDistribution::from_probabilities(Map probabilities, std::size_t k) {
  TopKDistribution d;
  d.k_ = k;
  for (const auto& [token, p] : probabilities) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw DataError("probability outside (0,1] for token '" + token + "'");
    }
    d.logprobs_.emplace(token, std::log(p));
  }
  d.probabilities_ = std::move(probabilities);
  d.validate();
  return d;
}

void TopKDistribution::validate() const {
  if (k_ == 0) throw DataError("top-k window size must be positive");
  if (probabilities_.size() > k_) {
    throw DataError("top-k window holds " + std::to_string(probabilities_.size()) +
                    " entries but k = " + std::to_string(k_));
  }
  for (const auto& [token, p] : probabilities_) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw DataError("probability outside (0,1] for token '" + token + "'");
    }
  }
  if (total_mass() > 1.0 + 1e-9) throw DataError("top-k probabilities sum above 1");
}

double TopKDistribution::probability(std::string_view token) const {
  auto it = probabilities_.find(token);
  return it == probabilities_.end() ? 0.0 : it->second;
}

double TopKDistribution::smallest() const {
  double lo = 0.0;
  bool first = true;
  for (const auto& [token, p] : probabilities_) {
    if (first || p < lo) lo = p;
    first = false;
  }
  return lo;
}

double TopKDistribution::total_mass() const {
  double total = 0.0;
  for (const auto& [token, p] : probabilities_) total += p;
  return total;
}

// examples

std::vector<ExampleRecord> parse_examples(std::istream& in, std::string_view source) {
  std::vector<ExampleRecord> out;
  std::set<std::string, std::less<>> seen;
  for_each_line(in, source, [&](const Json& obj, std::size_t) {
    detail::expect_fields(obj, {"example_id", "dataset_id", "question", "choices", "gold"});
    ExampleRecord r;
    r.example_id = detail::get_string(obj, "example_id");
    r.dataset_id = detail::get_string(obj, "dataset_id");
    r.question_text = detail::get_string(obj, "question");
    const Json& choices = obj.at("choices");
    if (!choices.is_array()) throw DataError("field 'choices' must be an array");
    for (const Json& c : choices) {
      detail::expect_fields(c, {"letter", "text"});
      r.choices.push_back({detail::get_letter(c, "letter"), detail::get_string(c, "text")});
    }
    r.gold_letter = detail::get_letter(obj, "gold");
    const LabelSet labels = r.labels();
    if (!labels.contains(r.gold_letter)) {
      throw DataError("gold letter '" + letter_string(r.gold_letter) +
                      "' outside choice set " + std::string(labels.letters()));
    }
    if (!seen.insert(r.example_id).second) {
      throw DataError("duplicate example_id '" + r.example_id + "'");
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<ExampleRecord> read_examples(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_examples(in, path.string());
}

std::string serialize_example(const ExampleRecord& r) {
  OrderedJson j;
  j["example_id"] = r.example_id;
  j["dataset_id"] = r.dataset_id;
  j["question"] = r.question_text;
  OrderedJson choices = OrderedJson::array();
  for (const auto& c : r.choices) {
    OrderedJson cj;
    cj["letter"] = letter_string(c.letter);
    cj["text"] = c.text;
    choices.push_back(std::move(cj));
  }
  j["choices"] = std::move(choices);
  j["gold"] = letter_string(r.gold_letter);
  return j.dump();
}

void write_examples(const std::filesystem::path& path,
                    std::span<const ExampleRecord> records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(serialize_example(r));
  write_lines(path, lines);
}

// transcripts

namespace {

TranscriptRecord transcript_from_json(const Json& obj) {
  detail::expect_fields(obj,
                        {"model", "dataset", "variant", "phrasing", "example_id", "prompt",
                         "generation", "gold", "labels"},
                        {"topk_logprobs", "verbal_response", "verdicts"});
  TranscriptRecord r;
  r.cell.model_id = detail::get_string(obj, "model");
  r.cell.dataset_id = detail::get_string(obj, "dataset");
  const auto& variant = detail::get_string(obj, "variant");
  auto v = parse_variant(variant);
  if (!v) throw DataError("unknown variant '" + variant + "'");
  r.cell.variant = *v;
  const auto& phrasing = detail::get_string(obj, "phrasing");
  auto p = parse_phrasing(phrasing);
  if (!p) throw DataError("unknown phrasing '" + phrasing + "'");
  r.cell.phrasing = *p;
  r.example_id = detail::get_string(obj, "example_id");
  r.rendered_prompt = detail::get_string(obj, "prompt");
  r.generation_text = detail::get_string(obj, "generation");

  const Json& labels = obj.at("labels");
  if (!labels.is_array()) throw DataError("field 'labels' must be an array");
  std::string letters;
  for (const Json& l : labels) letters.push_back(detail::to_letter(l, "label"));
  r.label_set = LabelSet::from_letters(letters);
  r.gold_letter = detail::get_letter(obj, "gold");
  if (!r.label_set.contains(r.gold_letter)) {
    throw DataError("gold letter '" + letter_string(r.gold_letter) + "' outside labels");
  }

  if (obj.contains("topk_logprobs")) {
    const Json& topk = obj.at("topk_logprobs");
    if (!topk.is_object()) throw DataError("field 'topk_logprobs' must be an object");
    TopKDistribution::Map lps;
    for (const auto& [token, lp] : topk.items()) {
      if (!lp.is_number()) throw DataError("logprob for '" + token + "' must be a number");
      lps.emplace(token, lp.get<double>());
    }
    const std::size_t k = std::max<std::size_t>(lps.size(), 1);
    r.first_step_topk = TopKDistribution::from_logprobs(std::move(lps), k);
  }
  if (obj.contains("verbal_response")) {
    r.verbal_response_text = detail::get_string(obj, "verbal_response");
  }
  if (obj.contains("verdicts")) {
    const Json& verdicts = obj.at("verdicts");
    if (!verdicts.is_object()) throw DataError("field 'verdicts' must be an object");
    for (const auto& [name, vj] : verdicts.items()) {
      if (!parse_evaluator(name)) throw DataError("unknown evaluator '" + name + "'");
      r.verdicts.emplace(name, verdict_from_json(vj, r.label_set));
    }
  }
  return r;
}

}  // namespace

std::vector<TranscriptRecord> parse_transcripts(std::istream& in, std::string_view source) {
  std::vector<TranscriptRecord> out;
  std::set<std::pair<CellKey, std::string>> seen;
  for_each_line(in, source, [&](const Json& obj, std::size_t) {
    TranscriptRecord r = transcript_from_json(obj);
    if (!seen.emplace(r.cell, r.example_id).second) {
      throw DataError("duplicate example_id '" + r.example_id + "' in cell " +
                      r.cell.to_string());
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<TranscriptRecord> read_transcripts(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_transcripts(in, path.string());
}

std::string serialize_transcript(const TranscriptRecord& r) {
  OrderedJson j;
  j["model"] = r.cell.model_id;
  j["dataset"] = r.cell.dataset_id;
  j["variant"] = std::string(to_string(r.cell.variant));
  j["phrasing"] = std::string(to_string(r.cell.phrasing));
  j["example_id"] = r.example_id;
  j["prompt"] = r.rendered_prompt;
  j["generation"] = r.generation_text;
  if (r.first_step_topk) {
    OrderedJson topk = OrderedJson::object();
    for (const auto& [token, lp] : r.first_step_topk->logprobs()) topk[token] = lp;
    j["topk_logprobs"] = std::move(topk);
  }
  if (r.verbal_response_text) j["verbal_response"] = *r.verbal_response_text;
  j["gold"] = letter_string(r.gold_letter);
  OrderedJson labels = OrderedJson::array();
  for (char c : r.label_set.letters()) labels.push_back(letter_string(c));
  j["labels"] = std::move(labels);
  if (!r.verdicts.empty()) {
    OrderedJson verdicts = OrderedJson::object();
    for (const auto& [name, v] : r.verdicts) verdicts[name] = verdict_to_json(v);
    j["verdicts"] = std::move(verdicts);
  }
  return j.dump();
}

void write_transcripts(const std::filesystem::path& path,
                       std::span<const TranscriptRecord> records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(serialize_transcript(r));
  write_lines(path, lines);
}

CellGroups group_by_cell(std::span<const TranscriptRecord> records) {
  CellGroups groups;
  for (const auto& r : records) groups[r.cell].push_back(r);
  return groups;
}

}  // namespace slmaudit
