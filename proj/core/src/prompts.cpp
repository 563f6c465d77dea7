#include "slmaudit/prompts.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "embedded_templates.hpp"
#include "json_util.hpp"
#include "slmaudit/error.hpp"
#include "slmaudit/rng.hpp"

namespace slmaudit {

namespace {

constexpr std::string_view kTaskNames[] = {"classification", "reasoning", "qa"};

constexpr std::string_view kInputSlot = "{input}";
constexpr std::string_view kLabelSlot = "{label_list}";
constexpr std::string_view kFewshotSlot = "{fewshot_examples}";

bool is_slot_char(char c) { return (c >= 'a' && c <= 'z') || c == '_'; }

// Segments of a template: literal text or a named placeholder.
struct Segment {
  bool placeholder;
  std::string_view text;
};

std::vector<Segment> tokenize(std::string_view tmpl) {
  std::vector<Segment> out;
  std::size_t literal_start = 0;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      std::size_t j = i + 1;
      while (j < tmpl.size() && is_slot_char(tmpl[j])) ++j;
      if (j > i + 1 && j < tmpl.size() && tmpl[j] == '}') {
        if (i > literal_start) out.push_back({false, tmpl.substr(literal_start, i - literal_start)});
        out.push_back({true, tmpl.substr(i, j - i + 1)});
        i = j + 1;
        literal_start = i;
        continue;
      }
    }
    ++i;
  }
  if (literal_start < tmpl.size()) out.push_back({false, tmpl.substr(literal_start)});
  return out;
}

std::size_t count_slot(const std::vector<Segment>& segments, std::string_view slot) {
  return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), [&](const Segment& s) {
    return s.placeholder && s.text == slot;
  }));
}

std::string label_list(const LabelSet& labels) {
  std::string out;
  for (char c : labels.letters()) {
    if (!out.empty()) out += ", ";
    out.push_back(c);
  }
  return out;
}

std::string fewshot_block(std::span<const ExampleRecord> fewshot) {
  std::string out;
  for (const auto& ex : fewshot) {
    if (!out.empty()) out += "\n\n";
    out += render_input(ex);
    out += "\nAnswer: ";
    out.push_back(ex.gold_letter);
  }
  return out;
}

constexpr ElicitationSuffix kSuffixes[] = {
    {Phrasing::kDecimal01,
     "Now state your confidence in your answer above as a decimal probability between "
     "0.0 and 1.0. Reply with only the number, e.g. 0.8.",
     kVerbalMaxTokens},
    {Phrasing::kPercent0100,
     "How confident are you in your answer? Respond with a single percentage between 0% "
     "and 100% (e.g., 75%).",
     kVerbalMaxTokens},
};

}  // namespace

std::string_view to_string(TaskType task) { return kTaskNames[static_cast<int>(task)]; }

std::optional<TaskType> parse_task_type(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kTaskNames); ++i) {
    if (kTaskNames[i] == name) return static_cast<TaskType>(i);
  }
  return std::nullopt;
}

void PromptVariantTemplate::validate() const {
  const auto segments = tokenize(template_text);
  const std::string where = std::string(to_string(task_type)) + "/" +
                            std::string(to_string(variant_id)) + ": ";
  if (count_slot(segments, kInputSlot) != 1) {
    throw DataError(where + "template must contain {input} exactly once");
  }
  const bool has_fewshot = count_slot(segments, kFewshotSlot) > 0;
  if (variant_id == Variant::kFewshot3 && !has_fewshot) {
    throw DataError(where + "fewshot_3 template needs a {fewshot_examples} slot");
  }
  if (variant_id != Variant::kFewshot3 && has_fewshot) {
    throw DataError(where + "only fewshot_3 may use {fewshot_examples}");
  }
  for (const auto& s : segments) {
    if (s.placeholder && s.text != kInputSlot && s.text != kLabelSlot &&
        s.text != kFewshotSlot) {
      throw DataError(where + "unknown placeholder " + std::string(s.text));
    }
  }
  const bool chain_of_thought =
      variant_id == Variant::kFormatChange && task_type == TaskType::kReasoning;
  const int expected = chain_of_thought ? kChainOfThoughtMaxTokens : kAnswerMaxTokens;
  if (max_new_tokens != expected) {
    throw DataError(where + "max_new_tokens must be " + std::to_string(expected));
  }
}

const PromptVariantTemplate& TemplateSet::at(Variant variant) const {
  for (const auto& t : variants) {
    if (t.variant_id == variant) return t;
  }
  throw DataError("template set has no variant " + std::string(to_string(variant)));
}

TemplateSet parse_template_set(std::string_view json, std::string_view source) {
  using detail::Json;
  try {
    Json doc = Json::parse(json);
    detail::expect_fields(doc, {"task_type", "variants"}, {"note"});
    TemplateSet set;
    const auto& task_name = detail::get_string(doc, "task_type");
    auto task = parse_task_type(task_name);
    if (!task) throw DataError("unknown task_type '" + task_name + "'");
    set.task_type = *task;
    if (doc.contains("note")) set.note = detail::get_string(doc, "note");
    const Json& variants = doc.at("variants");
    detail::expect_fields(variants, {"surface_paraphrase", "instruction_reorder", "fewshot_3",
                                     "format_change", "implicit_framing"});
    for (Variant v : kAllVariants) {
      const Json& vj = variants.at(std::string(to_string(v)));
      detail::expect_fields(vj, {"template", "max_new_tokens"});
      PromptVariantTemplate t;
      t.variant_id = v;
      t.task_type = set.task_type;
      t.template_text = detail::get_string(vj, "template");
      if (!vj.at("max_new_tokens").is_number_integer()) {
        throw DataError("max_new_tokens must be an integer");
      }
      t.max_new_tokens = vj.at("max_new_tokens").get<int>();
      t.validate();
      set.variants.push_back(std::move(t));
    }
    return set;
  } catch (const Json::exception& e) {
    throw DataError(std::string(source) + ": malformed template JSON: " + e.what());
  } catch (const DataError& e) {
    throw DataError(std::string(source) + ": " + e.what());
  }
}

TemplateSet load_template_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_template_set(buf.str(), path.string());
}

const TemplateSet& default_template_set(TaskType task) {
  static const std::vector<TemplateSet> sets = [] {
    std::vector<TemplateSet> out;
    for (std::string_view name : kTaskNames) {
      for (const auto& [embedded_name, json] : detail::kEmbeddedTemplates) {
        if (embedded_name == name) out.push_back(parse_template_set(json, embedded_name));
      }
    }
    return out;
  }();
  return sets.at(static_cast<std::size_t>(task));
}

const ElicitationSuffix& elicitation_suffix(Phrasing phrasing) {
  return kSuffixes[static_cast<int>(phrasing)];
}

std::string render_input(const ExampleRecord& example) {
  std::string out = example.question_text;
  for (const auto& c : example.choices) {
    out += '\n';
    out.push_back(c.letter);
    out += ". ";
    out += c.text;
  }
  return out;
}

std::string render_prompt(const PromptVariantTemplate& tmpl, const ExampleRecord& example,
                          std::span<const ExampleRecord> fewshot) {
  const std::size_t expected = tmpl.variant_id == Variant::kFewshot3 ? kFewshotCount : 0;
  if (fewshot.size() != expected) {
    throw std::invalid_argument(std::string(to_string(tmpl.variant_id)) + " needs " +
                                std::to_string(expected) + " few-shot examples, got " +
                                std::to_string(fewshot.size()));
  }
  for (const auto& ex : fewshot) {
    if (ex.example_id == example.example_id) {
      throw std::invalid_argument("few-shot examples must not include the target example");
    }
  }
  std::string out;
  for (const auto& s : tokenize(tmpl.template_text)) {
    if (!s.placeholder) {
      out += s.text;
    } else if (s.text == kInputSlot) {
      out += render_input(example);
    } else if (s.text == kLabelSlot) {
      out += label_list(example.labels());
    } else if (s.text == kFewshotSlot) {
      out += fewshot_block(fewshot);
    } else {
      throw DataError("placeholder " + std::string(s.text) + " left unsubstituted");
    }
  }
  return out;
}

std::string render_elicitation(const ElicitationSuffix& phrasing,
                               std::string_view answered_prompt,
                               std::string_view model_answer) {
  if (model_answer.empty()) {
    throw std::invalid_argument("elicitation needs a non-empty model answer");
  }
  std::string out;
  out.reserve(answered_prompt.size() + model_answer.size() + phrasing.suffix_text.size() + 1);
  out += answered_prompt;
  out += model_answer;
  out += '\n';
  out += phrasing.suffix_text;
  return out;
}

namespace {

// Lazily driven partial Fisher-Yates so a prefix of any length can be taken.
class Shuffler {
 public:
  Shuffler(std::string_view dataset_id, std::size_t split_size, std::uint64_t seed)
      : gen_(derive_seed(seed, dataset_id)), pool_(split_size) {
    std::iota(pool_.begin(), pool_.end(), std::size_t{0});
  }

  bool done() const { return next_ >= pool_.size(); }

  std::size_t next() {
    const std::size_t remaining = pool_.size() - next_;
    const std::size_t j = next_ + static_cast<std::size_t>(uniform_index(gen_, remaining));
    std::swap(pool_[next_], pool_[j]);
    return pool_[next_++];
  }

 private:
  SplitMix64 gen_;
  std::vector<std::size_t> pool_;
  std::size_t next_ = 0;
};

}  // namespace

SamplePlan make_sample_plan(std::string_view dataset_id, std::size_t split_size,
                            std::size_t sample_size, std::uint64_t seed) {
  if (sample_size > split_size) {
    throw std::invalid_argument("sample_size " + std::to_string(sample_size) +
                                " exceeds split size " + std::to_string(split_size));
  }
  SamplePlan plan{std::string(dataset_id), seed, split_size, sample_size, {}};
  plan.indices.reserve(sample_size);
  Shuffler shuffler(dataset_id, split_size, seed);
  for (std::size_t i = 0; i < sample_size; ++i) plan.indices.push_back(shuffler.next());
  return plan;
}

std::vector<std::size_t> fewshot_indices(const SamplePlan& eval_plan, std::size_t count) {
  const std::unordered_set<std::size_t> excluded(eval_plan.indices.begin(),
                                                 eval_plan.indices.end());
  Shuffler shuffler(eval_plan.dataset_id, eval_plan.split_size, eval_plan.seed + 1);
  std::vector<std::size_t> out;
  while (out.size() < count && !shuffler.done()) {
    const std::size_t idx = shuffler.next();
    if (!excluded.count(idx)) out.push_back(idx);
  }
  if (out.size() < count) {
    throw std::invalid_argument("split too small for " + std::to_string(count) +
                                " few-shot examples outside the evaluation sample");
  }
  return out;
}

}  // namespace slmaudit
