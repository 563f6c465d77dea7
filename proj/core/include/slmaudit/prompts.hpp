#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slmaudit/datamodel.hpp"

namespace slmaudit {

enum class TaskType { kClassification, kReasoning, kQa };

std::string_view to_string(TaskType task);
std::optional<TaskType> parse_task_type(std::string_view name);

// Generation budgets of the protocol.
inline constexpr int kAnswerMaxTokens = 32;
inline constexpr int kChainOfThoughtMaxTokens = 256;
inline constexpr int kLabelCallMaxTokens = 1;
inline constexpr int kLabelCallLogprobs = 200;
inline constexpr int kVerbalMaxTokens = 8;
inline constexpr int kConstrainedMaxTokens = 4;
inline constexpr std::size_t kFewshotCount = 3;

struct PromptVariantTemplate {
  Variant variant_id = Variant::kSurfaceParaphrase;
  TaskType task_type = TaskType::kReasoning;
  // Placeholders: {input}, {label_list}, {fewshot_examples}.
  std::string template_text;
  int max_new_tokens = kAnswerMaxTokens;

  // Throws DataError on a broken invariant: {input} not exactly once, a
  // {fewshot_examples} slot on the wrong variant, an unknown placeholder, or a
  // generation budget other than 256 for reasoning format_change / 32 otherwise.
  void validate() const;
};

// The five variants of one task type, in canonical variant order.
struct TemplateSet {
  TaskType task_type = TaskType::kReasoning;
  std::string note;
  std::vector<PromptVariantTemplate> variants;

  const PromptVariantTemplate& at(Variant variant) const;
};

TemplateSet parse_template_set(std::string_view json, std::string_view source);
TemplateSet load_template_set(const std::filesystem::path& path);
// Compiled-in copy of core/data/templates/<task>.json.
const TemplateSet& default_template_set(TaskType task);

struct ElicitationSuffix {
  Phrasing phrasing_id = Phrasing::kDecimal01;
  std::string_view suffix_text;
  int max_new_tokens = kVerbalMaxTokens;
};

const ElicitationSuffix& elicitation_suffix(Phrasing phrasing);

// Question followed by one "A. <text>" line per choice.
std::string render_input(const ExampleRecord& example);

// Throws std::invalid_argument when the few-shot count does not match the
// variant (3 for fewshot_3, else 0) or overlaps the target example, and
// DataError when a placeholder cannot be substituted.
std::string render_prompt(const PromptVariantTemplate& tmpl, const ExampleRecord& example,
                          std::span<const ExampleRecord> fewshot);

// answered_prompt + model_answer + "\n" + suffix. Throws std::invalid_argument
// on an empty answer.
std::string render_elicitation(const ElicitationSuffix& phrasing,
                               std::string_view answered_prompt,
                               std::string_view model_answer);

struct SamplePlan {
  std::string dataset_id;
  std::uint64_t seed = 0;
  std::size_t split_size = 0;
  std::size_t sample_size = 0;
  std::vector<std::size_t> indices;

  bool operator==(const SamplePlan&) const = default;
};

// Partial Fisher-Yates over [0, split_size) driven by SplitMix64 seeded from
// (seed, dataset_id). Throws std::invalid_argument if sample_size > split_size.
SamplePlan make_sample_plan(std::string_view dataset_id, std::size_t split_size,
                            std::size_t sample_size, std::uint64_t seed);

// The first `count` indices of the independent (seed + 1) shuffle that are not
// in the evaluation sample. Throws std::invalid_argument if too few remain.
std::vector<std::size_t> fewshot_indices(const SamplePlan& eval_plan,
                                         std::size_t count = kFewshotCount);

}  // namespace slmaudit
