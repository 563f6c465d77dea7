#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slmaudit/datamodel.hpp"
#include "slmaudit/verdict.hpp"

namespace slmaudit {

inline constexpr std::size_t kMaxRetryLimit = 5;
inline constexpr std::string_view kApiKeyEnv = "SLMAUDIT_API_KEY";

struct BackendConfig {
  // "http://host:port", optionally with a path prefix ("http://h:8000/v1").
  std::string base_url;
  std::string model_name;
  double timeout_seconds = 120.0;
  std::size_t max_in_flight = 4;
  std::size_t retry_limit = 3;
  double backoff_seconds = 0.5;  // doubled after each failed attempt
  // Bearer token, usually taken from SLMAUDIT_API_KEY.
  std::string api_key;

  // Throws UsageError on an empty URL or model, max_in_flight 0, or a retry
  // limit above 5.
  void validate() const;
};

// Reads the API key from the environment when it is set.
BackendConfig with_env_api_key(BackendConfig config);

struct GenerationRequest {
  std::string prompt;
  int max_new_tokens = 32;
  double temperature = 0.0;
  std::optional<int> logprobs;
  // Sorted label letters; only for constrained finalization.
  std::optional<std::string> guided_choice;
  std::uint64_t seed = 42;

  // Throws std::invalid_argument on a non-positive budget, a non-zero
  // temperature, or a non-positive logprobs count.
  void validate() const;
};

struct GenerationResult {
  std::string text;
  std::optional<TopKDistribution> first_step_topk;
};

// JSON body sent to /v1/completions; byte-stable for identical inputs.
std::string completion_request_body(const BackendConfig& config, const GenerationRequest& request);

// Throws BackendError on malformed JSON, a missing completion, or missing
// logprobs when they were requested.
GenerationResult parse_completion_response(std::string_view body, const GenerationRequest& request);

class CompletionClient {
 public:
  explicit CompletionClient(BackendConfig config);
  ~CompletionClient();
  CompletionClient(const CompletionClient&) = delete;
  CompletionClient& operator=(const CompletionClient&) = delete;

  const BackendConfig& config() const { return config_; }

  // Safe to call from several threads; at most max_in_flight requests are
  // outstanding at once. Transient failures (connection errors, 5xx) are
  // retried with exponential backoff; 4xx responses are not.
  GenerationResult generate(const GenerationRequest& request);

  // Issues the requests from min(max_in_flight, n) worker threads and returns
  // results in request order. The first failure is rethrown.
  std::vector<GenerationResult> generate_all(std::span<const GenerationRequest> requests);

  // Appends the "Final answer:" suffix and asks for one label under
  // guided_choice. A rejected request is reported as a BackendError, as is a
  // reply that is not a single label letter.
  EvaluatorVerdict constrained_finalize(std::string_view cot_text, const LabelSet& labels);

 private:
  struct Impl;
  BackendConfig config_;
  std::unique_ptr<Impl> impl_;
};

GenerationResult generate(const BackendConfig& config, const GenerationRequest& request);
EvaluatorVerdict constrained_finalize(const BackendConfig& config, std::string_view cot_text,
                                      const LabelSet& labels);

}  // namespace slmaudit
