#include "slmaudit/client.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <semaphore>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include "json.hpp"

#include "slmaudit/error.hpp"
#include "slmaudit/extraction.hpp"
#include "slmaudit/prompts.hpp"
#include "slmaudit/text.hpp"

namespace slmaudit {

void BackendConfig::validate() const {
  if (base_url.empty()) throw UsageError("backend base URL is empty");
  if (model_name.empty()) throw UsageError("backend model name is empty");
  if (max_in_flight == 0) throw UsageError("max_in_flight must be at least 1");
  if (retry_limit > kMaxRetryLimit) throw UsageError("retry_limit must be at most 5");
  if (!(timeout_seconds > 0.0)) throw UsageError("timeout must be positive");
}

BackendConfig with_env_api_key(BackendConfig config) {
  if (const char* key = std::getenv(std::string(kApiKeyEnv).c_str()); key && *key) {
    config.api_key = key;
  }
  return config;
}

void GenerationRequest::validate() const {
  if (max_new_tokens <= 0) throw std::invalid_argument("max_new_tokens must be positive");
  if (temperature != 0.0) throw std::invalid_argument("decoding is greedy: temperature must be 0");
  if (logprobs && *logprobs <= 0) throw std::invalid_argument("logprobs must be positive");
  if (guided_choice && guided_choice->empty()) throw std::invalid_argument("empty guided_choice");
}

std::string completion_request_body(const BackendConfig& config, const GenerationRequest& request) {
  nlohmann::ordered_json body;
  body["model"] = config.model_name;
  body["prompt"] = request.prompt;
  body["max_tokens"] = request.max_new_tokens;
  body["temperature"] = request.temperature;
  if (request.logprobs) body["logprobs"] = *request.logprobs;
  body["seed"] = request.seed;
  if (request.guided_choice) {
    auto choices = nlohmann::ordered_json::array();
    for (char c : *request.guided_choice) choices.push_back(std::string(1, c));
    body["guided_choice"] = std::move(choices);
  }
  return body.dump();
}

GenerationResult parse_completion_response(std::string_view body, const GenerationRequest& request) {
  nlohmann::json doc = nlohmann::json::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw BackendError("malformed completion response");
  const auto choices = doc.find("choices");
  if (choices == doc.end() || !choices->is_array() || choices->empty()) {
    throw BackendError("completion response has no choices");
  }
  const auto& choice = (*choices)[0];
  const auto text = choice.find("text");
  if (text == choice.end() || !text->is_string()) throw BackendError("completion choice has no text");

  GenerationResult out;
  out.text = text->get<std::string>();
  if (!request.logprobs) return out;

  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || !lp->is_object()) throw BackendError("logprobs requested but absent");
  const auto top = lp->find("top_logprobs");
  if (top == lp->end() || !top->is_array() || top->empty() || !(*top)[0].is_object()) {
    throw BackendError("logprobs requested but top_logprobs absent");
  }
  TopKDistribution::Map map;
  for (const auto& [token, value] : (*top)[0].items()) {
    if (!value.is_number()) throw BackendError("non-numeric logprob for token '" + token + "'");
    map.emplace(token, value.get<double>());
  }
  // Some servers add the sampled token to the window, so it may exceed k by one.
  const std::size_t k = std::max<std::size_t>(static_cast<std::size_t>(*request.logprobs), map.size());
  try {
    out.first_step_topk = TopKDistribution::from_logprobs(std::move(map), k);
  } catch (const DataError& e) {
    throw BackendError(std::string("invalid top-k window: ") + e.what());
  }
  return out;
}

struct CompletionClient::Impl {
  std::string scheme_host_port;
  std::string path;
  std::counting_semaphore<> slots;

  explicit Impl(const BackendConfig& config) : slots(static_cast<std::ptrdiff_t>(config.max_in_flight)) {
    const std::string& url = config.base_url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw UsageError("base URL needs a scheme: " + url);
    if (url.compare(0, scheme_end, "http") != 0) {
      throw UsageError("only http:// backends are supported: " + url);
    }
    const auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port = url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    const bool has_v1 = prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, "/v1") == 0;
    path = prefix + (has_v1 ? "/completions" : "/v1/completions");
  }
};

CompletionClient::CompletionClient(BackendConfig config) : config_(std::move(config)) {
  config_.validate();
  impl_ = std::make_unique<Impl>(config_);
}

CompletionClient::~CompletionClient() = default;

namespace {

class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<>& s) : s_(s) { s_.acquire(); }
  ~SlotGuard() { s_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<>& s_;
};

}  // namespace

GenerationResult CompletionClient::generate(const GenerationRequest& request) {
  request.validate();
  const std::string body = completion_request_body(config_, request);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  std::string last_error;
  int last_status = 0;
  for (std::size_t attempt = 0; attempt <= config_.retry_limit; ++attempt) {
    if (attempt > 0) {
      const double wait = config_.backoff_seconds * std::pow(2.0, static_cast<double>(attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
    httplib::Result res;
    {
      SlotGuard slot(impl_->slots);
      httplib::Client http(impl_->scheme_host_port);
      const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
      http.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      http.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      http.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      res = http.Post(impl_->path, headers, body, "application/json");
    }
    if (!res) {
      last_error = "request to " + config_.base_url + " failed: " + httplib::to_string(res.error());
      last_status = 0;
      continue;
    }
    if (res->status >= 500) {
      last_error = "backend returned HTTP " + std::to_string(res->status) + ": " + res->body;
      last_status = res->status;
      continue;
    }
    if (res->status >= 400) {
      throw BackendError("backend rejected request (HTTP " + std::to_string(res->status) + "): " + res->body,
                         res->status);
    }
    return parse_completion_response(res->body, request);
  }
  throw BackendError(last_error + " (after " + std::to_string(config_.retry_limit + 1) + " attempts)",
                     last_status);
}

std::vector<GenerationResult> CompletionClient::generate_all(std::span<const GenerationRequest> requests) {
  std::vector<GenerationResult> results(requests.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= requests.size() || failed.load()) return;
      try {
        results[i] = generate(requests[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
        return;
      }
    }
  };
  const std::size_t n_threads = std::min(config_.max_in_flight, requests.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return results;
}

EvaluatorVerdict CompletionClient::constrained_finalize(std::string_view cot_text, const LabelSet& labels) {
  if (labels.empty()) throw std::invalid_argument("constrained finalization needs labels");
  GenerationRequest request;
  request.prompt = build_constrained_continuation(cot_text);
  request.max_new_tokens = kConstrainedMaxTokens;
  request.guided_choice = std::string(labels.letters());
  GenerationResult result;
  try {
    result = generate(request);
  } catch (const BackendError& e) {
    if (e.http_status() >= 400 && e.http_status() < 500) {
      throw BackendError(std::string("guided_choice request rejected; the backend may not support "
                                     "guided decoding: ") + e.what(),
                         e.http_status());
    }
    throw;
  }
  const std::string_view reply = text::trim(result.text);
  if (reply.size() != 1 || !labels.contains(reply.front())) {
    throw BackendError("guided_choice reply '" + std::string(reply) + "' is not one of " +
                       std::string(labels.letters()));
  }
  EvaluatorVerdict verdict;
  verdict.predicted_letter = reply.front();
  verdict.rule_fired = Rule::kConstrained;
  verdict.raw_first_char = std::string(reply);
  return verdict;
}

GenerationResult generate(const BackendConfig& config, const GenerationRequest& request) {
  CompletionClient client(config);
  return client.generate(request);
}

EvaluatorVerdict constrained_finalize(const BackendConfig& config, std::string_view cot_text,
                                      const LabelSet& labels) {
  CompletionClient client(config);
  return client.constrained_finalize(cot_text, labels);
}

}  // namespace slmaudit
