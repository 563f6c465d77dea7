#pragma once

// Scripted OpenAI-style completions server on a loopback port.

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <httplib.h>
#include "json.hpp"

namespace slmaudit::testing {

struct MockReply {
  int status = 200;
  std::string body;
};

inline MockReply completion(const std::string& text) {
  nlohmann::json j;
  j["choices"] = nlohmann::json::array({{{"text", text}, {"index", 0}}});
  return {200, j.dump()};
}

inline MockReply completion_with_logprobs(const std::string& text, const nlohmann::json& top) {
  nlohmann::json j;
  j["choices"] = nlohmann::json::array(
      {{{"text", text}, {"index", 0}, {"logprobs", {{"top_logprobs", nlohmann::json::array({top})}}}}});
  return {200, j.dump()};
}

class MockBackend {
 public:
  using Script = std::function<MockReply(const nlohmann::json& request, std::size_t call_index)>;

  explicit MockBackend(Script script, std::chrono::milliseconds delay = std::chrono::milliseconds(0))
      : script_(std::move(script)), delay_(delay) {
    server_.Post(R"(/v1/completions)", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
      }
      std::size_t index = 0;
      nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
      {
        std::lock_guard lock(mutex_);
        index = requests_.size();
        requests_.push_back(req.body);
        authorization_.push_back(req.get_header_value("Authorization"));
        paths_.push_back(req.path);
      }
      if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
      const MockReply reply = script_(body, index);
      res.status = reply.status;
      res.set_content(reply.body, "application/json");
      --in_flight_;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockBackend() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  MockBackend(const MockBackend&) = delete;
  MockBackend& operator=(const MockBackend&) = delete;

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int max_in_flight() const { return max_in_flight_.load(); }

  std::vector<std::string> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }
  std::vector<std::string> authorization() const {
    std::lock_guard lock(mutex_);
    return authorization_;
  }
  std::size_t call_count() const {
    std::lock_guard lock(mutex_);
    return requests_.size();
  }

 private:
  Script script_;
  std::chrono::milliseconds delay_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  mutable std::mutex mutex_;
  std::vector<std::string> requests_;
  std::vector<std::string> authorization_;
  std::vector<std::string> paths_;
};

// A port with nothing listening on it.
inline int closed_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  socklen_t len = sizeof(addr);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

}  // namespace slmaudit::testing
