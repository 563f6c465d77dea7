#pragma once

#include <stdexcept>
#include <string>

namespace slmaudit {

// Error classes map onto the CLI exit codes: usage 1, data 2, backend 3.

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data, failed preconditions on data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inference backend unreachable, misbehaving, or violating the wire contract.
class BackendError : public std::runtime_error {
 public:
  explicit BackendError(const std::string& what, int http_status = 0)
      : std::runtime_error(what), http_status_(http_status) {}

  // 0 when the failure happened below HTTP (connect, timeout, parse).
  int http_status() const { return http_status_; }

 private:
  int http_status_;
};

}  // namespace slmaudit
