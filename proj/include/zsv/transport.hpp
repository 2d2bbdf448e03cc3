#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

namespace zsv {

struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ExhaustedRetries : TransportError {
  int attempts;
  int last_status;
  ExhaustedRetries(const std::string& what, int attempts_, int status)
      : TransportError(what), attempts(attempts_), last_status(status) {}
};
struct AuthError : TransportError {
  using TransportError::TransportError;
};

using Headers = std::map<std::string, std::string>;

struct HttpResponse {
  int status = 0;  // 0: connection failure or timeout
  std::string body;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(const std::string& path, const std::string& body, const Headers& headers) = 0;
};

// Plain HTTP(S) transport over cpp-httplib. A fresh client per call keeps
// the object safe to share between worker threads.
class HttplibTransport final : public HttpTransport {
 public:
  explicit HttplibTransport(std::string base_url, std::chrono::milliseconds timeout = std::chrono::seconds(60))
      : base_url_(std::move(base_url)), timeout_(timeout) {}

  HttpResponse post(const std::string& path, const std::string& body, const Headers& headers) override {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout_).count());
    cli.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout_).count());
    cli.set_write_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout_).count());
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = cli.Post(path, h, body, "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
  }

 private:
  std::string base_url_;
  std::chrono::milliseconds timeout_;
};

class Clock {
 public:
  using duration = std::chrono::nanoseconds;
  using time_point = std::chrono::time_point<std::chrono::steady_clock, duration>;
  virtual ~Clock() = default;
  virtual time_point now() = 0;
  virtual void sleep_for(duration d) = 0;
};

class SteadyClock final : public Clock {
 public:
  time_point now() override { return std::chrono::steady_clock::now(); }
  void sleep_for(duration d) override {
    if (d > duration::zero()) std::this_thread::sleep_for(d);
  }
};

// Manually advanced clock; sleeping advances time instantly and records the
// requested delay.
class MockClock final : public Clock {
 public:
  time_point now() override {
    std::lock_guard lk(mu_);
    return now_;
  }
  void sleep_for(duration d) override {
    std::lock_guard lk(mu_);
    sleeps_.push_back(d);
    if (d > duration::zero()) now_ += d;
  }
  void advance(duration d) {
    std::lock_guard lk(mu_);
    now_ += d;
  }
  std::vector<duration> sleeps() const {
    std::lock_guard lk(mu_);
    return sleeps_;
  }

 private:
  mutable std::mutex mu_;
  time_point now_{};
  std::vector<duration> sleeps_;
};

struct TransportPolicy {
  int max_retries = 5;
  double base_backoff_s = 1.0;
  int requests_per_minute = 60;
  double timeout_s = 60.0;
  int concurrency_limit = 4;

  void validate() const {
    if (max_retries < 1 || base_backoff_s <= 0 || requests_per_minute < 1 || timeout_s <= 0 || concurrency_limit < 1)
      throw std::invalid_argument("transport policy values must all be positive");
  }
};

// Sliding-window limiter: at most `per_minute` acquisitions in any 60 s
// window, shared by every worker holding a reference.
class RateLimiter {
 public:
  RateLimiter(int per_minute, Clock& clock) : per_minute_(static_cast<std::size_t>(per_minute)), clock_(clock) {}

  // Blocks until a slot is free; returns the dispatch time.
  Clock::time_point acquire() {
    constexpr auto window = std::chrono::seconds(60);
    while (true) {
      Clock::duration wait{};
      {
        std::lock_guard lk(mu_);
        auto now = clock_.now();
        while (!stamps_.empty() && stamps_.front() + window <= now) stamps_.pop_front();
        if (stamps_.size() < per_minute_) {
          stamps_.push_back(now);
          return now;
        }
        wait = stamps_.front() + window - now;
      }
      clock_.sleep_for(wait);
    }
  }

 private:
  std::size_t per_minute_;
  Clock& clock_;
  std::mutex mu_;
  std::deque<Clock::time_point> stamps_;
};

// Counting semaphore bounding in-flight requests.
class ConcurrencyGate {
 public:
  explicit ConcurrencyGate(int limit) : available_(limit) {}
  void acquire() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return available_ > 0; });
    --available_;
  }
  void release() {
    {
      std::lock_guard lk(mu_);
      ++available_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int available_;
};

inline bool is_transient(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

// POST with retries on 429/5xx/timeouts. The delay before retry n (n >= 1)
// is base_backoff * 2^(n-1). 401/403 raise AuthError immediately.
inline HttpResponse send_with_retry(HttpTransport& transport, const std::string& path, const std::string& body,
                                    const Headers& headers, const TransportPolicy& policy, Clock& clock,
                                    RateLimiter* limiter = nullptr) {
  int last_status = 0;
  for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
    if (attempt > 0) {
      auto delay = std::chrono::duration<double>(policy.base_backoff_s * static_cast<double>(1ULL << (attempt - 1)));
      clock.sleep_for(std::chrono::duration_cast<Clock::duration>(delay));
    }
    if (limiter) limiter->acquire();
    auto res = transport.post(path, body, headers);
    last_status = res.status;
    if (res.status >= 200 && res.status < 300) return res;
    if (res.status == 401 || res.status == 403) throw AuthError("authentication rejected (HTTP " + std::to_string(res.status) + ")");
    if (!is_transient(res.status))
      throw TransportError("request rejected (HTTP " + std::to_string(res.status) + "): " + res.body.substr(0, 200));
  }
  throw ExhaustedRetries("gave up after " + std::to_string(policy.max_retries + 1) + " attempts (last HTTP " +
                             std::to_string(last_status) + ")",
                         policy.max_retries + 1, last_status);
}

}  // namespace zsv
