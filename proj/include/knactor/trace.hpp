#pragma once

#include <chrono>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace knactor {

inline double steady_now_ms() {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

inline int64_t wall_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// Instrumentation registry for the bench harness: engines and integrators
// record named timestamps/durations per subject (an order key, an event id).
// Single-host only; all samples come from one steady clock.
class TraceSink {
 public:
  void record(const std::string& subject, const std::string& stage, double value_ms) {
    std::lock_guard lk(mu_);
    samples_[subject][stage].push_back(value_ms);
  }

  // First recorded value, NaN if absent.
  double first(const std::string& subject, const std::string& stage) const {
    std::lock_guard lk(mu_);
    auto s = samples_.find(subject);
    if (s == samples_.end()) return nan_;
    auto v = s->second.find(stage);
    if (v == s->second.end() || v->second.empty()) return nan_;
    return v->second.front();
  }

  double sum(const std::string& subject, const std::string& stage) const {
    std::lock_guard lk(mu_);
    auto s = samples_.find(subject);
    if (s == samples_.end()) return 0.0;
    auto v = s->second.find(stage);
    if (v == s->second.end()) return 0.0;
    double total = 0;
    for (double x : v->second) total += x;
    return total;
  }

  double last(const std::string& subject, const std::string& stage) const {
    std::lock_guard lk(mu_);
    auto s = samples_.find(subject);
    if (s == samples_.end()) return nan_;
    auto v = s->second.find(stage);
    if (v == s->second.end() || v->second.empty()) return nan_;
    return v->second.back();
  }

  bool has(const std::string& subject, const std::string& stage) const {
    std::lock_guard lk(mu_);
    auto s = samples_.find(subject);
    if (s == samples_.end()) return false;
    auto v = s->second.find(stage);
    return v != s->second.end() && !v->second.empty();
  }

  void clear() {
    std::lock_guard lk(mu_);
    samples_.clear();
  }

 private:
  static constexpr double nan_ = std::numeric_limits<double>::quiet_NaN();
  mutable std::mutex mu_;
  std::map<std::string, std::map<std::string, std::vector<double>>> samples_;
};

}  // namespace knactor
