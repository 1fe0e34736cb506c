#pragma once

#include <map>
#include <mutex>
#include <string>

#include "knactor/value.hpp"

namespace knactor::apps {

// Counts task launches per name. A reconfiguration must never bump these;
// tests assert the totals are identical before and after applying one.
class TaskCounters {
 public:
  void note_start(const std::string& task) {
    std::lock_guard lk(mu_);
    ++starts_[task];
  }

  uint64_t starts(const std::string& task) const {
    std::lock_guard lk(mu_);
    auto it = starts_.find(task);
    return it == starts_.end() ? 0 : it->second;
  }

  uint64_t total() const {
    std::lock_guard lk(mu_);
    uint64_t sum = 0;
    for (const auto& [name, n] : starts_) sum += n;
    return sum;
  }

  Value to_json() const {
    std::lock_guard lk(mu_);
    Value out = Value::object();
    for (const auto& [name, n] : starts_) out[name] = n;
    return out;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, uint64_t> starts_;
};

}  // namespace knactor::apps
