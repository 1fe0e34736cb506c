#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "knactor/dx_client.hpp"

namespace knactor {

// A write the reconciler wants applied to one of its own stores. Writes to
// the triggering object carry its snapshot revision as a CAS guard.
struct DesiredWrite {
  std::string store;
  std::string key;
  Value attributes;
};

// Level-triggered reconciler: callbacks see current state, not event
// payloads, so replays and missed events are harmless. Callbacks must be
// idempotent — return no writes when the object already looks right.
struct ReconcilerSpec {
  std::string name;
  std::vector<std::string> stores;  // own stores only; the role enforces it
  std::function<std::vector<DesiredWrite>(const StateObject&)> on_change;
  uint64_t resync_interval_ms = 30000;
  uint64_t backoff_ms = 50;
  int workers = 1;
};

struct ReconcilerMetrics {
  uint64_t processed = 0;
  uint64_t writes = 0;
  uint64_t skipped_no_change = 0;
  uint64_t conflicts = 0;
  uint64_t callback_errors = 0;
  uint64_t resyncs = 0;

  Value to_json() const {
    return Value{{"processed", processed},       {"writes", writes},
                 {"skipped_no_change", skipped_no_change}, {"conflicts", conflicts},
                 {"callback_errors", callback_errors},     {"resyncs", resyncs}};
  }
};

class Reconciler {
 public:
  Reconciler(ObjectDx& dx, ReconcilerSpec spec) : dx_(dx), spec_(std::move(spec)) {}

  ~Reconciler() { stop(); }

  Reconciler(const Reconciler&) = delete;
  Reconciler& operator=(const Reconciler&) = delete;

  void start() {
    if (running_.exchange(true)) return;
    stopping_.store(false);
    // Live watches first, then a full listing: anything committed between
    // the two is seen twice at worst, which coalescing absorbs.
    for (const auto& store : spec_.stores) {
      WatchHandle h = dx_.watch(store, WatchStart::live());
      watch_cancels_.push_back(h.cancel);
      pumps_.emplace_back([this, store, events = h.events] {
        while (auto ev = events->pop()) enqueue(store, ev->object.key);
      });
    }
    resync_now();
    for (int i = 0; i < std::max(1, spec_.workers); ++i) {
      pumps_.emplace_back([this] { worker_loop(); });
    }
    pumps_.emplace_back([this] { timer_loop(); });
  }

  void stop() {
    if (!running_.load()) return;
    stopping_.store(true);
    for (auto& cancel : watch_cancels_) cancel();
    watch_cancels_.clear();
    {
      std::lock_guard lk(mu_);
      cv_.notify_all();
      timer_cv_.notify_all();
    }
    for (auto& t : pumps_) {
      if (t.joinable()) t.join();
    }
    pumps_.clear();
    running_.store(false);
  }

  // Re-delivers current state of every object in every bound store.
  void resync_now() {
    for (const auto& store : spec_.stores) {
      try {
        for (const auto& o : dx_.list(store)) enqueue(store, o.key);
      } catch (const DxError&) {
        // Store not created yet; the next resync will catch it.
      }
    }
    std::lock_guard lk(mu_);
    ++metrics_.resyncs;
  }

  ReconcilerMetrics metrics() const {
    std::lock_guard lk(mu_);
    return metrics_;
  }

  // Blocks until the work queue has stayed empty for `settle`, which covers
  // the handoff gap between a store commit and its watch event arriving here.
  bool quiesce(std::chrono::milliseconds timeout,
               std::chrono::milliseconds settle = std::chrono::milliseconds(100)) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    auto idle_since = std::chrono::steady_clock::time_point::min();
    while (std::chrono::steady_clock::now() < deadline) {
      bool idle;
      {
        std::lock_guard lk(mu_);
        idle = states_.empty() && retries_.empty();
      }
      auto now = std::chrono::steady_clock::now();
      if (!idle) {
        idle_since = std::chrono::steady_clock::time_point::min();
      } else if (idle_since == std::chrono::steady_clock::time_point::min()) {
        idle_since = now;
      } else if (now - idle_since >= settle) {
        return true;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    return false;
  }

  const ReconcilerSpec& spec() const { return spec_; }

 private:
  using Key = std::pair<std::string, std::string>;
  enum class KeyState { Queued, Running, RunningDirty };

  void enqueue(const std::string& store, const std::string& key) {
    std::lock_guard lk(mu_);
    enqueue_locked({store, key});
  }

  void enqueue_locked(const Key& k) {
    auto it = states_.find(k);
    if (it == states_.end()) {
      states_[k] = KeyState::Queued;
      ready_.push_back(k);
      cv_.notify_one();
    } else if (it->second == KeyState::Running) {
      it->second = KeyState::RunningDirty;
    }
  }

  void worker_loop() {
    while (true) {
      Key k;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [this] { return stopping_.load() || !ready_.empty(); });
        if (stopping_.load()) return;
        k = ready_.front();
        ready_.pop_front();
        states_[k] = KeyState::Running;
      }
      process(k);
      {
        std::lock_guard lk(mu_);
        auto it = states_.find(k);
        if (it != states_.end() && it->second == KeyState::RunningDirty) {
          it->second = KeyState::Queued;
          ready_.push_back(k);
          cv_.notify_one();
        } else {
          states_.erase(k);
        }
      }
    }
  }

  void process(const Key& k) {
    StateObject current;
    try {
      current = dx_.get(k.first, k.second);
    } catch (const DxError& e) {
      if (e.code() == ErrorCode::NotFound) return;  // deleted since queued
      schedule_retry(k);
      return;
    }
    std::vector<DesiredWrite> writes;
    try {
      writes = spec_.on_change(current);
    } catch (const std::exception&) {
      std::lock_guard lk(mu_);
      ++metrics_.callback_errors;
      schedule_retry_locked(k);
      return;
    }
    {
      std::lock_guard lk(mu_);
      ++metrics_.processed;
    }
    for (auto& w : writes) apply(k, current, std::move(w));
  }

  void apply(const Key& k, const StateObject& snapshot, DesiredWrite w) {
    bool same_object = w.store == snapshot.store_name && w.key == snapshot.key;
    // Skip writes that change nothing; an idle loop must not bump revisions.
    if (same_object && unchanged(snapshot.attributes, w.attributes)) {
      std::lock_guard lk(mu_);
      ++metrics_.skipped_no_change;
      return;
    }
    try {
      if (same_object) {
        dx_.put(w.store, w.key, std::move(w.attributes), snapshot.revision);
      } else {
        dx_.put(w.store, w.key, std::move(w.attributes));
      }
      std::lock_guard lk(mu_);
      ++metrics_.writes;
    } catch (const DxError& e) {
      std::lock_guard lk(mu_);
      if (e.code() == ErrorCode::Conflict) {
        ++metrics_.conflicts;
        schedule_retry_locked(k);  // re-read, re-decide; never blind-retry
      } else {
        ++metrics_.callback_errors;
      }
    }
  }

  static bool unchanged(const Value& current, const Value& desired) {
    for (auto it = desired.begin(); it != desired.end(); ++it) {
      const Value* have = paths::get(current, it.key());
      if (!have || *have != it.value()) return false;
    }
    return true;
  }

  void schedule_retry(const Key& k) {
    std::lock_guard lk(mu_);
    schedule_retry_locked(k);
  }

  void schedule_retry_locked(const Key& k) {
    retries_.emplace(std::chrono::steady_clock::now() + std::chrono::milliseconds(spec_.backoff_ms), k);
    timer_cv_.notify_all();
  }

  void timer_loop() {
    auto next_resync = std::chrono::steady_clock::now() + std::chrono::milliseconds(spec_.resync_interval_ms);
    std::unique_lock lk(mu_);
    while (!stopping_.load()) {
      auto wake = next_resync;
      if (!retries_.empty()) wake = std::min(wake, retries_.begin()->first);
      timer_cv_.wait_until(lk, wake);  // plain wait: recompute the deadline after any wakeup
      if (stopping_.load()) return;
      auto now = std::chrono::steady_clock::now();
      while (!retries_.empty() && retries_.begin()->first <= now) {
        Key k = retries_.begin()->second;
        retries_.erase(retries_.begin());
        enqueue_locked(k);
      }
      if (now >= next_resync) {
        lk.unlock();
        resync_now();
        lk.lock();
        next_resync = now + std::chrono::milliseconds(spec_.resync_interval_ms);
      }
    }
  }

  ObjectDx& dx_;
  ReconcilerSpec spec_;
  std::atomic<bool> running_{false};
  std::atomic<bool> stopping_{false};
  std::vector<std::function<void()>> watch_cancels_;
  std::vector<std::thread> pumps_;

  mutable std::mutex mu_;
  std::condition_variable cv_;        // workers: ready_ gained an item or stopping
  std::condition_variable timer_cv_;  // timer: retry schedule changed or stopping
  std::map<Key, KeyState> states_;
  std::deque<Key> ready_;
  std::multimap<std::chrono::steady_clock::time_point, Key> retries_;
  ReconcilerMetrics metrics_;
};

inline std::unique_ptr<Reconciler> run_reconciler(ObjectDx& dx, ReconcilerSpec spec) {
  auto r = std::make_unique<Reconciler>(dx, std::move(spec));
  r->start();
  return r;
}

// Registers every schema file, parsing all of them before touching the DX so
// one malformed file aborts the whole application.
inline std::vector<uint64_t> externalize(ObjectDx& dx, const std::vector<std::string>& schema_yaml_texts) {
  std::vector<ObjectSchema> parsed;
  parsed.reserve(schema_yaml_texts.size());
  for (const auto& text : schema_yaml_texts) parsed.push_back(schema_from_yaml_text(text));
  std::vector<uint64_t> versions;
  versions.reserve(parsed.size());
  for (auto& schema : parsed) versions.push_back(dx.register_schema(std::move(schema)));
  return versions;
}

}  // namespace knactor
