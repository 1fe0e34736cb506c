#pragma once

#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "knactor/access.hpp"
#include "knactor/channel.hpp"
#include "knactor/dataflow.hpp"
#include "knactor/errors.hpp"
#include "knactor/schema.hpp"
#include "knactor/trace.hpp"
#include "knactor/value.hpp"

namespace knactor {

// A stored record plus its stream sequence number. Sequence numbers are
// per-stream, start at 1, and never reuse — eviction only trims the head.
struct LogRecord {
  uint64_t seq = 0;
  Value record;
};

inline Value log_record_to_json(const LogRecord& r) { return Value{{"seq", r.seq}, {"record", r.record}}; }

inline LogRecord log_record_from_json(const Value& v) {
  return LogRecord{v.at("seq").get<uint64_t>(), v.at("record")};
}

using TailQueue = Channel<LogRecord>;

struct TailHandle {
  std::shared_ptr<TailQueue> records;
  std::function<void()> cancel;
};

struct LogEngineOptions {
  std::string admin_role = "admin";
};

// The Log data exchange engine: append-only record streams with declared
// scalar fields, bounded retention, server-side query pipelines, and tails.
class LogEngine {
 public:
  explicit LogEngine(LogEngineOptions opts = {}) : opts_(std::move(opts)), rbac_(opts_.admin_role) {}

  ~LogEngine() { shutdown(); }

  LogEngine(const LogEngine&) = delete;
  LogEngine& operator=(const LogEngine&) = delete;

  const std::string& admin_role() const { return opts_.admin_role; }

  void shutdown() {
    std::unique_lock lk(streams_mu_);
    for (auto& [name, st] : streams_) {
      std::lock_guard slk(st->mu);
      for (auto& t : st->tails) t->queue->close();
      st->tails.clear();
    }
  }

  void apply_policy(const std::string& role, AccessPolicy policy) {
    if (role != opts_.admin_role)
      throw DxError(ErrorCode::AccessDenied, "policy changes require the '" + opts_.admin_role + "' role");
    std::lock_guard lk(rbac_mu_);
    rbac_.add(policy);
  }

  void create_stream(const std::string& role, StreamDef def) {
    check_stream_def(def);
    for (const auto& [fname, ftype] : def.fields) {
      if (fname == "ts") throw DxError(ErrorCode::SchemaInvalid, def.name + ": 'ts' is reserved");
    }
    require_verb(role, def.name, Verb::Create);
    std::unique_lock lk(streams_mu_);
    if (streams_.count(def.name)) throw DxError(ErrorCode::Conflict, "stream '" + def.name + "' exists");
    auto st = std::make_shared<Stream>();
    st->def = std::move(def);
    streams_[st->def.name] = st;
  }

  std::optional<StreamDef> get_stream(const std::string& name) const {
    auto st = find_stream(name);
    if (!st) return std::nullopt;
    return st->def;
  }

  std::vector<std::string> stream_names() const {
    std::shared_lock lk(streams_mu_);
    std::vector<std::string> names;
    for (const auto& [n, _] : streams_) names.push_back(n);
    return names;
  }

  // Appends one record. Every declared field must be present with its
  // declared type; unknown fields are rejected; `ts` is stamped at ingest.
  uint64_t append(const std::string& role, const std::string& stream, Value record) {
    auto st = require_stream(stream);
    require_verb(role, stream, Verb::Create);
    if (!record.is_object()) throw DxError(ErrorCode::InvalidRecord, stream + ": record must be a map");
    for (auto it = record.begin(); it != record.end(); ++it) {
      auto ftype = st->def.find(it.key());
      if (!ftype) throw DxError(ErrorCode::InvalidRecord, stream + ": unknown field '" + it.key() + "'");
      if (!value_matches(it.value(), *ftype)) {
        if (*ftype == FieldType::Float && it.value().is_number_integer()) {
          *it = it.value().get<double>();
        } else {
          throw DxError(ErrorCode::InvalidRecord, stream + ": field '" + it.key() + "' has the wrong type");
        }
      }
    }
    for (const auto& [fname, ftype] : st->def.fields) {
      if (!record.contains(fname)) throw DxError(ErrorCode::InvalidRecord, stream + ": missing field '" + fname + "'");
    }
    record["ts"] = wall_now_ms();

    std::lock_guard slk(st->mu);
    LogRecord rec{++st->next_seq, std::move(record)};
    st->records.push_back(rec);
    if (st->def.max_records > 0) {
      while (st->records.size() > st->def.max_records) st->records.pop_front();
    }
    for (auto& t : st->tails) deliver(*t, rec);
    return rec.seq;
  }

  // Runs a pipeline server-side over the retained batch (optionally only
  // records after `since_seq`) and returns the transformed records.
  std::vector<Value> query(const std::string& role, const std::string& stream, const Pipeline& ops,
                           uint64_t since_seq = 0) const {
    auto st = require_stream(stream);
    require_verb(role, stream, Verb::Get);
    check_pipeline(ops, stream_field_types(st->def));
    std::vector<Value> batch;
    {
      std::lock_guard slk(st->mu);
      for (const auto& r : st->records) {
        if (r.seq > since_seq) batch.push_back(r.record);
      }
    }
    return apply_pipeline(ops, std::move(batch));
  }

  uint64_t last_seq(const std::string& stream) const {
    auto st = require_stream(stream);
    std::lock_guard slk(st->mu);
    return st->next_seq;
  }

  // Subscribes to records after `from_seq` (0 replays the whole retained
  // window). Only per-record ops may shape a tail — batches never close.
  TailHandle tail(const std::string& role, const std::string& stream, uint64_t from_seq = 0, Pipeline ops = {}) {
    auto st = require_stream(stream);
    require_verb(role, stream, Verb::Watch);
    for (const auto& op : ops) {
      if (!per_record_op(op))
        throw DxError(ErrorCode::InvalidPipeline, "tail pipelines may only filter or rename");
    }
    check_pipeline(ops, stream_field_types(st->def));
    auto t = std::make_shared<Tail>();
    t->queue = std::make_shared<TailQueue>();
    t->ops = std::move(ops);
    std::lock_guard slk(st->mu);
    for (const auto& r : st->records) {
      if (r.seq > from_seq) deliver(*t, r);
    }
    st->tails.push_back(t);
    std::weak_ptr<Stream> wst = st;
    std::weak_ptr<Tail> wt = t;
    auto cancel = [wst, wt] {
      auto s = wst.lock();
      auto tt = wt.lock();
      if (tt) tt->queue->close();
      if (s && tt) {
        std::lock_guard g(s->mu);
        std::erase(s->tails, tt);
      }
    };
    return TailHandle{t->queue, cancel};
  }

 private:
  struct Tail {
    std::shared_ptr<TailQueue> queue;
    Pipeline ops;
  };

  struct Stream {
    mutable std::mutex mu;
    StreamDef def;
    std::deque<LogRecord> records;
    uint64_t next_seq = 0;
    std::vector<std::shared_ptr<Tail>> tails;
  };

  static void deliver(Tail& t, const LogRecord& rec) {
    if (t.ops.empty()) {
      t.queue->push(rec);
      return;
    }
    std::vector<Value> batch{rec.record};
    for (const auto& op : t.ops) batch = apply_op(op, std::move(batch));
    if (!batch.empty()) t.queue->push(LogRecord{rec.seq, std::move(batch.front())});
  }

  std::shared_ptr<Stream> find_stream(const std::string& name) const {
    std::shared_lock lk(streams_mu_);
    auto it = streams_.find(name);
    return it == streams_.end() ? nullptr : it->second;
  }

  std::shared_ptr<Stream> require_stream(const std::string& name) const {
    auto st = find_stream(name);
    if (!st) throw DxError(ErrorCode::NotFound, "stream '" + name + "'");
    return st;
  }

  void require_verb(const std::string& role, const std::string& stream, Verb verb) const {
    std::lock_guard lk(rbac_mu_);
    if (!rbac_.allows(role, stream, verb))
      throw DxError(ErrorCode::AccessDenied,
                    "role '" + role + "' lacks " + std::string(to_string(verb)) + " on " + stream);
  }

  LogEngineOptions opts_;
  mutable std::shared_mutex streams_mu_;
  std::map<std::string, std::shared_ptr<Stream>> streams_;
  mutable std::mutex rbac_mu_;
  RbacTable rbac_;
};

}  // namespace knactor
