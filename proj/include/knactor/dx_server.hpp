#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "knactor/log_store.hpp"
#include "knactor/object_store.hpp"
#include "knactor/wire.hpp"

namespace knactor {

struct DxServerOptions {
  std::string admin_role = "admin";   // gates dump/gc over the wire
  uint64_t gc_interval_ms = 0;        // 0 = no background sweeps
};

// Serves one ObjectEngine and/or one LogEngine over the wire protocol. All
// authorization happens in the engines; the server only maps verbs.
class DxServer {
 public:
  DxServer(const std::string& endpoint, ObjectEngine* objects, LogEngine* logs, DxServerOptions opts = {})
      : objects_(objects),
        logs_(logs),
        opts_(opts),
        wire_(endpoint, [this](const std::shared_ptr<WireSession>& s, const Envelope& e) { dispatch(s, e); }) {
    if (opts_.gc_interval_ms > 0 && objects_) {
      gc_thread_ = std::thread([this] {
        while (!stopping_.load()) {
          std::unique_lock lk(gc_mu_);
          gc_cv_.wait_for(lk, std::chrono::milliseconds(opts_.gc_interval_ms), [this] { return stopping_.load(); });
          if (stopping_.load()) break;
          objects_->gc_sweep();
        }
      });
    }
  }

  ~DxServer() { stop(); }

  uint16_t port() const { return wire_.port(); }

  void stop() {
    bool was = stopping_.exchange(true);
    if (!was) {
      gc_cv_.notify_all();
      if (objects_) objects_->shutdown();
      if (logs_) logs_->shutdown();
    }
    if (gc_thread_.joinable()) gc_thread_.join();
    wire_.stop();
  }

 private:
  void dispatch(const std::shared_ptr<WireSession>& s, const Envelope& e) {
    if (e.verb == "ping") {
      s->reply(e.id, Value{{"pong", true}});
      return;
    }
    if (e.verb.rfind("object.", 0) == 0) {
      if (!objects_) throw DxError(ErrorCode::NotFound, "no object exchange here");
      dispatch_object(s, e);
      return;
    }
    if (e.verb.rfind("log.", 0) == 0) {
      if (!logs_) throw DxError(ErrorCode::NotFound, "no log exchange here");
      dispatch_log(s, e);
      return;
    }
    throw DxError(ErrorCode::InvalidRequest, "unknown verb '" + e.verb + "'");
  }

  void dispatch_object(const std::shared_ptr<WireSession>& s, const Envelope& e) {
    ObjectEngine& eng = *objects_;
    const std::string& verb = e.verb;
    if (verb == "object.schema") {
      uint64_t v = eng.register_schema(e.role, schema_from_json(e.body));
      s->reply(e.id, Value{{"version", v}});
    } else if (verb == "object.get_schema") {
      auto schema = eng.get_schema(e.store);
      s->reply(e.id, schema ? schema_to_json(*schema) : Value::object());
    } else if (verb == "object.policy") {
      eng.apply_policy(e.role, access_policy_from_json(e.body));
      s->reply(e.id, Value::object());
    } else if (verb == "object.put") {
      std::optional<uint64_t> expected;
      if (e.body.contains("expected_revision")) expected = e.body["expected_revision"].get<uint64_t>();
      StateObject o = eng.put(e.role, e.store, e.key, e.body.at("attributes"), expected);
      s->reply(e.id, state_object_to_json(o));
    } else if (verb == "object.get") {
      s->reply(e.id, state_object_to_json(eng.get(e.role, e.store, e.key)));
    } else if (verb == "object.list") {
      Value objects = Value::array();
      for (const auto& o : eng.list(e.role, e.store)) objects.push_back(state_object_to_json(o));
      s->reply(e.id, Value{{"objects", std::move(objects)}});
    } else if (verb == "object.delete") {
      eng.remove(e.role, e.store, e.key);
      s->reply(e.id, Value::object());
    } else if (verb == "object.watch") {
      WatchStart start;
      start.live_only = e.body.value("live_only", false);
      start.from_revision = e.body.value("from_revision", 0ull);
      WatchHandle handle = eng.watch(e.role, e.store, start);
      start_stream(s, e.id, handle.events, handle.cancel,
                   [](const WatchEvent& ev) { return watch_event_to_json(ev); });
    } else if (verb == "object.register_consumer") {
      eng.register_consumer(e.role, e.store, e.body.at("consumer").get<std::string>());
      s->reply(e.id, Value::object());
    } else if (verb == "object.deregister_consumer") {
      eng.deregister_consumer(e.role, e.store, e.body.at("consumer").get<std::string>());
      s->reply(e.id, Value::object());
    } else if (verb == "object.mark_consumed") {
      uint64_t remaining = eng.mark_consumed(e.role, e.store, e.key, e.body.at("revision").get<uint64_t>(),
                                             e.body.at("consumer").get<std::string>());
      s->reply(e.id, Value{{"remaining", remaining}});
    } else if (verb == "object.gc") {
      require_admin(e.role, "gc");
      s->reply(e.id, Value{{"collected", eng.gc_sweep()}});
    } else if (verb == "object.attach_udf") {
      uint64_t id = eng.attach_udf(e.role, e.store, udf_attachment_from_json(e.body));
      s->reply(e.id, Value{{"id", id}});
    } else if (verb == "object.detach_udf") {
      eng.detach_udf(e.role, e.store, e.body.at("id").get<uint64_t>());
      s->reply(e.id, Value::object());
    } else if (verb == "object.list_udfs") {
      Value udfs = Value::array();
      for (const auto& u : eng.list_udfs(e.store)) udfs.push_back(udf_attachment_to_json(u));
      s->reply(e.id, Value{{"udfs", std::move(udfs)}});
    } else if (verb == "object.call_udf") {
      std::optional<std::string> key;
      if (!e.key.empty()) key = e.key;
      Value result = eng.call_udf(e.role, e.store, e.body.at("name").get<std::string>(),
                                  e.body.value("args", Value::object()), key);
      s->reply(e.id, Value{{"result", std::move(result)}});
    } else if (verb == "object.udf_faults") {
      Value faults = Value::object();
      for (const auto& [id, n] : eng.udf_faults(e.store)) faults[std::to_string(id)] = n;
      s->reply(e.id, Value{{"faults", std::move(faults)}});
    } else if (verb == "object.stores") {
      s->reply(e.id, Value{{"stores", eng.store_names()}});
    } else if (verb == "object.dump") {
      require_admin(e.role, "dump");
      s->reply(e.id, eng.dump_store(e.store));
    } else {
      throw DxError(ErrorCode::InvalidRequest, "unknown verb '" + verb + "'");
    }
  }

  void dispatch_log(const std::shared_ptr<WireSession>& s, const Envelope& e) {
    LogEngine& eng = *logs_;
    const std::string& verb = e.verb;
    if (verb == "log.create_stream") {
      eng.create_stream(e.role, stream_def_from_json(e.body));
      s->reply(e.id, Value::object());
    } else if (verb == "log.get_stream") {
      auto def = eng.get_stream(e.store);
      s->reply(e.id, def ? stream_def_to_json(*def) : Value());
    } else if (verb == "log.policy") {
      eng.apply_policy(e.role, access_policy_from_json(e.body));
      s->reply(e.id, Value::object());
    } else if (verb == "log.append") {
      s->reply(e.id, Value{{"seq", eng.append(e.role, e.store, e.body.at("record"))}});
    } else if (verb == "log.query") {
      Pipeline ops = pipeline_from_json(e.body.at("ops"));
      uint64_t since = e.body.value("since_seq", 0ull);
      s->reply(e.id, Value{{"records", eng.query(e.role, e.store, ops, since)}});
    } else if (verb == "log.last_seq") {
      s->reply(e.id, Value{{"seq", eng.last_seq(e.store)}});
    } else if (verb == "log.tail") {
      Pipeline ops = pipeline_from_json(e.body.value("ops", Value::array()));
      uint64_t from = e.body.value("from_seq", 0ull);
      TailHandle handle = eng.tail(e.role, e.store, from, std::move(ops));
      start_stream(s, e.id, handle.records, handle.cancel, [](const LogRecord& r) { return log_record_to_json(r); });
    } else if (verb == "log.streams") {
      s->reply(e.id, Value{{"streams", eng.stream_names()}});
    } else {
      throw DxError(ErrorCode::InvalidRequest, "unknown verb '" + verb + "'");
    }
  }

  // Ack first, then pump: both share the session outbox, so the client sees
  // the ack before any pushed frame.
  template <typename T, typename ToJson>
  void start_stream(const std::shared_ptr<WireSession>& s, uint64_t id, std::shared_ptr<Channel<T>> source,
                    std::function<void()> cancel, ToJson to_json) {
    s->on_cancel(id, std::move(cancel));
    s->reply(id, Value{{"stream", true}});
    wire_.track(std::thread([s, id, source = std::move(source), to_json = std::move(to_json)] {
      while (auto item = source->pop()) s->push(id, to_json(*item));
      s->push_done(id);
    }));
  }

  void require_admin(const std::string& role, const std::string& what) const {
    if (role != opts_.admin_role)
      throw DxError(ErrorCode::AccessDenied, what + " requires the '" + opts_.admin_role + "' role");
  }

  ObjectEngine* objects_;
  LogEngine* logs_;
  DxServerOptions opts_;
  std::atomic<bool> stopping_{false};
  std::thread gc_thread_;
  std::mutex gc_mu_;
  std::condition_variable gc_cv_;
  WireServer wire_;  // last member: handler touches the fields above
};

}  // namespace knactor
