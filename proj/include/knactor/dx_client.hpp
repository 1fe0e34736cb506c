#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "knactor/log_store.hpp"
#include "knactor/object_store.hpp"
#include "knactor/wire.hpp"

namespace knactor {

// Role-bound client views of the two exchange kinds. Integrators and service
// code program against these, so a composition runs unchanged whether its
// stores are reached in-process or over a socket.

class ObjectDx {
 public:
  virtual ~ObjectDx() = default;

  virtual uint64_t register_schema(ObjectSchema schema) = 0;
  virtual std::optional<ObjectSchema> get_schema(const std::string& store) = 0;
  virtual void apply_policy(AccessPolicy policy) = 0;

  virtual StateObject put(const std::string& store, const std::string& key, Value attributes,
                          std::optional<uint64_t> expected_revision = std::nullopt) = 0;
  virtual StateObject get(const std::string& store, const std::string& key) = 0;
  virtual std::vector<StateObject> list(const std::string& store) = 0;
  virtual void remove(const std::string& store, const std::string& key) = 0;
  virtual WatchHandle watch(const std::string& store, WatchStart start = {}) = 0;

  virtual void register_consumer(const std::string& store, const std::string& consumer) = 0;
  virtual void deregister_consumer(const std::string& store, const std::string& consumer) = 0;
  virtual uint64_t mark_consumed(const std::string& store, const std::string& key, uint64_t revision,
                                 const std::string& consumer) = 0;
  virtual uint64_t gc_sweep() = 0;

  virtual uint64_t attach_udf(const std::string& store, UdfAttachment udf) = 0;
  virtual void detach_udf(const std::string& store, uint64_t id) = 0;
  virtual std::vector<UdfAttachment> list_udfs(const std::string& store) = 0;
  virtual Value call_udf(const std::string& store, const std::string& name, const Value& args,
                         const std::optional<std::string>& key = std::nullopt) = 0;
  virtual std::map<uint64_t, uint64_t> udf_faults(const std::string& store) = 0;

  virtual std::vector<std::string> store_names() = 0;
  virtual Value dump_store(const std::string& store) = 0;
};

class LogDx {
 public:
  virtual ~LogDx() = default;

  virtual void create_stream(StreamDef def) = 0;
  virtual std::optional<StreamDef> get_stream(const std::string& stream) = 0;
  virtual void apply_policy(AccessPolicy policy) = 0;
  virtual uint64_t append(const std::string& stream, Value record) = 0;
  virtual std::vector<Value> query(const std::string& stream, const Pipeline& ops, uint64_t since_seq = 0) = 0;
  virtual uint64_t last_seq(const std::string& stream) = 0;
  virtual TailHandle tail(const std::string& stream, uint64_t from_seq = 0, Pipeline ops = {}) = 0;
  virtual std::vector<std::string> stream_names() = 0;
};

// --- in-process --------------------------------------------------------------

class LocalObjectDx : public ObjectDx {
 public:
  LocalObjectDx(ObjectEngine& engine, std::string role) : engine_(engine), role_(std::move(role)) {}

  uint64_t register_schema(ObjectSchema schema) override { return engine_.register_schema(role_, std::move(schema)); }
  std::optional<ObjectSchema> get_schema(const std::string& store) override { return engine_.get_schema(store); }
  void apply_policy(AccessPolicy policy) override { engine_.apply_policy(role_, std::move(policy)); }

  StateObject put(const std::string& store, const std::string& key, Value attributes,
                  std::optional<uint64_t> expected_revision = std::nullopt) override {
    return engine_.put(role_, store, key, std::move(attributes), expected_revision);
  }
  StateObject get(const std::string& store, const std::string& key) override { return engine_.get(role_, store, key); }
  std::vector<StateObject> list(const std::string& store) override { return engine_.list(role_, store); }
  void remove(const std::string& store, const std::string& key) override { engine_.remove(role_, store, key); }
  WatchHandle watch(const std::string& store, WatchStart start = {}) override {
    return engine_.watch(role_, store, start);
  }

  void register_consumer(const std::string& store, const std::string& consumer) override {
    engine_.register_consumer(role_, store, consumer);
  }
  void deregister_consumer(const std::string& store, const std::string& consumer) override {
    engine_.deregister_consumer(role_, store, consumer);
  }
  uint64_t mark_consumed(const std::string& store, const std::string& key, uint64_t revision,
                         const std::string& consumer) override {
    return engine_.mark_consumed(role_, store, key, revision, consumer);
  }
  uint64_t gc_sweep() override { return engine_.gc_sweep(); }

  uint64_t attach_udf(const std::string& store, UdfAttachment udf) override {
    return engine_.attach_udf(role_, store, std::move(udf));
  }
  void detach_udf(const std::string& store, uint64_t id) override { engine_.detach_udf(role_, store, id); }
  std::vector<UdfAttachment> list_udfs(const std::string& store) override { return engine_.list_udfs(store); }
  Value call_udf(const std::string& store, const std::string& name, const Value& args,
                 const std::optional<std::string>& key = std::nullopt) override {
    return engine_.call_udf(role_, store, name, args, key);
  }
  std::map<uint64_t, uint64_t> udf_faults(const std::string& store) override { return engine_.udf_faults(store); }

  std::vector<std::string> store_names() override { return engine_.store_names(); }
  Value dump_store(const std::string& store) override { return engine_.dump_store(store); }

  ObjectEngine& engine() { return engine_; }
  const std::string& role() const { return role_; }

 private:
  ObjectEngine& engine_;
  std::string role_;
};

class LocalLogDx : public LogDx {
 public:
  LocalLogDx(LogEngine& engine, std::string role) : engine_(engine), role_(std::move(role)) {}

  void create_stream(StreamDef def) override { engine_.create_stream(role_, std::move(def)); }
  std::optional<StreamDef> get_stream(const std::string& stream) override { return engine_.get_stream(stream); }
  void apply_policy(AccessPolicy policy) override { engine_.apply_policy(role_, std::move(policy)); }
  uint64_t append(const std::string& stream, Value record) override {
    return engine_.append(role_, stream, std::move(record));
  }
  std::vector<Value> query(const std::string& stream, const Pipeline& ops, uint64_t since_seq = 0) override {
    return engine_.query(role_, stream, ops, since_seq);
  }
  uint64_t last_seq(const std::string& stream) override { return engine_.last_seq(stream); }
  TailHandle tail(const std::string& stream, uint64_t from_seq = 0, Pipeline ops = {}) override {
    return engine_.tail(role_, stream, from_seq, std::move(ops));
  }
  std::vector<std::string> stream_names() override { return engine_.stream_names(); }

  LogEngine& engine() { return engine_; }

 private:
  LogEngine& engine_;
  std::string role_;
};

// --- networked ----------------------------------------------------------------

namespace dxdetail {

// Pumps raw push frames into a typed channel; exits when the source closes.
template <typename T, typename Convert>
std::thread pump_stream(std::shared_ptr<Channel<Value>> frames, std::shared_ptr<Channel<T>> out, Convert conv) {
  return std::thread([frames = std::move(frames), out = std::move(out), conv = std::move(conv)] {
    while (auto frame = frames->pop()) {
      try {
        out->push(conv(*frame));
      } catch (const std::exception&) {
        break;  // malformed push; treat like a broken stream
      }
    }
    out->close();
  });
}

}  // namespace dxdetail

class RemoteObjectDx : public ObjectDx {
 public:
  RemoteObjectDx(std::shared_ptr<WireClient> wire, std::string role) : wire_(std::move(wire)), role_(std::move(role)) {}

  RemoteObjectDx(const std::string& endpoint, std::string role)
      : RemoteObjectDx(std::make_shared<WireClient>(endpoint), std::move(role)) {}

  ~RemoteObjectDx() override {
    wire_->close();
    std::lock_guard lk(mu_);
    for (auto& t : pumps_) {
      if (t.joinable()) t.join();
    }
  }

  uint64_t register_schema(ObjectSchema schema) override {
    return call("object.schema", schema.store_name, "", schema_to_json(schema)).at("version").get<uint64_t>();
  }

  std::optional<ObjectSchema> get_schema(const std::string& store) override {
    Value v = call("object.get_schema", store, "", {});
    if (v.is_null() || v.empty()) return std::nullopt;
    return schema_from_json(v);
  }

  void apply_policy(AccessPolicy policy) override { call("object.policy", "", "", access_policy_to_json(policy)); }

  StateObject put(const std::string& store, const std::string& key, Value attributes,
                  std::optional<uint64_t> expected_revision = std::nullopt) override {
    Value body = Value{{"attributes", std::move(attributes)}};
    if (expected_revision) body["expected_revision"] = *expected_revision;
    return state_object_from_json(call("object.put", store, key, std::move(body)));
  }

  StateObject get(const std::string& store, const std::string& key) override {
    return state_object_from_json(call("object.get", store, key, {}));
  }

  std::vector<StateObject> list(const std::string& store) override {
    Value v = call("object.list", store, "", {});
    std::vector<StateObject> out;
    for (const auto& o : v.at("objects")) out.push_back(state_object_from_json(o));
    return out;
  }

  void remove(const std::string& store, const std::string& key) override { call("object.delete", store, key, {}); }

  WatchHandle watch(const std::string& store, WatchStart start = {}) override {
    Value body = Value{{"live_only", start.live_only}, {"from_revision", start.from_revision}};
    auto stream = wire_->stream("object.watch", store, "", std::move(body), role_);
    auto events = std::make_shared<WatchQueue>();
    adopt(dxdetail::pump_stream<WatchEvent>(stream.frames, events,
                                            [](const Value& v) { return watch_event_from_json(v); }));
    auto wire = wire_;
    uint64_t id = stream.id;
    return WatchHandle{events, [wire, id] { wire->cancel(id); }};
  }

  void register_consumer(const std::string& store, const std::string& consumer) override {
    call("object.register_consumer", store, "", Value{{"consumer", consumer}});
  }

  void deregister_consumer(const std::string& store, const std::string& consumer) override {
    call("object.deregister_consumer", store, "", Value{{"consumer", consumer}});
  }

  uint64_t mark_consumed(const std::string& store, const std::string& key, uint64_t revision,
                         const std::string& consumer) override {
    return call("object.mark_consumed", store, key, Value{{"revision", revision}, {"consumer", consumer}})
        .at("remaining")
        .get<uint64_t>();
  }

  uint64_t gc_sweep() override { return call("object.gc", "", "", {}).at("collected").get<uint64_t>(); }

  uint64_t attach_udf(const std::string& store, UdfAttachment udf) override {
    return call("object.attach_udf", store, "", udf_attachment_to_json(udf)).at("id").get<uint64_t>();
  }

  void detach_udf(const std::string& store, uint64_t id) override {
    call("object.detach_udf", store, "", Value{{"id", id}});
  }

  std::vector<UdfAttachment> list_udfs(const std::string& store) override {
    Value v = call("object.list_udfs", store, "", {});
    std::vector<UdfAttachment> out;
    for (const auto& u : v.at("udfs")) out.push_back(udf_attachment_from_json(u));
    return out;
  }

  Value call_udf(const std::string& store, const std::string& name, const Value& args,
                 const std::optional<std::string>& key = std::nullopt) override {
    Value body = Value{{"name", name}, {"args", args}};
    return call("object.call_udf", store, key.value_or(""), std::move(body)).at("result");
  }

  std::map<uint64_t, uint64_t> udf_faults(const std::string& store) override {
    Value v = call("object.udf_faults", store, "", {});
    std::map<uint64_t, uint64_t> out;
    for (auto it = v.at("faults").begin(); it != v.at("faults").end(); ++it)
      out[std::stoull(it.key())] = it.value().get<uint64_t>();
    return out;
  }

  std::vector<std::string> store_names() override {
    return call("object.stores", "", "", {}).at("stores").get<std::vector<std::string>>();
  }

  Value dump_store(const std::string& store) override { return call("object.dump", store, "", {}); }

  WireClient& wire() { return *wire_; }

 private:
  Value call(const std::string& verb, const std::string& store, const std::string& key, Value body) {
    return wire_->request(verb, store, key, std::move(body), role_);
  }

  void adopt(std::thread t) {
    std::lock_guard lk(mu_);
    pumps_.push_back(std::move(t));
  }

  std::shared_ptr<WireClient> wire_;
  std::string role_;
  std::mutex mu_;
  std::vector<std::thread> pumps_;
};

class RemoteLogDx : public LogDx {
 public:
  RemoteLogDx(std::shared_ptr<WireClient> wire, std::string role) : wire_(std::move(wire)), role_(std::move(role)) {}

  RemoteLogDx(const std::string& endpoint, std::string role)
      : RemoteLogDx(std::make_shared<WireClient>(endpoint), std::move(role)) {}

  ~RemoteLogDx() override {
    wire_->close();
    std::lock_guard lk(mu_);
    for (auto& t : pumps_) {
      if (t.joinable()) t.join();
    }
  }

  void create_stream(StreamDef def) override { call("log.create_stream", def.name, stream_def_to_json(def)); }

  std::optional<StreamDef> get_stream(const std::string& stream) override {
    Value v = call("log.get_stream", stream, {});
    if (v.is_null()) return std::nullopt;
    return stream_def_from_json(v);
  }

  void apply_policy(AccessPolicy policy) override { call("log.policy", "", access_policy_to_json(policy)); }

  uint64_t append(const std::string& stream, Value record) override {
    return call("log.append", stream, Value{{"record", std::move(record)}}).at("seq").get<uint64_t>();
  }

  std::vector<Value> query(const std::string& stream, const Pipeline& ops, uint64_t since_seq = 0) override {
    Value body = Value{{"ops", pipeline_to_json(ops)}, {"since_seq", since_seq}};
    Value v = call("log.query", stream, std::move(body));
    return v.at("records").get<std::vector<Value>>();
  }

  uint64_t last_seq(const std::string& stream) override {
    return call("log.last_seq", stream, {}).at("seq").get<uint64_t>();
  }

  TailHandle tail(const std::string& stream, uint64_t from_seq = 0, Pipeline ops = {}) override {
    Value body = Value{{"from_seq", from_seq}, {"ops", pipeline_to_json(ops)}};
    auto s = wire_->stream("log.tail", stream, "", std::move(body), role_);
    auto records = std::make_shared<Channel<LogRecord>>();
    adopt(dxdetail::pump_stream<LogRecord>(s.frames, records, [](const Value& v) { return log_record_from_json(v); }));
    auto wire = wire_;
    uint64_t id = s.id;
    return TailHandle{records, [wire, id] { wire->cancel(id); }};
  }

  std::vector<std::string> stream_names() override {
    return call("log.streams", "", {}).at("streams").get<std::vector<std::string>>();
  }

 private:
  Value call(const std::string& verb, const std::string& stream, Value body) {
    return wire_->request(verb, stream, "", std::move(body), role_);
  }

  void adopt(std::thread t) {
    std::lock_guard lk(mu_);
    pumps_.push_back(std::move(t));
  }

  std::shared_ptr<WireClient> wire_;
  std::string role_;
  std::mutex mu_;
  std::vector<std::thread> pumps_;
};

// Builds a client for "local" (given engines) or an endpoint string.
inline std::unique_ptr<ObjectDx> connect_object_dx(const std::string& endpoint, const std::string& role,
                                                   ObjectEngine* local = nullptr) {
  if (endpoint == "local") {
    if (!local) throw DxError(ErrorCode::Transport, "no in-process object exchange available");
    return std::make_unique<LocalObjectDx>(*local, role);
  }
  return std::make_unique<RemoteObjectDx>(endpoint, role);
}

inline std::unique_ptr<LogDx> connect_log_dx(const std::string& endpoint, const std::string& role,
                                             LogEngine* local = nullptr) {
  if (endpoint == "local") {
    if (!local) throw DxError(ErrorCode::Transport, "no in-process log exchange available");
    return std::make_unique<LocalLogDx>(*local, role);
  }
  return std::make_unique<RemoteLogDx>(endpoint, role);
}

}  // namespace knactor
