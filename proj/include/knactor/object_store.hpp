#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "knactor/access.hpp"
#include "knactor/channel.hpp"
#include "knactor/errors.hpp"
#include "knactor/expr.hpp"
#include "knactor/schema.hpp"
#include "knactor/trace.hpp"
#include "knactor/value.hpp"

namespace knactor {

struct StateObject {
  std::string store_name;
  std::string key;
  Value attributes = Value::object();
  uint64_t revision = 0;
  std::set<std::string> pending_consumers;
};

inline Value state_object_to_json(const StateObject& o) {
  Value v = Value::object();
  v["store"] = o.store_name;
  v["key"] = o.key;
  v["attributes"] = o.attributes;
  v["revision"] = o.revision;
  v["pending_consumers"] = o.pending_consumers;
  return v;
}

inline StateObject state_object_from_json(const Value& v) {
  StateObject o;
  o.store_name = v.at("store").get<std::string>();
  o.key = v.at("key").get<std::string>();
  o.attributes = v.at("attributes");
  o.revision = v.at("revision").get<uint64_t>();
  if (v.contains("pending_consumers"))
    o.pending_consumers = v.at("pending_consumers").get<std::set<std::string>>();
  return o;
}

enum class EventKind { Created, Updated, Deleted };

inline std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::Created: return "created";
    case EventKind::Updated: return "updated";
    case EventKind::Deleted: return "deleted";
  }
  return "updated";
}

inline std::optional<EventKind> event_kind_from_string(std::string_view s) {
  if (s == "created") return EventKind::Created;
  if (s == "updated") return EventKind::Updated;
  if (s == "deleted") return EventKind::Deleted;
  return std::nullopt;
}

struct WatchEvent {
  EventKind kind = EventKind::Updated;
  StateObject object;
  uint64_t revision = 0;
};

inline Value watch_event_to_json(const WatchEvent& e) {
  Value v = Value::object();
  v["kind"] = std::string(to_string(e.kind));
  v["object"] = state_object_to_json(e.object);
  v["revision"] = e.revision;
  return v;
}

inline WatchEvent watch_event_from_json(const Value& v) {
  WatchEvent e;
  auto k = event_kind_from_string(v.at("kind").get<std::string>());
  if (!k) throw DxError(ErrorCode::InvalidRequest, "bad event kind");
  e.kind = *k;
  e.object = state_object_from_json(v.at("object"));
  e.revision = v.at("revision").get<uint64_t>();
  return e;
}

// Where to start a watch: replay everything after a revision, or live only
// (events committed after the call).
struct WatchStart {
  bool live_only = false;
  uint64_t from_revision = 0;

  static WatchStart from(uint64_t rev) { return WatchStart{false, rev}; }
  static WatchStart live() { return WatchStart{true, 0}; }
};

using WatchQueue = Channel<WatchEvent>;

struct WatchHandle {
  std::shared_ptr<WatchQueue> events;
  std::function<void()> cancel;
};

struct UdfDef {
  std::string name;
  std::vector<std::string> params;  // field paths the body may reference
  ExprPtr body;
};

// A write-attached or callable UDF registered on a store. Write-attached
// UDFs run inside the commit of matching puts; their output lands either on
// the written object itself or on a co-hosted destination store (push-down).
struct UdfAttachment {
  uint64_t id = 0;
  UdfDef def;
  bool callable = false;
  std::string trigger_field;  // on_write trigger; empty = any write
  ExprPtr guard;              // optional; false means no output
  std::string target_store;   // empty = write back into the triggering object
  std::string target_field;
  bool skip_if_unchanged = true;
};

inline Value udf_attachment_to_json(const UdfAttachment& u) {
  Value v = Value::object();
  v["id"] = u.id;
  v["name"] = u.def.name;
  v["params"] = u.def.params;
  v["body"] = to_string(u.def.body);
  v["callable"] = u.callable;
  v["trigger"] = u.trigger_field;
  if (u.guard) v["guard"] = to_string(u.guard);
  v["target_store"] = u.target_store;
  v["target_field"] = u.target_field;
  v["skip_if_unchanged"] = u.skip_if_unchanged;
  return v;
}

inline UdfAttachment udf_attachment_from_json(const Value& v) {
  UdfAttachment u;
  if (v.contains("id")) u.id = v.at("id").get<uint64_t>();
  u.def.name = v.at("name").get<std::string>();
  if (v.contains("params")) u.def.params = v.at("params").get<std::vector<std::string>>();
  u.def.body = parse_expr(v.at("body").get<std::string>());
  if (v.contains("callable")) u.callable = v.at("callable").get<bool>();
  if (v.contains("trigger")) u.trigger_field = v.at("trigger").get<std::string>();
  if (v.contains("guard")) u.guard = parse_expr(v.at("guard").get<std::string>());
  if (v.contains("target_store")) u.target_store = v.at("target_store").get<std::string>();
  if (v.contains("target_field")) u.target_field = v.at("target_field").get<std::string>();
  if (v.contains("skip_if_unchanged")) u.skip_if_unchanged = v.at("skip_if_unchanged").get<bool>();
  return u;
}

struct ObjectEngineOptions {
  std::string admin_role = "admin";
  bool wal_enabled = false;
  std::string wal_path;
  bool wal_fsync = true;
  TraceSink* trace = nullptr;
};

// The Object data exchange engine: schema-registered attribute-value stores
// with CRUD/list/watch, field-level RBAC, consumer reference counting, and
// write-attached UDFs. One engine hosts many stores; per-store operations
// serialize on the store mutex.
class ObjectEngine {
 public:
  explicit ObjectEngine(ObjectEngineOptions opts = {}) : opts_(std::move(opts)), rbac_(opts_.admin_role) {
    if (opts_.wal_enabled) {
      replay_wal();
      wal_fd_ = ::open(opts_.wal_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
      if (wal_fd_ < 0) throw DxError(ErrorCode::Internal, "cannot open wal at " + opts_.wal_path);
    }
  }

  ~ObjectEngine() {
    shutdown();
    if (wal_fd_ >= 0) ::close(wal_fd_);
  }

  ObjectEngine(const ObjectEngine&) = delete;
  ObjectEngine& operator=(const ObjectEngine&) = delete;

  const std::string& admin_role() const { return opts_.admin_role; }
  TraceSink* trace() const { return opts_.trace; }
  void set_trace(TraceSink* t) { opts_.trace = t; }

  // Closes every watch stream; used on server shutdown.
  void shutdown() {
    std::unique_lock lk(stores_mu_);
    for (auto& [name, st] : stores_) {
      std::lock_guard slk(st->mu);
      for (auto& w : st->watchers) w->queue->close();
      st->watchers.clear();
    }
  }

  // --- schemas and policies --------------------------------------------------

  uint64_t register_schema(const std::string& role, ObjectSchema schema) {
    check_schema(schema);
    std::unique_lock lk(stores_mu_);
    auto it = stores_.find(schema.store_name);
    if (it == stores_.end() && !check_verb(role, schema.store_name, Verb::Create))
      throw DxError(ErrorCode::AccessDenied, role + " may not create store " + schema.store_name);
    if (it != stores_.end() && !check_verb(role, schema.store_name, Verb::Update) &&
        !check_verb(role, schema.store_name, Verb::Create))
      throw DxError(ErrorCode::AccessDenied, role + " may not update schema of " + schema.store_name);
    std::shared_ptr<Store> st;
    if (it == stores_.end()) {
      st = std::make_shared<Store>();
      stores_[schema.store_name] = st;
    } else {
      st = it->second;
    }
    lk.unlock();

    std::lock_guard slk(st->mu);
    uint64_t current = st->schema_version;
    uint64_t assigned;
    if (schema.version == 0) {
      assigned = current + 1;
    } else if (schema.version <= current) {
      throw DxError(ErrorCode::Conflict, schema.store_name + ": version " + std::to_string(schema.version) +
                                             " does not exceed current " + std::to_string(current));
    } else {
      assigned = schema.version;
    }
    schema.version = assigned;
    // Existing objects are not re-validated; the new schema governs
    // subsequent writes only.
    st->schema = schema;
    st->schema_version = assigned;
    wal_append(Value{{"op", "schema"}, {"schema", schema_to_json(schema)}});
    return assigned;
  }

  std::optional<ObjectSchema> get_schema(const std::string& store) const {
    auto st = find_store(store);
    if (!st) return std::nullopt;
    std::lock_guard slk(st->mu);
    if (st->schema_version == 0) return std::nullopt;
    return st->schema;
  }

  void apply_policy(const std::string& role, AccessPolicy policy) {
    if (role != opts_.admin_role)
      throw DxError(ErrorCode::AccessDenied, "policy changes require the '" + opts_.admin_role + "' role");
    {
      std::lock_guard lk(rbac_mu_);
      rbac_.add(policy);
    }
    wal_append(Value{{"op", "policy"}, {"policy", access_policy_to_json(policy)}});
  }

  // --- consumers (reference-counted state retention) ---------------------------

  void register_consumer(const std::string& role, const std::string& store, const std::string& consumer) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Watch);
    std::lock_guard slk(st->mu);
    st->consumers.insert(consumer);
    wal_append(Value{{"op", "consumer_add"}, {"store", store}, {"id", consumer}});
  }

  // Deregistration drops the consumer from every pending set (refcounts
  // adjust) but never flips objects to GC-eligible by itself.
  void deregister_consumer(const std::string& role, const std::string& store, const std::string& consumer) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Watch);
    std::lock_guard slk(st->mu);
    st->consumers.erase(consumer);
    for (auto& [k, rec] : st->objects) rec.pending.erase(consumer);
    wal_append(Value{{"op", "consumer_del"}, {"store", store}, {"id", consumer}});
  }

  uint64_t mark_consumed(const std::string& role, const std::string& store, const std::string& key,
                         uint64_t revision, const std::string& consumer) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Watch);
    std::lock_guard slk(st->mu);
    if (!st->consumers.count(consumer))
      throw DxError(ErrorCode::NotFound, "consumer '" + consumer + "' not registered for " + store);
    auto it = st->objects.find(key);
    if (it == st->objects.end()) throw DxError(ErrorCode::NotFound, store + "/" + key);
    ObjectRec& rec = it->second;
    // A mark against a superseded revision refers to state that no longer
    // exists; the current pending set is left untouched.
    if (revision == rec.revision) {
      rec.pending.erase(consumer);
      if (rec.pending.empty() && st->schema.retention == RetentionPolicy::Collect) rec.gc_eligible = true;
    }
    return rec.pending.size();
  }

  // Removes every object marked unused. Deleted events are emitted like any
  // other delete.
  uint64_t gc_sweep() {
    std::vector<std::pair<std::string, std::string>> victims;
    {
      std::shared_lock lk(stores_mu_);
      for (auto& [name, st] : stores_) {
        std::lock_guard slk(st->mu);
        for (auto& [key, rec] : st->objects) {
          if (rec.gc_eligible && rec.pending.empty()) victims.emplace_back(name, key);
        }
      }
    }
    uint64_t collected = 0;
    for (auto& [store, key] : victims) {
      try {
        remove(opts_.admin_role, store, key);
        ++collected;
      } catch (const DxError&) {
        // Raced with a concurrent delete; nothing left to collect.
      }
    }
    return collected;
  }

  // --- CRUD / watch -----------------------------------------------------------

  StateObject put(const std::string& role, const std::string& store, const std::string& key, Value attributes,
                  std::optional<uint64_t> expected_revision = std::nullopt) {
    StateObject snapshot = put_checked(role, store, key, std::move(attributes), expected_revision,
                                       /*internal=*/false, /*skip_if_unchanged=*/false, 0);
    return snapshot;
  }

  StateObject get(const std::string& role, const std::string& store, const std::string& key) const {
    auto st = require_store(store);
    require_verb(role, store, Verb::Get);
    auto grants = read_grants(role, store, Verb::Get);
    std::lock_guard slk(st->mu);
    auto it = st->objects.find(key);
    if (it == st->objects.end()) throw DxError(ErrorCode::NotFound, store + "/" + key);
    return snapshot_of(store, key, it->second, grants);
  }

  std::vector<StateObject> list(const std::string& role, const std::string& store) const {
    auto st = require_store(store);
    require_verb(role, store, Verb::List);
    auto grants = read_grants(role, store, Verb::List);
    std::lock_guard slk(st->mu);
    std::vector<StateObject> out;
    out.reserve(st->objects.size());
    for (const auto& [key, rec] : st->objects) out.push_back(snapshot_of(store, key, rec, grants));
    return out;
  }

  void remove(const std::string& role, const std::string& store, const std::string& key) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Delete);
    std::lock_guard slk(st->mu);
    auto it = st->objects.find(key);
    if (it == st->objects.end()) throw DxError(ErrorCode::NotFound, store + "/" + key);
    uint64_t dead_rev = it->second.revision + 1;
    WatchEvent ev;
    ev.kind = EventKind::Deleted;
    ev.object = snapshot_of(store, key, it->second, {"*"});
    ev.object.revision = dead_rev;
    ev.revision = dead_rev;
    st->objects.erase(it);
    st->tombstones[key] = dead_rev;
    wal_append(Value{{"op", "delete"}, {"store", store}, {"key", key}, {"rev", dead_rev}});
    append_event(*st, std::move(ev));
  }

  WatchHandle watch(const std::string& role, const std::string& store, WatchStart start = {}) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Watch);
    auto grants = read_grants(role, store, Verb::Watch);
    auto watcher = std::make_shared<Watcher>();
    watcher->queue = std::make_shared<WatchQueue>();
    watcher->grants = grants;
    std::lock_guard slk(st->mu);
    if (!start.live_only) {
      for (const auto& ev : st->history) {
        if (ev.revision > start.from_revision) watcher->queue->push(project_event(ev, grants));
      }
    }
    st->watchers.push_back(watcher);
    std::weak_ptr<Store> wst = st;
    std::weak_ptr<Watcher> ww = watcher;
    auto cancel = [wst, ww] {
      auto s = wst.lock();
      auto w = ww.lock();
      if (w) w->queue->close();
      if (s && w) {
        std::lock_guard g(s->mu);
        std::erase(s->watchers, w);
      }
    };
    return WatchHandle{watcher->queue, cancel};
  }

  // --- UDFs -------------------------------------------------------------------

  uint64_t attach_udf(const std::string& role, const std::string& store, UdfAttachment udf) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Update);
    if (!udf.target_store.empty()) {
      require_store(udf.target_store);
      require_verb(role, udf.target_store, Verb::Update);
    }
    validate_udf(udf);
    std::lock_guard slk(st->mu);
    udf.id = ++st->next_udf_id;
    wal_append(Value{{"op", "udf"}, {"store", store}, {"attachment", udf_attachment_to_json(udf)}});
    st->udfs.push_back(std::move(udf));
    return st->udfs.back().id;
  }

  void detach_udf(const std::string& role, const std::string& store, uint64_t id) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Update);
    std::lock_guard slk(st->mu);
    auto before = st->udfs.size();
    std::erase_if(st->udfs, [&](const UdfAttachment& u) { return u.id == id; });
    if (st->udfs.size() == before) throw DxError(ErrorCode::NotFound, "udf " + std::to_string(id));
    wal_append(Value{{"op", "udf_detach"}, {"store", store}, {"id", id}});
  }

  std::vector<UdfAttachment> list_udfs(const std::string& store) const {
    auto st = require_store(store);
    std::lock_guard slk(st->mu);
    return st->udfs;
  }

  // Runs a callable UDF near the data: params bind from the object at `key`
  // (when given), overridden by explicit args.
  Value call_udf(const std::string& role, const std::string& store, const std::string& name, const Value& args,
                 const std::optional<std::string>& key) {
    auto st = require_store(store);
    require_verb(role, store, Verb::Get);
    UdfAttachment udf;
    {
      std::lock_guard slk(st->mu);
      auto it = std::find_if(st->udfs.begin(), st->udfs.end(),
                             [&](const UdfAttachment& u) { return u.callable && u.def.name == name; });
      if (it == st->udfs.end()) throw DxError(ErrorCode::NotFound, "callable udf '" + name + "'");
      udf = *it;
    }
    Value bindings = Value::object();
    if (key) {
      std::lock_guard slk(st->mu);
      auto it = st->objects.find(*key);
      if (it == st->objects.end()) throw DxError(ErrorCode::NotFound, store + "/" + *key);
      bindings = it->second.attributes;
    }
    if (args.is_object()) {
      for (auto it = args.begin(); it != args.end(); ++it) bindings[it.key()] = it.value();
    }
    Value param_env = Value::object();
    for (const auto& p : udf.def.params) {
      const Value* v = paths::get(bindings, p);
      if (!v) throw DxError(ErrorCode::MissingBinding, "param '" + p + "' not bound");
      paths::set(param_env, p, *v);
    }
    EvalEnv env;
    env.root = &param_env;
    const std::string* k = nullptr;
    if (key) k = &*key;
    env.key = k;
    return eval_expr(udf.def.body, env);
  }

  // Per-attachment counts of runtime evaluation failures (missing bindings,
  // schema violations of UDF output). Failures skip the output, never the put.
  std::map<uint64_t, uint64_t> udf_faults(const std::string& store) const {
    auto st = require_store(store);
    std::lock_guard slk(st->mu);
    return st->udf_faults;
  }

  std::vector<std::string> store_names() const {
    std::shared_lock lk(stores_mu_);
    std::vector<std::string> names;
    for (const auto& [n, _] : stores_) names.push_back(n);
    return names;
  }

  // Full unprojected dump of a store, keyed by object key. Canonical form
  // used by equivalence checks and debugging.
  Value dump_store(const std::string& store) const {
    auto st = require_store(store);
    std::lock_guard slk(st->mu);
    Value out = Value::object();
    for (const auto& [key, rec] : st->objects) {
      out[key] = Value{{"attributes", rec.attributes}, {"revision", rec.revision}};
    }
    return out;
  }

 private:
  struct ObjectRec {
    Value attributes = Value::object();
    uint64_t revision = 0;
    std::set<std::string> pending;
    bool gc_eligible = false;
  };

  struct Watcher {
    std::shared_ptr<WatchQueue> queue;
    std::vector<std::string> grants;
  };

  struct Store {
    mutable std::mutex mu;
    ObjectSchema schema;
    uint64_t schema_version = 0;
    std::map<std::string, ObjectRec> objects;
    std::map<std::string, uint64_t> tombstones;  // key -> delete-event revision
    std::set<std::string> consumers;
    std::vector<WatchEvent> history;
    std::vector<std::shared_ptr<Watcher>> watchers;
    std::vector<UdfAttachment> udfs;
    std::map<uint64_t, uint64_t> udf_faults;
    uint64_t next_udf_id = 0;
  };

  struct CrossWrite {
    std::string store;
    std::string field;
    Value value;
    bool skip_if_unchanged = true;
    uint64_t udf_id = 0;
    std::string source_store;
  };

  // Shared commit path for external puts, push-down writes, and replay.
  StateObject put_checked(const std::string& role, const std::string& store, const std::string& key,
                          Value attributes, std::optional<uint64_t> expected_revision, bool internal,
                          bool skip_if_unchanged, int depth) {
    if (depth > 8) throw DxError(ErrorCode::Internal, "udf write chain too deep");
    auto st = require_store(store);
    std::vector<CrossWrite> cross;
    StateObject snapshot;
    bool skipped = false;
    {
      std::lock_guard slk(st->mu);
      if (st->schema_version == 0) throw DxError(ErrorCode::InvalidState, store + ": no schema registered");
      auto it = st->objects.find(key);
      bool exists = it != st->objects.end();
      if (!internal) {
        Verb verb = exists ? Verb::Update : Verb::Create;
        require_verb(role, store, verb);
        if (verb == Verb::Update) {
          // Field-granular: an update touching any ungranted path is
          // rejected whole.
          auto grants = read_grants(role, store, Verb::Update);
          for (const auto& leaf : paths::leaves(attributes)) {
            bool ok = std::any_of(grants.begin(), grants.end(),
                                  [&](const std::string& g) { return rbac::pattern_covers(g, leaf); });
            if (!ok)
              throw DxError(ErrorCode::AccessDenied, role + " may not update field '" + leaf + "' of " + store);
          }
        }
      }
      validate_attributes(st->schema, attributes);
      uint64_t current = exists ? it->second.revision : 0;
      if (expected_revision && *expected_revision != current)
        throw DxError(ErrorCode::Conflict, store + "/" + key + ": expected revision " +
                                               std::to_string(*expected_revision) + ", at " +
                                               std::to_string(current));

      if (skip_if_unchanged && exists) {
        bool changed = false;
        for (auto at = attributes.begin(); at != attributes.end(); ++at) {
          const Value* old = paths::get(it->second.attributes, at.key());
          if (!old || *old != at.value()) {
            changed = true;
            break;
          }
        }
        if (!changed) {
          snapshot = snapshot_of(store, key, it->second, {"*"});
          skipped = true;
        }
      }

      if (!skipped) {
        // Write-attached UDFs run inside the commit, seeing the post-merge
        // object state exactly as a client-side evaluator would.
        if (!internal && !st->udfs.empty()) {
          Value merged = exists ? it->second.attributes : Value::object();
          for (auto at = attributes.begin(); at != attributes.end(); ++at) merged[at.key()] = at.value();
          if (opts_.trace && has_write_udf(*st)) opts_.trace->record(store + "/" + key, "udf_entry", steady_now_ms());
          for (const auto& udf : st->udfs) {
            if (udf.callable) continue;
            if (!udf.trigger_field.empty() && !paths::get(attributes, udf.trigger_field)) continue;
            double t0 = steady_now_ms();
            try {
              EvalEnv env;
              env.root = &merged;
              env.key = &key;
              if (udf.guard) {
                Value g = eval_expr(udf.guard, env);
                if (!g.is_boolean()) throw DxError(ErrorCode::TypeError, "udf guard not bool");
                if (!g.get<bool>()) continue;
              }
              Value out = eval_expr(udf.def.body, env);
              if (udf.target_store.empty() || udf.target_store == store) {
                Value staged = Value::object();
                paths::set(staged, udf.target_field, out);
                validate_attributes(st->schema, staged);
                for (auto sat = staged.begin(); sat != staged.end(); ++sat) {
                  attributes[sat.key()] = sat.value();
                  merged[sat.key()] = sat.value();
                }
              } else {
                cross.push_back({udf.target_store, udf.target_field, std::move(out), udf.skip_if_unchanged, udf.id,
                                 store});
              }
            } catch (const DxError&) {
              ++st->udf_faults[udf.id];
            }
            if (opts_.trace) opts_.trace->record(store + "/" + key, "udf_eval_ms", steady_now_ms() - t0);
          }
          if (opts_.trace && has_write_udf(*st)) opts_.trace->record(store + "/" + key, "udf_exit", steady_now_ms());
        }

        ObjectRec& rec = st->objects[key];
        bool created = !exists;
        Value committed = rec.attributes;
        for (auto at = attributes.begin(); at != attributes.end(); ++at) committed[at.key()] = at.value();
        uint64_t rev;
        if (exists) {
          rev = rec.revision + 1;
        } else {
          auto tomb = st->tombstones.find(key);
          rev = tomb == st->tombstones.end() ? 1 : tomb->second + 1;
        }
        wal_append(Value{{"op", "put"}, {"store", store}, {"key", key}, {"rev", rev}, {"attrs", committed}});
        rec.attributes = std::move(committed);
        rec.revision = rev;
        rec.pending = st->consumers;
        rec.gc_eligible = false;
        if (opts_.trace) opts_.trace->record(store + "/" + key, "commit", steady_now_ms());

        snapshot = snapshot_of(store, key, rec, {"*"});
        WatchEvent ev;
        ev.kind = created ? EventKind::Created : EventKind::Updated;
        ev.object = snapshot;
        ev.revision = rev;
        append_event(*st, std::move(ev));
      }
    }

    // Push-down writes to co-hosted stores happen after the source commit,
    // mirroring the source-then-destination order of a client-side
    // integrator.
    for (auto& cw : cross) {
      double t0 = steady_now_ms();
      try {
        Value attrs = Value::object();
        paths::set(attrs, cw.field, std::move(cw.value));
        put_checked(role, cw.store, key, std::move(attrs), std::nullopt, /*internal=*/true, cw.skip_if_unchanged,
                    depth + 1);
      } catch (const DxError&) {
        auto src = find_store(cw.source_store);
        if (src) {
          std::lock_guard g(src->mu);
          ++src->udf_faults[cw.udf_id];
        }
      }
      if (opts_.trace) opts_.trace->record(cw.source_store + "/" + key, "udf_write_ms", steady_now_ms() - t0);
    }

    if (!internal) {
      auto grants = read_grants(role, store, Verb::Get);
      snapshot.attributes = project_fields(snapshot.attributes, grants);
    }
    (void)skipped;
    return snapshot;
  }

  static bool has_write_udf(const Store& st) {
    return std::any_of(st.udfs.begin(), st.udfs.end(), [](const UdfAttachment& u) { return !u.callable; });
  }

  void validate_udf(const UdfAttachment& udf) const {
    if (udf.def.name.empty()) throw DxError(ErrorCode::InvalidUdf, "udf needs a name");
    if (!udf.def.body) throw DxError(ErrorCode::InvalidUdf, "udf needs a body");
    std::set<std::string> params(udf.def.params.begin(), udf.def.params.end());
    auto check_free = [&](const ExprPtr& e) {
      if (!e) return;
      for (const auto& p : collect_paths(e)) {
        bool bound = params.count(p) > 0;
        for (const auto& q : params) {
          if (rbac::pattern_covers(q, p)) bound = true;
        }
        if (!bound) throw DxError(ErrorCode::InvalidUdf, "free variable '" + p + "' in udf '" + udf.def.name + "'");
      }
    };
    check_free(udf.def.body);
    check_free(udf.guard);
    if (!udf.callable && udf.target_field.empty())
      throw DxError(ErrorCode::InvalidUdf, "write-attached udf needs a target field");
  }

  StateObject snapshot_of(const std::string& store, const std::string& key, const ObjectRec& rec,
                          const std::vector<std::string>& grants) const {
    StateObject o;
    o.store_name = store;
    o.key = key;
    o.attributes = project_fields(rec.attributes, grants);
    o.revision = rec.revision;
    o.pending_consumers = rec.pending;
    return o;
  }

  WatchEvent project_event(const WatchEvent& ev, const std::vector<std::string>& grants) const {
    WatchEvent out = ev;
    out.object.attributes = project_fields(ev.object.attributes, grants);
    return out;
  }

  // Caller holds st->mu. History keeps per-key events in revision order, so
  // replays preserve the watch ordering invariant.
  void append_event(Store& st, WatchEvent ev) {
    st.history.push_back(ev);
    for (auto& w : st.watchers) w->queue->push(project_event(ev, w->grants));
  }

  std::shared_ptr<Store> find_store(const std::string& name) const {
    std::shared_lock lk(stores_mu_);
    auto it = stores_.find(name);
    return it == stores_.end() ? nullptr : it->second;
  }

  std::shared_ptr<Store> require_store(const std::string& name) const {
    auto st = find_store(name);
    if (!st) throw DxError(ErrorCode::NotFound, "store '" + name + "'");
    return st;
  }

  bool check_verb(const std::string& role, const std::string& store, Verb verb) const {
    std::lock_guard lk(rbac_mu_);
    return rbac_.allows(role, store, verb);
  }

  void require_verb(const std::string& role, const std::string& store, Verb verb) const {
    if (!check_verb(role, store, verb))
      throw DxError(ErrorCode::AccessDenied,
                    "role '" + role + "' lacks " + std::string(to_string(verb)) + " on " + store);
  }

  std::vector<std::string> read_grants(const std::string& role, const std::string& store, Verb verb) const {
    std::lock_guard lk(rbac_mu_);
    return rbac_.granted_fields(role, store, verb);
  }

  // --- persistence -------------------------------------------------------------

  void wal_append(const Value& record) {
    if (wal_fd_ < 0 || replaying_) return;
    std::lock_guard lk(wal_mu_);
    std::string line = record.dump();
    line.push_back('\n');
    ssize_t n = ::write(wal_fd_, line.data(), line.size());
    if (n != static_cast<ssize_t>(line.size())) throw DxError(ErrorCode::Internal, "wal write failed");
    if (opts_.wal_fsync) ::fdatasync(wal_fd_);
  }

  void replay_wal() {
    std::ifstream in(opts_.wal_path);
    if (!in.good()) return;
    replaying_ = true;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      Value rec = Value::parse(line, nullptr, false);
      if (rec.is_discarded()) continue;  // torn tail write
      apply_replay(rec);
    }
    replaying_ = false;
    // Post-recovery pending sets are conservative: every registered
    // consumer is pending again, so nothing is collected too early.
    std::unique_lock lk(stores_mu_);
    for (auto& [name, st] : stores_) {
      std::lock_guard slk(st->mu);
      for (auto& [key, rec] : st->objects) {
        rec.pending = st->consumers;
        rec.gc_eligible = false;
      }
    }
  }

  void apply_replay(const Value& rec) {
    std::string op = rec.at("op").get<std::string>();
    if (op == "schema") {
      ObjectSchema s = schema_from_json(rec.at("schema"));
      std::unique_lock lk(stores_mu_);
      auto& st = stores_[s.store_name];
      if (!st) st = std::make_shared<Store>();
      st->schema = s;
      st->schema_version = s.version;
    } else if (op == "put") {
      auto st = find_store(rec.at("store").get<std::string>());
      if (!st) return;
      std::lock_guard slk(st->mu);
      ObjectRec& r = st->objects[rec.at("key").get<std::string>()];
      r.attributes = rec.at("attrs");
      r.revision = rec.at("rev").get<uint64_t>();
    } else if (op == "delete") {
      auto st = find_store(rec.at("store").get<std::string>());
      if (!st) return;
      std::lock_guard slk(st->mu);
      st->objects.erase(rec.at("key").get<std::string>());
      st->tombstones[rec.at("key").get<std::string>()] = rec.at("rev").get<uint64_t>();
    } else if (op == "consumer_add") {
      auto st = find_store(rec.at("store").get<std::string>());
      if (st) {
        std::lock_guard slk(st->mu);
        st->consumers.insert(rec.at("id").get<std::string>());
      }
    } else if (op == "consumer_del") {
      auto st = find_store(rec.at("store").get<std::string>());
      if (st) {
        std::lock_guard slk(st->mu);
        st->consumers.erase(rec.at("id").get<std::string>());
      }
    } else if (op == "policy") {
      std::lock_guard lk(rbac_mu_);
      rbac_.add(access_policy_from_json(rec.at("policy")));
    } else if (op == "udf") {
      auto st = find_store(rec.at("store").get<std::string>());
      if (st) {
        std::lock_guard slk(st->mu);
        UdfAttachment u = udf_attachment_from_json(rec.at("attachment"));
        st->next_udf_id = std::max(st->next_udf_id, u.id);
        st->udfs.push_back(std::move(u));
      }
    } else if (op == "udf_detach") {
      auto st = find_store(rec.at("store").get<std::string>());
      if (st) {
        std::lock_guard slk(st->mu);
        uint64_t id = rec.at("id").get<uint64_t>();
        std::erase_if(st->udfs, [&](const UdfAttachment& u) { return u.id == id; });
      }
    }
  }

  ObjectEngineOptions opts_;
  mutable std::shared_mutex stores_mu_;
  std::map<std::string, std::shared_ptr<Store>> stores_;
  mutable std::mutex rbac_mu_;
  RbacTable rbac_;
  std::mutex wal_mu_;
  int wal_fd_ = -1;
  bool replaying_ = false;
};

}  // namespace knactor
