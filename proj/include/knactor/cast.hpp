#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "knactor/dx_client.hpp"
#include "knactor/dxg.hpp"
#include "knactor/trace.hpp"

namespace knactor {

enum class CastMode { ClientEval, Pushdown };

inline std::string_view to_string(CastMode m) { return m == CastMode::Pushdown ? "pushdown" : "client_eval"; }

struct CastConfig {
  DxgSpec dxg;
  CastMode mode = CastMode::ClientEval;
  std::string consumer_id = "cast";
  int conflict_retries = 5;   // bounded; a re-read happens between attempts
  uint64_t settle_ms = 150;   // quiesce: how long the loop must stay idle
  TraceSink* trace = nullptr;
};

struct CastEdgeMetrics {
  uint64_t triggers = 0;
  uint64_t writes = 0;
  uint64_t skipped = 0;  // no-change suppressions and policy drops
  uint64_t faults = 0;
  bool pushed_down = false;
  std::string last_error;

  Value to_json() const {
    Value v = Value{{"triggers", triggers}, {"writes", writes}, {"skipped", skipped}, {"faults", faults}};
    if (pushed_down) v["pushed_down"] = true;
    if (!last_error.empty()) v["last_error"] = last_error;
    return v;
  }
};

// One write-attached UDF produced from an edge or policy, plus where to host it.
struct CompiledUdf {
  std::string name;       // edge/policy name it came from
  std::string host_node;  // node whose store hosts the attachment
  UdfAttachment udf;
};

namespace castdetail {

inline std::set<std::string> expr_paths(const ExprPtr& e) {
  std::set<std::string> out;
  if (e) {
    for (const auto& p : collect_paths(e)) out.insert(p);
  }
  return out;
}

// Nodes whose schema resolves every path the policy touches; the policy
// fires on triggers from exactly these nodes.
inline std::vector<std::string> policy_source_nodes(const DxgSpec& spec, const Policy& p,
                                                    const std::map<std::string, ObjectSchema>& schemas_by_node) {
  std::set<std::string> paths = expr_paths(p.condition);
  for (const auto& q : expr_paths(p.value)) paths.insert(q);
  std::vector<std::string> out;
  for (const auto& n : spec.nodes) {
    auto it = schemas_by_node.find(n.name);
    if (it == schemas_by_node.end()) continue;
    bool all = std::all_of(paths.begin(), paths.end(),
                           [&](const std::string& q) { return it->second.find_path(q) != nullptr; });
    if (all && !paths.empty()) out.push_back(n.name);
  }
  return out;
}

}  // namespace castdetail

// Compiles the co-located subset of a DXG into store-side UDFs, in document
// order (edges, then policies) so destination revision sequences match
// client-side evaluation exactly. Whole-object and aggregating edges, and
// edges subject to a drop policy, are left for client evaluation.
inline std::vector<CompiledUdf> pushdown_compile(const DxgSpec& spec,
                                                 const std::map<std::string, ObjectSchema>& schemas_by_node) {
  std::set<std::string> droppable;
  for (const auto& p : spec.policies) {
    if (p.is_drop()) droppable.insert(p.drop_edge);
  }
  auto colocated = [&](const std::string& a, const std::string& b) {
    const StoreRef* na = spec.node(a);
    const StoreRef* nb = spec.node(b);
    return na && nb && na->dx == nb->dx && na->kind == DxKind::Object && nb->kind == DxKind::Object;
  };

  std::vector<CompiledUdf> out;
  for (const auto& e : spec.edges) {
    ExprPtr body = edge_expr(e);
    if (!body || e.aggregating) continue;           // whole-object / aggregate stay client-side
    if (droppable.count(e.name)) continue;          // drop policies cannot be pushed down
    if (!colocated(e.from_node, e.to_node)) continue;
    CompiledUdf c;
    c.name = e.name;
    c.host_node = e.from_node;
    c.udf.def.name = spec.name + ":" + e.name;
    std::set<std::string> params = castdetail::expr_paths(body);
    for (const auto& p : castdetail::expr_paths(e.when)) params.insert(p);
    c.udf.def.params.assign(params.begin(), params.end());
    c.udf.def.body = body;
    c.udf.guard = e.when;
    c.udf.target_store = spec.node(e.to_node)->store;
    c.udf.target_field = e.to_field;
    c.udf.skip_if_unchanged = true;
    out.push_back(std::move(c));
  }
  for (const auto& p : spec.policies) {
    if (p.is_drop()) continue;
    for (const auto& node : castdetail::policy_source_nodes(spec, p, schemas_by_node)) {
      if (!colocated(node, p.set_node)) continue;
      CompiledUdf c;
      c.name = p.name;
      c.host_node = node;
      c.udf.def.name = spec.name + ":" + p.name + "@" + node;
      std::set<std::string> params = castdetail::expr_paths(p.value);
      for (const auto& q : castdetail::expr_paths(p.condition)) params.insert(q);
      c.udf.def.params.assign(params.begin(), params.end());
      c.udf.def.body = p.value;
      c.udf.guard = p.condition;
      c.udf.target_store = spec.node(p.set_node)->store;
      c.udf.target_field = p.set_field;
      c.udf.skip_if_unchanged = true;
      out.push_back(std::move(c));
    }
  }
  return out;
}

// The Cast integrator: one logical execution loop per DXG. Watches source
// stores, evaluates edges then policies per committed revision, writes
// destinations with no-change suppression (the cycle-breaking rule), and
// marks revisions consumed. Reconfiguration is serialized with the loop.
class Cast {
 public:
  using DxResolver = std::function<std::shared_ptr<ObjectDx>(const StoreRef&)>;

  Cast(CastConfig config, DxResolver resolver)
      : cfg_(std::move(config)), resolver_(std::move(resolver)), spec_(cfg_.dxg) {}

  ~Cast() { stop(); }

  Cast(const Cast&) = delete;
  Cast& operator=(const Cast&) = delete;

  void start() {
    if (running_.exchange(true)) return;
    bind_nodes(spec_);
    ValidationReport report = validate_dxg(spec_, schemas_by_store());
    if (!report.ok()) {
      running_.store(false);
      throw DxError(ErrorCode::InvalidState, "dxg '" + spec_.name + "' invalid: " + report.to_text());
    }
    if (cfg_.mode == CastMode::Pushdown) attach_compiled(pushdown_compile(spec_, schemas_));
    for (const auto& node : source_nodes(spec_)) begin_source(node, /*backfill=*/true);
    last_activity_.store(steady_now_ms());
    loop_ = std::thread([this] { loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    for (auto& [node, w] : watches_) w.cancel();
    queue_.close();
    if (loop_.joinable()) loop_.join();
    for (auto& [node, w] : watches_) {
      if (w.pump.joinable()) w.pump.join();
    }
    for (const auto& [name, loc] : udf_ids_) {
      try {
        clients_.at(loc.first)->detach_udf(node_store(loc.first), loc.second);
      } catch (const DxError&) {
      }
    }
    for (const auto& [node, w] : watches_) {
      try {
        clients_.at(node)->deregister_consumer(node_store(node), cfg_.consumer_id);
      } catch (const DxError&) {
      }
    }
    watches_.clear();
    udf_ids_.clear();
    compiled_.clear();
  }

  // Swaps the running spec for `next` at a single point in the event stream:
  // triggers queued before the swap run under the old spec, later ones under
  // the new. Throws (and changes nothing) when the new spec does not validate.
  void reconfigure(DxgSpec next) {
    if (!running_.load()) {
      spec_ = std::move(next);
      cfg_.dxg = spec_;
      return;
    }
    {
      // Resolve and validate outside the loop so a bad spec never interrupts it.
      std::map<std::string, ObjectSchema> schemas;
      std::map<std::string, ObjectSchema> by_store;
      for (const auto& n : next.nodes) {
        auto dx = client_for(n);
        auto schema = dx->get_schema(n.store);
        if (!schema) throw DxError(ErrorCode::InvalidState, "store '" + n.store + "' has no schema");
        schemas[n.name] = *schema;
        by_store[n.store] = *schema;
      }
      ValidationReport report = validate_dxg(next, by_store);
      if (!report.ok())
        throw DxError(ErrorCode::InvalidState, "dxg '" + next.name + "' invalid: " + report.to_text());
    }
    auto op = std::make_shared<Reconfig>();
    op->next = std::move(next);
    auto done = op->done.get_future();
    queue_.push(Item{std::move(op)});
    done.get();
  }

  DxgSpec spec() const {
    std::lock_guard lk(spec_mu_);
    return spec_;
  }

  Value status() const {
    Value edges = Value::object();
    Value policies = Value::object();
    {
      std::lock_guard lk(metrics_mu_);
      for (const auto& [name, m] : edge_metrics_) edges[name] = m.to_json();
      for (const auto& [name, m] : policy_metrics_) policies[name] = m.to_json();
    }
    std::lock_guard lk(spec_mu_);
    return Value{{"dxg", spec_.name},
                 {"mode", std::string(to_string(cfg_.mode))},
                 {"consumer", cfg_.consumer_id},
                 {"edges", edges},
                 {"policies", policies}};
  }

  // True once the loop has been idle (empty queue, no trigger in flight) for
  // the configured settle window — the fixpoint/quiescence check.
  bool quiesce(std::chrono::milliseconds timeout) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (std::chrono::steady_clock::now() < deadline) {
      if (queue_.size() == 0 && !busy_.load() &&
          steady_now_ms() - last_activity_.load() >= static_cast<double>(cfg_.settle_ms)) {
        return true;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    return false;
  }

  CastEdgeMetrics edge_metrics(const std::string& name) const {
    std::lock_guard lk(metrics_mu_);
    auto it = edge_metrics_.find(name);
    return it == edge_metrics_.end() ? CastEdgeMetrics{} : it->second;
  }

  CastEdgeMetrics policy_metrics(const std::string& name) const {
    std::lock_guard lk(metrics_mu_);
    auto it = policy_metrics_.find(name);
    return it == policy_metrics_.end() ? CastEdgeMetrics{} : it->second;
  }

 private:
  struct Trigger {
    std::string node;
    WatchEvent event;
  };
  struct Reconfig {
    DxgSpec next;
    std::promise<void> done;
  };
  using Item = std::variant<Trigger, std::shared_ptr<Reconfig>>;
  struct SourceWatch {
    std::function<void()> cancel;
    std::thread pump;
  };

  // --- wiring -----------------------------------------------------------------

  std::shared_ptr<ObjectDx> client_for(const StoreRef& node) {
    auto it = clients_.find(node.name);
    if (it != clients_.end()) return it->second;
    auto dx = resolver_(node);
    if (!dx) throw DxError(ErrorCode::Transport, "no client for node '" + node.name + "'");
    clients_[node.name] = dx;
    return dx;
  }

  void bind_nodes(const DxgSpec& spec) {
    for (const auto& n : spec.nodes) {
      auto dx = client_for(n);
      auto schema = dx->get_schema(n.store);
      if (!schema) throw DxError(ErrorCode::InvalidState, "store '" + n.store + "' has no schema");
      schemas_[n.name] = *schema;
    }
  }

  std::map<std::string, ObjectSchema> schemas_by_store() const {
    std::map<std::string, ObjectSchema> out;
    for (const auto& [node, s] : schemas_) out[s.store_name] = s;
    return out;
  }

  std::string node_store(const std::string& node) const {
    const StoreRef* n = spec_.node(node);
    return n ? n->store : node;
  }

  // Nodes that can trigger work: every edge source plus every policy binding node.
  std::set<std::string> source_nodes(const DxgSpec& spec) const {
    std::set<std::string> out;
    for (const auto& e : spec.edges) out.insert(e.from_node);
    for (const auto& p : spec.policies) {
      for (const auto& n : castdetail::policy_source_nodes(spec, p, schemas_)) out.insert(n);
    }
    return out;
  }

  // Registers interest and starts the watch pump for one source node.
  // Consumer first, then a live watch, then (optionally) a listing: nothing
  // committed after the watch begins can be missed, and the listing covers
  // everything before.
  void begin_source(const std::string& node, bool backfill) {
    const StoreRef* ref = spec_.node(node);
    auto dx = clients_.at(node);
    dx->register_consumer(ref->store, cfg_.consumer_id);
    WatchHandle h = dx->watch(ref->store, WatchStart::live());
    SourceWatch w;
    w.cancel = h.cancel;
    w.pump = std::thread([this, node, events = h.events] {
      while (auto ev = events->pop()) queue_.push(Item{Trigger{node, std::move(*ev)}});
    });
    watches_[node] = std::move(w);
    if (backfill) {
      for (auto& o : dx->list(ref->store)) {
        WatchEvent ev;
        ev.kind = EventKind::Updated;
        ev.revision = o.revision;
        ev.object = std::move(o);
        queue_.push(Item{Trigger{node, std::move(ev)}});
      }
    }
  }

  void end_source(const std::string& node) {
    auto it = watches_.find(node);
    if (it == watches_.end()) return;
    it->second.cancel();
    if (it->second.pump.joinable()) it->second.pump.join();
    try {
      clients_.at(node)->deregister_consumer(node_store(node), cfg_.consumer_id);
    } catch (const DxError&) {
    }
    watches_.erase(it);
  }

  void attach_compiled(const std::vector<CompiledUdf>& compiled) {
    for (const auto& c : compiled) {
      uint64_t id = clients_.at(c.host_node)->attach_udf(node_store(c.host_node), c.udf);
      udf_ids_[c.name] = {c.host_node, id};
      compiled_.insert(c.name);
      std::lock_guard lk(metrics_mu_);
      edge_or_policy_metrics(c.name).pushed_down = true;
    }
  }

  CastEdgeMetrics& edge_or_policy_metrics(const std::string& name) {
    if (spec_.edge(name)) return edge_metrics_[name];
    return policy_metrics_[name];
  }

  // --- the loop ---------------------------------------------------------------

  void loop() {
    while (auto item = queue_.pop()) {
      busy_.store(true);
      last_activity_.store(steady_now_ms());
      if (auto* t = std::get_if<Trigger>(&*item)) {
        process(*t);
      } else {
        apply_reconfig(*std::get<std::shared_ptr<Reconfig>>(*item));
      }
      last_activity_.store(steady_now_ms());
      busy_.store(false);
    }
  }

  void process(const Trigger& t) {
    const StoreRef* src_node = spec_.node(t.node);
    if (!src_node) return;  // node dropped by a reconfigure already queued behind it
    const std::string& key = t.event.object.key;
    std::string subject = src_node->store + "/" + key;
    if (cfg_.trace) cfg_.trace->record(subject, "event_recv", steady_now_ms());

    EvalEnv env;
    env.root = &t.event.object.attributes;
    env.key = &key;

    // Policies first: conditions decide dropped edges now, set effects apply
    // after the edges, in document order.
    std::set<std::string> dropped;
    struct SetEffect {
      const Policy* policy;
      Value value;
    };
    std::vector<SetEffect> sets;
    if (t.event.kind != EventKind::Deleted) {
      for (const auto& p : spec_.policies) {
        auto bound = castdetail::policy_source_nodes(spec_, p, schemas_);
        if (std::find(bound.begin(), bound.end(), t.node) == bound.end()) continue;
        if (compiled_.count(p.name)) continue;
        bool hit = false;
        try {
          hit = truthy(eval_expr(p.condition, env), p.name);
        } catch (const DxError& e) {
          record_fault(policy_metrics_, p.name, e.what());
          continue;
        }
        if (!hit) continue;
        if (p.is_drop()) {
          dropped.insert(p.drop_edge);
        } else {
          try {
            sets.push_back({&p, eval_expr(p.value, env)});
          } catch (const DxError& e) {
            record_fault(policy_metrics_, p.name, e.what());
          }
        }
      }
    }

    for (const auto& e : spec_.edges) {
      if (e.from_node != t.node || compiled_.count(e.name)) continue;
      {
        std::lock_guard lk(metrics_mu_);
        ++edge_metrics_[e.name].triggers;
      }
      if (t.event.kind == EventKind::Deleted) {
        // Deletes propagate only through whole-object edges.
        if (!edge_expr(e)) delete_dest(e, key);
        continue;
      }
      if (dropped.count(e.name)) {
        std::lock_guard lk(metrics_mu_);
        ++edge_metrics_[e.name].skipped;
        continue;
      }
      run_edge(e, t, env, subject);
    }

    for (const auto& s : sets) {
      const Policy& p = *s.policy;
      write_field(p.set_node, key, p.set_field, s.value, policy_metrics_, p.name, subject);
    }

    try {
      clients_.at(t.node)->mark_consumed(src_node->store, key, t.event.revision, cfg_.consumer_id);
    } catch (const DxError&) {
      // Tombstoned object or racing reconfigure; marks are best-effort.
    }
  }

  void run_edge(const Edge& e, const Trigger& t, EvalEnv& env, const std::string& subject) {
    if (e.when) {
      bool pass = false;
      try {
        pass = truthy(eval_expr(e.when, env), e.name);
      } catch (const DxError& ex) {
        record_fault(edge_metrics_, e.name, ex.what());
        return;
      }
      if (!pass) return;
    }
    ExprPtr expr = edge_expr(e);
    if (!expr) {
      copy_object(e, t.event.object, subject);
      return;
    }
    Value out;
    double t0 = steady_now_ms();
    try {
      if (e.aggregating) {
        Value lists = aggregate_env(e);
        EvalEnv agg_env;
        agg_env.root = &lists;
        out = eval_expr(expr, agg_env);
      } else {
        out = eval_expr(expr, env);
      }
    } catch (const DxError& ex) {
      record_fault(edge_metrics_, e.name, ex.what());
      return;
    }
    if (cfg_.trace) cfg_.trace->record(subject, "eval_ms", steady_now_ms() - t0);
    const std::string dest_key = e.aggregating ? std::string("total") : t.event.object.key;
    write_field(e.to_node, dest_key, e.to_field, out, edge_metrics_, e.name, subject);
  }

  // Aggregating edges recompute over the full source store: each referenced
  // path binds to the key-ordered list of that field's values.
  Value aggregate_env(const Edge& e) {
    auto objects = clients_.at(e.from_node)->list(node_store(e.from_node));
    Value lists = Value::object();
    for (const auto& path : castdetail::expr_paths(edge_expr(e))) {
      Value arr = Value::array();
      for (const auto& o : objects) {
        const Value* v = paths::get(o.attributes, path);
        if (v) arr.push_back(*v);
      }
      paths::set(lists, path, arr);
    }
    return lists;
  }

  void copy_object(const Edge& e, const StateObject& src, const std::string& subject) {
    const ObjectSchema& dest_schema = schemas_.at(e.to_node);
    Value attrs = Value::object();
    for (const auto& f : dest_schema.fields) {
      if (src.attributes.contains(f.name)) attrs[f.name] = src.attributes.at(f.name);
    }
    write_attrs(e.to_node, src.key, std::move(attrs), edge_metrics_, e.name, subject);
  }

  void delete_dest(const Edge& e, const std::string& key) {
    try {
      clients_.at(e.to_node)->remove(node_store(e.to_node), key);
      std::lock_guard lk(metrics_mu_);
      ++edge_metrics_[e.name].writes;
    } catch (const DxError& ex) {
      if (ex.code() == ErrorCode::NotFound) return;
      record_fault(edge_metrics_, e.name, ex.what());
    }
  }

  void write_field(const std::string& to_node, const std::string& key, const std::string& field, const Value& value,
                   std::map<std::string, CastEdgeMetrics>& metrics, const std::string& name,
                   const std::string& subject) {
    Value attrs = Value::object();
    paths::set(attrs, field, value);
    write_attrs(to_node, key, std::move(attrs), metrics, name, subject, &field, &value);
  }

  // The destination write: read, compare, CAS-put. A write that would not
  // change the destination is skipped without a revision bump — this is what
  // lets guarded cycles reach fixpoint.
  void write_attrs(const std::string& to_node, const std::string& key, Value attrs,
                   std::map<std::string, CastEdgeMetrics>& metrics, const std::string& name,
                   const std::string& subject, const std::string* single_field = nullptr,
                   const Value* single_value = nullptr) {
    auto dx_it = clients_.find(to_node);
    if (dx_it == clients_.end()) {
      record_fault(metrics, name, "no client for node '" + to_node + "'");
      return;
    }
    ObjectDx& dx = *dx_it->second;
    const std::string store = node_store(to_node);
    double t0 = steady_now_ms();
    for (int attempt = 0; attempt <= cfg_.conflict_retries; ++attempt) {
      std::optional<StateObject> current;
      try {
        current = dx.get(store, key);
      } catch (const DxError& e) {
        if (e.code() != ErrorCode::NotFound) {
          record_fault(metrics, name, e.what());
          return;
        }
      }
      if (current) {
        bool same = true;
        if (single_field) {
          const Value* have = paths::get(current->attributes, *single_field);
          same = have && *have == *single_value;
        } else {
          for (auto it = attrs.begin(); it != attrs.end(); ++it) {
            const Value* have = paths::get(current->attributes, it.key());
            if (!have || *have != it.value()) {
              same = false;
              break;
            }
          }
        }
        if (same) {
          std::lock_guard lk(metrics_mu_);
          ++metrics[name].skipped;
          if (cfg_.trace) cfg_.trace->record(subject, "write_ms", steady_now_ms() - t0);
          return;
        }
      }
      try {
        if (current) {
          dx.put(store, key, attrs, current->revision);
        } else {
          dx.put(store, key, attrs);
        }
        std::lock_guard lk(metrics_mu_);
        ++metrics[name].writes;
        if (cfg_.trace) cfg_.trace->record(subject, "write_ms", steady_now_ms() - t0);
        return;
      } catch (const DxError& e) {
        if (e.code() == ErrorCode::Conflict) continue;  // fresh read next round
        record_fault(metrics, name, e.what());
        return;
      }
    }
    record_fault(metrics, name, "conflict retries exhausted on " + store + "/" + key);
  }

  void record_fault(std::map<std::string, CastEdgeMetrics>& metrics, const std::string& name,
                    const std::string& error) {
    std::lock_guard lk(metrics_mu_);
    ++metrics[name].faults;
    metrics[name].last_error = error;
  }

  static bool truthy(const Value& v, const std::string& where) {
    if (!v.is_boolean()) throw DxError(ErrorCode::TypeError, where + ": condition is not boolean");
    return v.get<bool>();
  }

  // --- reconfiguration ----------------------------------------------------------

  void apply_reconfig(Reconfig& op) {
    try {
      DxgSpec next = std::move(op.next);
      bind_nodes(next);  // clients/schemas for new nodes (validated already)

      if (cfg_.mode == CastMode::Pushdown) {
        DxgDiff diff = diff_dxg(spec_, next);
        std::set<std::string> stale;
        for (const auto& e : diff.removed_edges) stale.insert(e.name);
        for (const auto& e : diff.modified_edges) stale.insert(e.name);
        for (const auto& p : diff.removed_policies) stale.insert(p.name);
        for (const auto& p : diff.modified_policies) stale.insert(p.name);
        for (const auto& name : stale) {
          auto it = udf_ids_.find(name);
          if (it == udf_ids_.end()) continue;
          try {
            clients_.at(it->second.first)->detach_udf(node_store(it->second.first), it->second.second);
          } catch (const DxError&) {
          }
          udf_ids_.erase(it);
          compiled_.erase(name);
        }
        // Attach only what is not already live; unchanged attachments keep
        // running with no gap.
        std::map<std::string, ObjectSchema> next_schemas;
        for (const auto& n : next.nodes) next_schemas[n.name] = schemas_.at(n.name);
        for (const auto& c : pushdown_compile(next, next_schemas)) {
          if (udf_ids_.count(c.name)) continue;
          uint64_t id = clients_.at(c.host_node)->attach_udf(node_store(c.host_node), c.udf);
          udf_ids_[c.name] = {c.host_node, id};
          compiled_.insert(c.name);
          std::lock_guard lk(metrics_mu_);
          edge_metrics_[c.name].pushed_down = true;
        }
      }

      {
        std::lock_guard lk(spec_mu_);
        spec_ = std::move(next);
      }
      cfg_.dxg = spec_;

      // Watches follow the new source set. Added sources start live: events
      // from current revisions on, per the reconfiguration contract.
      std::set<std::string> wanted = source_nodes(spec_);
      std::vector<std::string> gone;
      for (const auto& [node, w] : watches_) {
        if (!wanted.count(node)) gone.push_back(node);
      }
      for (const auto& node : gone) end_source(node);
      for (const auto& node : wanted) {
        if (!watches_.count(node)) begin_source(node, /*backfill=*/false);
      }
      op.done.set_value();
    } catch (...) {
      op.done.set_exception(std::current_exception());
    }
  }

  CastConfig cfg_;
  DxResolver resolver_;

  mutable std::mutex spec_mu_;
  DxgSpec spec_;  // loop-owned; spec_mu_ guards the swap for outside readers

  std::map<std::string, std::shared_ptr<ObjectDx>> clients_;
  std::map<std::string, ObjectSchema> schemas_;  // node name -> schema snapshot
  std::map<std::string, SourceWatch> watches_;
  std::map<std::string, std::pair<std::string, uint64_t>> udf_ids_;  // name -> (host node, udf id)
  std::set<std::string> compiled_;

  Channel<Item> queue_;
  std::thread loop_;
  std::atomic<bool> running_{false};
  std::atomic<bool> busy_{false};
  std::atomic<double> last_activity_{0};

  mutable std::mutex metrics_mu_;
  std::map<std::string, CastEdgeMetrics> edge_metrics_;
  std::map<std::string, CastEdgeMetrics> policy_metrics_;
};

inline std::unique_ptr<Cast> run_cast(CastConfig config, Cast::DxResolver resolver) {
  auto cast = std::make_unique<Cast>(std::move(config), std::move(resolver));
  cast->start();
  return cast;
}

}  // namespace knactor
