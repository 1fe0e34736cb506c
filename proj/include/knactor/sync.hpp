#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "knactor/dataflow.hpp"
#include "knactor/dx_client.hpp"
#include "knactor/trace.hpp"

namespace knactor {

// --- pipeline model -------------------------------------------------------

struct SyncSource {
  std::shared_ptr<LogDx> dx;
  std::string stream;
  uint64_t from_seq = 0;
};

// Object sinks route each record to put(store, key) where the key template is
// either a literal or "{field}" substituted from the record; `fields` maps
// record field -> destination attribute.
struct SyncObjectSink {
  std::shared_ptr<ObjectDx> dx;
  std::string store;
  std::string key_template;
  std::vector<std::pair<std::string, std::string>> fields;
};

struct SyncLogSink {
  std::shared_ptr<LogDx> dx;
  std::string stream;
};

using SyncSink = std::variant<SyncObjectSink, SyncLogSink>;

struct SyncBatch {
  bool per_record = true;
  uint64_t interval_ms = 1000;

  static SyncBatch record() { return {true, 0}; }
  static SyncBatch interval(uint64_t ms) { return {false, ms}; }
};

struct SyncPipeline {
  std::string name;
  SyncSource source;
  Pipeline ops;
  SyncSink sink;
  SyncBatch batch;
};

// --- consolidation plan ---------------------------------------------------

// One node per distinct op along a shared path.  `fanout` is the number of
// pipelines whose chain passes through this node.
struct SyncPlanNode {
  DataflowOp op;
  std::vector<size_t> terminals;  // pipeline indices whose ops end here
  std::vector<std::unique_ptr<SyncPlanNode>> children;
  size_t fanout = 0;
};

struct SyncGroup {
  std::shared_ptr<LogDx> dx;
  std::string stream;
  uint64_t from_seq = 0;
  SyncBatch batch;
  std::vector<size_t> root_terminals;  // op-less pipelines fed the raw record
  std::vector<std::unique_ptr<SyncPlanNode>> roots;
  std::vector<size_t> members;
};

struct SyncPlan {
  std::vector<SyncGroup> groups;

  size_t shared_nodes() const {
    size_t n = 0;
    for (const auto& g : groups) {
      std::vector<const SyncPlanNode*> stack;
      for (const auto& r : g.roots) stack.push_back(r.get());
      while (!stack.empty()) {
        const SyncPlanNode* node = stack.back();
        stack.pop_back();
        if (node->fanout > 1) ++n;
        for (const auto& c : node->children) stack.push_back(c.get());
      }
    }
    return n;
  }

  Value to_json(const std::vector<SyncPipeline>& pipelines) const {
    auto node_json = [&](const SyncPlanNode& n, auto&& self) -> Value {
      Value v{{"op", op_signature(n.op)}, {"fanout", n.fanout}};
      Value terms = Value::array();
      for (size_t i : n.terminals) terms.push_back(pipelines[i].name);
      v["sinks"] = std::move(terms);
      Value kids = Value::array();
      for (const auto& c : n.children) kids.push_back(self(*c, self));
      v["children"] = std::move(kids);
      return v;
    };
    Value out = Value::array();
    for (const auto& g : groups) {
      Value gv{{"stream", g.stream}, {"from_seq", g.from_seq}};
      Value roots = Value::array();
      for (const auto& r : g.roots) roots.push_back(node_json(*r, node_json));
      gv["forest"] = std::move(roots);
      Value raw = Value::array();
      for (size_t i : g.root_terminals) raw.push_back(pipelines[i].name);
      gv["raw_sinks"] = std::move(raw);
      out.push_back(std::move(gv));
    }
    return out;
  }
};

namespace syncdetail {

inline std::string batch_signature(const SyncBatch& b) {
  return b.per_record ? "record" : "interval:" + std::to_string(b.interval_ms);
}

inline std::string group_key(const SyncPipeline& p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%p", static_cast<void*>(p.source.dx.get()));
  return std::string(buf) + "/" + p.source.stream + "@" + std::to_string(p.source.from_seq) + "/" +
         batch_signature(p.batch);
}

}  // namespace syncdetail

// Merges maximal shared (source, op-prefix) chains; op equality is structural
// on canonicalized expressions.  With consolidate=false every pipeline keeps
// its own chain and its own source tail, which is the comparison baseline.
inline SyncPlan consolidate_plan(const std::vector<SyncPipeline>& pipelines, bool consolidate = true) {
  SyncPlan plan;
  std::map<std::string, size_t> group_of;
  for (size_t i = 0; i < pipelines.size(); ++i) {
    const SyncPipeline& p = pipelines[i];
    std::string key = consolidate ? syncdetail::group_key(p) : "pipeline:" + std::to_string(i);
    auto [it, fresh] = group_of.try_emplace(key, plan.groups.size());
    if (fresh) {
      SyncGroup g;
      g.dx = p.source.dx;
      g.stream = p.source.stream;
      g.from_seq = p.source.from_seq;
      g.batch = p.batch;
      plan.groups.push_back(std::move(g));
    }
    SyncGroup& g = plan.groups[it->second];
    g.members.push_back(i);
    if (p.ops.empty()) {
      g.root_terminals.push_back(i);
      continue;
    }
    std::vector<std::unique_ptr<SyncPlanNode>>* level = &g.roots;
    SyncPlanNode* node = nullptr;
    for (const auto& op : p.ops) {
      std::string sig = op_signature(op);
      node = nullptr;
      for (auto& candidate : *level) {
        if (op_signature(candidate->op) == sig) {
          node = candidate.get();
          break;
        }
      }
      if (!node) {
        auto fresh_node = std::make_unique<SyncPlanNode>();
        fresh_node->op = op;
        node = fresh_node.get();
        level->push_back(std::move(fresh_node));
      }
      ++node->fanout;
      level = &node->children;
    }
    node->terminals.push_back(i);
  }
  return plan;
}

// --- metrics ----------------------------------------------------------------

struct SyncMetrics {
  uint64_t records_in = 0;   // popped from source tails
  uint64_t records_out = 0;  // records delivered to sinks
  uint64_t shared_prefix_hits = 0;  // evaluations avoided by sharing
  uint64_t sink_faults = 0;
  uint64_t batches = 0;
  double wall_ms = 0;  // time spent evaluating op forests
  std::map<std::string, uint64_t> op_evaluations;  // op signature -> records entering

  uint64_t total_op_evaluations() const {
    uint64_t n = 0;
    for (const auto& [sig, c] : op_evaluations) n += c;
    return n;
  }

  Value to_json() const {
    Value ops = Value::object();
    for (const auto& [sig, c] : op_evaluations) ops[sig] = c;
    return Value{{"records_in", records_in},
                 {"records_out", records_out},
                 {"shared_prefix_hits", shared_prefix_hits},
                 {"sink_faults", sink_faults},
                 {"batches", batches},
                 {"wall_ms", wall_ms},
                 {"op_evaluations", std::move(ops)}};
  }
};

namespace syncdetail {

// Fan-out buffer between the shared prefix loop and a pipeline's sink writer.
// Push blocks when full, so a slow sink stalls only callers feeding it.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(size_t capacity) : capacity_(capacity) {}

  void push(T item) {
    std::unique_lock lk(mu_);
    space_.wait(lk, [this] { return closed_ || items_.size() < capacity_; });
    if (closed_) return;
    items_.push_back(std::move(item));
    ready_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lk(mu_);
    ready_.wait(lk, [this] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;  // closed and drained
    T item = std::move(items_.front());
    items_.pop_front();
    space_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lk(mu_);
    closed_ = true;
    ready_.notify_all();
    space_.notify_all();
  }

  size_t size() const {
    std::lock_guard lk(mu_);
    return items_.size();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable ready_, space_;
  std::deque<T> items_;
  size_t capacity_;
  bool closed_ = false;
};

inline std::string render_key(const std::string& tmpl, const Value& record) {
  std::string out;
  for (size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      auto close = tmpl.find('}', i);
      if (close == std::string::npos) throw DxError(ErrorCode::InvalidPipeline, "unterminated { in key template");
      std::string field = tmpl.substr(i + 1, close - i - 1);
      auto it = record.find(field);
      if (it == record.end())
        throw DxError(ErrorCode::MissingBinding, "key template field '" + field + "' missing from record");
      out += it->is_string() ? it->get<std::string>() : it->dump();
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

inline void write_sink(const SyncSink& sink, const Value& record) {
  if (const auto* o = std::get_if<SyncObjectSink>(&sink)) {
    Value attrs = Value::object();
    for (const auto& [from, to] : o->fields) {
      auto it = record.find(from);
      if (it == record.end())
        throw DxError(ErrorCode::MissingBinding, "sink field '" + from + "' missing from record");
      attrs[to] = *it;
    }
    o->dx->put(o->store, render_key(o->key_template, record), std::move(attrs));
    return;
  }
  const auto& l = std::get<SyncLogSink>(sink);
  Value rec = record;
  rec.erase("ts");  // ingest-time stamp; the sink stream assigns its own
  l.dx->append(l.stream, std::move(rec));
}

}  // namespace syncdetail

// Type-checks the ops against the source stream and the sink against the
// post-pipeline record shape.  Throws not-found when the source stream does
// not exist yet (callers may park on that), invalid-pipeline otherwise.
inline void validate_sync_pipeline(const SyncPipeline& p) {
  auto def = p.source.dx->get_stream(p.source.stream);
  if (!def) throw DxError(ErrorCode::NotFound, p.name + ": no stream '" + p.source.stream + "'");
  auto fields = check_pipeline(p.ops, stream_field_types(*def));
  if (const auto* o = std::get_if<SyncObjectSink>(&p.sink)) {
    if (o->key_template.empty())
      throw DxError(ErrorCode::InvalidPipeline, p.name + ": object sink needs a key template");
    auto schema = o->dx->get_schema(o->store);
    if (!schema) throw DxError(ErrorCode::InvalidState, p.name + ": sink store '" + o->store + "' has no schema");
    for (const auto& [from, to] : o->fields) {
      if (!fields.count(from))
        throw DxError(ErrorCode::InvalidPipeline, p.name + ": pipeline emits no field '" + from + "'");
      const FieldDef* fd = schema->find_path(to);
      if (!fd)
        throw DxError(ErrorCode::InvalidPipeline, p.name + ": sink store has no field '" + to + "'");
      if (!fd->external_fill)
        throw DxError(ErrorCode::InvalidPipeline,
                      p.name + ": sink field '" + to + "' is not annotated for external fill");
    }
  } else {
    const auto& l = std::get<SyncLogSink>(p.sink);
    auto sink_def = l.dx->get_stream(l.stream);
    if (!sink_def) throw DxError(ErrorCode::NotFound, p.name + ": no sink stream '" + l.stream + "'");
    // Append is exact-field, so the record shape must match the sink stream
    // both ways (the ingest timestamp is stripped before appending).
    for (const auto& [name, type] : sink_def->fields) {
      if (!fields.count(name))
        throw DxError(ErrorCode::InvalidPipeline, p.name + ": pipeline emits no field '" + name + "'");
    }
    for (const auto& [name, type] : fields) {
      if (name != "ts" && !sink_def->find(name))
        throw DxError(ErrorCode::InvalidPipeline, p.name + ": sink stream has no field '" + name + "'");
    }
  }
}

// --- runner -----------------------------------------------------------------

class Sync {
 public:
  static constexpr size_t kFanoutBuffer = 1024;

  Sync(std::vector<SyncPipeline> pipelines, bool consolidate)
      : pipelines_(std::move(pipelines)), consolidate_(consolidate) {}

  ~Sync() { stop(); }
  Sync(const Sync&) = delete;
  Sync& operator=(const Sync&) = delete;

  void start() {
    if (running_.exchange(true)) return;
    stopping_.store(false);
    plan_ = consolidate_plan(pipelines_, consolidate_);
    // Fail fast on pipelines whose source already exists; missing sources
    // park their group until the stream appears.
    for (const auto& p : pipelines_) {
      try {
        validate_sync_pipeline(p);
      } catch (const DxError& e) {
        if (e.code() != ErrorCode::NotFound) throw;
      }
    }
    for (size_t i = 0; i < pipelines_.size(); ++i) {
      sinks_.push_back(std::make_unique<SinkLane>());
      threads_.emplace_back([this, i] { sink_loop(i); });
    }
    for (auto& g : plan_.groups) {
      threads_.emplace_back([this, &g] { group_loop(g); });
    }
  }

  void stop() {
    if (!running_.load()) return;
    stopping_.store(true);
    {
      std::lock_guard lk(tails_mu_);
      for (auto& cancel : tail_cancels_) cancel();
      tail_cancels_.clear();
    }
    for (auto& lane : sinks_) lane->buffer.close();
    for (auto& t : threads_) {
      if (t.joinable()) t.join();
    }
    threads_.clear();
    sinks_.clear();
    running_.store(false);
  }

  // True once every source is drained, no batch is evaluating, and all sink
  // buffers have stayed empty for `settle`.
  bool quiesce(std::chrono::milliseconds timeout,
               std::chrono::milliseconds settle = std::chrono::milliseconds(100)) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    auto idle_since = std::chrono::steady_clock::time_point::min();
    while (std::chrono::steady_clock::now() < deadline) {
      bool idle = busy_.load() == 0;
      if (idle) {
        std::lock_guard lk(tails_mu_);
        for (const auto& ch : tail_channels_) {
          if (ch->size() != 0) idle = false;
        }
      }
      if (idle) {
        for (const auto& lane : sinks_) {
          if (lane->buffer.size() != 0) idle = false;
        }
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

  SyncMetrics metrics() const {
    std::lock_guard lk(mu_);
    return metrics_;
  }

  const SyncPlan& plan() const { return plan_; }

  Value status() const {
    std::lock_guard lk(mu_);
    Value per = Value::object();
    for (size_t i = 0; i < pipelines_.size(); ++i) {
      per[pipelines_[i].name] = Value{{"delivered", delivered_.count(i) ? delivered_.at(i) : 0},
                                      {"faults", faults_.count(i) ? faults_.at(i) : 0},
                                      {"last_error", last_error_.count(i) ? last_error_.at(i) : ""}};
    }
    return Value{{"consolidated", consolidate_},
                 {"plan", plan_.to_json(pipelines_)},
                 {"metrics", metrics_.to_json()},
                 {"pipelines", std::move(per)}};
  }

 private:
  struct SinkLane {
    syncdetail::BoundedQueue<Value> buffer{kFanoutBuffer};
  };

  // Aggregates in continuous mode are cumulative: the node keeps every value
  // seen for the aggregated column and re-emits the whole-range result each
  // batch, so the sink converges on the same answer a one-shot query gives.
  struct AggState {
    std::map<Value, std::vector<Value>> columns;
  };

  void group_loop(SyncGroup& g) {
    // Park until the source stream exists; validation errors at that point
    // are recorded and stop the group.
    while (!stopping_.load() && !g.dx->get_stream(g.stream)) {
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    if (stopping_.load()) return;
    for (size_t i : g.members) {
      try {
        validate_sync_pipeline(pipelines_[i]);
      } catch (const DxError& e) {
        std::lock_guard lk(mu_);
        last_error_[i] = e.what();
        return;
      }
    }
    TailHandle tail;
    try {
      tail = g.dx->tail(g.stream, g.from_seq);
    } catch (const DxError& e) {
      std::lock_guard lk(mu_);
      for (size_t i : g.members) last_error_[i] = e.what();
      return;
    }
    {
      std::lock_guard lk(tails_mu_);
      tail_channels_.push_back(tail.records);
      tail_cancels_.push_back(tail.cancel);
    }
    std::map<const SyncPlanNode*, AggState> agg;
    if (g.batch.per_record) {
      while (auto r = tail.records->pop()) {
        ++busy_;
        run_batch(g, {std::move(r->record)}, agg);
        --busy_;
      }
      return;
    }
    // Records waiting for the next tick count as busy so quiesce() does not
    // report idle with an unemitted batch in hand.
    std::vector<Value> pending;
    auto emit = [&] {
      if (pending.empty()) return;
      int n = static_cast<int>(pending.size());
      run_batch(g, std::move(pending), agg);
      pending.clear();
      busy_ -= n;
    };
    auto next_emit = std::chrono::steady_clock::now() + std::chrono::milliseconds(g.batch.interval_ms);
    while (true) {
      auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(next_emit -
                                                                        std::chrono::steady_clock::now());
      if (wait.count() > 0) {
        if (auto r = tail.records->pop_for(wait)) {
          pending.push_back(std::move(r->record));
          ++busy_;
          continue;
        }
        if (tail.records->closed() && tail.records->size() == 0) break;
      }
      if (std::chrono::steady_clock::now() >= next_emit) {
        emit();
        next_emit += std::chrono::milliseconds(g.batch.interval_ms);
      }
    }
    emit();  // flush on close
  }

  void run_batch(SyncGroup& g, std::vector<Value> batch, std::map<const SyncPlanNode*, AggState>& agg) {
    double t0 = steady_now_ms();
    {
      std::lock_guard lk(mu_);
      metrics_.records_in += batch.size();
      ++metrics_.batches;
    }
    for (size_t i : g.root_terminals) {
      for (const auto& r : batch) deliver(i, r);
    }
    for (const auto& root : g.roots) run_node(*root, batch, agg);
    std::lock_guard lk(mu_);
    metrics_.wall_ms += steady_now_ms() - t0;
  }

  void run_node(const SyncPlanNode& node, const std::vector<Value>& in,
                std::map<const SyncPlanNode*, AggState>& agg) {
    {
      std::lock_guard lk(mu_);
      metrics_.op_evaluations[op_signature(node.op)] += in.size();
      if (node.fanout > 1) metrics_.shared_prefix_hits += in.size() * (node.fanout - 1);
    }
    std::vector<Value> out;
    if (node.op.kind == OpKind::Aggregate) {
      out = aggregate_emit(node, in, agg[&node]);
    } else {
      try {
        out = apply_op(node.op, in);
      } catch (const DxError& e) {
        std::lock_guard lk(mu_);
        for (size_t i : node.terminals) {
          ++faults_[i];
          last_error_[i] = e.what();
        }
        return;  // children starve for this batch; the fault is recorded
      }
    }
    for (size_t i : node.terminals) {
      for (const auto& r : out) deliver(i, r);
    }
    for (const auto& c : node.children) run_node(*c, out, agg);
  }

  std::vector<Value> aggregate_emit(const SyncPlanNode& node, const std::vector<Value>& in, AggState& state) {
    const DataflowOp& op = node.op;
    for (const auto& r : in) {
      Value key;
      if (!op.group_by.empty()) {
        const Value* g = paths::get(r, op.group_by);
        if (!g) continue;
        key = *g;
      }
      const Value* v = paths::get(r, op.agg_field);
      if (v) state.columns[key].push_back(*v);
    }
    if (in.empty()) return {};
    std::vector<Value> out;
    for (const auto& [key, col] : state.columns) {
      Value rec = Value::object();
      if (!op.group_by.empty()) rec[op.group_by] = key;
      rec[op.agg_output()] = exprdetail::aggregate_list(op.agg, col, op.agg_field);
      out.push_back(std::move(rec));
    }
    return out;
  }

  void deliver(size_t pipeline, const Value& record) { sinks_[pipeline]->buffer.push(record); }

  void sink_loop(size_t i) {
    const SyncPipeline& p = pipelines_[i];
    while (auto r = sinks_[i]->buffer.pop()) {
      try {
        syncdetail::write_sink(p.sink, *r);
        std::lock_guard lk(mu_);
        ++delivered_[i];
        ++metrics_.records_out;
      } catch (const DxError& e) {
        std::lock_guard lk(mu_);
        ++faults_[i];
        ++metrics_.sink_faults;
        last_error_[i] = e.what();
      }
    }
  }

  std::vector<SyncPipeline> pipelines_;
  bool consolidate_;
  SyncPlan plan_;

  std::atomic<bool> running_{false};
  std::atomic<bool> stopping_{false};
  std::atomic<int> busy_{0};
  std::vector<std::thread> threads_;
  std::vector<std::unique_ptr<SinkLane>> sinks_;

  mutable std::mutex tails_mu_;
  std::vector<std::shared_ptr<Channel<LogRecord>>> tail_channels_;
  std::vector<std::function<void()>> tail_cancels_;

  mutable std::mutex mu_;
  SyncMetrics metrics_;
  std::map<size_t, uint64_t> delivered_;
  std::map<size_t, uint64_t> faults_;
  std::map<size_t, std::string> last_error_;
};

inline std::unique_ptr<Sync> run_sync(std::vector<SyncPipeline> pipelines, bool consolidate = true) {
  auto s = std::make_unique<Sync>(std::move(pipelines), consolidate);
  s->start();
  return s;
}

// Processes exactly the records in (from_seq, to_seq] and stops; to_seq = 0
// snapshots the stream's current last_seq.  Aggregates run whole-range, the
// same as a one-shot query.
inline SyncMetrics sync_once(const SyncPipeline& p, uint64_t from_seq = 0, uint64_t to_seq = 0) {
  validate_sync_pipeline(p);
  SyncMetrics m;
  if (to_seq == 0) to_seq = p.source.dx->last_seq(p.source.stream);
  std::vector<Value> batch;
  if (to_seq > from_seq) {
    TailHandle tail = p.source.dx->tail(p.source.stream, from_seq);
    while (auto r = tail.records->pop()) {
      if (r->seq > to_seq) break;
      batch.push_back(std::move(r->record));
      if (r->seq == to_seq) break;
    }
    tail.cancel();
  }
  m.records_in = batch.size();
  m.batches = 1;
  double t0 = steady_now_ms();
  for (const auto& op : p.ops) {
    m.op_evaluations[op_signature(op)] += batch.size();
    batch = apply_op(op, std::move(batch));
  }
  m.wall_ms = steady_now_ms() - t0;
  for (const auto& r : batch) {
    try {
      syncdetail::write_sink(p.sink, r);
      ++m.records_out;
    } catch (const DxError&) {
      ++m.sink_faults;
    }
  }
  return m;
}

// --- declarative form (YAML) ------------------------------------------------

// Endpoint-addressed pipeline declaration; the CLI resolves endpoints to DX
// clients before running.
struct SyncSourceDecl {
  std::string dx;
  std::string stream;
  uint64_t from_seq = 0;
};

struct SyncSinkDecl {
  std::string kind;  // "object" | "log"
  std::string dx;
  std::string store;   // object sinks
  std::string key;     // object sinks: key template
  std::vector<std::pair<std::string, std::string>> fields;
  std::string stream;  // log sinks
};

struct SyncPipelineDecl {
  std::string name;
  SyncSourceDecl source;
  Pipeline ops;
  SyncSinkDecl sink;
  SyncBatch batch;
};

inline std::vector<SyncPipelineDecl> sync_decls_from_yaml_text(const std::string& text) {
  Value doc = yaml_to_value(YAML::Load(text));
  if (!doc.is_object() || !doc.contains("pipelines"))
    throw DxError(ErrorCode::ParseError, "sync document needs a top-level 'pipelines' list");
  std::vector<SyncPipelineDecl> out;
  for (const auto& pv : doc.at("pipelines")) {
    SyncPipelineDecl d;
    d.name = pv.at("name").get<std::string>();
    const Value& src = pv.at("source");
    d.source.dx = src.value("dx", "local");
    d.source.stream = src.at("stream").get<std::string>();
    d.source.from_seq = src.value("from_seq", 0ull);
    if (pv.contains("ops")) d.ops = pipeline_from_json(pv.at("ops"));
    const Value& sk = pv.at("sink");
    d.sink.kind = sk.at("kind").get<std::string>();
    d.sink.dx = sk.value("dx", "local");
    if (d.sink.kind == "object") {
      d.sink.store = sk.at("store").get<std::string>();
      d.sink.key = sk.at("key").get<std::string>();
      for (const auto& [from, to] : sk.at("fields").items()) d.sink.fields.emplace_back(from, to.get<std::string>());
    } else if (d.sink.kind == "log") {
      d.sink.stream = sk.at("stream").get<std::string>();
    } else {
      throw DxError(ErrorCode::ParseError, d.name + ": sink kind must be object or log");
    }
    bool has_aggregate = false;
    for (const auto& op : d.ops) has_aggregate |= op.kind == OpKind::Aggregate;
    d.batch = has_aggregate ? SyncBatch::interval(1000) : SyncBatch::record();
    if (pv.contains("batch")) {
      const Value& b = pv.at("batch");
      if (b.is_string() && b.get<std::string>() == "per_record") {
        d.batch = SyncBatch::record();
      } else if (b.is_object() && b.contains("interval_ms")) {
        d.batch = SyncBatch::interval(b.at("interval_ms").get<uint64_t>());
      } else {
        throw DxError(ErrorCode::ParseError, d.name + ": batch must be per_record or {interval_ms: n}");
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace knactor
