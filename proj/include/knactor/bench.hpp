#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "knactor/apps/retail.hpp"
#include "knactor/baseline.hpp"
#include "knactor/cast.hpp"
#include "knactor/dx_server.hpp"
#include "knactor/reconciler.hpp"
#include "knactor/sync.hpp"

namespace knactor {

// --- latency breakdown ------------------------------------------------------
//
// Stage boundaries (single host, one steady clock):
//   C-I : source-store commit -> integrator read (watch delivery); in
//         push-down mode, client issue -> UDF entry.
//   I   : transform evaluation time.
//   I-S : destination write issue -> destination commit; in push-down mode,
//         UDF exit -> client ack (covers commit + cross-store write).
//   S   : service processing time inside the shipping reconciler.
// Prop and Total are stage sums of like aggregates, so each emitted row is
// additive exactly: Prop = C-I + I + I-S and Total = Prop + S.

struct StageAgg {
  double median = 0;
  double p95 = 0;
};

struct LatencyBreakdown {
  std::string config;
  size_t samples = 0;
  StageAgg c_i, i, i_s, s, prop, total;

  Value to_json() const {
    auto stage = [](const StageAgg& a) { return Value{{"median_ms", a.median}, {"p95_ms", a.p95}}; };
    return Value{{"config", config}, {"samples", samples}, {"c_i", stage(c_i)},  {"i", stage(i)},
                 {"i_s", stage(i_s)}, {"s", stage(s)},      {"prop", stage(prop)}, {"total", stage(total)}};
  }
};

namespace benchdetail {

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  double pos = q * double(v.size() - 1);
  size_t lo = size_t(pos);
  size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = pos - double(lo);
  return v[lo] * (1 - frac) + v[hi] * frac;
}

inline StageAgg agg_of(const std::vector<double>& v) {
  return {percentile(v, 0.5), percentile(v, 0.95)};
}

inline StageAgg agg_sum(std::initializer_list<StageAgg> parts) {
  StageAgg out;
  for (const auto& p : parts) {
    out.median += p.median;
    out.p95 += p.p95;
  }
  return out;
}

struct StageSamples {
  std::vector<double> c_i, i, i_s, s;

  LatencyBreakdown breakdown(const std::string& config) const {
    LatencyBreakdown row;
    row.config = config;
    row.samples = c_i.size();
    row.c_i = agg_of(c_i);
    row.i = agg_of(i);
    row.i_s = agg_of(i_s);
    row.s = agg_of(s);
    row.prop = agg_sum({row.c_i, row.i, row.i_s});
    row.total = agg_sum({row.prop, row.s});
    return row;
  }
};

// The two-service fixture under measurement: checkout -> shipping through one
// Cast over a wire-served exchange, shipping booked by a reconciler.
inline constexpr const char* kBenchCheckoutSchema = R"(store: checkout
fields:
  - {name: item, type: string}
  - {name: addr, type: string}
  - {name: price, type: float}
)";

inline constexpr const char* kBenchShippingSchema = R"(store: shipping
fields:
  - {name: item, type: string, external_fill: true}
  - {name: addr, type: string, external_fill: true}
  - {name: method, type: string, external_fill: true}
  - {name: trackingID, type: string}
  - {name: status, type: string}
)";

inline std::string bench_dxg(const std::string& endpoint) {
  return "name: bench-prop\n"
         "nodes:\n"
         "  - {name: checkout, dx: " + endpoint + ", kind: object, store: checkout, role: caster}\n"
         "  - {name: shipping, dx: " + endpoint + ", kind: object, store: shipping, role: caster}\n"
         "edges:\n"
         "  - {name: ship-item, from: checkout.item, to: shipping.item}\n"
         "  - {name: ship-addr, from: checkout.addr, to: shipping.addr}\n"
         "  - name: ship-method\n"
         "    from: checkout.price\n"
         "    to: shipping.method\n"
         "    transform: if price > 1000 then \"air\" else \"ground\"\n";
}

inline constexpr const char* kBenchRolesYaml = R"(policies:
  - role: caster
    store: checkout
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: caster
    store: shipping
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: shipper
    store: shipping
    fields: ["*"]
    verbs: [get, list, watch, create, update]
)";

inline void wait_for_stage(const TraceSink& trace, const std::string& subject, const std::string& stage,
                           std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (trace.has(subject, stage)) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  throw DxError(ErrorCode::Internal, "bench: '" + stage + "' never arrived for " + subject +
                                         " — is the stack running?");
}

// --- line diff (for composition-cost records) -------------------------------

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::string line;
  std::istringstream in(text);
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

// Added + removed line count from an LCS alignment — what a unified diff
// would show as +/- lines.
inline size_t diff_lines(const std::string& before, const std::string& after) {
  auto a = split_lines(before);
  auto b = split_lines(after);
  size_t n = a.size(), m = b.size();
  std::vector<std::vector<size_t>> lcs(n + 1, std::vector<size_t>(m + 1, 0));
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j)
      lcs[i][j] = a[i - 1] == b[j - 1] ? lcs[i - 1][j - 1] + 1 : std::max(lcs[i - 1][j], lcs[i][j - 1]);
  size_t common = lcs[n][m];
  return (n - common) + (m - common);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DxError(ErrorCode::NotFound, "cannot read " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace benchdetail

// --- bench_prop -------------------------------------------------------------

inline LatencyBreakdown bench_prop(const std::string& config, size_t n_orders, uint64_t s_delay_ms = 10) {
  using namespace benchdetail;
  const size_t warmup = std::min<size_t>(5, n_orders);
  StageSamples samples;

  if (config == "rpc") {
    BaselineOptions opts;
    opts.processing_ms = double(s_delay_ms);
    BaselineShippingServer server("tcp:127.0.0.1:0", opts);
    BaselineShippingClient client("tcp:127.0.0.1:" + std::to_string(server.port()));
    for (size_t k = 0; k < n_orders + warmup; ++k) {
      double t0 = steady_now_ms();
      ShipOrderResponse resp = client.ship_order({{"widget"}, "12 Elm St"});
      double total = steady_now_ms() - t0;
      if (k < warmup) continue;
      double prop = std::max(0.0, total - resp.processing_ms);
      // The whole propagation is the request hop; there is no integrator.
      samples.c_i.push_back(prop);
      samples.i.push_back(0.0);
      samples.i_s.push_back(0.0);
      samples.s.push_back(resp.processing_ms);
    }
    server.stop();
    return samples.breakdown(config);
  }

  bool persistent = config == "kn-persistent";
  bool pushdown = config == "kn-mem-udf";
  if (!persistent && !pushdown && config != "kn-mem")
    throw DxError(ErrorCode::InvalidRequest, "unknown bench config '" + config + "'");

  TraceSink trace;
  ObjectEngineOptions eo;
  eo.trace = &trace;
  if (persistent) {
    eo.wal_enabled = true;
    eo.wal_path = "/tmp/knactor-bench-wal-" + std::to_string(::getpid()) + ".jsonl";
    ::unlink(eo.wal_path.c_str());
  }
  ObjectEngine engine(eo);
  DxServer server("tcp:127.0.0.1:0", &engine, nullptr);
  std::string endpoint = "tcp:127.0.0.1:" + std::to_string(server.port());

  RemoteObjectDx admin(endpoint, engine.admin_role());
  for (auto& p : access_policies_from_yaml_text(kBenchRolesYaml)) admin.apply_policy(std::move(p));
  externalize(admin, {kBenchCheckoutSchema, kBenchShippingSchema});

  RemoteObjectDx shipper(endpoint, "shipper");
  ReconcilerSpec ship_spec;
  ship_spec.name = "bench-shipping";
  ship_spec.stores = {"shipping"};
  ship_spec.on_change = [&trace, s_delay_ms](const StateObject& s) -> std::vector<DesiredWrite> {
    const Value& a = s.attributes;
    if (a.value("status", std::string()) == "shipped") return {};
    if (!a.contains("item") || !a.contains("addr") || a.value("method", std::string()).empty()) return {};
    double t0 = steady_now_ms();
    std::this_thread::sleep_for(std::chrono::milliseconds(s_delay_ms));
    trace.record("checkout/" + s.key, "proc_ms", steady_now_ms() - t0);
    return {{"shipping", s.key, Value{{"trackingID", "TRK-" + s.key}, {"status", "shipped"}}}};
  };
  Reconciler shipping(shipper, ship_spec);
  shipping.start();

  CastConfig cc;
  cc.dxg = parse_dxg(bench_dxg(endpoint));
  cc.mode = pushdown ? CastMode::Pushdown : CastMode::ClientEval;
  cc.consumer_id = "bench-cast";
  cc.settle_ms = 40;
  cc.trace = &trace;
  Cast cast(std::move(cc), [](const StoreRef& ref) -> std::shared_ptr<ObjectDx> {
    return std::make_shared<RemoteObjectDx>(ref.dx, ref.role);
  });
  cast.start();

  RemoteObjectDx client(endpoint, engine.admin_role());
  for (size_t k = 0; k < n_orders + warmup; ++k) {
    std::string key = "bench-" + std::to_string(k);
    std::string subject = "checkout/" + key;
    double issue = steady_now_ms();
    client.put("checkout", key, Value{{"item", "widget"}, {"addr", "12 Elm St"}, {"price", 42.0}});
    double ack = steady_now_ms();
    trace.record(subject, "issue", issue);
    trace.record(subject, "ack", ack);
    wait_for_stage(trace, subject, "proc_ms", std::chrono::seconds(15));
    if (k < warmup) continue;

    double c_i, i, i_s;
    if (pushdown) {
      c_i = trace.first(subject, "udf_entry") - issue;
      i = trace.first(subject, "udf_exit") - trace.first(subject, "udf_entry");
      i_s = ack - trace.first(subject, "udf_exit");
    } else {
      c_i = trace.first(subject, "event_recv") - trace.first(subject, "commit");
      i = trace.sum(subject, "eval_ms");
      i_s = trace.sum(subject, "write_ms");
    }
    if (std::isnan(c_i) || std::isnan(i) || std::isnan(i_s))
      throw DxError(ErrorCode::Internal, "bench: missing stage samples for " + subject);
    samples.c_i.push_back(std::max(0.0, c_i));
    samples.i.push_back(std::max(0.0, i));
    samples.i_s.push_back(std::max(0.0, i_s));
    samples.s.push_back(trace.first(subject, "proc_ms"));
  }

  cast.stop();
  shipping.stop();
  server.stop();
  if (persistent) ::unlink(eo.wal_path.c_str());
  return samples.breakdown(config);
}

inline std::string render_prop_table(const std::vector<LatencyBreakdown>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "config" << std::right;
  for (const char* col : {"C-I", "I", "I-S", "S", "Prop", "Total"}) out << std::setw(9) << col;
  out << std::setw(9) << "n" << "\n";
  out << std::string(16 + 9 * 7, '-') << "\n";
  out << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    out << std::left << std::setw(16) << r.config << std::right;
    for (const StageAgg* a : {&r.c_i, &r.i, &r.i_s, &r.s, &r.prop, &r.total}) out << std::setw(9) << a->median;
    out << std::setw(9) << r.samples << "\n";
  }
  out << "(median ms per stage; Prop = C-I + I + I-S, Total = Prop + S)\n";
  return out.str();
}

// --- bench_sync -------------------------------------------------------------

struct SyncBenchSide {
  double drain_ms = 0;       // start -> quiesce, includes the settle window
  double processing_ms = 0;  // summed op-forest evaluation time
  uint64_t prefix_evals = 0;
  uint64_t total_evals = 0;
  std::vector<Value> outputs;  // dump per sink store, key-ordered

  Value to_json() const {
    return Value{{"drain_ms", drain_ms},
                 {"processing_ms", processing_ms},
                 {"prefix_evals", prefix_evals},
                 {"total_evals", total_evals}};
  }
};

struct SyncBenchResult {
  size_t pipelines = 0;
  size_t records = 0;
  SyncBenchSide consolidated, unconsolidated;
  bool outputs_equal = false;

  double processing_speedup() const {
    return consolidated.processing_ms > 0 ? unconsolidated.processing_ms / consolidated.processing_ms : 0;
  }
  double drain_speedup() const {
    return consolidated.drain_ms > 0 ? unconsolidated.drain_ms / consolidated.drain_ms : 0;
  }

  Value to_json() const {
    return Value{{"pipelines", pipelines},
                 {"records", records},
                 {"consolidated", consolidated.to_json()},
                 {"unconsolidated", unconsolidated.to_json()},
                 {"outputs_equal", outputs_equal},
                 {"processing_speedup", processing_speedup()},
                 {"drain_speedup", drain_speedup()}};
  }
};

namespace benchdetail {

// One side of the comparison gets a fresh pair of engines with the same
// deterministic record load, so revision counters start equal and the final
// store dumps can be compared byte for byte.
struct SyncBed {
  LogEngine logs;
  ObjectEngine objects;
  std::shared_ptr<LocalLogDx> log_dx = std::make_shared<LocalLogDx>(logs, "admin");
  std::shared_ptr<LocalObjectDx> obj_dx = std::make_shared<LocalObjectDx>(objects, "admin");

  SyncBed(size_t pipelines, size_t records) {
    StreamDef events;
    events.name = "events";
    events.fields = {{"device", FieldType::String}, {"kwh", FieldType::Float}};
    log_dx->create_stream(events);

    for (size_t i = 0; i < pipelines; ++i) {
      ObjectSchema out;
      out.store_name = "out-" + std::to_string(i);
      out.fields = {{"device", FieldType::String, true, {}}, {"kwh", FieldType::Float, true, {}}};
      obj_dx->register_schema(out);
    }

    std::mt19937 rng(20260814);
    std::uniform_real_distribution<double> load(0.0, 1.0);
    for (size_t r = 0; r < records; ++r) {
      logs.append("admin", "events", Value{{"device", "dev-" + std::to_string(r % 40)}, {"kwh", load(rng)}});
    }
  }

  std::vector<SyncPipeline> make_pipelines(size_t n) {
    std::vector<SyncPipeline> out;
    for (size_t i = 0; i < n; ++i) {
      SyncPipeline p;
      p.name = "pipe-" + std::to_string(i);
      p.source = {log_dx, "events", 0};
      // The shared prefix: a selective filter so evaluation, not sink
      // writing, dominates the drain.
      p.ops = {DataflowOp::filter(parse_expr("kwh * kwh * 2.0 + kwh > 2.9")),
               DataflowOp::rename({{"device", "dev"}})};
      p.sink = SyncObjectSink{obj_dx, "out-" + std::to_string(i), "{dev}", {{"dev", "device"}, {"kwh", "kwh"}}};
      p.batch = SyncBatch::record();
      out.push_back(std::move(p));
    }
    return out;
  }

  SyncBenchSide run(size_t pipelines, bool consolidate) {
    SyncBenchSide side;
    auto pipes = make_pipelines(pipelines);
    std::string prefix_sig = op_signature(pipes[0].ops[0]);
    double t0 = steady_now_ms();
    Sync sync(std::move(pipes), consolidate);
    sync.start();
    if (!sync.quiesce(std::chrono::minutes(5), std::chrono::milliseconds(150)))
      throw DxError(ErrorCode::Internal, "bench: sync never drained");
    side.drain_ms = steady_now_ms() - t0;
    SyncMetrics m = sync.metrics();
    sync.stop();
    side.processing_ms = m.wall_ms;
    side.prefix_evals = m.op_evaluations.count(prefix_sig) ? m.op_evaluations.at(prefix_sig) : 0;
    side.total_evals = m.total_op_evaluations();
    for (size_t i = 0; i < pipelines; ++i) side.outputs.push_back(objects.dump_store("out-" + std::to_string(i)));
    return side;
  }
};

}  // namespace benchdetail

inline SyncBenchResult bench_sync(size_t pipelines = 4, size_t records = 10000) {
  SyncBenchResult r;
  r.pipelines = pipelines;
  r.records = records;
  {
    benchdetail::SyncBed bed(pipelines, records);
    r.consolidated = bed.run(pipelines, true);
  }
  {
    benchdetail::SyncBed bed(pipelines, records);
    r.unconsolidated = bed.run(pipelines, false);
  }
  r.outputs_equal = r.consolidated.outputs == r.unconsolidated.outputs;
  return r;
}

inline std::string render_sync_table(const SyncBenchResult& r) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "mode" << std::right << std::setw(14) << "prefix-evals" << std::setw(13)
      << "total-evals" << std::setw(12) << "proc-ms" << std::setw(12) << "drain-ms" << "\n";
  out << std::string(16 + 14 + 13 + 12 + 12, '-') << "\n";
  out << std::fixed << std::setprecision(1);
  auto row = [&](const char* name, const SyncBenchSide& s) {
    out << std::left << std::setw(16) << name << std::right << std::setw(14) << s.prefix_evals << std::setw(13)
        << s.total_evals << std::setw(12) << s.processing_ms << std::setw(12) << s.drain_ms << "\n";
  };
  row("consolidated", r.consolidated);
  row("unconsolidated", r.unconsolidated);
  out << std::setprecision(2) << "processing speedup " << r.processing_speedup() << "x, drain speedup "
      << r.drain_speedup() << "x, outputs " << (r.outputs_equal ? "equal" : "DIFFER") << "\n";
  return out.str();
}

// --- bench_reconfig ---------------------------------------------------------

struct CompositionCostRecord {
  std::string task;
  std::set<std::string> operations;  // subset of {code, config, build, deploy}
  size_t files = 0;
  size_t lines_changed = 0;
  uint64_t knactor_restarts = 0;
  bool effect_verified = false;

  Value to_json() const {
    Value ops = Value::array();
    for (const auto& o : operations) ops.push_back(o);
    return Value{{"task", task},   {"operations", ops},
                 {"files", files}, {"lines_changed", lines_changed},
                 {"knactor_restarts", knactor_restarts}, {"effect_verified", effect_verified}};
  }
};

// Executes the scripted fixture change against a live retail stack and counts
// its cost from the fixture files themselves.
inline CompositionCostRecord bench_reconfig(const std::string& task, const std::string& fixtures_dir) {
  using namespace benchdetail;
  std::string dir = fixtures_dir + "/retail/";
  std::string base_dxg = read_file(dir + "dxg.yaml");

  CompositionCostRecord rec;
  rec.task = task;
  rec.operations = {"config"};

  apps::RetailOptions opts;
  opts.shipping_delay_ms = 5;
  opts.settle_ms = 60;
  apps::RetailStack stack(opts);
  stack.start();
  if (!dxg_equal(parse_dxg(base_dxg), stack.cast().spec()))
    throw DxError(ErrorCode::Internal, "bench: fixtures/retail/dxg.yaml drifted from the running graph");

  auto ship_method = [&](double price) -> std::string {
    auto keys = stack.simulate_order(1, [&](size_t) { return price; });
    if (!stack.wait_all_shipped(keys, std::chrono::seconds(30)))
      throw DxError(ErrorCode::Internal, "bench: order never shipped — is the stack running?");
    return stack.admin().get("shipping", keys[0]).attributes.at("method").get<std::string>();
  };

  std::string before = ship_method(600.0);
  uint64_t tasks_before = stack.counters().total();

  if (task == "T2-policy") {
    std::string next = read_file(dir + "dxg-policy.yaml");
    rec.files = 1;
    rec.lines_changed = diff_lines(base_dxg, next);
    stack.reconfigure(next);
    rec.effect_verified = before == "ground" && ship_method(600.0) == "air";
  } else if (task == "T2-noop") {
    rec.files = 1;
    rec.lines_changed = diff_lines(base_dxg, base_dxg);
    stack.reconfigure(base_dxg);
    rec.effect_verified = before == "ground" && ship_method(600.0) == "ground";
  } else if (task == "T3-schema") {
    std::string schema_v1 = read_file(dir + "shipping-schema.yaml");
    std::string schema_v2 = read_file(dir + "shipping-schema-v2.yaml");
    std::string dxg_v2 = read_file(dir + "dxg-v2.yaml");
    rec.files = 2;
    rec.lines_changed = diff_lines(schema_v1, schema_v2) + diff_lines(base_dxg, dxg_v2);
    stack.upgrade_shipping(schema_v2, dxg_v2);
    auto keys = stack.simulate_order(1, [](size_t) { return 800.0; });
    if (!stack.wait_all_shipped(keys, std::chrono::seconds(30)))
      throw DxError(ErrorCode::Internal, "bench: order never shipped after schema upgrade");
    Value ship = stack.admin().get("shipping", keys[0]).attributes;
    rec.effect_verified = ship.value("insurance", 0.0) == 8.0 && ship.contains("address");
  } else {
    throw DxError(ErrorCode::InvalidRequest, "unknown reconfig task '" + task + "'");
  }

  rec.knactor_restarts = stack.counters().total() - tasks_before;
  return rec;
}

inline std::string render_reconfig_table(const std::vector<CompositionCostRecord>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(12) << "task" << std::setw(12) << "operations" << std::right << std::setw(7)
      << "files" << std::setw(7) << "lines" << std::setw(10) << "restarts" << std::setw(10) << "effect" << "\n";
  out << std::string(12 + 12 + 7 + 7 + 10 + 10, '-') << "\n";
  for (const auto& r : rows) {
    std::string ops;
    for (const auto& o : r.operations) ops += (ops.empty() ? "" : ",") + o;
    out << std::left << std::setw(12) << r.task << std::setw(12) << ops << std::right << std::setw(7) << r.files
        << std::setw(7) << r.lines_changed << std::setw(10) << r.knactor_restarts << std::setw(10)
        << (r.effect_verified ? "ok" : "FAIL") << "\n";
  }
  return out.str();
}

}  // namespace knactor
