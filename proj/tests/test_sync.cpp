#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "knactor/sync.hpp"

using namespace knactor;

namespace {

struct Bed {
  LogEngine logs;
  ObjectEngine objects;
  std::shared_ptr<LocalLogDx> log_dx = std::make_shared<LocalLogDx>(logs, "admin");
  std::shared_ptr<LocalObjectDx> obj_dx = std::make_shared<LocalObjectDx>(objects, "admin");

  Bed() {
    StreamDef motion;
    motion.name = "motion";
    motion.fields = {{"device", FieldType::String}, {"trigger", FieldType::Bool}};
    log_dx->create_stream(motion);

    StreamDef kwh;
    kwh.name = "kwh";
    kwh.fields = {{"device", FieldType::String}, {"kwh", FieldType::Float}};
    log_dx->create_stream(kwh);

    ObjectSchema house;
    house.store_name = "house";
    house.retention = RetentionPolicy::Archive;
    house.fields = {{"motion", FieldType::Bool, true, {}},
                    {"kwh", FieldType::Float, true, {}},
                    {"mode", FieldType::String, false, {}}};
    obj_dx->register_schema(house);
  }

  SyncPipeline motion_to_house(const std::string& name = "motion-to-house") {
    SyncPipeline p;
    p.name = name;
    p.source = {log_dx, "motion", 0};
    p.ops = {DataflowOp::filter(parse_expr("trigger == true")), DataflowOp::rename({{"trigger", "motion"}})};
    p.sink = SyncObjectSink{obj_dx, "house", "house", {{"motion", "motion"}}};
    p.batch = SyncBatch::record();
    return p;
  }
};

}  // namespace

TEST_CASE("rename pipeline loads a stream field into an object store") {
  Bed bed;
  auto sync = run_sync({bed.motion_to_house()});

  bed.log_dx->append("motion", Value{{"device", "ring-1"}, {"trigger", false}});
  bed.log_dx->append("motion", Value{{"device", "ring-1"}, {"trigger", true}});
  REQUIRE(sync->quiesce(std::chrono::seconds(5)));

  StateObject house = bed.obj_dx->get("house", "house");
  CHECK(house.attributes["motion"] == true);
  CHECK(house.revision == 1);  // the false record was filtered, one put total
  auto m = sync->metrics();
  CHECK(m.records_in == 2);
  CHECK(m.records_out == 1);
  sync->stop();
}

TEST_CASE("empty ops mirror records to a log sink") {
  Bed bed;
  StreamDef mirror;
  mirror.name = "kwh-mirror";
  mirror.fields = {{"device", FieldType::String}, {"kwh", FieldType::Float}};
  bed.log_dx->create_stream(mirror);

  SyncPipeline p;
  p.name = "mirror";
  p.source = {bed.log_dx, "kwh", 0};
  p.sink = SyncLogSink{bed.log_dx, "kwh-mirror"};
  p.batch = SyncBatch::record();
  auto sync = run_sync({p});

  bed.log_dx->append("kwh", Value{{"device", "lamp-1"}, {"kwh", 1.5}});
  bed.log_dx->append("kwh", Value{{"device", "lamp-2"}, {"kwh", 2.5}});
  REQUIRE(sync->quiesce(std::chrono::seconds(5)));

  auto rows = bed.log_dx->query("kwh-mirror", {});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["device"] == "lamp-1");
  CHECK(rows[1]["kwh"].get<double>() == Catch::Approx(2.5));
  sync->stop();
}

TEST_CASE("key templates route records to per-device objects") {
  Bed bed;
  ObjectSchema lamps;
  lamps.store_name = "lamp-meters";
  lamps.retention = RetentionPolicy::Archive;
  lamps.fields = {{"kwh", FieldType::Float, true, {}}};
  bed.obj_dx->register_schema(lamps);

  SyncPipeline p;
  p.name = "per-device";
  p.source = {bed.log_dx, "kwh", 0};
  p.sink = SyncObjectSink{bed.obj_dx, "lamp-meters", "{device}", {{"kwh", "kwh"}}};
  p.batch = SyncBatch::record();
  auto sync = run_sync({p});

  bed.log_dx->append("kwh", Value{{"device", "lamp-1"}, {"kwh", 1.5}});
  bed.log_dx->append("kwh", Value{{"device", "lamp-2"}, {"kwh", 2.5}});
  REQUIRE(sync->quiesce(std::chrono::seconds(5)));

  CHECK(bed.obj_dx->get("lamp-meters", "lamp-1").attributes["kwh"].get<double>() == Catch::Approx(1.5));
  CHECK(bed.obj_dx->get("lamp-meters", "lamp-2").attributes["kwh"].get<double>() == Catch::Approx(2.5));
  sync->stop();
}

TEST_CASE("consolidate_plan merges identical chains and shared prefixes") {
  Bed bed;
  auto a = bed.motion_to_house("a");
  auto b = bed.motion_to_house("b");

  SECTION("identical pipelines share one chain with two sinks") {
    SyncPlan plan = consolidate_plan({a, b});
    REQUIRE(plan.groups.size() == 1);
    REQUIRE(plan.groups[0].roots.size() == 1);
    const SyncPlanNode& filter = *plan.groups[0].roots[0];
    CHECK(filter.fanout == 2);
    REQUIRE(filter.children.size() == 1);
    CHECK(filter.children[0]->terminals.size() == 2);
    CHECK(plan.shared_nodes() == 2);
  }

  SECTION("diverging suffixes branch under the shared prefix") {
    SyncPipeline c = bed.motion_to_house("c");
    c.ops = {DataflowOp::filter(parse_expr("trigger == true")), DataflowOp::sort("device")};
    c.sink = SyncLogSink{bed.log_dx, "motion"};
    SyncPlan plan = consolidate_plan({a, c});
    REQUIRE(plan.groups.size() == 1);
    REQUIRE(plan.groups[0].roots.size() == 1);
    const SyncPlanNode& filter = *plan.groups[0].roots[0];
    CHECK(filter.fanout == 2);
    CHECK(filter.children.size() == 2);  // rename and sort branch apart
  }

  SECTION("disjoint sources never merge") {
    SyncPipeline d = bed.motion_to_house("d");
    d.source = {bed.log_dx, "kwh", 0};
    d.ops = {};
    d.sink = SyncLogSink{bed.log_dx, "kwh"};
    SyncPlan plan = consolidate_plan({a, d});
    CHECK(plan.groups.size() == 2);
  }

  SECTION("consolidate=false keeps every chain separate") {
    SyncPlan plan = consolidate_plan({a, b}, false);
    CHECK(plan.groups.size() == 2);
    CHECK(plan.shared_nodes() == 0);
  }
}

TEST_CASE("consolidation is transparent and evaluates shared prefixes once") {
  constexpr int kRecords = 400;
  constexpr int kPipelines = 4;

  auto run = [&](bool consolidate) {
    auto bed = std::make_unique<Bed>();
    ObjectSchema sink;
    sink.retention = RetentionPolicy::Archive;
    sink.fields = {{"motion", FieldType::Bool, true, {}}};
    std::vector<SyncPipeline> pipelines;
    for (int i = 0; i < kPipelines; ++i) {
      sink.store_name = "house-" + std::to_string(i);
      bed->obj_dx->register_schema(sink);
      auto p = bed->motion_to_house("p" + std::to_string(i));
      p.sink = SyncObjectSink{bed->obj_dx, sink.store_name, "house", {{"motion", "motion"}}};
      pipelines.push_back(std::move(p));
    }
    auto sync = run_sync(pipelines, consolidate);
    for (int i = 0; i < kRecords; ++i) {
      bed->log_dx->append("motion", Value{{"device", "ring-1"}, {"trigger", i % 3 != 0}});
    }
    REQUIRE(sync->quiesce(std::chrono::seconds(15)));
    SyncMetrics m = sync->metrics();
    Value dumps = Value::object();
    for (int i = 0; i < kPipelines; ++i) {
      std::string store = "house-" + std::to_string(i);
      dumps[store] = bed->obj_dx->engine().dump_store(store);
    }
    sync->stop();
    return std::pair{m, dumps};
  };

  auto [shared, shared_dumps] = run(true);
  auto [solo, solo_dumps] = run(false);

  std::string filter_sig = op_signature(DataflowOp::filter(parse_expr("trigger == true")));
  CHECK(shared.op_evaluations.at(filter_sig) == kRecords);
  CHECK(solo.op_evaluations.at(filter_sig) == kRecords * kPipelines);
  CHECK(shared.total_op_evaluations() <= solo.total_op_evaluations());
  CHECK(shared.shared_prefix_hits > 0);
  CHECK(solo.shared_prefix_hits == 0);
  CHECK(shared.records_out == solo.records_out);
  REQUIRE(shared_dumps.dump() == solo_dumps.dump());  // sink contents identical
}

TEST_CASE("sync_once processes an exact range") {
  Bed bed;
  for (int i = 1; i <= 10; ++i) {
    bed.log_dx->append("motion", Value{{"device", "ring-1"}, {"trigger", i % 3 == 0}});
  }
  SyncPipeline p = bed.motion_to_house();

  SECTION("filter passes a subset") {
    SyncMetrics m = sync_once(p);
    CHECK(m.records_in == 10);
    CHECK(m.records_out == 3);  // records 3, 6, 9
  }

  SECTION("empty range reports zero") {
    SyncMetrics m = sync_once(p, 10, 10);
    CHECK(m.records_in == 0);
    CHECK(m.records_out == 0);
    CHECK(m.total_op_evaluations() == 0);
  }

  SECTION("subrange bounds are honoured") {
    SyncMetrics m = sync_once(p, 2, 6);  // seqs 3..6, triggers at 3 and 6
    CHECK(m.records_in == 4);
    CHECK(m.records_out == 2);
  }

  SECTION("whole-range aggregate writes one value") {
    bed.log_dx->append("kwh", Value{{"device", "lamp-1"}, {"kwh", 1.5}});
    bed.log_dx->append("kwh", Value{{"device", "lamp-1"}, {"kwh", 2.5}});
    SyncPipeline agg;
    agg.name = "kwh-total";
    agg.source = {bed.log_dx, "kwh", 0};
    agg.ops = {DataflowOp::aggregate(AggFn::Sum, "kwh")};
    agg.sink = SyncObjectSink{bed.obj_dx, "house", "house", {{"sum_kwh", "kwh"}}};
    SyncMetrics m = sync_once(agg);
    CHECK(m.records_in == 2);
    CHECK(m.records_out == 1);
    CHECK(bed.obj_dx->get("house", "house").attributes["kwh"].get<double>() == Catch::Approx(4.0));
  }
}

TEST_CASE("continuous aggregates accumulate and overwrite the sink field") {
  Bed bed;
  SyncPipeline p;
  p.name = "kwh-total";
  p.source = {bed.log_dx, "kwh", 0};
  p.ops = {DataflowOp::aggregate(AggFn::Sum, "kwh")};
  p.sink = SyncObjectSink{bed.obj_dx, "house", "house", {{"sum_kwh", "kwh"}}};
  p.batch = SyncBatch::interval(40);
  auto sync = run_sync({p});

  bed.log_dx->append("kwh", Value{{"device", "lamp-1"}, {"kwh", 1.5}});
  bed.log_dx->append("kwh", Value{{"device", "lamp-1"}, {"kwh", 2.5}});
  REQUIRE(sync->quiesce(std::chrono::seconds(5)));
  CHECK(bed.obj_dx->get("house", "house").attributes["kwh"].get<double>() == Catch::Approx(4.0));

  bed.log_dx->append("kwh", Value{{"device", "lamp-2"}, {"kwh", 1.0}});
  REQUIRE(sync->quiesce(std::chrono::seconds(5)));
  CHECK(bed.obj_dx->get("house", "house").attributes["kwh"].get<double>() == Catch::Approx(5.0));
  sync->stop();
}

TEST_CASE("a pipeline parks until its source stream appears") {
  Bed bed;
  SyncPipeline p;
  p.name = "late";
  p.source = {bed.log_dx, "heartbeats", 0};
  p.sink = SyncLogSink{bed.log_dx, "kwh-mirror"};
  p.batch = SyncBatch::record();

  StreamDef mirror;
  mirror.name = "kwh-mirror";
  mirror.fields = {{"device", FieldType::String}, {"beat", FieldType::Int}};
  bed.log_dx->create_stream(mirror);

  auto sync = run_sync({p});
  std::this_thread::sleep_for(std::chrono::milliseconds(120));  // parked

  StreamDef beats;
  beats.name = "heartbeats";
  beats.fields = {{"device", FieldType::String}, {"beat", FieldType::Int}};
  bed.log_dx->create_stream(beats);
  bed.log_dx->append("heartbeats", Value{{"device", "ring-1"}, {"beat", 1}});

  REQUIRE(sync->quiesce(std::chrono::seconds(5)));
  auto rows = bed.log_dx->query("kwh-mirror", {});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0]["beat"] == 1);
  sync->stop();
}

TEST_CASE("sink faults are counted without stopping the pipeline") {
  Bed bed;
  StreamDef ints;
  ints.name = "beats-int";
  ints.fields = {{"device", FieldType::String}, {"trigger", FieldType::Int}};
  bed.log_dx->create_stream(ints);

  // The pipeline validates by name, but the sink stream types trigger as int
  // while motion records carry a bool: every append faults.
  SyncPipeline p;
  p.name = "mismatched";
  p.source = {bed.log_dx, "motion", 0};
  p.sink = SyncLogSink{bed.log_dx, "beats-int"};
  p.batch = SyncBatch::record();
  auto sync = run_sync({p});

  bed.log_dx->append("motion", Value{{"device", "ring-1"}, {"trigger", true}});
  bed.log_dx->append("motion", Value{{"device", "ring-1"}, {"trigger", false}});
  REQUIRE(sync->quiesce(std::chrono::seconds(5)));

  auto m = sync->metrics();
  CHECK(m.sink_faults == 2);
  CHECK(m.records_out == 0);
  CHECK(sync->status()["pipelines"]["mismatched"]["faults"] == 2);
  sync->stop();
}

TEST_CASE("validation rejects bad ops and unfillable sinks") {
  Bed bed;
  SyncPipeline p = bed.motion_to_house();

  SECTION("unknown field in a filter") {
    p.ops = {DataflowOp::filter(parse_expr("bogus == true"))};
    CHECK_THROWS_MATCHES(validate_sync_pipeline(p), DxError, Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                           return e.code() == ErrorCode::InvalidPipeline;
                         }));
  }

  SECTION("object sink field without the external-fill annotation") {
    p.ops = {DataflowOp::rename({{"device", "mode"}})};
    p.sink = SyncObjectSink{bed.obj_dx, "house", "house", {{"mode", "mode"}}};
    CHECK_THROWS_MATCHES(validate_sync_pipeline(p), DxError, Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                           return e.code() == ErrorCode::InvalidPipeline &&
                                  std::string(e.what()).find("external fill") != std::string::npos;
                         }));
  }

  SECTION("missing source stream is not-found") {
    p.source.stream = "nope";
    CHECK_THROWS_MATCHES(validate_sync_pipeline(p), DxError, Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                           return e.code() == ErrorCode::NotFound;
                         }));
  }
}

TEST_CASE("pipeline declarations parse from yaml") {
  auto decls = sync_decls_from_yaml_text(R"(
pipelines:
  - name: motion-to-house
    source: {dx: "tcp:127.0.0.1:7401", stream: motion}
    ops:
      - {op: filter, predicate: trigger == true}
      - {op: rename, fields: {trigger: motion}}
    sink: {kind: object, dx: "tcp:127.0.0.1:7401", store: house, key: house, fields: {motion: motion}}
    batch: per_record
  - name: kwh-total
    source: {stream: kwh}
    ops:
      - {op: aggregate, fn: sum, field: kwh}
    sink: {kind: object, store: house, key: house, fields: {sum_kwh: kwh}}
)");
  REQUIRE(decls.size() == 2);
  CHECK(decls[0].name == "motion-to-house");
  CHECK(decls[0].source.dx == "tcp:127.0.0.1:7401");
  CHECK(decls[0].ops.size() == 2);
  CHECK(decls[0].batch.per_record);
  CHECK(decls[0].sink.fields == std::vector<std::pair<std::string, std::string>>{{"motion", "motion"}});
  CHECK(decls[1].source.dx == "local");
  CHECK_FALSE(decls[1].batch.per_record);  // aggregates default to interval batching
  CHECK(decls[1].batch.interval_ms == 1000);
  CHECK(decls[1].ops[0].agg_output() == "sum_kwh");
}
