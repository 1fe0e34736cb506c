#include <catch2/catch_amalgamated.hpp>

#include "knactor/log_store.hpp"

using namespace knactor;

namespace {

StreamDef motion_stream() {
  StreamDef def;
  def.name = "motion";
  def.fields = {{"device", FieldType::String}, {"trigger", FieldType::Bool}};
  return def;
}

StreamDef power_stream() {
  StreamDef def;
  def.name = "power";
  def.fields = {{"device", FieldType::String}, {"kwh", FieldType::Float}};
  return def;
}

Pipeline pipe(const char* json) { return pipeline_from_json(Value::parse(json)); }

}  // namespace

TEST_CASE("appends require exactly the declared fields") {
  LogEngine dx;
  dx.create_stream("admin", motion_stream());

  CHECK(dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", true}}) == 1);
  CHECK(dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", false}}) == 2);

  CHECK_THROWS_MATCHES(dx.append("admin", "motion", Value{{"device", "d1"}}), DxError,
                       Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                         return e.code() == ErrorCode::InvalidRecord;
                       }));
  CHECK_THROWS_AS(dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", true}, {"extra", 1}}), DxError);
  CHECK_THROWS_AS(dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", "yes"}}), DxError);
  CHECK_THROWS_AS(dx.append("admin", "ghost", Value::object()), DxError);
}

TEST_CASE("records get an ingest timestamp") {
  LogEngine dx;
  dx.create_stream("admin", motion_stream());
  dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", true}});
  auto rows = dx.query("admin", "motion", {});
  REQUIRE(rows.size() == 1);
  REQUIRE(rows[0].contains("ts"));
  CHECK(rows[0]["ts"].is_number_integer());
  // callers cannot supply the reserved field
  CHECK_THROWS_AS(dx.append("admin", "motion", Value{{"device", "d"}, {"trigger", true}, {"ts", 1}}), DxError);
}

TEST_CASE("stream definitions are validated") {
  LogEngine dx;
  StreamDef bad = motion_stream();
  bad.fields.emplace_back("ts", FieldType::Int);
  CHECK_THROWS_AS(dx.create_stream("admin", bad), DxError);

  StreamDef nested = motion_stream();
  nested.name = "nested";
  nested.fields.emplace_back("blob", FieldType::Object);
  CHECK_THROWS_AS(dx.create_stream("admin", nested), DxError);

  dx.create_stream("admin", motion_stream());
  CHECK_THROWS_MATCHES(dx.create_stream("admin", motion_stream()), DxError,
                       Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                         return e.code() == ErrorCode::Conflict;
                       }));
}

TEST_CASE("bounded retention evicts the head but keeps sequence numbers") {
  LogEngine dx;
  StreamDef def = motion_stream();
  def.max_records = 3;
  dx.create_stream("admin", def);
  for (int i = 0; i < 5; ++i) dx.append("admin", "motion", Value{{"device", "d"}, {"trigger", i % 2 == 0}});
  CHECK(dx.last_seq("motion") == 5);
  auto rows = dx.query("admin", "motion", {});
  CHECK(rows.size() == 3);
  // since_seq still addresses the survivors
  CHECK(dx.query("admin", "motion", {}, 4).size() == 1);
}

TEST_CASE("queries run pipelines server-side") {
  LogEngine dx;
  dx.create_stream("admin", power_stream());
  dx.append("admin", "power", Value{{"device", "lamp"}, {"kwh", 1.5}});
  dx.append("admin", "power", Value{{"device", "heater"}, {"kwh", 9.0}});
  dx.append("admin", "power", Value{{"device", "lamp"}, {"kwh", 2.5}});

  SECTION("filter") {
    auto rows = dx.query("admin", "power", pipe(R"([{"op":"filter","predicate":"device == \"lamp\""}])"));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0]["kwh"] == Value(1.5));
  }

  SECTION("rename") {
    auto rows = dx.query("admin", "power", pipe(R"([{"op":"rename","fields":{"kwh":"energy"}}])"));
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].contains("energy"));
    CHECK_FALSE(rows[0].contains("kwh"));
  }

  SECTION("sort descending") {
    auto rows = dx.query("admin", "power", pipe(R"([{"op":"sort","field":"kwh","order":"desc"}])"));
    REQUIRE(rows.size() == 3);
    CHECK(rows[0]["kwh"] == Value(9.0));
    CHECK(rows[2]["kwh"] == Value(1.5));
  }

  SECTION("aggregate sums the column") {
    auto rows = dx.query("admin", "power",
                         pipe(R"([{"op":"filter","predicate":"device == \"lamp\""},
                                  {"op":"aggregate","fn":"sum","field":"kwh"}])"));
    REQUIRE(rows.size() == 1);
    CHECK(rows[0]["sum_kwh"].get<double>() == Catch::Approx(4.0));
  }

  SECTION("aggregate with group key") {
    auto rows = dx.query("admin", "power", pipe(R"([{"op":"aggregate","fn":"count","field":"kwh","group_by":"device"}])"));
    REQUIRE(rows.size() == 2);  // heater, lamp (key-ordered)
    CHECK(rows[0]["device"] == Value("heater"));
    CHECK(rows[0]["count_kwh"] == Value(1));
    CHECK(rows[1]["device"] == Value("lamp"));
    CHECK(rows[1]["count_kwh"] == Value(2));
  }

  SECTION("since_seq bounds the batch") {
    auto rows = dx.query("admin", "power", {}, 2);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0]["kwh"] == Value(2.5));
  }
}

TEST_CASE("pipelines type-check against the stream") {
  LogEngine dx;
  dx.create_stream("admin", power_stream());
  CHECK_THROWS_MATCHES(dx.query("admin", "power", pipe(R"([{"op":"filter","predicate":"kwh"}])")), DxError,
                       Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                         return e.code() == ErrorCode::InvalidPipeline;
                       }));
  CHECK_THROWS_AS(dx.query("admin", "power", pipe(R"([{"op":"filter","predicate":"ghost > 1"}])")), DxError);
  CHECK_THROWS_AS(dx.query("admin", "power", pipe(R"([{"op":"sort","field":"ghost"}])")), DxError);
  CHECK_THROWS_AS(dx.query("admin", "power", pipe(R"([{"op":"rename","fields":{"kwh":"device"}}])")), DxError);
  CHECK_THROWS_AS(dx.query("admin", "power", pipe(R"([{"op":"aggregate","fn":"sum","field":"device"}])")), DxError);
  // renamed fields flow through the checker
  CHECK_NOTHROW(dx.query("admin", "power",
                         pipe(R"([{"op":"rename","fields":{"kwh":"energy"}},
                                  {"op":"filter","predicate":"energy > 1.0"}])")));
  // ts is available to pipelines
  CHECK_NOTHROW(dx.query("admin", "power", pipe(R"([{"op":"filter","predicate":"ts > 0"}])")));
}

TEST_CASE("tails replay the window and then stream") {
  LogEngine dx;
  dx.create_stream("admin", motion_stream());
  dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", true}});

  TailHandle t = dx.tail("admin", "motion", 0);
  auto first = t.records->pop_for(std::chrono::milliseconds(500));
  REQUIRE(first.has_value());
  CHECK(first->seq == 1);

  dx.append("admin", "motion", Value{{"device", "d2"}, {"trigger", false}});
  auto second = t.records->pop_for(std::chrono::milliseconds(500));
  REQUIRE(second.has_value());
  CHECK(second->seq == 2);
  CHECK(second->record["device"] == Value("d2"));
  t.cancel();
}

TEST_CASE("tails accept per-record pipelines only") {
  LogEngine dx;
  dx.create_stream("admin", motion_stream());
  dx.append("admin", "motion", Value{{"device", "d1"}, {"trigger", false}});
  dx.append("admin", "motion", Value{{"device", "d2"}, {"trigger", true}});

  TailHandle t = dx.tail("admin", "motion", 0, pipe(R"([{"op":"filter","predicate":"trigger == true"},
                                                        {"op":"rename","fields":{"trigger":"motion"}}])"));
  auto rec = t.records->pop_for(std::chrono::milliseconds(500));
  REQUIRE(rec.has_value());
  CHECK(rec->seq == 2);
  CHECK(rec->record["motion"] == Value(true));
  CHECK_FALSE(t.records->try_pop().has_value());
  t.cancel();

  CHECK_THROWS_AS(dx.tail("admin", "motion", 0, pipe(R"([{"op":"sort","field":"device"}])")), DxError);
}

TEST_CASE("log access is role-gated and default-deny") {
  LogEngine dx;
  AccessPolicy writer;
  writer.role = "sensor";
  writer.store_name = "motion";
  writer.field_paths = {"*"};
  writer.verbs = {Verb::Create};
  dx.apply_policy("admin", writer);

  dx.create_stream("admin", motion_stream());
  CHECK(dx.append("sensor", "motion", Value{{"device", "d"}, {"trigger", true}}) == 1);
  CHECK_THROWS_MATCHES(dx.query("sensor", "motion", {}), DxError,
                       Catch::Matchers::Predicate<DxError>([](const DxError& e) {
                         return e.code() == ErrorCode::AccessDenied;
                       }));
  CHECK_THROWS_AS(dx.append("stranger", "motion", Value{{"device", "d"}, {"trigger", true}}), DxError);
}

TEST_CASE("op signatures canonicalize equal ops") {
  DataflowOp a = op_from_json(Value::parse(R"({"op":"filter","predicate":"trigger==true"})"));
  DataflowOp b = op_from_json(Value::parse(R"({"op":"filter","predicate":"trigger ==  true"})"));
  CHECK(op_signature(a) == op_signature(b));
  DataflowOp c = op_from_json(Value::parse(R"({"op":"filter","predicate":"trigger == false"})"));
  CHECK(op_signature(a) != op_signature(c));
  DataflowOp r1 = op_from_json(Value::parse(R"({"op":"rename","fields":{"a":"b","c":"d"}})"));
  DataflowOp r2 = op_from_json(Value::parse(R"({"op":"rename","fields":{"c":"d","a":"b"}})"));
  CHECK(op_signature(r1) == op_signature(r2));
}

TEST_CASE("apply_op counts records entering the op") {
  DataflowOp f = op_from_json(Value::parse(R"({"op":"filter","predicate":"x > 5"})"));
  std::vector<Value> batch;
  for (int i = 0; i < 10; ++i) batch.push_back(Value{{"x", i}});
  uint64_t evals = 0;
  auto out = apply_op(f, batch, &evals);
  CHECK(evals == 10);
  CHECK(out.size() == 4);  // 6,7,8,9
}

TEST_CASE("sort is stable") {
  DataflowOp s = op_from_json(Value::parse(R"({"op":"sort","field":"k"})"));
  std::vector<Value> batch{Value{{"k", 1}, {"tag", "a"}}, Value{{"k", 0}, {"tag", "b"}},
                           Value{{"k", 1}, {"tag", "c"}}};
  auto out = apply_op(s, batch);
  REQUIRE(out.size() == 3);
  CHECK(out[0]["tag"] == Value("b"));
  CHECK(out[1]["tag"] == Value("a"));
  CHECK(out[2]["tag"] == Value("c"));
}

TEST_CASE("pipeline json round-trips") {
  Pipeline p = pipe(R"([{"op":"filter","predicate":"trigger == true"},
                        {"op":"rename","fields":{"trigger":"motion"}},
                        {"op":"sort","field":"ts","order":"desc"},
                        {"op":"aggregate","fn":"avg","field":"kwh","group_by":"device"}])");
  Pipeline again = pipeline_from_json(pipeline_to_json(p));
  CHECK(pipeline_signature(p) == pipeline_signature(again));
}
