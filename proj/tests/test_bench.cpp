#include <knactor.hpp>

#include <catch2/catch_amalgamated.hpp>

using namespace knactor;
using benchdetail::diff_lines;
using benchdetail::percentile;
using benchdetail::read_file;

namespace {

std::string fixture(const std::string& rel) { return read_file(std::string(KNACTOR_SOURCE_DIR) + "/fixtures/" + rel); }

}  // namespace

TEST_CASE("fixture files match the embedded app configs") {
  CHECK(fixture("retail/checkout-schema.yaml") == apps::kCheckoutSchemaYaml);
  CHECK(fixture("retail/payment-schema.yaml") == apps::kPaymentSchemaYaml);
  CHECK(fixture("retail/shipping-schema.yaml") == apps::kShippingSchemaYaml);
  CHECK(fixture("retail/shipping-schema-v2.yaml") == apps::kShippingSchemaV2Yaml);
  CHECK(fixture("retail/roles.yaml") == apps::kRetailRolesYaml);
  CHECK(fixture("retail/dxg.yaml") == apps::kRetailDxgYaml);
  CHECK(fixture("retail/dxg-policy.yaml") == apps::kRetailDxgPolicyYaml);
  CHECK(fixture("retail/dxg-v2.yaml") == apps::kRetailDxgV2Yaml);
  CHECK(fixture("smarthome/house-schema.yaml") == apps::kHouseSchemaYaml);
  CHECK(fixture("smarthome/lamp-schema.yaml") == apps::kLampSchemaYaml);
  CHECK(fixture("smarthome/motion-schema.yaml") == apps::kMotionSchemaYaml);
  CHECK(fixture("smarthome/streams.yaml") == apps::kSmartHomeStreamsYaml);
  CHECK(fixture("smarthome/object-roles.yaml") == apps::kSmartHomeObjectRolesYaml);
  CHECK(fixture("smarthome/log-roles.yaml") == apps::kSmartHomeLogRolesYaml);
  CHECK(fixture("smarthome/dxg.yaml") == apps::kSmartHomeDxgYaml);
  CHECK(fixture("smarthome/pipelines.yaml") == apps::kSmartHomePipelinesYaml);
}

TEST_CASE("line diff counts added plus removed lines") {
  CHECK(diff_lines("a\nb\nc\n", "a\nb\nc\n") == 0);
  CHECK(diff_lines("a\nb\nc\n", "a\nx\nc\n") == 2);
  CHECK(diff_lines("a\nb\n", "a\nb\nc\n") == 1);
  CHECK(diff_lines("", "a\nb\n") == 2);
  // The canned routing-policy change is five added lines in one file.
  CHECK(diff_lines(fixture("retail/dxg.yaml"), fixture("retail/dxg-policy.yaml")) == 5);
}

TEST_CASE("percentiles interpolate over sorted samples") {
  CHECK(percentile({}, 0.5) == 0.0);
  CHECK(percentile({10.0}, 0.95) == 10.0);
  CHECK(percentile({4.0, 1.0, 3.0, 2.0}, 0.5) == Catch::Approx(2.5));
  std::vector<double> v;
  for (int i = 0; i < 100; ++i) v.push_back(double(i));
  CHECK(percentile(v, 0.95) == Catch::Approx(94.05));
}

TEST_CASE("breakdown rows are additive by construction") {
  benchdetail::StageSamples s;
  s.c_i = {1.0, 3.0};
  s.i = {2.0, 2.0};
  s.i_s = {5.0, 1.0};
  s.s = {10.0, 10.0};
  LatencyBreakdown row = s.breakdown("demo");
  CHECK(row.samples == 2);
  CHECK(row.prop.median == row.c_i.median + row.i.median + row.i_s.median);
  CHECK(row.prop.p95 == row.c_i.p95 + row.i.p95 + row.i_s.p95);
  CHECK(row.total.median == row.prop.median + row.s.median);
  CHECK(row.s.median == 10.0);
  CHECK(row.to_json().at("prop").at("median_ms").get<double>() == row.prop.median);
}

TEST_CASE("propagation bench produces sane rows for every config") {
  for (const std::string& config : {"rpc", "kn-mem", "kn-mem-udf", "kn-persistent"}) {
    INFO("config " << config);
    LatencyBreakdown row = bench_prop(config, 10, 5);
    CHECK(row.config == config);
    CHECK(row.samples == 10);
    CHECK(row.s.median >= 4.5);
    CHECK(row.c_i.median >= 0.0);
    CHECK(row.i.median >= 0.0);
    CHECK(row.i_s.median >= 0.0);
    CHECK(row.prop.median == row.c_i.median + row.i.median + row.i_s.median);
    CHECK(row.total.median == row.prop.median + row.s.median);
    CHECK(row.total.median > row.s.median);
    if (config == "rpc") {
      CHECK(row.i.median == 0.0);
      CHECK(row.i_s.median == 0.0);
    }
  }
}

TEST_CASE("sync bench shares the common prefix and keeps outputs identical") {
  SyncBenchResult r = bench_sync(3, 2000);
  CHECK(r.consolidated.prefix_evals == 2000);
  CHECK(r.unconsolidated.prefix_evals == 6000);
  CHECK(r.consolidated.total_evals < r.unconsolidated.total_evals);
  CHECK(r.outputs_equal);
  CHECK(r.processing_speedup() > 1.3);
}

TEST_CASE("reconfig bench counts the cost of each scripted change") {
  std::string fixtures = std::string(KNACTOR_SOURCE_DIR) + "/fixtures";

  CompositionCostRecord policy = bench_reconfig("T2-policy", fixtures);
  CHECK(policy.operations == std::set<std::string>{"config"});
  CHECK(policy.files == 1);
  CHECK(policy.lines_changed == 5);
  CHECK(policy.knactor_restarts == 0);
  CHECK(policy.effect_verified);

  CompositionCostRecord noop = bench_reconfig("T2-noop", fixtures);
  CHECK(noop.lines_changed == 0);
  CHECK(noop.knactor_restarts == 0);
  CHECK(noop.effect_verified);

  CompositionCostRecord schema = bench_reconfig("T3-schema", fixtures);
  CHECK(schema.files == 2);
  CHECK(schema.lines_changed > 0);
  CHECK(schema.knactor_restarts == 0);
  CHECK(schema.effect_verified);

  std::string table = render_reconfig_table({policy, noop, schema});
  CHECK(table.find("T2-policy") != std::string::npos);
  CHECK(table.find("FAIL") == std::string::npos);
}

TEST_CASE("bench tables render") {
  benchdetail::StageSamples s;
  s.c_i = {1.0};
  s.i = {0.5};
  s.i_s = {0.25};
  s.s = {10.0};
  std::string prop = render_prop_table({s.breakdown("demo")});
  CHECK(prop.find("Prop") != std::string::npos);
  CHECK(prop.find("demo") != std::string::npos);

  SyncBenchResult r;
  r.pipelines = 2;
  r.records = 10;
  r.consolidated = {1.0, 0.5, 10, 12, {}};
  r.unconsolidated = {2.0, 1.5, 20, 24, {}};
  r.outputs_equal = true;
  std::string sync = render_sync_table(r);
  CHECK(sync.find("consolidated") != std::string::npos);
  CHECK(sync.find("outputs equal") != std::string::npos);
}
