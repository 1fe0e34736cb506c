#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <thread>

#include "knactor/reconciler.hpp"

using namespace knactor;

namespace {

constexpr auto kShipmentsSchema = R"(
store: shipments
retention: archive
fields:
  - {name: item, type: string}
  - {name: status, type: string}
  - {name: trackingID, type: string}
)";

void grant_all(ObjectEngine& engine, const std::string& role, const std::string& store) {
  AccessPolicy p;
  p.role = role;
  p.store_name = store;
  p.field_paths = {"*"};
  p.verbs = {Verb::Get, Verb::List, Verb::Watch, Verb::Create, Verb::Update, Verb::Delete};
  engine.apply_policy("admin", p);
}

// A carrier-booking reconciler: pending shipments get a tracking ID.
ReconcilerSpec booking_spec() {
  ReconcilerSpec spec;
  spec.name = "carrier-booking";
  spec.stores = {"shipments"};
  spec.backoff_ms = 10;
  spec.on_change = [](const StateObject& s) -> std::vector<DesiredWrite> {
    if (s.attributes.value("status", "") != "pending") return {};
    Value next = s.attributes;
    next["status"] = "shipped";
    next["trackingID"] = "TRK-" + s.key;
    return {{s.store_name, s.key, next}};
  };
  return spec;
}

}  // namespace

TEST_CASE("reconciler fills desired state for watched objects") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  externalize(dx, {kShipmentsSchema});

  auto rec = run_reconciler(dx, booking_spec());
  dx.put("shipments", "s-1", Value{{"item", "mug"}, {"status", "pending"}, {"trackingID", ""}});
  REQUIRE(rec->quiesce(std::chrono::seconds(5)));

  StateObject s = dx.get("shipments", "s-1");
  CHECK(s.attributes["status"] == "shipped");
  CHECK(s.attributes["trackingID"] == "TRK-s-1");
  CHECK(rec->metrics().writes >= 1);
  rec->stop();
}

TEST_CASE("objects created before start are picked up by the initial resync") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  externalize(dx, {kShipmentsSchema});
  dx.put("shipments", "early", Value{{"item", "pot"}, {"status", "pending"}, {"trackingID", ""}});

  auto rec = run_reconciler(dx, booking_spec());
  REQUIRE(rec->quiesce(std::chrono::seconds(5)));
  CHECK(dx.get("shipments", "early").attributes["status"] == "shipped");
  rec->stop();
}

TEST_CASE("steady state produces no writes and no revision churn") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  externalize(dx, {kShipmentsSchema});

  ReconcilerSpec spec = booking_spec();
  spec.resync_interval_ms = 200;  // several resync passes within the test window
  auto rec = run_reconciler(dx, spec);
  dx.put("shipments", "s-1", Value{{"item", "mug"}, {"status", "pending"}, {"trackingID", ""}});
  REQUIRE(rec->quiesce(std::chrono::seconds(5)));
  uint64_t rev = dx.get("shipments", "s-1").revision;

  std::this_thread::sleep_for(std::chrono::milliseconds(700));
  REQUIRE(rec->quiesce(std::chrono::seconds(5)));
  CHECK(dx.get("shipments", "s-1").revision == rev);
  CHECK(rec->metrics().resyncs >= 2);
  rec->stop();
}

TEST_CASE("conflicting concurrent writes are retried against fresh state") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  externalize(dx, {kShipmentsSchema});

  std::atomic<bool> entered{false};
  std::atomic<bool> bumped{false};
  ReconcilerSpec spec;
  spec.name = "slow-booking";
  spec.stores = {"shipments"};
  spec.backoff_ms = 10;
  spec.on_change = [&](const StateObject& s) -> std::vector<DesiredWrite> {
    entered = true;
    while (!bumped) std::this_thread::sleep_for(std::chrono::milliseconds(2));
    if (s.attributes.value("trackingID", "") != "") return {};
    Value next = s.attributes;
    next["trackingID"] = "TRK-1";
    return {{s.store_name, s.key, next}};
  };
  auto rec = run_reconciler(dx, spec);

  dx.put("shipments", "s-1", Value{{"item", "mug"}, {"status", "pending"}, {"trackingID", ""}});
  while (!entered) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  dx.put("shipments", "s-1", Value{{"status", "paid"}});  // invalidates the snapshot
  bumped = true;

  REQUIRE(rec->quiesce(std::chrono::seconds(5)));
  StateObject s = dx.get("shipments", "s-1");
  CHECK(s.attributes["status"] == "paid");         // the interfering write survived
  CHECK(s.attributes["trackingID"] == "TRK-1");    // and the fill landed on top of it
  CHECK(rec->metrics().conflicts >= 1);
  rec->stop();
}

TEST_CASE("callback errors back off and recover") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  externalize(dx, {kShipmentsSchema});

  std::atomic<int> failures{2};
  ReconcilerSpec spec = booking_spec();
  auto inner = spec.on_change;
  spec.on_change = [&, inner](const StateObject& s) {
    if (failures.fetch_sub(1) > 0) throw std::runtime_error("carrier unreachable");
    return inner(s);
  };
  auto rec = run_reconciler(dx, spec);
  dx.put("shipments", "s-1", Value{{"item", "mug"}, {"status", "pending"}, {"trackingID", ""}});
  bool settled = rec->quiesce(std::chrono::seconds(5));
  auto m = rec->metrics();
  CAPTURE(m.processed, m.callback_errors, m.writes, m.conflicts, failures.load());
  REQUIRE(settled);

  CHECK(dx.get("shipments", "s-1").attributes["status"] == "shipped");
  CHECK(rec->metrics().callback_errors == 2);
  rec->stop();
}

TEST_CASE("writes to other stores do not carry the snapshot revision") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  grant_all(engine, "shipper", "invoices");
  externalize(dx, {kShipmentsSchema, R"(
store: invoices
retention: archive
fields:
  - {name: amount, type: float}
)"});

  ReconcilerSpec spec;
  spec.name = "invoicer";
  spec.stores = {"shipments"};
  spec.on_change = [](const StateObject& s) -> std::vector<DesiredWrite> {
    if (s.attributes.value("status", "") != "pending") return {};
    Value next = s.attributes;
    next["status"] = "invoiced";
    return {{s.store_name, s.key, next}, {"invoices", s.key, Value{{"amount", 9.5}}}};
  };
  auto rec = run_reconciler(dx, spec);
  dx.put("shipments", "s-1", Value{{"item", "mug"}, {"status", "pending"}, {"trackingID", ""}});
  REQUIRE(rec->quiesce(std::chrono::seconds(5)));

  CHECK(dx.get("shipments", "s-1").attributes["status"] == "invoiced");
  CHECK(dx.get("invoices", "s-1").attributes["amount"].get<double>() == Catch::Approx(9.5));
  rec->stop();
}

TEST_CASE("deleted objects vanish from the dirty set without errors") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "shipper");
  grant_all(engine, "shipper", "shipments");
  externalize(dx, {kShipmentsSchema});

  std::atomic<bool> hold{true};
  ReconcilerSpec spec = booking_spec();
  auto inner = spec.on_change;
  spec.on_change = [&, inner](const StateObject& s) {
    while (hold) std::this_thread::sleep_for(std::chrono::milliseconds(2));
    return inner(s);
  };
  auto rec = run_reconciler(dx, spec);

  dx.put("shipments", "s-1", Value{{"item", "mug"}, {"status", "pending"}, {"trackingID", ""}});
  dx.put("shipments", "s-2", Value{{"item", "pot"}, {"status", "pending"}, {"trackingID", ""}});
  dx.remove("shipments", "s-2");
  hold = false;
  REQUIRE(rec->quiesce(std::chrono::seconds(5)));

  CHECK(dx.get("shipments", "s-1").attributes["status"] == "shipped");
  CHECK_THROWS(dx.get("shipments", "s-2"));
  CHECK(rec->metrics().callback_errors == 0);
  rec->stop();
}

TEST_CASE("externalize registers every schema or none") {
  ObjectEngine engine;
  LocalObjectDx dx(engine, "admin");

  CHECK_THROWS_AS(externalize(dx, {kShipmentsSchema, "store: broken\nfields: [{name: x, type: blob}]"}),
                  DxError);
  CHECK(dx.store_names().empty());

  auto versions = externalize(dx, {kShipmentsSchema});
  REQUIRE(versions.size() == 1);
  CHECK(versions[0] == 1);
  CHECK(dx.store_names() == std::vector<std::string>{"shipments"});
}
