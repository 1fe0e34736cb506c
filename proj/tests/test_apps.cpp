#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "knactor/apps/retail.hpp"
#include "knactor/apps/smarthome.hpp"
#include "knactor/baseline.hpp"

using namespace knactor;
using apps::RetailOptions;
using apps::RetailStack;
using apps::SmartHomeOptions;
using apps::SmartHomeStack;

namespace {

bool poll_until(const std::function<bool()>& pred, std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(15));
  }
  return false;
}

RetailOptions fast_retail() {
  RetailOptions o;
  o.shipping_delay_ms = 10;
  o.settle_ms = 60;
  return o;
}

SmartHomeOptions fast_home() {
  SmartHomeOptions o;
  o.quiet_ms = 400;
  o.resync_ms = 80;
  o.settle_ms = 60;
  return o;
}

Value attrs(RetailStack& stack, const std::string& store, const std::string& key) {
  return stack.admin().get(store, key).attributes;
}

}  // namespace

TEST_CASE("retail orders flow to shipped end to end") {
  RetailStack stack(fast_retail());
  stack.start();

  auto keys = stack.simulate_order(6, [](size_t i) { return i == 0 ? 1200.0 : 42.0; });
  REQUIRE(stack.wait_all_shipped(keys, std::chrono::seconds(30)));

  std::set<std::string> tracking;
  for (size_t i = 0; i < keys.size(); ++i) {
    const auto& key = keys[i];
    Value ship = attrs(stack, "shipping", key);
    REQUIRE(ship.at("status").get<std::string>() == "shipped");
    CHECK(ship.at("method").get<std::string>() == (i == 0 ? "air" : "ground"));
    CHECK(ship.at("trackingID").get<std::string>() == "TRK-" + key);

    Value order = attrs(stack, "checkout", key);
    // The invariant behind "shipped": both external references made it back.
    CHECK(order.at("trackingID").get<std::string>() == "TRK-" + key);
    CHECK(order.at("paymentID").get<std::string>() == "PAY-" + key);
    CHECK(order.at("shippingCost").get<double>() == (i == 0 ? 27.5 : 7.5));

    Value pay = attrs(stack, "payment", key);
    CHECK(pay.at("orderRef").get<std::string>() == key);
    CHECK(pay.at("amount").get<double>() == order.at("price").get<double>());

    tracking.insert(ship.at("trackingID").get<std::string>());
  }
  CHECK(tracking.size() == keys.size());
}

TEST_CASE("payment clearance gates shipping") {
  RetailOptions o = fast_retail();
  o.payment_delay_ms = 400;
  RetailStack stack(o);
  stack.start();

  auto keys = stack.simulate_order(1, [](size_t) { return 100.0; });
  std::this_thread::sleep_for(std::chrono::milliseconds(200));

  // Payment is still pending: nothing may have reached the shipping store.
  CHECK_THROWS_AS(stack.admin().get("shipping", keys[0]), DxError);
  CHECK(attrs(stack, "checkout", keys[0]).value("paymentID", std::string()).empty());

  REQUIRE(stack.wait_all_shipped(keys, std::chrono::seconds(30)));
}

TEST_CASE("routing policy lands as a reconfigure, not a restart") {
  RetailStack stack(fast_retail());
  stack.start();

  auto before_keys = stack.simulate_order(1, [](size_t) { return 600.0; });
  REQUIRE(stack.wait_all_shipped(before_keys, std::chrono::seconds(30)));
  CHECK(attrs(stack, "shipping", before_keys[0]).at("method").get<std::string>() == "ground");

  uint64_t tasks_before = stack.counters().total();
  stack.reconfigure(apps::kRetailDxgPolicyYaml);

  auto after_keys = stack.simulate_order(1, [](size_t) { return 600.0; });
  REQUIRE(stack.wait_all_shipped(after_keys, std::chrono::seconds(30)));
  CHECK(attrs(stack, "shipping", after_keys[0]).at("method").get<std::string>() == "air");

  // Already-processed state is not rewritten, and no task restarted.
  CHECK(attrs(stack, "shipping", before_keys[0]).at("method").get<std::string>() == "ground");
  CHECK(stack.counters().total() == tasks_before);
}

TEST_CASE("schema evolution fills the new field without restarts") {
  RetailStack stack(fast_retail());
  stack.start();

  uint64_t tasks_before = stack.counters().total();
  stack.upgrade_shipping_v2();

  auto keys = stack.simulate_order(1, [](size_t) { return 800.0; });
  REQUIRE(stack.wait_all_shipped(keys, std::chrono::seconds(30)));
  Value ship = attrs(stack, "shipping", keys[0]);
  CHECK(ship.at("insurance").get<double>() == 8.0);
  // The renamed field carries the address now; the old spelling is gone.
  CHECK(ship.at("address").get<std::string>() ==
        attrs(stack, "checkout", keys[0]).at("addr").get<std::string>());
  CHECK_FALSE(ship.contains("addr"));
  CHECK(stack.counters().total() == tasks_before);
}

TEST_CASE("service roles stay inside their own stores") {
  RetailStack stack(fast_retail());
  stack.start();
  auto keys = stack.simulate_order(1, [](size_t) { return 10.0; });

  LocalObjectDx payment(stack.engine(), "payment");
  try {
    payment.put("checkout", "order-x", Value{{"price", 1.0}});
    FAIL("payment role wrote a foreign store");
  } catch (const DxError& e) {
    CHECK(e.code() == ErrorCode::AccessDenied);
  }
  try {
    payment.get("checkout", keys[0]);
    FAIL("payment role read a foreign store");
  } catch (const DxError& e) {
    CHECK(e.code() == ErrorCode::AccessDenied);
  }

  LocalObjectDx shipping(stack.engine(), "shipping");
  try {
    shipping.watch("checkout");
    FAIL("shipping role watched a foreign store");
  } catch (const DxError& e) {
    CHECK(e.code() == ErrorCode::AccessDenied);
  }
}

TEST_CASE("app services compose only through exchanges") {
  namespace fs = std::filesystem;
  fs::path apps_dir = fs::path(__FILE__).parent_path().parent_path() / "include" / "knactor" / "apps";
  REQUIRE(fs::exists(apps_dir));

  size_t checked = 0;
  for (const auto& entry : fs::directory_iterator(apps_dir)) {
    if (entry.path().extension() != ".hpp") continue;
    std::ifstream in(entry.path());
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("#include", 0) != 0) continue;
      // Service code may speak to exchanges (via integrator/sdk headers) but
      // never to another service: no raw wire, no RPC stubs, no HTTP.
      CHECK(line.find("wire.hpp") == std::string::npos);
      CHECK(line.find("dx_server.hpp") == std::string::npos);
      CHECK(line.find("baseline.hpp") == std::string::npos);
      CHECK(line.find("httplib") == std::string::npos);
    }
    ++checked;
  }
  CHECK(checked >= 3);  // tasks, retail, smarthome
}

TEST_CASE("smart home raises the lamp on motion and dims on quiet") {
  SmartHomeStack home(fast_home());
  home.start();

  auto lamp_intensity = [&]() -> double {
    try {
      return home.admin().get("lamp", "house").attributes.value("intensity", -1.0);
    } catch (const DxError&) {
      return -1.0;
    }
  };
  REQUIRE(poll_until([&] { return lamp_intensity() == 0.1; }, std::chrono::seconds(5)));

  home.motion_event(true);
  // The stream field arrives renamed: the house object gains `motion`.
  REQUIRE(poll_until(
      [&] { return home.admin().get("house", "house").attributes.value("motion", false); },
      std::chrono::seconds(5)));
  REQUIRE(poll_until([&] { return lamp_intensity() == 0.9; }, std::chrono::seconds(5)));
  CHECK(home.admin().get("house", "house").attributes.at("mode").get<std::string>() == "active");

  // No further events: the quiet spell clears the latch and dims the lamp.
  REQUIRE(poll_until([&] { return lamp_intensity() == 0.1; }, std::chrono::seconds(10)));
  CHECK_FALSE(home.admin().get("house", "house").attributes.value("motion", true));
}

TEST_CASE("sensitivity config casts down to the sensor store") {
  SmartHomeStack home(fast_home());
  home.start();

  home.set_sensitivity(7);
  REQUIRE(poll_until(
      [&] {
        try {
          return home.admin().get("motion", "house").attributes.value("sensitivity", int64_t{0}) == 7;
        } catch (const DxError&) {
          return false;
        }
      },
      std::chrono::seconds(5)));
}

TEST_CASE("energy readings roll up into the house object") {
  SmartHomeStack home(fast_home());
  home.start();

  auto lamp_ready = [&] {
    try {
      return home.admin().get("lamp", "house").attributes.value("intensity", -1.0) == 0.1;
    } catch (const DxError&) {
      return false;
    }
  };
  REQUIRE(poll_until(lamp_ready, std::chrono::seconds(5)));

  home.lamp_tick(3.6e6);  // one simulated hour at 60W, intensity 0.1
  home.lamp_tick(3.6e6);
  REQUIRE(poll_until(
      [&] {
        double kwh = home.admin().get("house", "house").attributes.value("kwh", 0.0);
        return kwh > 0.0119 && kwh < 0.0121;
      },
      std::chrono::seconds(5)));
}

TEST_CASE("rpc baseline ships orders end to end") {
  BaselineOptions opts;
  opts.processing_ms = 15;
  BaselineShippingServer server("tcp:127.0.0.1:0", opts);
  BaselineShippingClient client("tcp:127.0.0.1:" + std::to_string(server.port()));

  ShipOrderResponse r1 = client.ship_order({{"mug", "poster"}, "12 Elm St"});
  CHECK(r1.trackingID == "TRK-RPC-1");
  CHECK(r1.cost == 10.0);
  CHECK(r1.processing_ms >= 15.0);

  ShipOrderResponse r2 = client.ship_order({{"mug"}, "12 Elm St"});
  CHECK(r2.trackingID == "TRK-RPC-2");
  CHECK(r2.cost == 7.5);
  CHECK(server.calls() == 2);
  server.stop();
}

TEST_CASE("rpc baseline rejects malformed orders") {
  BaselineOptions opts;
  opts.processing_ms = 1;
  BaselineShippingServer server("tcp:127.0.0.1:0", opts);
  BaselineShippingClient client("tcp:127.0.0.1:" + std::to_string(server.port()));

  try {
    client.ship_order({{}, "12 Elm St"});
    FAIL("empty items accepted");
  } catch (const DxError& e) {
    CHECK(e.code() == ErrorCode::InvalidRequest);
  }
  try {
    client.ship_order({{"mug"}, ""});
    FAIL("empty addr accepted");
  } catch (const DxError& e) {
    CHECK(e.code() == ErrorCode::InvalidRequest);
  }
  server.stop();
}

TEST_CASE("rpc baseline surfaces connection failures as transport errors") {
  try {
    ship_order("tcp:127.0.0.1:9", {{"mug"}, "12 Elm St"});
    FAIL("connected to a dead port");
  } catch (const DxError& e) {
    CHECK(e.code() == ErrorCode::Transport);
  }
}
