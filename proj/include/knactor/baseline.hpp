#pragma once

#include <atomic>
#include <chrono>
#include <string>
#include <thread>
#include <vector>

#include "knactor/trace.hpp"
#include "knactor/wire.hpp"

namespace knactor {

// Request-response shipment flow: the caller invokes shipping directly and
// blocks for the full round trip.  Runs on the same length-delimited JSON
// framing as the DX protocol so latency comparisons measure architecture,
// not serialization.

struct ShipOrderRequest {
  std::vector<std::string> items;
  std::string addr;
};

struct ShipOrderResponse {
  std::string trackingID;
  double cost = 0;
  double processing_ms = 0;  // server-measured service time for this call
};

struct BaselineOptions {
  double processing_ms = 450;  // simulated carrier-booking delay
};

class BaselineShippingServer {
 public:
  explicit BaselineShippingServer(const std::string& endpoint, BaselineOptions opts = {})
      : opts_(opts), wire_(endpoint, [this](std::shared_ptr<WireSession> s, const Envelope& e) {
          handle(std::move(s), e);
        }) {}

  uint16_t port() const { return wire_.port(); }
  void stop() { wire_.stop(); }
  uint64_t calls() const { return calls_.load(); }

 private:
  void handle(std::shared_ptr<WireSession> s, const Envelope& e) {
    if (e.verb != "ship_order") throw DxError(ErrorCode::InvalidRequest, "unknown verb '" + e.verb + "'");
    if (!e.body.is_object() || !e.body.contains("items") || !e.body.at("items").is_array() ||
        e.body.at("items").empty())
      throw DxError(ErrorCode::InvalidRequest, "ship_order needs a non-empty items list");
    if (e.body.value("addr", "").empty())
      throw DxError(ErrorCode::InvalidRequest, "ship_order needs an addr");

    double t0 = steady_now_ms();
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(opts_.processing_ms));
    double spent = steady_now_ms() - t0;

    uint64_t n = ++calls_;
    double cost = 5.0 + 2.5 * static_cast<double>(e.body.at("items").size());
    s->reply(e.id, Value{{"trackingID", "TRK-RPC-" + std::to_string(n)},
                         {"cost", cost},
                         {"processing_ms", spent}});
  }

  BaselineOptions opts_;
  std::atomic<uint64_t> calls_{0};
  WireServer wire_;  // last: the handler reads fields above it
};

class BaselineShippingClient {
 public:
  explicit BaselineShippingClient(const std::string& endpoint) : wire_(endpoint) {}

  ShipOrderResponse ship_order(const ShipOrderRequest& req) {
    Value body{{"items", req.items}, {"addr", req.addr}};
    Value v = wire_.request("ship_order", "", "", std::move(body), "caller");
    ShipOrderResponse resp;
    resp.trackingID = v.at("trackingID").get<std::string>();
    resp.cost = v.at("cost").get<double>();
    resp.processing_ms = v.value("processing_ms", 0.0);
    return resp;
  }

 private:
  WireClient wire_;
};

// One-shot form; connection refused surfaces as a transport error.
inline ShipOrderResponse ship_order(const std::string& endpoint, const ShipOrderRequest& req) {
  BaselineShippingClient client(endpoint);
  return client.ship_order(req);
}

}  // namespace knactor
