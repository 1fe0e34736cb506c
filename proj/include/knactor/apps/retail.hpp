#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "knactor/apps/tasks.hpp"
#include "knactor/cast.hpp"
#include "knactor/reconciler.hpp"

namespace knactor::apps {

// --- retail fixture -----------------------------------------------------------
//
// Three services sharing one object exchange. Checkout owns the order record;
// payment and shipping react to state the Cast integrator routes their way and
// publish results back into their own stores, which the integrator mirrors
// into the order. No service calls another.

inline constexpr const char* kCheckoutSchemaYaml = R"(store: checkout
retention: archive
fields:
  - {name: items, type: list}
  - {name: addr, type: string}
  - {name: price, type: float}
  - {name: shippingCost, type: float, external_fill: true}
  - {name: paymentID, type: string, external_fill: true}
  - {name: trackingID, type: string, external_fill: true}
)";

inline constexpr const char* kPaymentSchemaYaml = R"(store: payment
retention: archive
fields:
  - {name: orderRef, type: string}
  - {name: amount, type: float, external_fill: true}
  - {name: paymentID, type: string}
)";

inline constexpr const char* kShippingSchemaYaml = R"(store: shipping
retention: archive
fields:
  - {name: items, type: list, external_fill: true}
  - {name: addr, type: string, external_fill: true}
  - {name: method, type: string, external_fill: true}
  - {name: cost, type: float}
  - {name: trackingID, type: string}
  - {name: status, type: string}
)";

// v2 renames addr -> address and adds an insurance quote the integrator
// fills from the order price. The shipping service reads either spelling, so
// the rollout is config-only.
inline constexpr const char* kShippingSchemaV2Yaml = R"(store: shipping
version: 2
retention: archive
fields:
  - {name: items, type: list, external_fill: true}
  - {name: address, type: string, external_fill: true}
  - {name: method, type: string, external_fill: true}
  - {name: insurance, type: float, external_fill: true}
  - {name: cost, type: float}
  - {name: trackingID, type: string}
  - {name: status, type: string}
)";

// Every service's role reaches only its own store; the integrator role spans
// all three but cannot delete.
inline constexpr const char* kRetailRolesYaml = R"(policies:
  - role: checkout
    store: checkout
    fields: ["*"]
    verbs: [create, update, get, list, watch, delete]
  - role: payment
    store: payment
    fields: ["*"]
    verbs: [create, update, get, list, watch, delete]
  - role: shipping
    store: shipping
    fields: ["*"]
    verbs: [create, update, get, list, watch, delete]
  - role: caster
    store: checkout
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: caster
    store: payment
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: caster
    store: shipping
    fields: ["*"]
    verbs: [get, list, watch, create, update]
)";

// Payment gates shipping: the ship-* edges stay closed until the paymentID
// mirrored back onto the order is non-empty. Back-edges are guarded, so every
// cycle through checkout breaks on unchanged values.
inline constexpr const char* kRetailDxgYaml = R"(name: retail
nodes:
  - {name: checkout, dx: local, kind: object, store: checkout, role: caster}
  - {name: payment, dx: local, kind: object, store: payment, role: caster}
  - {name: shipping, dx: local, kind: object, store: shipping, role: caster}
edges:
  - name: request-payment
    from: checkout.price
    to: payment.amount
  - name: ship-items
    from: checkout.items
    to: shipping.items
    when: paymentID != ""
  - name: ship-addr
    from: checkout.addr
    to: shipping.addr
    when: paymentID != ""
  - name: ship-method
    from: checkout.price
    to: shipping.method
    transform: if price > 1000 then "air" else "ground"
    when: paymentID != ""
  - name: payment-back
    from: payment.paymentID
    to: checkout.paymentID
    when: paymentID != ""
  - name: tracking-back
    from: shipping.trackingID
    to: checkout.trackingID
    when: trackingID != ""
  - name: cost-back
    from: shipping.cost
    to: checkout.shippingCost
    when: status == "shipped"
)";

// T2: the same graph plus one routing policy; applying it is a reconfigure,
// not a restart.
inline constexpr const char* kRetailDxgPolicyYaml = R"(name: retail
nodes:
  - {name: checkout, dx: local, kind: object, store: checkout, role: caster}
  - {name: payment, dx: local, kind: object, store: payment, role: caster}
  - {name: shipping, dx: local, kind: object, store: shipping, role: caster}
edges:
  - name: request-payment
    from: checkout.price
    to: payment.amount
  - name: ship-items
    from: checkout.items
    to: shipping.items
    when: paymentID != ""
  - name: ship-addr
    from: checkout.addr
    to: shipping.addr
    when: paymentID != ""
  - name: ship-method
    from: checkout.price
    to: shipping.method
    transform: if price > 1000 then "air" else "ground"
    when: paymentID != ""
  - name: payment-back
    from: payment.paymentID
    to: checkout.paymentID
    when: paymentID != ""
  - name: tracking-back
    from: shipping.trackingID
    to: checkout.trackingID
    when: trackingID != ""
  - name: cost-back
    from: shipping.cost
    to: checkout.shippingCost
    when: status == "shipped"
policies:
  - name: expedite-bulk
    when: price > 500 and paymentID != ""
    set: shipping.method
    value: '"air"'
)";

// T3: pairs with the v2 shipping schema; one extra edge fills the new field.
inline constexpr const char* kRetailDxgV2Yaml = R"(name: retail
nodes:
  - {name: checkout, dx: local, kind: object, store: checkout, role: caster}
  - {name: payment, dx: local, kind: object, store: payment, role: caster}
  - {name: shipping, dx: local, kind: object, store: shipping, role: caster}
edges:
  - name: request-payment
    from: checkout.price
    to: payment.amount
  - name: ship-items
    from: checkout.items
    to: shipping.items
    when: paymentID != ""
  - name: ship-addr
    from: checkout.addr
    to: shipping.address
    when: paymentID != ""
  - name: ship-method
    from: checkout.price
    to: shipping.method
    transform: if price > 1000 then "air" else "ground"
    when: paymentID != ""
  - name: ship-insurance
    from: checkout.price
    to: shipping.insurance
    transform: price * 0.01
    when: paymentID != ""
  - name: payment-back
    from: payment.paymentID
    to: checkout.paymentID
    when: paymentID != ""
  - name: tracking-back
    from: shipping.trackingID
    to: checkout.trackingID
    when: trackingID != ""
  - name: cost-back
    from: shipping.cost
    to: checkout.shippingCost
    when: status == "shipped"
)";

struct RetailOptions {
  uint64_t shipping_delay_ms = 450;  // simulated carrier booking
  uint64_t payment_delay_ms = 0;     // simulated payment provider
  int shipping_workers = 4;
  CastMode mode = CastMode::ClientEval;
  uint64_t settle_ms = 150;
};

class RetailStack {
 public:
  explicit RetailStack(RetailOptions opts = {}) : opts_(opts) {}

  ~RetailStack() { stop(); }

  RetailStack(const RetailStack&) = delete;
  RetailStack& operator=(const RetailStack&) = delete;

  void start() {
    if (started_) return;
    for (auto& p : access_policies_from_yaml_text(kRetailRolesYaml)) admin_.apply_policy(std::move(p));
    // Each service externalizes its own schema under its own role.
    externalize(checkout_dx_, {kCheckoutSchemaYaml});
    externalize(payment_dx_, {kPaymentSchemaYaml});
    externalize(shipping_dx_, {kShippingSchemaYaml});

    payment_rec_ = std::make_unique<Reconciler>(payment_dx_, payment_spec());
    counters_.note_start("payment-knactor");
    payment_rec_->start();

    shipping_rec_ = std::make_unique<Reconciler>(shipping_dx_, shipping_spec());
    counters_.note_start("shipping-knactor");
    shipping_rec_->start();

    CastConfig cfg;
    cfg.dxg = parse_dxg(kRetailDxgYaml);
    cfg.mode = opts_.mode;
    cfg.consumer_id = "cast-retail";
    cfg.settle_ms = opts_.settle_ms;
    cast_ = std::make_unique<Cast>(std::move(cfg), [this](const StoreRef& ref) -> std::shared_ptr<ObjectDx> {
      return std::make_shared<LocalObjectDx>(engine_, ref.role);
    });
    counters_.note_start("cast-retail");
    cast_->start();
    started_ = true;
  }

  void stop() {
    if (!started_) return;
    if (cast_) cast_->stop();
    if (shipping_rec_) shipping_rec_->stop();
    if (payment_rec_) payment_rec_->stop();
    started_ = false;
  }

  // Creates n orders and returns their keys. `price` maps order index to a
  // price so tests can steer the routing decision.
  std::vector<std::string> simulate_order(size_t n, const std::function<double(size_t)>& price,
                                          Value items = Value::array({"widget"})) {
    std::vector<std::string> keys;
    keys.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      uint64_t seq = next_order_++;
      std::string key = "order-" + std::to_string(seq);
      checkout_dx_.put("checkout", key,
                       Value{{"items", items}, {"addr", "addr-" + std::to_string(seq)}, {"price", price(i)}});
      keys.push_back(std::move(key));
    }
    return keys;
  }

  // An order is done when its shipment reports shipped and every external
  // fill has landed back on the order.
  bool order_complete(const std::string& key) {
    try {
      StateObject ship = admin_.get("shipping", key);
      if (ship.attributes.value("status", std::string()) != "shipped") return false;
      StateObject order = admin_.get("checkout", key);
      return !order.attributes.value("trackingID", std::string()).empty() &&
             !order.attributes.value("paymentID", std::string()).empty() &&
             order.attributes.value("shippingCost", 0.0) > 0.0;
    } catch (const DxError&) {
      return false;
    }
  }

  bool wait_all_shipped(const std::vector<std::string>& keys, std::chrono::milliseconds timeout) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (std::chrono::steady_clock::now() < deadline) {
      size_t done = 0;
      for (const auto& k : keys)
        if (order_complete(k)) ++done;
      if (done == keys.size()) return true;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    return false;
  }

  void reconfigure(const std::string& dxg_yaml) { cast_->reconfigure(parse_dxg(dxg_yaml)); }

  // T3 rollout: the shipping service registers its evolved schema, then the
  // integrator picks up the matching graph. Nothing restarts.
  void upgrade_shipping(const std::string& schema_yaml, const std::string& dxg_yaml) {
    externalize(shipping_dx_, {schema_yaml});
    reconfigure(dxg_yaml);
  }

  void upgrade_shipping_v2() { upgrade_shipping(kShippingSchemaV2Yaml, kRetailDxgV2Yaml); }

  bool quiesce(std::chrono::milliseconds timeout) {
    return cast_->quiesce(timeout) && payment_rec_->quiesce(timeout) && shipping_rec_->quiesce(timeout);
  }

  ObjectEngine& engine() { return engine_; }
  Cast& cast() { return *cast_; }
  TaskCounters& counters() { return counters_; }
  ObjectDx& admin() { return admin_; }

 private:
  ReconcilerSpec payment_spec() {
    ReconcilerSpec spec;
    spec.name = "payment-knactor";
    spec.stores = {"payment"};
    spec.on_change = [this](const StateObject& s) -> std::vector<DesiredWrite> {
      const Value& a = s.attributes;
      if (!a.value("paymentID", std::string()).empty()) return {};
      if (!a.contains("amount")) return {};  // the integrator has not routed the order yet
      if (opts_.payment_delay_ms) std::this_thread::sleep_for(std::chrono::milliseconds(opts_.payment_delay_ms));
      return {{"payment", s.key, Value{{"orderRef", s.key}, {"paymentID", "PAY-" + s.key}}}};
    };
    return spec;
  }

  ReconcilerSpec shipping_spec() {
    ReconcilerSpec spec;
    spec.name = "shipping-knactor";
    spec.stores = {"shipping"};
    spec.workers = opts_.shipping_workers;
    spec.on_change = [this](const StateObject& s) -> std::vector<DesiredWrite> {
      const Value& a = s.attributes;
      if (a.value("status", std::string()) == "shipped") return {};
      std::string method = a.value("method", std::string());
      // Tolerates the v2 rename (addr -> address) so the rollout needs no
      // code change here.
      bool has_addr = a.contains("addr") || a.contains("address");
      if (!a.contains("items") || !has_addr || method.empty()) return {};
      std::this_thread::sleep_for(std::chrono::milliseconds(opts_.shipping_delay_ms));
      double cost = (method == "air" ? 25.0 : 5.0) + 2.5 * a.at("items").size();
      return {{"shipping", s.key,
               Value{{"cost", cost}, {"trackingID", "TRK-" + s.key}, {"status", "shipped"}}}};
    };
    return spec;
  }

  RetailOptions opts_;
  ObjectEngine engine_;
  LocalObjectDx admin_{engine_, "admin"};
  LocalObjectDx checkout_dx_{engine_, "checkout"};
  LocalObjectDx payment_dx_{engine_, "payment"};
  LocalObjectDx shipping_dx_{engine_, "shipping"};
  TaskCounters counters_;
  std::unique_ptr<Reconciler> payment_rec_;
  std::unique_ptr<Reconciler> shipping_rec_;
  std::unique_ptr<Cast> cast_;
  std::atomic<uint64_t> next_order_{1};
  bool started_ = false;
};

}  // namespace knactor::apps
