#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "knactor/apps/tasks.hpp"
#include "knactor/cast.hpp"
#include "knactor/reconciler.hpp"
#include "knactor/sync.hpp"

namespace knactor::apps {

// --- smart-home fixture ---------------------------------------------------------
//
// Devices publish readings onto log streams; the Sync integrator distills them
// into the house object (rename trigger -> motion, rolling kwh total). The
// house knactor reconciles its own object into a desired lamp intensity, and
// the Cast integrator carries configuration down to the device stores. One
// house, keyed "house", everywhere.

// `last_motion` keeps the latch in the store: the pipeline stamps it from the
// record's ts, so the control loop stays stateless and resync-safe.
inline constexpr const char* kHouseSchemaYaml = R"(store: house
retention: archive
fields:
  - {name: mode, type: string}
  - {name: motion, type: bool, external_fill: true}
  - {name: last_motion, type: int, external_fill: true}
  - {name: kwh, type: float, external_fill: true}
  - {name: sensitivity, type: int}
  - {name: intensity, type: float}
)";

inline constexpr const char* kLampSchemaYaml = R"(store: lamp
retention: archive
fields:
  - {name: intensity, type: float, external_fill: true}
)";

inline constexpr const char* kMotionSchemaYaml = R"(store: motion
retention: archive
fields:
  - {name: sensitivity, type: int, external_fill: true}
)";

inline constexpr const char* kSmartHomeStreamsYaml = R"(streams:
  - name: motion
    fields:
      - {name: device, type: string}
      - {name: trigger, type: bool}
  - name: kwh
    fields:
      - {name: device, type: string}
      - {name: kwh, type: float}
)";

inline constexpr const char* kSmartHomeObjectRolesYaml = R"(policies:
  - role: house
    store: house
    fields: ["*"]
    verbs: [create, update, get, list, watch, delete]
  - role: lamp
    store: lamp
    fields: ["*"]
    verbs: [create, update, get, list, watch, delete]
  - role: motion
    store: motion
    fields: ["*"]
    verbs: [create, update, get, list, watch, delete]
  - role: caster
    store: house
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: caster
    store: lamp
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: caster
    store: motion
    fields: ["*"]
    verbs: [get, list, watch, create, update]
  - role: syncer
    store: house
    fields: ["*"]
    verbs: [get, create, update]
)";

// Log-side grants: `store` names the stream. Devices append to their own
// stream; the Sync integrator reads both.
inline constexpr const char* kSmartHomeLogRolesYaml = R"(policies:
  - role: motion
    store: motion
    fields: ["*"]
    verbs: [create, get, watch]
  - role: lamp
    store: kwh
    fields: ["*"]
    verbs: [create, get, watch]
  - role: syncer
    store: motion
    fields: ["*"]
    verbs: [get, watch]
  - role: syncer
    store: kwh
    fields: ["*"]
    verbs: [get, watch]
)";

inline constexpr const char* kSmartHomeDxgYaml = R"(name: smarthome
nodes:
  - {name: house, dx: local, kind: object, store: house, role: caster}
  - {name: motion, dx: local, kind: object, store: motion, role: caster}
  - {name: lamp, dx: local, kind: object, store: lamp, role: caster}
edges:
  - name: sensitivity-down
    from: house.sensitivity
    to: motion.sensitivity
  - name: intensity-down
    from: house.intensity
    to: lamp.intensity
)";

inline constexpr const char* kSmartHomePipelinesYaml = R"(pipelines:
  - name: motion-to-house
    source: {dx: local, stream: motion}
    ops:
      - {op: filter, predicate: trigger == true}
      - {op: rename, fields: {trigger: motion}}
    sink: {kind: object, dx: local, store: house, key: house, fields: {motion: motion, ts: last_motion}}
    batch: per_record
  - name: kwh-to-house
    source: {dx: local, stream: kwh}
    ops:
      - {op: aggregate, fn: sum, field: kwh}
    sink: {kind: object, dx: local, store: house, key: house, fields: {sum_kwh: kwh}}
    batch: {interval_ms: 200}
)";

struct SmartHomeOptions {
  double high_intensity = 0.9;
  double low_intensity = 0.1;
  uint64_t quiet_ms = 600;    // no motion for this long -> dim the lamp
  uint64_t resync_ms = 150;   // house control-loop tick
  CastMode mode = CastMode::ClientEval;
  uint64_t settle_ms = 150;
};

class SmartHomeStack {
 public:
  explicit SmartHomeStack(SmartHomeOptions opts = {}) : opts_(opts) {}

  ~SmartHomeStack() { stop(); }

  SmartHomeStack(const SmartHomeStack&) = delete;
  SmartHomeStack& operator=(const SmartHomeStack&) = delete;

  void start() {
    if (started_) return;
    for (auto& p : access_policies_from_yaml_text(kSmartHomeObjectRolesYaml)) oadmin_.apply_policy(std::move(p));
    for (auto& p : access_policies_from_yaml_text(kSmartHomeLogRolesYaml)) ladmin_.apply_policy(std::move(p));

    externalize(house_dx_, {kHouseSchemaYaml});
    externalize(lamp_dx_, {kLampSchemaYaml});
    externalize(motion_dx_, {kMotionSchemaYaml});
    for (auto& def : streams_from_yaml_text(kSmartHomeStreamsYaml)) {
      (def.name == "kwh" ? lamp_log_ : motion_log_).create_stream(std::move(def));
    }

    // The house starts idle; this seed object is what everything else keys on.
    house_dx_.put("house", "house",
                  Value{{"mode", "idle"}, {"sensitivity", 5}, {"intensity", opts_.low_intensity}});

    house_rec_ = std::make_unique<Reconciler>(house_dx_, house_spec());
    counters_.note_start("house-knactor");
    house_rec_->start();

    CastConfig cfg;
    cfg.dxg = parse_dxg(kSmartHomeDxgYaml);
    cfg.mode = opts_.mode;
    cfg.consumer_id = "cast-smarthome";
    cfg.settle_ms = opts_.settle_ms;
    cast_ = std::make_unique<Cast>(std::move(cfg), [this](const StoreRef& ref) -> std::shared_ptr<ObjectDx> {
      return std::make_shared<LocalObjectDx>(objects_, ref.role);
    });
    counters_.note_start("cast-smarthome");
    cast_->start();

    sync_ = std::make_unique<Sync>(resolve_pipelines(), /*consolidate=*/true);
    counters_.note_start("sync-smarthome");
    sync_->start();
    started_ = true;
  }

  void stop() {
    run_devices_.store(false);
    for (auto& t : devices_) {
      if (t.joinable()) t.join();
    }
    devices_.clear();
    if (!started_) return;
    if (sync_) sync_->stop();
    if (cast_) cast_->stop();
    if (house_rec_) house_rec_->stop();
    started_ = false;
  }

  // --- device simulators ----------------------------------------------------

  void motion_event(bool trigger, const std::string& device = "hall") {
    motion_log_.append("motion", Value{{"device", device}, {"trigger", trigger}});
  }

  // One meter reading: energy drawn since the last tick at the lamp's current
  // intensity. The lamp only ever reads its own store.
  void lamp_tick(double dt_ms, double lamp_load_watts = 60.0) {
    double intensity = 0.0;
    try {
      intensity = lamp_dx_.get("lamp", "house").attributes.value("intensity", 0.0);
    } catch (const DxError&) {
      // Configuration has not been cast down yet; meter an unlit lamp.
    }
    double kwh = intensity * lamp_load_watts * dt_ms / 3.6e9;  // watt-ms -> kWh
    lamp_log_.append("kwh", Value{{"device", "lamp"}, {"kwh", kwh}});
  }

  // Background emitters for demos: motion blips at `motion_rate_hz`, meter
  // readings every 100ms. Runs until `duration` elapses or stop().
  void simulate_devices(std::chrono::milliseconds duration, double motion_rate_hz = 2.0,
                        double lamp_load_watts = 60.0) {
    run_devices_.store(true);
    counters_.note_start("motion-device");
    counters_.note_start("lamp-device");
    auto until = std::chrono::steady_clock::now() + duration;
    devices_.emplace_back([this, until, motion_rate_hz] {
      std::mt19937 rng(20260814);
      std::exponential_distribution<double> gap(motion_rate_hz);
      while (run_devices_.load() && std::chrono::steady_clock::now() < until) {
        std::this_thread::sleep_for(std::chrono::duration<double>(gap(rng)));
        if (!run_devices_.load()) break;
        motion_event(true);
      }
    });
    devices_.emplace_back([this, until, lamp_load_watts] {
      while (run_devices_.load() && std::chrono::steady_clock::now() < until) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        if (!run_devices_.load()) break;
        lamp_tick(100.0, lamp_load_watts);
      }
    });
  }

  void set_sensitivity(int64_t value) { house_dx_.put("house", "house", Value{{"sensitivity", value}}); }

  bool quiesce(std::chrono::milliseconds timeout) {
    return cast_->quiesce(timeout) && sync_->quiesce(timeout) && house_rec_->quiesce(timeout);
  }

  ObjectEngine& objects() { return objects_; }
  LogEngine& logs() { return logs_; }
  Cast& cast() { return *cast_; }
  Sync& sync() { return *sync_; }
  TaskCounters& counters() { return counters_; }
  ObjectDx& admin() { return oadmin_; }

 private:
  // Control loop over store state only: a fresh motion stamp raises the lamp,
  // a stale one clears the latch and dims, and the resync tick makes the
  // quiet-spell transition fire without a triggering write.
  ReconcilerSpec house_spec() {
    ReconcilerSpec spec;
    spec.name = "house-knactor";
    spec.stores = {"house"};
    spec.resync_interval_ms = opts_.resync_ms;
    spec.on_change = [this](const StateObject& s) -> std::vector<DesiredWrite> {
      const Value& a = s.attributes;
      bool motion = a.value("motion", false);
      double intensity = a.value("intensity", 0.0);
      int64_t quiet_for = wall_now_ms() - a.value("last_motion", int64_t{0});
      if (motion && quiet_for < int64_t(opts_.quiet_ms)) {
        if (intensity == opts_.high_intensity) return {};
        return {{"house", s.key, Value{{"intensity", opts_.high_intensity}, {"mode", "active"}}}};
      }
      if (motion)
        return {{"house", s.key,
                 Value{{"motion", false}, {"intensity", opts_.low_intensity}, {"mode", "idle"}}}};
      if (intensity != opts_.low_intensity)
        return {{"house", s.key, Value{{"intensity", opts_.low_intensity}, {"mode", "idle"}}}};
      return {};
    };
    return spec;
  }

  std::vector<SyncPipeline> resolve_pipelines() {
    std::vector<SyncPipeline> out;
    for (auto& d : sync_decls_from_yaml_text(kSmartHomePipelinesYaml)) {
      SyncPipeline p;
      p.name = d.name;
      p.source = SyncSource{std::make_shared<LocalLogDx>(logs_, "syncer"), d.source.stream, d.source.from_seq};
      if (d.sink.kind == "object") {
        p.sink = SyncObjectSink{std::make_shared<LocalObjectDx>(objects_, "syncer"), d.sink.store, d.sink.key,
                                d.sink.fields};
      } else {
        p.sink = SyncLogSink{std::make_shared<LocalLogDx>(logs_, "syncer"), d.sink.stream};
      }
      p.ops = d.ops;
      p.batch = d.batch;
      out.push_back(std::move(p));
    }
    return out;
  }

  SmartHomeOptions opts_;
  ObjectEngine objects_;
  LogEngine logs_;
  LocalObjectDx oadmin_{objects_, "admin"};
  LocalObjectDx house_dx_{objects_, "house"};
  LocalObjectDx lamp_dx_{objects_, "lamp"};
  LocalObjectDx motion_dx_{objects_, "motion"};
  LocalLogDx ladmin_{logs_, "admin"};
  LocalLogDx motion_log_{logs_, "motion"};
  LocalLogDx lamp_log_{logs_, "lamp"};
  TaskCounters counters_;
  std::unique_ptr<Reconciler> house_rec_;
  std::unique_ptr<Cast> cast_;
  std::unique_ptr<Sync> sync_;
  std::vector<std::thread> devices_;
  std::atomic<bool> run_devices_{false};
  bool started_ = false;
};

}  // namespace knactor::apps
