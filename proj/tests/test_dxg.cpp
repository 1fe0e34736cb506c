#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "knactor/dxg.hpp"

using namespace knactor;

namespace {

const char* kRetailDxg = R"(
name: retail
nodes:
  - name: checkout
    dx: local
    store: orders
    role: cast-retail
  - name: shipping
    dx: local
    store: shipments
    role: cast-retail
  - name: payment
    dx: local
    store: payments
    role: cast-retail
edges:
  - name: ship-items
    from: checkout.items
    to: shipping.items
  - name: ship-addr
    from: checkout.addr
    to: shipping.addr
  - name: pay-price
    from: checkout.price
    to: payment.amount
  - name: order-payment
    from: payment.paymentID
    to: checkout.paymentID
    when: paymentID != ""
  - name: order-tracking
    from: shipping.trackingID
    to: checkout.trackingID
    when: trackingID != ""
  - name: order-cost
    from: shipping.cost
    to: checkout.shippingCost
    when: trackingID != ""
policies:
  - name: air-when-pricey
    when: price > 1000
    set: shipping.method
    value: '"air"'
)";

std::map<std::string, ObjectSchema> retail_schemas() {
  std::map<std::string, ObjectSchema> out;
  out["orders"] = schema_from_yaml_text(R"(
store: orders
fields:
  - {name: items, type: list}
  - {name: addr, type: string}
  - {name: price, type: float}
  - {name: shippingCost, type: float, external_fill: true}
  - {name: paymentID, type: string, external_fill: true}
  - {name: trackingID, type: string, external_fill: true}
)");
  out["shipments"] = schema_from_yaml_text(R"(
store: shipments
fields:
  - {name: items, type: list, external_fill: true}
  - {name: addr, type: string, external_fill: true}
  - {name: method, type: string, external_fill: true}
  - {name: trackingID, type: string}
  - {name: cost, type: float}
)");
  out["payments"] = schema_from_yaml_text(R"(
store: payments
fields:
  - {name: amount, type: float, external_fill: true}
  - {name: paymentID, type: string}
)");
  return out;
}

bool has_issue(const std::vector<Issue>& v, IssueKind k) {
  return std::any_of(v.begin(), v.end(), [&](const Issue& i) { return i.kind == k; });
}

}  // namespace

TEST_CASE("parsing a three-node graph") {
  DxgSpec spec = parse_dxg(kRetailDxg);
  CHECK(spec.name == "retail");
  REQUIRE(spec.nodes.size() == 3);
  REQUIRE(spec.edges.size() == 6);
  REQUIRE(spec.policies.size() == 1);
  CHECK(spec.node("checkout")->store == "orders");
  CHECK(spec.edge("ship-items")->from_field == "items");
  CHECK(spec.edge("order-cost")->when != nullptr);
  const Policy& p = spec.policies.front();
  CHECK_FALSE(p.is_drop());
  CHECK(p.set_node == "shipping");
  CHECK(p.set_field == "method");
  CHECK(to_string(p.condition) == "price > 1000");
}

TEST_CASE("parse rejects malformed documents") {
  CHECK_THROWS_AS(parse_dxg("name: x\nnodes: []\n"), ParseError);
  CHECK_THROWS_AS(parse_dxg("name: x\n"), ParseError);
  // unknown keys are errors, not ignored
  CHECK_THROWS_AS(parse_dxg(R"(
name: x
nodes:
  - {name: a, store: s, role: r, bogus: 1}
)"),
                  ParseError);
  // duplicate names
  CHECK_THROWS_AS(parse_dxg(R"(
name: x
nodes:
  - {name: a, store: s, role: r}
  - {name: a, store: t, role: r}
)"),
                  ParseError);
  // edges must reference declared nodes
  CHECK_THROWS_AS(parse_dxg(R"(
name: x
nodes:
  - {name: a, store: s, role: r}
edges:
  - {name: e, from: a.x, to: ghost.y}
)"),
                  ParseError);
  // policy needs exactly one effect
  CHECK_THROWS_AS(parse_dxg(R"(
name: x
nodes:
  - {name: a, store: s, role: r}
policies:
  - {name: p, when: "true"}
)"),
                  ParseError);
  // bad expression carries a parse error
  CHECK_THROWS_AS(parse_dxg(R"(
name: x
nodes:
  - {name: a, store: s, role: r}
  - {name: b, store: t, role: r}
edges:
  - {name: e, from: a.x, to: b.y, transform: "1 +"}
)"),
                  ParseError);
}

TEST_CASE("parse errors carry document positions") {
  try {
    parse_dxg("name: x\nnodes:\n  - {name: a, store: s, role: r, bogus: 1}\n");
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("print/parse round-trip on the retail graph") {
  DxgSpec spec = parse_dxg(kRetailDxg);
  DxgSpec again = parse_dxg(print_dxg(spec));
  CHECK(dxg_equal(spec, again));
}

TEST_CASE("validation accepts the retail graph") {
  auto report = validate_dxg(parse_dxg(kRetailDxg), retail_schemas());
  INFO(report.to_text());
  CHECK(report.ok());
  // back-edges write fields nothing reads, so the field graph stays acyclic
  CHECK(report.warnings.empty());
}

TEST_CASE("unguarded two-cycles are errors, guarded ones warnings") {
  std::map<std::string, ObjectSchema> schemas;
  schemas["s1"] = schema_from_yaml_text(R"(
store: s1
fields:
  - {name: x, type: int, external_fill: true}
)");
  schemas["s2"] = schema_from_yaml_text(R"(
store: s2
fields:
  - {name: y, type: int, external_fill: true}
)");
  const char* base = R"(
name: loop
nodes:
  - {name: a, store: s1, role: r}
  - {name: b, store: s2, role: r}
edges:
  - {name: fwd, from: a.x, to: b.y}
  - {name: back, from: b.y, to: a.x%s}
)";
  char buf[1024];
  std::snprintf(buf, sizeof buf, base, "");
  auto unguarded = validate_dxg(parse_dxg(buf), schemas);
  REQUIRE_FALSE(unguarded.ok());
  REQUIRE(has_issue(unguarded.errors, IssueKind::Cycle));
  CHECK(unguarded.errors.front().location.find("a.x") != std::string::npos);
  CHECK(unguarded.errors.front().location.find("b.y") != std::string::npos);

  std::snprintf(buf, sizeof buf, base, ", when: y > 0");
  auto guarded = validate_dxg(parse_dxg(buf), schemas);
  CHECK(guarded.ok());
  CHECK(has_issue(guarded.warnings, IssueKind::Cycle));
}

TEST_CASE("a literal-true guard does not soften a cycle") {
  std::map<std::string, ObjectSchema> schemas;
  schemas["s1"] = schema_from_yaml_text("store: s1\nfields:\n  - {name: x, type: int, external_fill: true}\n");
  schemas["s2"] = schema_from_yaml_text("store: s2\nfields:\n  - {name: y, type: int, external_fill: true}\n");
  auto report = validate_dxg(parse_dxg(R"(
name: loop
nodes:
  - {name: a, store: s1, role: r}
  - {name: b, store: s2, role: r}
edges:
  - {name: fwd, from: a.x, to: b.y}
  - {name: back, from: b.y, to: a.x, when: "true"}
)"),
                             schemas);
  CHECK(has_issue(report.errors, IssueKind::Cycle));
}

TEST_CASE("validator flags unknown fields, type mismatches, conflicts, non-fillable targets") {
  auto schemas = retail_schemas();

  auto r1 = validate_dxg(parse_dxg(R"(
name: bad
nodes:
  - {name: checkout, store: orders, role: r}
  - {name: shipping, store: shipments, role: r}
edges:
  - {name: e1, from: checkout.ghost, to: shipping.items}
)"),
                         schemas);
  CHECK(has_issue(r1.errors, IssueKind::UnknownField));

  auto r2 = validate_dxg(parse_dxg(R"(
name: bad
nodes:
  - {name: checkout, store: orders, role: r}
  - {name: shipping, store: shipments, role: r}
edges:
  - {name: e1, from: checkout.price, to: shipping.addr}
)"),
                         schemas);
  CHECK(has_issue(r2.errors, IssueKind::TypeMismatch));

  auto r3 = validate_dxg(parse_dxg(R"(
name: bad
nodes:
  - {name: checkout, store: orders, role: r}
  - {name: shipping, store: shipments, role: r}
edges:
  - {name: e1, from: checkout.addr, to: shipping.addr}
  - {name: e2, from: checkout.addr, to: shipping.addr, transform: addr + "!"}
)"),
                         schemas);
  CHECK(has_issue(r3.errors, IssueKind::WriteConflict));

  // shipping.trackingID is the shipping knactor's own field, not fillable
  auto r4 = validate_dxg(parse_dxg(R"(
name: bad
nodes:
  - {name: checkout, store: orders, role: r}
  - {name: shipping, store: shipments, role: r}
edges:
  - {name: e1, from: checkout.addr, to: shipping.trackingID}
)"),
                         schemas);
  CHECK(has_issue(r4.errors, IssueKind::NotIngestible));
}

TEST_CASE("untargeted external-fill fields warn as unused state") {
  auto schemas = retail_schemas();
  auto report = validate_dxg(parse_dxg(R"(
name: partial
nodes:
  - {name: checkout, store: orders, role: r}
  - {name: shipping, store: shipments, role: r}
edges:
  - {name: e1, from: checkout.items, to: shipping.items}
  - {name: e2, from: checkout.addr, to: shipping.addr}
)"),
                             schemas);
  CHECK(report.ok());
  REQUIRE(has_issue(report.warnings, IssueKind::UnusedState));
  std::set<std::string> locations;
  for (const auto& w : report.warnings) {
    if (w.kind == IssueKind::UnusedState) locations.insert(w.location);
  }
  CHECK(locations == std::set<std::string>{"checkout.paymentID", "checkout.shippingCost", "checkout.trackingID",
                                           "shipping.method"});
}

namespace {

// Random layered DAG specs: nodes in layers, edges only forward. Each store
// has one int field so schemas stay trivial.
struct GeneratedSpec {
  DxgSpec spec;
  std::map<std::string, ObjectSchema> schemas;
};

GeneratedSpec gen_dag(std::mt19937& rng, int layers, int per_layer) {
  GeneratedSpec g;
  g.spec.name = "gen";
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<unsigned>(n)); };
  std::vector<std::vector<std::string>> layer_nodes(layers);
  int id = 0;
  for (int l = 0; l < layers; ++l) {
    for (int i = 0; i < per_layer; ++i) {
      std::string name = "n" + std::to_string(id);
      std::string store = "s" + std::to_string(id);
      ++id;
      layer_nodes[l].push_back(name);
      g.spec.nodes.push_back(StoreRef{name, "local", DxKind::Object, store, "r"});
      ObjectSchema s;
      s.store_name = store;
      s.fields.push_back(FieldDef{"v", FieldType::Int, true, {}});
      g.schemas[store] = s;
    }
  }
  int edge_id = 0;
  std::set<std::string> targeted;
  for (int l = 0; l + 1 < layers; ++l) {
    for (const auto& from : layer_nodes[l]) {
      int fanout = 1 + pick(2);
      for (int f = 0; f < fanout; ++f) {
        const auto& to = layer_nodes[l + 1][pick(per_layer)];
        if (!targeted.insert(to).second) continue;  // keep writes conflict-free
        Edge e;
        e.name = "e" + std::to_string(edge_id++);
        e.from_node = from;
        e.from_field = "v";
        e.to_node = to;
        e.to_field = "v";
        g.spec.edges.push_back(std::move(e));
      }
    }
  }
  return g;
}

}  // namespace

TEST_CASE("random DAG specs never report cycles") {
  std::mt19937 rng(20260814);
  for (int i = 0; i < 60; ++i) {
    GeneratedSpec g = gen_dag(rng, 2 + static_cast<int>(rng() % 4), 1 + static_cast<int>(rng() % 3));
    auto report = validate_dxg(g.spec, g.schemas);
    INFO(print_dxg(g.spec));
    CHECK_FALSE(has_issue(report.errors, IssueKind::Cycle));
    CHECK_FALSE(has_issue(report.warnings, IssueKind::Cycle));

    DxgSpec again = parse_dxg(print_dxg(g.spec));
    CHECK(dxg_equal(g.spec, again));
  }
}

TEST_CASE("an injected unguarded cycle is reported exactly once with its members") {
  std::mt19937 rng(7);
  for (int i = 0; i < 40; ++i) {
    GeneratedSpec g = gen_dag(rng, 3, 2);
    // close a loop from the last node back to the first
    Edge back;
    back.name = "injected-back";
    back.from_node = g.spec.nodes.back().name;
    back.from_field = "v";
    back.to_node = g.spec.nodes.front().name;
    back.to_field = "v";
    g.spec.edges.push_back(back);

    auto report = validate_dxg(g.spec, g.schemas);
    int cycles = 0;
    std::string loc;
    for (const auto& e : report.errors) {
      if (e.kind == IssueKind::Cycle) {
        ++cycles;
        loc = e.location;
      }
    }
    // only a cycle if the forward DAG actually connects first -> last
    if (cycles > 0) {
      CHECK(cycles == 1);
      CHECK(loc.find(g.spec.nodes.front().name + ".v") != std::string::npos);
      CHECK(loc.find(g.spec.nodes.back().name + ".v") != std::string::npos);
    }
  }
}

TEST_CASE("plans order chains and stage counts match dependencies") {
  auto schemas = retail_schemas();
  DxgSpec chain = parse_dxg(R"(
name: chain
nodes:
  - {name: a, store: orders, role: r}
  - {name: b, store: shipments, role: r}
  - {name: c, store: payments, role: r}
edges:
  - {name: ab, from: a.price, to: b.cost}
  - {name: bc, from: b.cost, to: c.amount}
)");
  ExecutionPlan p = plan(chain);
  REQUIRE(p.stages.size() == 2);
  CHECK(p.stages[0] == std::vector<std::string>{"ab"});
  CHECK(p.stages[1] == std::vector<std::string>{"bc"});

  DxgSpec single = parse_dxg(R"(
name: single
nodes:
  - {name: a, store: orders, role: r}
  - {name: b, store: shipments, role: r}
edges:
  - {name: only, from: a.items, to: b.items}
)");
  CHECK(plan(single).stages.size() == 1);
}

TEST_CASE("plans share canonical subexpressions across edges") {
  DxgSpec spec = parse_dxg(R"(
name: shared
nodes:
  - {name: a, store: s, role: r}
  - {name: b, store: t, role: r}
  - {name: c, store: u, role: r}
edges:
  - {name: e1, from: a.trigger, to: b.out, when: trigger == true}
  - {name: e2, from: a.trigger, to: c.out, when: trigger == true}
)");
  ExecutionPlan p = plan(spec);
  // per edge: transform `trigger` (1 node) + guard `trigger == true` (3 nodes) = 4
  CHECK(p.naive_slots == 8);
  // shared: trigger, true, trigger == true
  CHECK(p.shared_slots == 3);
  CHECK(p.stages.size() == 1);
  CHECK(p.stages[0].size() == 2);
}

TEST_CASE("diffs are name-keyed and minimal") {
  DxgSpec old_spec = parse_dxg(kRetailDxg);

  SECTION("identical specs produce an empty change-set") {
    DxgDiff d = diff_dxg(old_spec, parse_dxg(kRetailDxg));
    CHECK(d.empty());
  }

  SECTION("adding a policy") {
    DxgSpec next = parse_dxg(kRetailDxg);
    Policy p;
    p.name = "ground-cheap";
    p.condition = parse_expr("price <= 1000");
    p.set_node = "shipping";
    p.set_field = "method";
    p.value = parse_expr("\"ground\"");
    next.policies.push_back(p);
    DxgDiff d = diff_dxg(old_spec, next);
    CHECK(d.added_policies.size() == 1);
    CHECK(d.added_edges.empty());
    CHECK(d.removed_policies.empty());
    CHECK(d.modified_policies.empty());
  }

  SECTION("renaming an edge is remove + add") {
    DxgSpec next = parse_dxg(kRetailDxg);
    next.edges[0].name = "ship-items-v2";
    DxgDiff d = diff_dxg(old_spec, next);
    REQUIRE(d.added_edges.size() == 1);
    REQUIRE(d.removed_edges.size() == 1);
    CHECK(d.added_edges[0].name == "ship-items-v2");
    CHECK(d.removed_edges[0].name == "ship-items");
    CHECK(d.modified_edges.empty());
  }

  SECTION("changing a transform is a modification") {
    DxgSpec next = parse_dxg(kRetailDxg);
    next.edges[1].transform = parse_expr("addr + \" (verified)\"");
    DxgDiff d = diff_dxg(old_spec, next);
    REQUIRE(d.modified_edges.size() == 1);
    CHECK(d.modified_edges[0].name == "ship-addr");
  }
}
