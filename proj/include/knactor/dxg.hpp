#pragma once

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "knactor/access.hpp"
#include "knactor/errors.hpp"
#include "knactor/expr.hpp"
#include "knactor/schema.hpp"
#include "knactor/value.hpp"

namespace knactor {

enum class DxKind { Object, Log };

// A node of the graph: one store on one DX endpoint, acted on as one role.
struct StoreRef {
  std::string name;  // node name used by edges/policies
  std::string dx;    // endpoint ("tcp:host:port", "unix:path", or "local")
  DxKind kind = DxKind::Object;
  std::string store;
  std::string role;
};

// A state exchange: read `from`, transform, write `to`. Empty from_field
// means the whole object. Absent transform means identity on from_field.
struct Edge {
  std::string name;
  std::string from_node;
  std::string from_field;
  std::string to_node;
  std::string to_field;
  ExprPtr transform;
  ExprPtr when;
  bool aggregating = false;
};

// Declarative routing: when `condition` holds on a processed source object,
// either suppress an edge by name or set a destination field.
struct Policy {
  std::string name;
  ExprPtr condition;
  std::string drop_edge;     // drop-edge form
  std::string set_node;      // set-field form
  std::string set_field;
  ExprPtr value;

  bool is_drop() const { return !drop_edge.empty(); }
};

struct DxgSpec {
  std::string name;
  std::vector<StoreRef> nodes;
  std::vector<Edge> edges;
  std::vector<Policy> policies;

  const StoreRef* node(const std::string& n) const {
    for (const auto& s : nodes) {
      if (s.name == n) return &s;
    }
    return nullptr;
  }
  const Edge* edge(const std::string& n) const {
    for (const auto& e : edges) {
      if (e.name == n) return &e;
    }
    return nullptr;
  }
};

// The effective transform of an edge (identity when none was written).
inline ExprPtr edge_expr(const Edge& e) {
  if (e.transform) return e.transform;
  if (!e.from_field.empty()) return Expr::make_field(e.from_field);
  return nullptr;  // whole-object copy
}

// --- JSON form (canonical; round-trip and diff equality key on this) -----------

inline Value store_ref_to_json(const StoreRef& s) {
  return Value{{"name", s.name},
               {"dx", s.dx},
               {"kind", s.kind == DxKind::Object ? "object" : "log"},
               {"store", s.store},
               {"role", s.role}};
}

inline Value edge_to_json(const Edge& e) {
  Value v = Value{{"name", e.name},
                  {"from", e.from_field.empty() ? e.from_node : e.from_node + "." + e.from_field},
                  {"to", e.to_field.empty() ? e.to_node : e.to_node + "." + e.to_field}};
  if (e.transform) v["transform"] = to_string(e.transform);
  if (e.when) v["when"] = to_string(e.when);
  if (e.aggregating) v["aggregating"] = true;
  return v;
}

inline Value policy_to_json(const Policy& p) {
  Value v = Value{{"name", p.name}, {"when", to_string(p.condition)}};
  if (p.is_drop()) {
    v["drop"] = p.drop_edge;
  } else {
    v["set"] = p.set_node + "." + p.set_field;
    v["value"] = to_string(p.value);
  }
  return v;
}

inline Value dxg_to_json(const DxgSpec& spec) {
  Value nodes = Value::array();
  for (const auto& n : spec.nodes) nodes.push_back(store_ref_to_json(n));
  Value edges = Value::array();
  for (const auto& e : spec.edges) edges.push_back(edge_to_json(e));
  Value policies = Value::array();
  for (const auto& p : spec.policies) policies.push_back(policy_to_json(p));
  return Value{{"name", spec.name}, {"nodes", nodes}, {"edges", edges}, {"policies", policies}};
}

inline bool dxg_equal(const DxgSpec& a, const DxgSpec& b) { return dxg_to_json(a) == dxg_to_json(b); }

// --- Parsing --------------------------------------------------------------------

namespace dxgdetail {

[[noreturn]] inline void fail(const YAML::Node& where, const std::string& msg) {
  int line = where.Mark().line + 1;
  int col = where.Mark().column + 1;
  throw ParseError("dxg: " + msg, line, col);
}

inline void check_keys(const YAML::Node& node, std::initializer_list<const char*> allowed,
                       const std::string& what) {
  for (const auto& kv : node) {
    std::string key = kv.first.as<std::string>();
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
      fail(kv.first, "unknown key '" + key + "' in " + what);
  }
}

inline std::string str_at(const YAML::Node& node, const char* key, const std::string& what) {
  if (!node[key]) fail(node, what + " needs '" + std::string(key) + "'");
  return node[key].as<std::string>();
}

inline ExprPtr expr_at(const YAML::Node& node, const char* key) {
  if (!node[key]) return nullptr;
  try {
    return parse_expr(node[key].as<std::string>());
  } catch (const ParseError& e) {
    fail(node[key], std::string("bad expression (") + e.what() + ")");
  }
}

// "node" or "node.field.path" -> pair; node names contain no dots.
inline std::pair<std::string, std::string> split_ref(const std::string& ref, const YAML::Node& where) {
  auto dot = ref.find('.');
  std::string node = dot == std::string::npos ? ref : ref.substr(0, dot);
  std::string field = dot == std::string::npos ? std::string() : ref.substr(dot + 1);
  if (node.empty() || (dot != std::string::npos && field.empty())) fail(where, "bad store reference '" + ref + "'");
  return {node, field};
}

}  // namespace dxgdetail

inline DxgSpec parse_dxg(const std::string& text) {
  using namespace dxgdetail;
  YAML::Node doc;
  try {
    doc = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ParseError(std::string("dxg: ") + e.msg, e.mark.line + 1, e.mark.column + 1);
  }
  if (!doc.IsMap()) throw ParseError("dxg: document must be a map", 1, 1);
  check_keys(doc, {"name", "nodes", "edges", "policies"}, "document");

  DxgSpec spec;
  spec.name = str_at(doc, "name", "document");
  if (!is_store_ident(spec.name)) fail(doc["name"], "bad graph name '" + spec.name + "'");

  const YAML::Node nodes = doc["nodes"];
  if (!nodes || !nodes.IsSequence() || nodes.size() == 0) fail(doc, "at least one node is required");
  for (const auto& n : nodes) {
    check_keys(n, {"name", "dx", "kind", "store", "role"}, "node");
    StoreRef s;
    s.name = str_at(n, "name", "node");
    s.store = str_at(n, "store", "node");
    s.role = str_at(n, "role", "node");
    s.dx = n["dx"] ? n["dx"].as<std::string>() : "local";
    if (!is_store_ident(s.name)) fail(n["name"], "bad node name '" + s.name + "'");
    if (s.name.find('.') != std::string::npos) fail(n["name"], "node names must not contain dots");
    if (!is_store_ident(s.store)) fail(n["store"], "bad store name '" + s.store + "'");
    if (n["kind"]) {
      std::string k = n["kind"].as<std::string>();
      if (k == "object") {
        s.kind = DxKind::Object;
      } else if (k == "log") {
        s.kind = DxKind::Log;
      } else {
        fail(n["kind"], "kind must be object or log");
      }
    }
    if (spec.node(s.name)) fail(n["name"], "duplicate node '" + s.name + "'");
    spec.nodes.push_back(std::move(s));
  }

  std::set<std::string> edge_names;
  for (const auto& e : doc["edges"] ? doc["edges"] : YAML::Node(YAML::NodeType::Sequence)) {
    check_keys(e, {"name", "from", "to", "transform", "when", "aggregating"}, "edge");
    Edge edge;
    edge.name = str_at(e, "name", "edge");
    if (!edge_names.insert(edge.name).second) fail(e["name"], "duplicate edge '" + edge.name + "'");
    std::tie(edge.from_node, edge.from_field) = split_ref(str_at(e, "from", "edge"), e["from"]);
    std::tie(edge.to_node, edge.to_field) = split_ref(str_at(e, "to", "edge"), e["to"]);
    if (!spec.node(edge.from_node)) fail(e["from"], "unknown node '" + edge.from_node + "'");
    if (!spec.node(edge.to_node)) fail(e["to"], "unknown node '" + edge.to_node + "'");
    edge.transform = expr_at(e, "transform");
    edge.when = expr_at(e, "when");
    if (e["aggregating"]) edge.aggregating = e["aggregating"].as<bool>();
    if (edge.from_field.empty() && edge.transform) fail(e["from"], "whole-object edges take no transform");
    if (edge.from_field.empty() != edge.to_field.empty())
      fail(e["to"], "whole-object edges must map node to node");
    spec.edges.push_back(std::move(edge));
  }

  std::set<std::string> policy_names;
  for (const auto& p : doc["policies"] ? doc["policies"] : YAML::Node(YAML::NodeType::Sequence)) {
    check_keys(p, {"name", "when", "set", "value", "drop"}, "policy");
    Policy pol;
    pol.name = str_at(p, "name", "policy");
    if (!policy_names.insert(pol.name).second) fail(p["name"], "duplicate policy '" + pol.name + "'");
    pol.condition = expr_at(p, "when");
    if (!pol.condition) fail(p, "policy '" + pol.name + "' needs 'when'");
    bool has_set = static_cast<bool>(p["set"]);
    bool has_drop = static_cast<bool>(p["drop"]);
    if (has_set == has_drop) fail(p, "policy '" + pol.name + "' needs exactly one of set/drop");
    if (has_drop) {
      pol.drop_edge = p["drop"].as<std::string>();
      if (!edge_names.count(pol.drop_edge)) fail(p["drop"], "unknown edge '" + pol.drop_edge + "'");
      if (p["value"]) fail(p["value"], "drop policies take no value");
    } else {
      std::tie(pol.set_node, pol.set_field) = split_ref(p["set"].as<std::string>(), p["set"]);
      if (pol.set_field.empty()) fail(p["set"], "set target needs a field path");
      if (!spec.node(pol.set_node)) fail(p["set"], "unknown node '" + pol.set_node + "'");
      pol.value = expr_at(p, "value");
      if (!pol.value) fail(p, "set policies need 'value'");
    }
    spec.policies.push_back(std::move(pol));
  }
  return spec;
}

inline std::string print_dxg(const DxgSpec& spec) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << spec.name;
  out << YAML::Key << "nodes" << YAML::Value << YAML::BeginSeq;
  for (const auto& n : spec.nodes) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << n.name;
    out << YAML::Key << "dx" << YAML::Value << n.dx;
    out << YAML::Key << "kind" << YAML::Value << (n.kind == DxKind::Object ? "object" : "log");
    out << YAML::Key << "store" << YAML::Value << n.store;
    out << YAML::Key << "role" << YAML::Value << n.role;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "edges" << YAML::Value << YAML::BeginSeq;
  for (const auto& e : spec.edges) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << e.name;
    out << YAML::Key << "from" << YAML::Value
        << (e.from_field.empty() ? e.from_node : e.from_node + "." + e.from_field);
    out << YAML::Key << "to" << YAML::Value << (e.to_field.empty() ? e.to_node : e.to_node + "." + e.to_field);
    if (e.transform) out << YAML::Key << "transform" << YAML::Value << to_string(e.transform);
    if (e.when) out << YAML::Key << "when" << YAML::Value << to_string(e.when);
    if (e.aggregating) out << YAML::Key << "aggregating" << YAML::Value << true;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "policies" << YAML::Value << YAML::BeginSeq;
  for (const auto& p : spec.policies) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << p.name;
    out << YAML::Key << "when" << YAML::Value << to_string(p.condition);
    if (p.is_drop()) {
      out << YAML::Key << "drop" << YAML::Value << p.drop_edge;
    } else {
      out << YAML::Key << "set" << YAML::Value << p.set_node + "." + p.set_field;
      out << YAML::Key << "value" << YAML::Value << to_string(p.value);
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// --- Validation -----------------------------------------------------------------

enum class IssueKind { Cycle, UnusedState, TypeMismatch, WriteConflict, UnknownField, NotIngestible };

inline std::string_view to_string(IssueKind k) {
  switch (k) {
    case IssueKind::Cycle: return "cycle";
    case IssueKind::UnusedState: return "unused_state";
    case IssueKind::TypeMismatch: return "type_mismatch";
    case IssueKind::WriteConflict: return "write_conflict";
    case IssueKind::UnknownField: return "unknown_field";
    case IssueKind::NotIngestible: return "not_ingestible";
  }
  return "unknown";
}

struct Issue {
  IssueKind kind;
  std::string location;
  std::string detail;
};

struct ValidationReport {
  std::vector<Issue> errors;
  std::vector<Issue> warnings;

  bool ok() const { return errors.empty(); }

  Value to_json() const {
    auto conv = [](const std::vector<Issue>& v) {
      Value arr = Value::array();
      for (const auto& i : v)
        arr.push_back(Value{{"kind", std::string(to_string(i.kind))}, {"location", i.location}, {"detail", i.detail}});
      return arr;
    };
    return Value{{"ok", ok()}, {"errors", conv(errors)}, {"warnings", conv(warnings)}};
  }

  std::string to_text() const {
    std::string out;
    for (const auto& i : errors)
      out += "error: " + std::string(to_string(i.kind)) + " at " + i.location + ": " + i.detail + "\n";
    for (const auto& i : warnings)
      out += "warning: " + std::string(to_string(i.kind)) + " at " + i.location + ": " + i.detail + "\n";
    if (out.empty()) out = "ok\n";
    return out;
  }
};

namespace dxgdetail {

// Field-dependency arc between (node, field) vertices. Guarded arcs come
// from edges/policies whose condition can break re-triggering.
struct Arc {
  int to;
  bool guarded;
  std::string via;  // edge/policy name
};

struct DepGraph {
  std::vector<std::string> names;  // vertex -> "node.field"
  std::map<std::string, int> index;
  std::vector<std::vector<Arc>> adj;

  int vertex(const std::string& name) {
    auto it = index.find(name);
    if (it != index.end()) return it->second;
    int id = static_cast<int>(names.size());
    index[name] = id;
    names.push_back(name);
    adj.emplace_back();
    return id;
  }

  void arc(const std::string& from, const std::string& to, bool guarded, const std::string& via) {
    int f = vertex(from);
    int t = vertex(to);
    adj[f].push_back({t, guarded, via});
  }
};

// Tarjan strongly-connected components, iterative to keep stack use flat.
inline std::vector<std::vector<int>> sccs(const DepGraph& g) {
  int n = static_cast<int>(g.names.size());
  std::vector<int> idx(n, -1), low(n, 0), on(n, 0);
  std::vector<int> stack;
  std::vector<std::vector<int>> out;
  int counter = 0;
  struct Frame {
    int v;
    size_t child;
  };
  for (int root = 0; root < n; ++root) {
    if (idx[root] != -1) continue;
    std::vector<Frame> call{{root, 0}};
    while (!call.empty()) {
      Frame& f = call.back();
      int v = f.v;
      if (f.child == 0) {
        idx[v] = low[v] = counter++;
        stack.push_back(v);
        on[v] = 1;
      }
      bool descended = false;
      while (f.child < g.adj[v].size()) {
        int w = g.adj[v][f.child].to;
        ++f.child;
        if (idx[w] == -1) {
          call.push_back({w, 0});
          descended = true;
          break;
        }
        if (on[w]) low[v] = std::min(low[v], idx[w]);
      }
      if (descended) continue;
      if (low[v] == idx[v]) {
        std::vector<int> comp;
        while (true) {
          int w = stack.back();
          stack.pop_back();
          on[w] = 0;
          comp.push_back(w);
          if (w == v) break;
        }
        out.push_back(std::move(comp));
      }
      call.pop_back();
      if (!call.empty()) low[call.back().v] = std::min(low[call.back().v], low[v]);
    }
  }
  return out;
}

// Orders one concrete cycle within an SCC for the report, preferring the
// sub-graph restricted to `unguarded_only` when asked.
inline std::vector<int> cycle_in(const DepGraph& g, const std::vector<int>& comp, bool unguarded_only) {
  std::set<int> members(comp.begin(), comp.end());
  int start = *std::min_element(comp.begin(), comp.end(), [&](int a, int b) { return g.names[a] < g.names[b]; });
  std::vector<int> path{start};
  std::set<int> seen{start};
  int cur = start;
  for (size_t step = 0; step <= comp.size(); ++step) {
    int next = -1;
    for (const auto& a : g.adj[cur]) {
      if (!members.count(a.to)) continue;
      if (unguarded_only && a.guarded) continue;
      if (a.to == start) return path;
      if (!seen.count(a.to)) {
        next = a.to;
        break;
      }
    }
    if (next == -1) break;
    path.push_back(next);
    seen.insert(next);
    cur = next;
  }
  return path;  // best effort; members listed even if no neat tour exists
}

inline std::optional<FieldType> schema_lookup(const ObjectSchema& schema, const std::string& path) {
  const FieldDef* f = schema.find_path(path);
  if (!f) return std::nullopt;
  return f->type;
}

}  // namespace dxgdetail

// Static analysis of a DXG against the destination/source schemas. Problems
// are reported, never thrown.
inline ValidationReport validate_dxg(const DxgSpec& spec, const std::map<std::string, ObjectSchema>& schemas) {
  using namespace dxgdetail;
  ValidationReport report;

  auto schema_of = [&](const std::string& node_name) -> const ObjectSchema* {
    const StoreRef* node = spec.node(node_name);
    if (!node) return nullptr;
    auto it = schemas.find(node->store);
    return it == schemas.end() ? nullptr : &it->second;
  };

  // Which nodes bind every path of an expression; used to scope policies.
  auto binding_nodes = [&](const std::set<std::string>& paths) {
    std::vector<const StoreRef*> out;
    for (const auto& n : spec.nodes) {
      const ObjectSchema* s = schema_of(n.name);
      if (!s) continue;
      bool all = std::all_of(paths.begin(), paths.end(),
                             [&](const std::string& p) { return s->find_path(p) != nullptr; });
      if (all && !paths.empty()) out.push_back(&n);
    }
    return out;
  };

  DepGraph dep;
  std::map<std::string, std::vector<std::string>> write_targets;  // "node.field" -> edge names

  for (const auto& e : spec.edges) {
    const ObjectSchema* src = schema_of(e.from_node);
    const ObjectSchema* dst = schema_of(e.to_node);
    if (!src) {
      report.errors.push_back({IssueKind::UnknownField, e.name, "no schema for node '" + e.from_node + "'"});
      continue;
    }
    if (!dst) {
      report.errors.push_back({IssueKind::UnknownField, e.name, "no schema for node '" + e.to_node + "'"});
      continue;
    }

    std::set<std::string> reads;
    if (e.from_field.empty()) {
      // Whole-object copy: every source field maps to the same-named
      // destination field.
      for (const auto& f : src->fields) reads.insert(f.name);
    } else {
      ExprPtr expr = edge_expr(e);
      reads = collect_paths(expr);
      if (e.when) {
        for (const auto& p : collect_paths(e.when)) reads.insert(p);
      }
      TypeEnv env;
      env.aggregating = e.aggregating;
      env.lookup = [&](const std::string& p) { return schema_lookup(*src, p); };
      try {
        FieldType produced = check_expr(expr, env);
        const FieldDef* target = dst->find_path(e.to_field);
        if (!target) {
          report.errors.push_back({IssueKind::UnknownField, e.name,
                                   "destination field '" + e.to_field + "' not in store '" + dst->store_name + "'"});
        } else {
          bool ok = target->type == produced ||
                    (target->type == FieldType::Float && produced == FieldType::Int);
          if (!ok)
            report.errors.push_back({IssueKind::TypeMismatch, e.name,
                                     "transform yields " + std::string(to_string(produced)) + ", field '" +
                                         e.to_field + "' is " + std::string(to_string(target->type))});
          if (!target->external_fill)
            report.errors.push_back({IssueKind::NotIngestible, e.name,
                                     "destination field '" + e.to_field + "' is not marked for external fill"});
        }
      } catch (const TypeCheckError& err) {
        report.errors.push_back(
            {err.unknown_field() ? IssueKind::UnknownField : IssueKind::TypeMismatch, e.name, err.what()});
      }
      if (e.when) {
        TypeEnv wenv;
        wenv.lookup = [&](const std::string& p) { return schema_lookup(*src, p); };
        try {
          if (check_expr(e.when, wenv) != FieldType::Bool)
            report.errors.push_back({IssueKind::TypeMismatch, e.name, "'when' must be boolean"});
        } catch (const TypeCheckError& err) {
          report.errors.push_back(
              {err.unknown_field() ? IssueKind::UnknownField : IssueKind::TypeMismatch, e.name, err.what()});
        }
      }
    }

    bool guarded = e.when && !is_literal_true(e.when);
    if (e.from_field.empty()) {
      for (const auto& f : src->fields) {
        const FieldDef* target = dst->find(f.name);
        if (!target) {
          report.errors.push_back({IssueKind::UnknownField, e.name,
                                   "destination has no field '" + f.name + "' for whole-object copy"});
          continue;
        }
        if (target->type != f.type && !(target->type == FieldType::Float && f.type == FieldType::Int))
          report.errors.push_back({IssueKind::TypeMismatch, e.name,
                                   "field '" + f.name + "' is " + std::string(to_string(f.type)) +
                                       " at the source but " + std::string(to_string(target->type)) +
                                       " at the destination"});
        if (!target->external_fill)
          report.errors.push_back(
              {IssueKind::NotIngestible, e.name, "destination field '" + f.name + "' is not marked for external fill"});
        dep.arc(e.from_node + "." + f.name, e.to_node + "." + f.name, guarded, e.name);
        write_targets[e.to_node + "." + f.name].push_back(e.name);
      }
    } else {
      for (const auto& r : reads) dep.arc(e.from_node + "." + r, e.to_node + "." + e.to_field, guarded, e.name);
      write_targets[e.to_node + "." + e.to_field].push_back(e.name);
    }
  }

  for (const auto& p : spec.policies) {
    std::set<std::string> paths = collect_paths(p.condition);
    if (!p.is_drop()) {
      for (const auto& q : collect_paths(p.value)) paths.insert(q);
    }
    auto sources = binding_nodes(paths);
    if (sources.empty() && !paths.empty()) {
      report.errors.push_back(
          {IssueKind::UnknownField, p.name, "no node binds every field referenced by the policy"});
      continue;
    }
    for (const StoreRef* n : sources) {
      const ObjectSchema* s = schema_of(n->name);
      TypeEnv env;
      env.lookup = [&](const std::string& q) { return schema_lookup(*s, q); };
      try {
        if (check_expr(p.condition, env) != FieldType::Bool) {
          report.errors.push_back({IssueKind::TypeMismatch, p.name, "'when' must be boolean"});
          break;
        }
      } catch (const TypeCheckError& err) {
        report.errors.push_back({IssueKind::TypeMismatch, p.name, err.what()});
        break;
      }
    }
    if (p.is_drop()) {
      if (!spec.edge(p.drop_edge))
        report.errors.push_back({IssueKind::UnknownField, p.name, "no edge named '" + p.drop_edge + "'"});
      continue;
    }
    const ObjectSchema* dst = schema_of(p.set_node);
    if (!dst) {
      report.errors.push_back({IssueKind::UnknownField, p.name, "no schema for node '" + p.set_node + "'"});
      continue;
    }
    const FieldDef* target = dst->find_path(p.set_field);
    if (!target) {
      report.errors.push_back({IssueKind::UnknownField, p.name,
                               "set target '" + p.set_field + "' not in store '" + dst->store_name + "'"});
      continue;
    }
    if (!target->external_fill)
      report.errors.push_back(
          {IssueKind::NotIngestible, p.name, "set target '" + p.set_field + "' is not marked for external fill"});
    for (const StoreRef* n : sources) {
      const ObjectSchema* s = schema_of(n->name);
      TypeEnv env;
      env.lookup = [&](const std::string& q) { return schema_lookup(*s, q); };
      try {
        FieldType produced = check_expr(p.value, env);
        bool ok = target->type == produced || (target->type == FieldType::Float && produced == FieldType::Int);
        if (!ok) {
          report.errors.push_back({IssueKind::TypeMismatch, p.name,
                                   "value yields " + std::string(to_string(produced)) + ", field '" + p.set_field +
                                       "' is " + std::string(to_string(target->type))});
          break;
        }
      } catch (const TypeCheckError& err) {
        report.errors.push_back({IssueKind::TypeMismatch, p.name, err.what()});
        break;
      }
      bool guarded = !is_literal_true(p.condition);
      for (const auto& q : paths) dep.arc(n->name + "." + q, p.set_node + "." + p.set_field, guarded, p.name);
    }
  }

  for (const auto& [target, edges] : write_targets) {
    if (edges.size() > 1) {
      std::string who;
      for (const auto& e : edges) who += (who.empty() ? "" : ", ") + e;
      report.errors.push_back({IssueKind::WriteConflict, target, "written by edges " + who});
    }
  }

  // Cycle analysis: an SCC whose internal arcs are all unguarded can
  // re-trigger forever (error); one broken by a guard is a warning.
  for (const auto& comp : dxgdetail::sccs(dep)) {
    bool cyclic = comp.size() > 1;
    if (comp.size() == 1) {
      for (const auto& a : dep.adj[comp[0]]) {
        if (a.to == comp[0]) cyclic = true;
      }
    }
    if (!cyclic) continue;
    std::set<int> members(comp.begin(), comp.end());
    bool any_guard = false;
    for (int v : comp) {
      for (const auto& a : dep.adj[v]) {
        if (members.count(a.to) && a.guarded) any_guard = true;
      }
    }
    auto tour = dxgdetail::cycle_in(dep, comp, /*unguarded_only=*/!any_guard);
    std::string loc;
    for (int v : tour) loc += (loc.empty() ? "" : " -> ") + dep.names[v];
    if (!tour.empty()) loc += " -> " + dep.names[tour.front()];
    if (any_guard) {
      report.warnings.push_back({IssueKind::Cycle, loc, "cycle is guarded; runtime breaks it on unchanged values"});
    } else {
      report.errors.push_back({IssueKind::Cycle, loc, "unguarded cycle can re-trigger forever"});
    }
  }

  // Unused external-fill fields: declared to be filled externally but no
  // edge or policy ever targets them.
  for (const auto& n : spec.nodes) {
    const ObjectSchema* s = schema_of(n.name);
    if (!s) continue;
    std::function<void(const FieldDef&, const std::string&)> visit = [&](const FieldDef& f, const std::string& prefix) {
      std::string path = prefix.empty() ? f.name : prefix + "." + f.name;
      if (f.external_fill) {
        bool targeted = write_targets.count(n.name + "." + path) > 0;
        for (const auto& p : spec.policies) {
          if (!p.is_drop() && p.set_node == n.name && p.set_field == path) targeted = true;
        }
        if (!targeted)
          report.warnings.push_back(
              {IssueKind::UnusedState, n.name + "." + path, "external-fill field never targeted"});
      }
      for (const auto& c : f.fields) visit(c, path);
    };
    for (const auto& f : s->fields) visit(f, "");
  }

  return report;
}

// --- Planning -------------------------------------------------------------------

// Evaluation order and shared-subexpression index for one DXG. The plan owns
// a copy of the spec so the canonicalization pointers stay valid.
struct ExecutionPlan {
  DxgSpec spec;
  std::vector<std::vector<std::string>> stages;  // edge names, dependency-ordered
  std::unordered_map<const Expr*, std::string> canon;
  uint64_t shared_slots = 0;  // distinct canonical subexpressions
  uint64_t naive_slots = 0;   // subexpression instances without sharing
};

namespace dxgdetail {

inline uint64_t count_nodes(const ExprPtr& e) {
  if (!e) return 0;
  return 1 + count_nodes(e->a) + count_nodes(e->b) + count_nodes(e->c);
}

inline bool fields_touch(const std::string& a, const std::string& b) {
  if (a == "*" || b == "*") return true;
  return rbac::pattern_covers(a, b) || rbac::pattern_covers(b, a);
}

}  // namespace dxgdetail

inline ExecutionPlan plan(const DxgSpec& spec) {
  ExecutionPlan out;
  out.spec = spec;
  const DxgSpec& s = out.spec;

  std::set<std::string> distinct;
  auto index = [&](const ExprPtr& e) {
    if (!e) return;
    index_subexpressions(e, out.canon, distinct);
    out.naive_slots += dxgdetail::count_nodes(e);
  };
  for (const auto& e : s.edges) {
    index(edge_expr(e));
    index(e.when);
  }
  for (const auto& p : s.policies) {
    index(p.condition);
    index(p.value);
  }
  out.shared_slots = distinct.size();

  // Edge dependency graph: i -> j when i writes a field j reads.
  size_t n = s.edges.size();
  std::vector<std::pair<std::string, std::string>> writes(n);  // node, field ("*" = whole object)
  std::vector<std::set<std::string>> reads(n);
  std::vector<std::string> read_node(n);
  for (size_t i = 0; i < n; ++i) {
    const Edge& e = s.edges[i];
    writes[i] = {e.to_node, e.to_field.empty() ? "*" : e.to_field};
    read_node[i] = e.from_node;
    if (e.from_field.empty()) {
      reads[i].insert("*");
    } else {
      ExprPtr expr = edge_expr(e);
      for (const auto& p : collect_paths(expr)) reads[i].insert(p);
      if (e.when) {
        for (const auto& p : collect_paths(e.when)) reads[i].insert(p);
      }
    }
  }
  std::vector<std::vector<int>> adj(n);
  std::vector<int> indegree(n, 0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      if (i == j || writes[i].first != read_node[j]) continue;
      bool touches = std::any_of(reads[j].begin(), reads[j].end(), [&](const std::string& r) {
        return dxgdetail::fields_touch(writes[i].second, r);
      });
      if (touches) {
        adj[i].push_back(static_cast<int>(j));
        ++indegree[j];
      }
    }
  }

  // Kahn layering; any residue (guarded cycles) lands in one final stage.
  std::vector<char> placed(n, 0);
  size_t remaining = n;
  while (remaining > 0) {
    std::vector<std::string> stage;
    std::vector<int> chosen;
    for (size_t i = 0; i < n; ++i) {
      if (!placed[i] && indegree[i] == 0) chosen.push_back(static_cast<int>(i));
    }
    if (chosen.empty()) {
      for (size_t i = 0; i < n; ++i) {
        if (!placed[i]) {
          stage.push_back(s.edges[i].name);
          placed[i] = 1;
        }
      }
      out.stages.push_back(std::move(stage));
      break;
    }
    for (int i : chosen) {
      placed[i] = 1;
      --remaining;
      stage.push_back(s.edges[i].name);
      for (int j : adj[i]) --indegree[j];
    }
    out.stages.push_back(std::move(stage));
  }
  return out;
}

// --- Diffing --------------------------------------------------------------------

struct DxgDiff {
  std::vector<Edge> added_edges, removed_edges, modified_edges;
  std::vector<Policy> added_policies, removed_policies, modified_policies;

  bool empty() const {
    return added_edges.empty() && removed_edges.empty() && modified_edges.empty() && added_policies.empty() &&
           removed_policies.empty() && modified_policies.empty();
  }

  Value to_json() const {
    auto edges = [](const std::vector<Edge>& v) {
      Value arr = Value::array();
      for (const auto& e : v) arr.push_back(edge_to_json(e));
      return arr;
    };
    auto policies = [](const std::vector<Policy>& v) {
      Value arr = Value::array();
      for (const auto& p : v) arr.push_back(policy_to_json(p));
      return arr;
    };
    return Value{{"added_edges", edges(added_edges)},       {"removed_edges", edges(removed_edges)},
                 {"modified_edges", edges(modified_edges)}, {"added_policies", policies(added_policies)},
                 {"removed_policies", policies(removed_policies)}, {"modified_policies", policies(modified_policies)}};
  }
};

// Name-keyed minimal change-set; modified entries carry the new version.
inline DxgDiff diff_dxg(const DxgSpec& oldspec, const DxgSpec& newspec) {
  auto unique_names = [](const auto& items, const char* what) {
    std::set<std::string> seen;
    for (const auto& item : items) {
      if (!seen.insert(item.name).second)
        throw DxError(ErrorCode::InvalidDiff, std::string("duplicate ") + what + " name '" + item.name + "'");
    }
  };
  unique_names(oldspec.edges, "edge");
  unique_names(newspec.edges, "edge");
  unique_names(oldspec.policies, "policy");
  unique_names(newspec.policies, "policy");

  DxgDiff diff;
  std::map<std::string, const Edge*> old_edges;
  for (const auto& e : oldspec.edges) old_edges[e.name] = &e;
  for (const auto& e : newspec.edges) {
    auto it = old_edges.find(e.name);
    if (it == old_edges.end()) {
      diff.added_edges.push_back(e);
    } else {
      if (edge_to_json(*it->second) != edge_to_json(e)) diff.modified_edges.push_back(e);
      old_edges.erase(it);
    }
  }
  for (const auto& [name, e] : old_edges) diff.removed_edges.push_back(*e);

  std::map<std::string, const Policy*> old_policies;
  for (const auto& p : oldspec.policies) old_policies[p.name] = &p;
  for (const auto& p : newspec.policies) {
    auto it = old_policies.find(p.name);
    if (it == old_policies.end()) {
      diff.added_policies.push_back(p);
    } else {
      if (policy_to_json(*it->second) != policy_to_json(p)) diff.modified_policies.push_back(p);
      old_policies.erase(it);
    }
  }
  for (const auto& [name, p] : old_policies) diff.removed_policies.push_back(*p);
  return diff;
}

}  // namespace knactor
