#pragma once

#include <yaml-cpp/yaml.h>

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "knactor/errors.hpp"
#include "knactor/value.hpp"

namespace knactor {

struct FieldDef {
  std::string name;
  FieldType type = FieldType::String;
  bool external_fill = false;
  std::vector<FieldDef> fields;  // nested defs when type == Object

  bool operator==(const FieldDef&) const = default;
};

enum class RetentionPolicy { Collect, Archive };

struct ObjectSchema {
  std::string store_name;
  uint64_t version = 0;  // 0 = let the exchange assign the next version
  RetentionPolicy retention = RetentionPolicy::Collect;
  std::vector<FieldDef> fields;

  bool operator==(const ObjectSchema&) const = default;

  const FieldDef* find(const std::string& name) const {
    for (const auto& f : fields)
      if (f.name == name) return &f;
    return nullptr;
  }

  // Resolves a dotted path through nested object fields.
  const FieldDef* find_path(const std::string& dotted) const {
    const std::vector<FieldDef>* scope = &fields;
    const FieldDef* hit = nullptr;
    for (const auto& seg : paths::split(dotted)) {
      hit = nullptr;
      for (const auto& f : *scope)
        if (f.name == seg) hit = &f;
      if (!hit) return nullptr;
      scope = &hit->fields;
    }
    return hit;
  }
};

namespace detail {

inline void check_field_defs(const std::vector<FieldDef>& defs, const std::string& where) {
  if (defs.empty()) throw DxError(ErrorCode::SchemaInvalid, where + ": at least one field required");
  std::set<std::string> seen;
  for (const auto& f : defs) {
    if (!is_field_ident(f.name))
      throw DxError(ErrorCode::SchemaInvalid, where + ": bad field name '" + f.name + "'");
    if (!seen.insert(f.name).second)
      throw DxError(ErrorCode::SchemaInvalid, where + ": duplicate field name '" + f.name + "'");
    if (f.type == FieldType::Object) {
      check_field_defs(f.fields, where + "." + f.name);
    } else if (!f.fields.empty()) {
      throw DxError(ErrorCode::SchemaInvalid, where + "." + f.name + ": nested fields require type object");
    }
  }
}

}  // namespace detail

// Structural checks: field name uniqueness (recursively) and identifier rules.
inline void check_schema(const ObjectSchema& s) {
  if (!is_store_ident(s.store_name))
    throw DxError(ErrorCode::SchemaInvalid, "bad store name '" + s.store_name + "'");
  detail::check_field_defs(s.fields, s.store_name);
}

// Validates a (partial) attribute map against the schema: every supplied
// field must be declared and type-correct. Int values are accepted for float
// fields and coerced, so both write routes commit the same representation.
inline void validate_attributes(const ObjectSchema& schema, Value& attributes) {
  if (!attributes.is_object())
    throw DxError(ErrorCode::InvalidState, schema.store_name + ": attributes must be an object");
  for (auto it = attributes.begin(); it != attributes.end(); ++it) {
    const FieldDef* def = schema.find(it.key());
    if (!def)
      throw DxError(ErrorCode::InvalidState, schema.store_name + ": undeclared field '" + it.key() + "'");
    Value& v = it.value();
    if (def->type == FieldType::Float && (v.is_number_integer() || v.is_number_unsigned())) {
      v = v.get<double>();
    }
    if (!value_matches(v, def->type))
      throw DxError(ErrorCode::InvalidState, schema.store_name + ": field '" + it.key() + "' is not of type " +
                                                 std::string(to_string(def->type)));
    if (def->type == FieldType::Object && !def->fields.empty()) {
      ObjectSchema nested{schema.store_name + "." + it.key(), 1, RetentionPolicy::Collect, def->fields};
      validate_attributes(nested, v);
    }
  }
}

struct StreamDef {
  std::string name;
  std::vector<std::pair<std::string, FieldType>> fields;
  uint64_t max_records = 0;  // 0 = keep_all

  bool operator==(const StreamDef&) const = default;

  std::optional<FieldType> find(const std::string& field) const {
    for (const auto& [n, t] : fields)
      if (n == field) return t;
    return std::nullopt;
  }
};

inline void check_stream_def(const StreamDef& def) {
  if (!is_store_ident(def.name)) throw DxError(ErrorCode::SchemaInvalid, "bad stream name '" + def.name + "'");
  if (def.fields.empty()) throw DxError(ErrorCode::SchemaInvalid, def.name + ": at least one field required");
  std::set<std::string> seen;
  for (const auto& [n, t] : def.fields) {
    if (t == FieldType::Object || t == FieldType::List)
      throw DxError(ErrorCode::SchemaInvalid, def.name + ": stream fields must be scalar");
    if (!is_field_ident(n)) throw DxError(ErrorCode::SchemaInvalid, def.name + ": bad field name '" + n + "'");
    if (!seen.insert(n).second)
      throw DxError(ErrorCode::SchemaInvalid, def.name + ": duplicate field name '" + n + "'");
  }
}

// --- JSON round-trips (wire bodies, WAL records) ------------------------------

inline Value schema_to_json(const ObjectSchema& s) {
  std::function<Value(const FieldDef&)> conv = [&](const FieldDef& f) {
    Value v = Value{{"name", f.name}, {"type", std::string(to_string(f.type))}, {"external_fill", f.external_fill}};
    if (!f.fields.empty()) {
      Value nested = Value::array();
      for (const auto& c : f.fields) nested.push_back(conv(c));
      v["fields"] = nested;
    }
    return v;
  };
  Value fields = Value::array();
  for (const auto& f : s.fields) fields.push_back(conv(f));
  return Value{{"store", s.store_name},
               {"version", s.version},
               {"retention", s.retention == RetentionPolicy::Archive ? "archive" : "collect"},
               {"fields", fields}};
}

inline ObjectSchema schema_from_json(const Value& v) {
  ObjectSchema s;
  s.store_name = v.at("store").get<std::string>();
  s.version = v.at("version").get<uint64_t>();
  s.retention =
      v.at("retention").get<std::string>() == "archive" ? RetentionPolicy::Archive : RetentionPolicy::Collect;
  std::function<FieldDef(const Value&)> conv = [&](const Value& fv) {
    FieldDef f;
    f.name = fv.at("name").get<std::string>();
    f.type = *field_type_from_string(fv.at("type").get<std::string>());
    f.external_fill = fv.at("external_fill").get<bool>();
    if (fv.contains("fields")) {
      for (const auto& c : fv.at("fields")) f.fields.push_back(conv(c));
    }
    return f;
  };
  for (const auto& fv : v.at("fields")) s.fields.push_back(conv(fv));
  return s;
}

inline Value stream_def_to_json(const StreamDef& def) {
  Value fields = Value::array();
  for (const auto& [n, t] : def.fields) fields.push_back(Value{{"name", n}, {"type", std::string(to_string(t))}});
  return Value{{"stream", def.name}, {"fields", fields}, {"max_records", def.max_records}};
}

inline StreamDef stream_def_from_json(const Value& v) {
  StreamDef def;
  def.name = v.at("stream").get<std::string>();
  for (const auto& fv : v.at("fields"))
    def.fields.emplace_back(fv.at("name").get<std::string>(),
                            *field_type_from_string(fv.at("type").get<std::string>()));
  def.max_records = v.value("max_records", 0ull);
  return def;
}

// --- YAML loading -----------------------------------------------------------

namespace detail {

inline FieldDef field_def_from_yaml(const YAML::Node& n) {
  FieldDef f;
  if (!n["name"]) throw DxError(ErrorCode::SchemaInvalid, "field entry missing 'name'");
  f.name = n["name"].as<std::string>();
  std::string ty = n["type"] ? n["type"].as<std::string>() : "string";
  auto t = field_type_from_string(ty);
  if (!t) throw DxError(ErrorCode::SchemaInvalid, "field '" + f.name + "': unknown type '" + ty + "'");
  f.type = *t;
  if (n["external_fill"]) f.external_fill = n["external_fill"].as<bool>();
  if (n["fields"]) {
    for (const auto& c : n["fields"]) f.fields.push_back(field_def_from_yaml(c));
  }
  return f;
}

}  // namespace detail

inline ObjectSchema schema_from_yaml(const YAML::Node& root) {
  ObjectSchema s;
  if (!root["store"]) throw DxError(ErrorCode::SchemaInvalid, "schema file missing 'store'");
  s.store_name = root["store"].as<std::string>();
  if (root["version"]) s.version = root["version"].as<uint64_t>();
  if (root["retention"]) {
    std::string r = root["retention"].as<std::string>();
    if (r == "collect")
      s.retention = RetentionPolicy::Collect;
    else if (r == "archive")
      s.retention = RetentionPolicy::Archive;
    else
      throw DxError(ErrorCode::SchemaInvalid, s.store_name + ": unknown retention '" + r + "'");
  }
  for (const auto& n : root["fields"]) s.fields.push_back(detail::field_def_from_yaml(n));
  check_schema(s);
  return s;
}

inline ObjectSchema schema_from_yaml_text(const std::string& text) {
  try {
    return schema_from_yaml(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw DxError(ErrorCode::SchemaInvalid, std::string("yaml: ") + e.what());
  }
}

inline std::vector<StreamDef> streams_from_yaml_text(const std::string& text) {
  std::vector<StreamDef> out;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw DxError(ErrorCode::SchemaInvalid, std::string("yaml: ") + e.what());
  }
  for (const auto& n : root["streams"]) {
    StreamDef def;
    def.name = n["name"].as<std::string>();
    for (const auto& f : n["fields"]) {
      std::string ty = f["type"] ? f["type"].as<std::string>() : "string";
      auto t = field_type_from_string(ty);
      if (!t) throw DxError(ErrorCode::SchemaInvalid, def.name + ": unknown type '" + ty + "'");
      def.fields.emplace_back(f["name"].as<std::string>(), *t);
    }
    if (n["retention"] && n["retention"]["max_records"])
      def.max_records = n["retention"]["max_records"].as<uint64_t>();
    check_stream_def(def);
    out.push_back(std::move(def));
  }
  if (out.empty()) throw DxError(ErrorCode::SchemaInvalid, "no streams in file");
  return out;
}

// YAML <-> json bridge for wire bodies and fixture values.
inline Value yaml_to_value(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null: return Value();
    case YAML::NodeType::Scalar: {
      // Tagged scalars ("quoted") stay strings; otherwise try bool/int/float.
      if (n.Tag() == "!") return Value(n.as<std::string>());
      bool b;
      if (YAML::convert<bool>::decode(n, b)) return Value(b);
      int64_t i;
      if (YAML::convert<int64_t>::decode(n, i)) return Value(i);
      double d;
      if (YAML::convert<double>::decode(n, d)) return Value(d);
      return Value(n.as<std::string>());
    }
    case YAML::NodeType::Sequence: {
      Value out = Value::array();
      for (const auto& c : n) out.push_back(yaml_to_value(c));
      return out;
    }
    case YAML::NodeType::Map: {
      Value out = Value::object();
      for (const auto& kv : n) out[kv.first.as<std::string>()] = yaml_to_value(kv.second);
      return out;
    }
    default: return Value();
  }
}

}  // namespace knactor
