#pragma once

#include <json.hpp>

#include <cctype>
#include <optional>
#include <string>
#include <vector>

#include "knactor/errors.hpp"

namespace knactor {

// Attribute values, record fields, and wire bodies all use the same JSON
// value model. Object attribute maps are json objects keyed by field name.
using Value = nlohmann::json;

namespace paths {

inline std::vector<std::string> split(const std::string& dotted) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : dotted) {
    if (c == '.') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string join(const std::vector<std::string>& segs) {
  std::string out;
  for (size_t i = 0; i < segs.size(); ++i) {
    if (i) out.push_back('.');
    out += segs[i];
  }
  return out;
}

// Walks a dotted path through nested objects. Returns nullptr when any
// segment is absent or a non-object is dotted into.
inline const Value* get(const Value& root, const std::string& dotted) {
  const Value* cur = &root;
  for (const auto& seg : split(dotted)) {
    if (!cur->is_object()) return nullptr;
    auto it = cur->find(seg);
    if (it == cur->end()) return nullptr;
    cur = &*it;
  }
  return cur;
}

inline void set(Value& root, const std::string& dotted, Value v) {
  Value* cur = &root;
  auto segs = split(dotted);
  for (size_t i = 0; i + 1 < segs.size(); ++i) {
    Value& next = (*cur)[segs[i]];
    if (!next.is_object()) next = Value::object();
    cur = &next;
  }
  (*cur)[segs.back()] = std::move(v);
}

// Enumerates the leaf paths of an attribute map: every non-object value, plus
// empty objects. Used for field-level access checks on writes.
inline void leaves(const Value& node, const std::string& prefix, std::vector<std::string>& out) {
  if (node.is_object() && !node.empty()) {
    for (auto it = node.begin(); it != node.end(); ++it) {
      leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    }
  } else {
    out.push_back(prefix);
  }
}

inline std::vector<std::string> leaves(const Value& attributes) {
  std::vector<std::string> out;
  leaves(attributes, "", out);
  return out;
}

}  // namespace paths

enum class FieldType { String, Int, Float, Bool, Object, List };

inline std::string_view to_string(FieldType t) {
  switch (t) {
    case FieldType::String: return "string";
    case FieldType::Int: return "int";
    case FieldType::Float: return "float";
    case FieldType::Bool: return "bool";
    case FieldType::Object: return "object";
    case FieldType::List: return "list";
  }
  return "string";
}

inline std::optional<FieldType> field_type_from_string(std::string_view s) {
  if (s == "string") return FieldType::String;
  if (s == "int") return FieldType::Int;
  if (s == "float") return FieldType::Float;
  if (s == "bool") return FieldType::Bool;
  if (s == "object") return FieldType::Object;
  if (s == "list") return FieldType::List;
  return std::nullopt;
}

inline bool value_matches(const Value& v, FieldType t) {
  switch (t) {
    case FieldType::String: return v.is_string();
    case FieldType::Int: return v.is_number_integer() || v.is_number_unsigned();
    case FieldType::Float: return v.is_number();
    case FieldType::Bool: return v.is_boolean();
    case FieldType::Object: return v.is_object();
    case FieldType::List: return v.is_array();
  }
  return false;
}

// Store identifiers: lowercase alnum with '-' separators. Field names are
// expression-safe identifiers (no '-', so '-' stays a minus sign).
inline bool is_store_ident(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '-' ||
          c == '_'))
      return false;
  }
  return s.front() != '-' && s.back() != '-';
}

inline bool is_field_ident(const std::string& s) {
  if (s.empty()) return false;
  if (!(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  }
  return true;
}

inline bool is_field_path(const std::string& s) {
  if (s.empty()) return false;
  for (const auto& seg : paths::split(s)) {
    if (!is_field_ident(seg)) return false;
  }
  return true;
}

}  // namespace knactor
