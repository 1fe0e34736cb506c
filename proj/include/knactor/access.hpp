#pragma once

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "knactor/errors.hpp"
#include "knactor/value.hpp"

namespace knactor {

enum class Verb { Get, List, Watch, Create, Update, Delete };

inline std::string_view to_string(Verb v) {
  switch (v) {
    case Verb::Get: return "get";
    case Verb::List: return "list";
    case Verb::Watch: return "watch";
    case Verb::Create: return "create";
    case Verb::Update: return "update";
    case Verb::Delete: return "delete";
  }
  return "get";
}

inline std::optional<Verb> verb_from_string(std::string_view s) {
  if (s == "get") return Verb::Get;
  if (s == "list") return Verb::List;
  if (s == "watch") return Verb::Watch;
  if (s == "create") return Verb::Create;
  if (s == "update") return Verb::Update;
  if (s == "delete") return Verb::Delete;
  return std::nullopt;
}

// role -> (store, field paths, verbs). No matching policy means deny.
struct AccessPolicy {
  std::string role;
  std::string store_name;
  std::vector<std::string> field_paths;  // patterns; "*" grants all fields
  std::set<Verb> verbs;

  bool operator==(const AccessPolicy&) const = default;
};

namespace rbac {

// Pattern match over dotted paths. A grant on "a" covers the whole subtree
// under a; "a.*" covers strictly below a; "*" covers everything.
inline bool pattern_covers(const std::string& pattern, const std::string& path) {
  if (pattern == "*") return true;
  auto pat = paths::split(pattern);
  auto p = paths::split(path);
  size_t i = 0;
  for (; i < pat.size(); ++i) {
    if (pat[i] == "*") return true;
    if (i >= p.size() || pat[i] != p[i]) return false;
  }
  return true;  // pattern is a prefix of (or equal to) the path
}

// True when the pattern grants anything at or below `path` (used to keep
// partially-granted subtrees during projection).
inline bool pattern_intersects(const std::string& pattern, const std::string& path) {
  if (pattern == "*") return true;
  auto pat = paths::split(pattern);
  auto p = paths::split(path);
  for (size_t i = 0; i < pat.size() && i < p.size(); ++i) {
    if (pat[i] == "*") return true;
    if (pat[i] != p[i]) return false;
  }
  return true;
}

}  // namespace rbac

class RbacTable {
 public:
  explicit RbacTable(std::string admin_role = "admin") : admin_role_(std::move(admin_role)) {}

  void add(AccessPolicy p) { policies_.push_back(std::move(p)); }

  const std::string& admin_role() const { return admin_role_; }
  bool is_admin(const std::string& role) const { return role == admin_role_; }

  // Default-deny: absence of any matching policy fails the verb.
  bool allows(const std::string& role, const std::string& store, Verb verb) const {
    if (is_admin(role)) return true;
    for (const auto& p : policies_) {
      if (p.role == role && p.store_name == store && p.verbs.count(verb)) return true;
    }
    return false;
  }

  std::vector<std::string> granted_fields(const std::string& role, const std::string& store, Verb verb) const {
    if (is_admin(role)) return {"*"};
    std::vector<std::string> out;
    for (const auto& p : policies_) {
      if (p.role == role && p.store_name == store && p.verbs.count(verb)) {
        out.insert(out.end(), p.field_paths.begin(), p.field_paths.end());
      }
    }
    return out;
  }

  bool covers(const std::vector<std::string>& grants, const std::string& path) const {
    return std::any_of(grants.begin(), grants.end(),
                       [&](const std::string& g) { return rbac::pattern_covers(g, path); });
  }

  std::vector<AccessPolicy> snapshot() const { return policies_; }

 private:
  std::string admin_role_;
  std::vector<AccessPolicy> policies_;
};

// Returns the object with only the granted fields; reads never surface a
// field outside the caller's grants.
inline Value project_fields(const Value& attributes, const std::vector<std::string>& grants,
                            const std::string& prefix = "") {
  for (const auto& g : grants)
    if (g == "*") return attributes;
  if (!attributes.is_object()) return attributes;
  Value out = Value::object();
  for (auto it = attributes.begin(); it != attributes.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    bool full = std::any_of(grants.begin(), grants.end(),
                            [&](const std::string& g) { return rbac::pattern_covers(g, path); });
    if (full) {
      out[it.key()] = it.value();
    } else if (it.value().is_object()) {
      bool partial = std::any_of(grants.begin(), grants.end(),
                                 [&](const std::string& g) { return rbac::pattern_intersects(g, path); });
      if (partial) {
        Value sub = project_fields(it.value(), grants, path);
        if (!sub.empty()) out[it.key()] = std::move(sub);
      }
    }
  }
  return out;
}

inline std::vector<AccessPolicy> access_policies_from_yaml_text(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw DxError(ErrorCode::InvalidRequest, std::string("yaml: ") + e.what());
  }
  std::vector<AccessPolicy> out;
  for (const auto& n : root["policies"]) {
    AccessPolicy p;
    p.role = n["role"].as<std::string>();
    p.store_name = n["store"].as<std::string>();
    if (n["fields"]) {
      for (const auto& f : n["fields"]) p.field_paths.push_back(f.as<std::string>());
    } else {
      p.field_paths.push_back("*");
    }
    for (const auto& v : n["verbs"]) {
      auto verb = verb_from_string(v.as<std::string>());
      if (!verb) throw DxError(ErrorCode::InvalidRequest, "unknown verb '" + v.as<std::string>() + "'");
      p.verbs.insert(*verb);
    }
    if (p.verbs.empty()) throw DxError(ErrorCode::InvalidRequest, "policy for role '" + p.role + "' grants no verbs");
    out.push_back(std::move(p));
  }
  if (out.empty()) throw DxError(ErrorCode::InvalidRequest, "no policies in file");
  return out;
}

inline Value access_policy_to_json(const AccessPolicy& p) {
  Value v = Value::object();
  v["role"] = p.role;
  v["store"] = p.store_name;
  v["fields"] = p.field_paths;
  Value verbs = Value::array();
  for (Verb verb : p.verbs) verbs.push_back(std::string(to_string(verb)));
  v["verbs"] = verbs;
  return v;
}

inline AccessPolicy access_policy_from_json(const Value& v) {
  AccessPolicy p;
  p.role = v.at("role").get<std::string>();
  p.store_name = v.at("store").get<std::string>();
  for (const auto& f : v.at("fields")) p.field_paths.push_back(f.get<std::string>());
  for (const auto& s : v.at("verbs")) {
    auto verb = verb_from_string(s.get<std::string>());
    if (!verb) throw DxError(ErrorCode::InvalidRequest, "unknown verb in policy");
    p.verbs.insert(*verb);
  }
  return p;
}

}  // namespace knactor
