#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "knactor/errors.hpp"
#include "knactor/expr.hpp"
#include "knactor/schema.hpp"
#include "knactor/value.hpp"

namespace knactor {

enum class OpKind { Filter, Rename, Sort, Aggregate };

inline std::string_view to_string(OpKind k) {
  switch (k) {
    case OpKind::Filter: return "filter";
    case OpKind::Rename: return "rename";
    case OpKind::Sort: return "sort";
    case OpKind::Aggregate: return "aggregate";
  }
  return "filter";
}

inline std::optional<OpKind> op_kind_from_string(std::string_view s) {
  if (s == "filter") return OpKind::Filter;
  if (s == "rename") return OpKind::Rename;
  if (s == "sort") return OpKind::Sort;
  if (s == "aggregate") return OpKind::Aggregate;
  return std::nullopt;
}

// One step of a record-stream pipeline. Filter and rename are per-record;
// sort and aggregate consume the whole batch.
struct DataflowOp {
  OpKind kind = OpKind::Filter;
  ExprPtr predicate;                                         // filter
  std::vector<std::pair<std::string, std::string>> renames;  // rename, from -> to
  std::string sort_field;                                    // sort
  bool descending = false;
  AggFn agg = AggFn::Sum;  // aggregate: fn over one field, optional group key
  std::string agg_field;
  std::string group_by;

  // The aggregate output field is named after the call, e.g. sum_kwh.
  std::string agg_output() const { return std::string(to_string(agg)) + "_" + agg_field; }

  static DataflowOp filter(ExprPtr predicate) {
    DataflowOp op;
    op.kind = OpKind::Filter;
    op.predicate = std::move(predicate);
    return op;
  }

  static DataflowOp rename(std::vector<std::pair<std::string, std::string>> renames) {
    DataflowOp op;
    op.kind = OpKind::Rename;
    op.renames = std::move(renames);
    std::sort(op.renames.begin(), op.renames.end());
    return op;
  }

  static DataflowOp sort(std::string field, bool descending = false) {
    DataflowOp op;
    op.kind = OpKind::Sort;
    op.sort_field = std::move(field);
    op.descending = descending;
    return op;
  }

  static DataflowOp aggregate(AggFn fn, std::string field, std::string group_by = "") {
    DataflowOp op;
    op.kind = OpKind::Aggregate;
    op.agg = fn;
    op.agg_field = std::move(field);
    op.group_by = std::move(group_by);
    return op;
  }
};

using Pipeline = std::vector<DataflowOp>;

inline Value op_to_json(const DataflowOp& op) {
  Value v = Value::object();
  v["op"] = std::string(to_string(op.kind));
  switch (op.kind) {
    case OpKind::Filter: v["predicate"] = to_string(op.predicate); break;
    case OpKind::Rename: {
      Value m = Value::object();
      for (const auto& [from, to] : op.renames) m[from] = to;
      v["fields"] = m;
      break;
    }
    case OpKind::Sort:
      v["field"] = op.sort_field;
      v["order"] = op.descending ? "desc" : "asc";
      break;
    case OpKind::Aggregate:
      v["fn"] = std::string(to_string(op.agg));
      v["field"] = op.agg_field;
      if (!op.group_by.empty()) v["group_by"] = op.group_by;
      break;
  }
  return v;
}

inline DataflowOp op_from_json(const Value& v) {
  DataflowOp op;
  auto k = op_kind_from_string(v.at("op").get<std::string>());
  if (!k) throw DxError(ErrorCode::InvalidPipeline, "unknown op '" + v.at("op").get<std::string>() + "'");
  op.kind = *k;
  switch (op.kind) {
    case OpKind::Filter: op.predicate = parse_expr(v.at("predicate").get<std::string>()); break;
    case OpKind::Rename: {
      const Value& m = v.at("fields");
      for (auto it = m.begin(); it != m.end(); ++it) op.renames.emplace_back(it.key(), it.value().get<std::string>());
      std::sort(op.renames.begin(), op.renames.end());
      break;
    }
    case OpKind::Sort:
      op.sort_field = v.at("field").get<std::string>();
      if (v.contains("order")) op.descending = v.at("order").get<std::string>() == "desc";
      break;
    case OpKind::Aggregate: {
      auto fn = agg_fn_from_string(v.at("fn").get<std::string>());
      if (!fn) throw DxError(ErrorCode::InvalidPipeline, "unknown aggregate fn");
      op.agg = *fn;
      op.agg_field = v.at("field").get<std::string>();
      if (v.contains("group_by")) op.group_by = v.at("group_by").get<std::string>();
      break;
    }
  }
  return op;
}

// Canonical form: expressions print canonically and maps iterate sorted, so
// equal ops serialize identically. Consolidation keys on this.
inline std::string op_signature(const DataflowOp& op) { return op_to_json(op).dump(); }

inline std::string pipeline_signature(const Pipeline& ops) {
  std::string s;
  for (const auto& op : ops) {
    s += op_signature(op);
    s.push_back('\n');
  }
  return s;
}

inline Value pipeline_to_json(const Pipeline& ops) {
  Value arr = Value::array();
  for (const auto& op : ops) arr.push_back(op_to_json(op));
  return arr;
}

inline Pipeline pipeline_from_json(const Value& v) {
  Pipeline p;
  for (const auto& item : v) p.push_back(op_from_json(item));
  return p;
}

namespace detail {

inline std::optional<FieldType> scalar_type_of(const std::map<std::string, FieldType>& fields,
                                               const std::string& name) {
  auto it = fields.find(name);
  if (it == fields.end()) return std::nullopt;
  return it->second;
}

}  // namespace detail

// Validates a pipeline against the fields entering it and returns the fields
// leaving it. Throws InvalidPipeline on any shape error.
inline std::map<std::string, FieldType> check_pipeline(const Pipeline& ops,
                                                       std::map<std::string, FieldType> fields) {
  for (const auto& op : ops) {
    switch (op.kind) {
      case OpKind::Filter: {
        if (!op.predicate) throw DxError(ErrorCode::InvalidPipeline, "filter needs a predicate");
        TypeEnv env;
        env.lookup = [&](const std::string& p) { return detail::scalar_type_of(fields, p); };
        FieldType t;
        try {
          t = check_expr(op.predicate, env);
        } catch (const TypeCheckError& e) {
          throw DxError(ErrorCode::InvalidPipeline, std::string("filter: ") + e.what());
        }
        if (t != FieldType::Bool) throw DxError(ErrorCode::InvalidPipeline, "filter predicate must be boolean");
        break;
      }
      case OpKind::Rename: {
        std::map<std::string, FieldType> next = fields;
        for (const auto& [from, to] : op.renames) {
          auto it = fields.find(from);
          if (it == fields.end()) throw DxError(ErrorCode::InvalidPipeline, "rename: no field '" + from + "'");
          if (!is_field_ident(to)) throw DxError(ErrorCode::InvalidPipeline, "rename: bad name '" + to + "'");
          next.erase(from);
          if (next.count(to)) throw DxError(ErrorCode::InvalidPipeline, "rename: '" + to + "' collides");
          next[to] = it->second;
        }
        fields = std::move(next);
        break;
      }
      case OpKind::Sort: {
        auto t = detail::scalar_type_of(fields, op.sort_field);
        if (!t) throw DxError(ErrorCode::InvalidPipeline, "sort: no field '" + op.sort_field + "'");
        if (*t == FieldType::Bool || *t == FieldType::Object || *t == FieldType::List)
          throw DxError(ErrorCode::InvalidPipeline, "sort: field '" + op.sort_field + "' is not orderable");
        break;
      }
      case OpKind::Aggregate: {
        std::map<std::string, FieldType> next;
        if (!op.group_by.empty()) {
          auto g = detail::scalar_type_of(fields, op.group_by);
          if (!g) throw DxError(ErrorCode::InvalidPipeline, "aggregate: no group field '" + op.group_by + "'");
          next[op.group_by] = *g;
        }
        TypeEnv env;
        env.aggregating = true;
        env.lookup = [&](const std::string& p) { return detail::scalar_type_of(fields, p); };
        FieldType t;
        try {
          t = check_expr(Expr::make_aggregate(op.agg, op.agg_field), env);
        } catch (const TypeCheckError& err) {
          throw DxError(ErrorCode::InvalidPipeline, std::string("aggregate: ") + err.what());
        }
        next[op.agg_output()] = t;
        fields = std::move(next);
        break;
      }
    }
  }
  return fields;
}

inline std::map<std::string, FieldType> stream_field_types(const StreamDef& def) {
  std::map<std::string, FieldType> fields;
  for (const auto& [name, type] : def.fields) fields[name] = type;
  fields["ts"] = FieldType::Int;
  return fields;
}

inline bool per_record_op(const DataflowOp& op) {
  return op.kind == OpKind::Filter || op.kind == OpKind::Rename;
}

// Applies one op to a batch. `evaluations`, when given, counts records
// entering the op — the consolidation savings metric.
inline std::vector<Value> apply_op(const DataflowOp& op, std::vector<Value> batch,
                                   uint64_t* evaluations = nullptr) {
  if (evaluations) *evaluations += batch.size();
  switch (op.kind) {
    case OpKind::Filter: {
      std::vector<Value> out;
      out.reserve(batch.size());
      for (auto& r : batch) {
        EvalEnv env;
        env.root = &r;
        Value v = eval_expr(op.predicate, env);
        if (!v.is_boolean()) throw DxError(ErrorCode::TypeError, "filter predicate not bool");
        if (v.get<bool>()) out.push_back(std::move(r));
      }
      return out;
    }
    case OpKind::Rename: {
      for (auto& r : batch) {
        for (const auto& [from, to] : op.renames) {
          auto it = r.find(from);
          if (it == r.end()) throw DxError(ErrorCode::MissingBinding, "rename: no field '" + from + "'");
          Value v = std::move(*it);
          r.erase(it);
          r[to] = std::move(v);
        }
      }
      return batch;
    }
    case OpKind::Sort: {
      std::stable_sort(batch.begin(), batch.end(), [&](const Value& a, const Value& b) {
        const Value* va = paths::get(a, op.sort_field);
        const Value* vb = paths::get(b, op.sort_field);
        if (!va || !vb) throw DxError(ErrorCode::MissingBinding, "sort: no field '" + op.sort_field + "'");
        return op.descending ? (*vb < *va) : (*va < *vb);
      });
      return batch;
    }
    case OpKind::Aggregate: {
      // Each group collapses to one record: the group key plus fn_field.
      std::map<Value, Value> columns;  // group key -> list of agg_field values
      for (auto& r : batch) {
        Value key;
        if (!op.group_by.empty()) {
          const Value* g = paths::get(r, op.group_by);
          if (!g) throw DxError(ErrorCode::MissingBinding, "aggregate: no field '" + op.group_by + "'");
          key = *g;
        }
        const Value* v = paths::get(r, op.agg_field);
        if (!v) throw DxError(ErrorCode::MissingBinding, "aggregate: no field '" + op.agg_field + "'");
        columns[key].push_back(*v);
      }
      std::vector<Value> out;  // empty batch -> empty output
      for (auto& [key, col] : columns) {
        Value rec = Value::object();
        if (!op.group_by.empty()) rec[op.group_by] = key;
        rec[op.agg_output()] = exprdetail::aggregate_list(op.agg, col, op.agg_field);
        out.push_back(std::move(rec));
      }
      return out;
    }
  }
  return batch;
}

inline std::vector<Value> apply_pipeline(const Pipeline& ops, std::vector<Value> batch) {
  for (const auto& op : ops) batch = apply_op(op, std::move(batch));
  return batch;
}

}  // namespace knactor
