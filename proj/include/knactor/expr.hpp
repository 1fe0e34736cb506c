#pragma once

#include <cctype>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "knactor/errors.hpp"
#include "knactor/value.hpp"

namespace knactor {

// The transform expression language: pure, total over its defined domain, no
// loops and no user-defined functions beyond the fixed aggregation calls.
// Grammar (see docs/dxg-format.md for the full EBNF):
//
//   expr   := "if" expr "then" expr "else" expr | or
//   or     := and ("or" and)*
//   and    := not ("and" not)*
//   not    := "not" not | cmp
//   cmp    := add (("=="|"!="|"<"|"<="|">"|">=") add)?
//   add    := mul (("+"|"-") mul)*
//   mul    := unary (("*"|"/") unary)*
//   unary  := "-" unary | primary
//   primary:= literal | agg "(" path ")" | path | "$key" | "(" expr ")"

enum class ExprKind { Literal, FieldRef, KeyRef, Unary, Binary, Conditional, Aggregate };
enum class UnOp { Not, Neg };
enum class BinOp { Add, Sub, Mul, Div, Eq, Ne, Lt, Le, Gt, Ge, And, Or };
enum class AggFn { Sum, Count, Min, Max, Avg };

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
  ExprKind kind;
  Value literal;         // Literal
  std::string path;      // FieldRef; Aggregate argument
  UnOp un{};
  BinOp bin{};
  AggFn agg{};
  ExprPtr a, b, c;       // operands; Conditional: a=cond b=then c=else

  static ExprPtr make_literal(Value v) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Literal;
    e->literal = std::move(v);
    return e;
  }
  static ExprPtr make_field(std::string p) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::FieldRef;
    e->path = std::move(p);
    return e;
  }
  static ExprPtr make_key() {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::KeyRef;
    return e;
  }
  static ExprPtr make_unary(UnOp op, ExprPtr x) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Unary;
    e->un = op;
    e->a = std::move(x);
    return e;
  }
  static ExprPtr make_binary(BinOp op, ExprPtr l, ExprPtr r) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Binary;
    e->bin = op;
    e->a = std::move(l);
    e->b = std::move(r);
    return e;
  }
  static ExprPtr make_conditional(ExprPtr cond, ExprPtr then_e, ExprPtr else_e) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Conditional;
    e->a = std::move(cond);
    e->b = std::move(then_e);
    e->c = std::move(else_e);
    return e;
  }
  static ExprPtr make_aggregate(AggFn fn, std::string p) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Aggregate;
    e->agg = fn;
    e->path = std::move(p);
    return e;
  }
};

inline std::string_view to_string(AggFn f) {
  switch (f) {
    case AggFn::Sum: return "sum";
    case AggFn::Count: return "count";
    case AggFn::Min: return "min";
    case AggFn::Max: return "max";
    case AggFn::Avg: return "avg";
  }
  return "sum";
}

inline std::optional<AggFn> agg_fn_from_string(std::string_view s) {
  if (s == "sum") return AggFn::Sum;
  if (s == "count") return AggFn::Count;
  if (s == "min") return AggFn::Min;
  if (s == "max") return AggFn::Max;
  if (s == "avg") return AggFn::Avg;
  return std::nullopt;
}

// --- Lexer -------------------------------------------------------------------

namespace exprdetail {

enum class Tok { End, Ident, Number, String, KeyRef, LParen, RParen, Op };

struct Token {
  Tok kind = Tok::End;
  std::string text;   // ident / operator spelling
  Value value;        // number / string literals
  int line = 1, col = 1;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(src) { advance(); }

  const Token& peek() const { return tok_; }

  Token next() {
    Token t = tok_;
    advance();
    return t;
  }

 private:
  void advance() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) bump();
    tok_ = Token{};
    tok_.line = line_;
    tok_.col = col_;
    if (pos_ >= src_.size()) return;
    char c = src_[pos_];
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::string id;
      while (pos_ < src_.size()) {
        char d = src_[pos_];
        if (std::isalnum(static_cast<unsigned char>(d)) || d == '_' || d == '.') {
          id.push_back(d);
          bump();
        } else {
          break;
        }
      }
      tok_.kind = Tok::Ident;
      tok_.text = id;
      return;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      lex_number();
      return;
    }
    if (c == '"') {
      lex_string();
      return;
    }
    if (c == '$') {
      bump();
      std::string id;
      while (pos_ < src_.size() && std::isalnum(static_cast<unsigned char>(src_[pos_]))) {
        id.push_back(src_[pos_]);
        bump();
      }
      if (id != "key") throw ParseError("unknown '$' reference '$" + id + "'", tok_.line, tok_.col);
      tok_.kind = Tok::KeyRef;
      return;
    }
    if (c == '(') {
      bump();
      tok_.kind = Tok::LParen;
      return;
    }
    if (c == ')') {
      bump();
      tok_.kind = Tok::RParen;
      return;
    }
    static const char* two[] = {"==", "!=", "<=", ">="};
    for (const char* op : two) {
      if (src_.compare(pos_, 2, op) == 0) {
        tok_.kind = Tok::Op;
        tok_.text = op;
        bump();
        bump();
        return;
      }
    }
    if (std::string("+-*/<>").find(c) != std::string::npos) {
      tok_.kind = Tok::Op;
      tok_.text = std::string(1, c);
      bump();
      return;
    }
    throw ParseError(std::string("unexpected character '") + c + "'", line_, col_);
  }

  void lex_number() {
    size_t start = pos_;
    bool is_float = false;
    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) bump();
    if (pos_ < src_.size() && src_[pos_] == '.' && pos_ + 1 < src_.size() &&
        std::isdigit(static_cast<unsigned char>(src_[pos_ + 1]))) {
      is_float = true;
      bump();
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) bump();
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      is_float = true;
      bump();
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) bump();
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) bump();
    }
    std::string text = src_.substr(start, pos_ - start);
    tok_.kind = Tok::Number;
    tok_.value = is_float ? Value(std::stod(text)) : Value(static_cast<int64_t>(std::stoll(text)));
  }

  void lex_string() {
    bump();  // opening quote
    std::string out;
    while (pos_ < src_.size() && src_[pos_] != '"') {
      char c = src_[pos_];
      if (c == '\\') {
        bump();
        if (pos_ >= src_.size()) break;
        char e = src_[pos_];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '\\': out.push_back('\\'); break;
          case '"': out.push_back('"'); break;
          default: throw ParseError(std::string("bad escape '\\") + e + "'", line_, col_);
        }
        bump();
      } else {
        out.push_back(c);
        bump();
      }
    }
    if (pos_ >= src_.size()) throw ParseError("unterminated string literal", tok_.line, tok_.col);
    bump();  // closing quote
    tok_.kind = Tok::String;
    tok_.value = Value(std::move(out));
  }

  void bump() {
    if (src_[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  const std::string& src_;
  size_t pos_ = 0;
  int line_ = 1, col_ = 1;
  Token tok_;
};

class Parser {
 public:
  explicit Parser(const std::string& src) : lex_(src) {}

  ExprPtr parse() {
    ExprPtr e = expr();
    if (lex_.peek().kind != Tok::End) {
      const Token& t = lex_.peek();
      throw ParseError("trailing input '" + (t.text.empty() ? t.value.dump() : t.text) + "'", t.line, t.col);
    }
    return e;
  }

 private:
  ExprPtr expr() {
    if (is_kw("if")) {
      lex_.next();
      ExprPtr cond = expr();
      expect_kw("then");
      ExprPtr then_e = expr();
      expect_kw("else");
      ExprPtr else_e = expr();
      return Expr::make_conditional(cond, then_e, else_e);
    }
    return or_expr();
  }

  ExprPtr or_expr() {
    ExprPtr l = and_expr();
    while (is_kw("or")) {
      lex_.next();
      l = Expr::make_binary(BinOp::Or, l, and_expr());
    }
    return l;
  }

  ExprPtr and_expr() {
    ExprPtr l = not_expr();
    while (is_kw("and")) {
      lex_.next();
      l = Expr::make_binary(BinOp::And, l, not_expr());
    }
    return l;
  }

  ExprPtr not_expr() {
    if (is_kw("not")) {
      lex_.next();
      return Expr::make_unary(UnOp::Not, not_expr());
    }
    return comparison();
  }

  ExprPtr comparison() {
    ExprPtr l = additive();
    if (lex_.peek().kind == Tok::Op) {
      const std::string& op = lex_.peek().text;
      BinOp b;
      if (op == "==")
        b = BinOp::Eq;
      else if (op == "!=")
        b = BinOp::Ne;
      else if (op == "<")
        b = BinOp::Lt;
      else if (op == "<=")
        b = BinOp::Le;
      else if (op == ">")
        b = BinOp::Gt;
      else if (op == ">=")
        b = BinOp::Ge;
      else
        return l;
      lex_.next();
      return Expr::make_binary(b, l, additive());
    }
    return l;
  }

  ExprPtr additive() {
    ExprPtr l = multiplicative();
    while (lex_.peek().kind == Tok::Op && (lex_.peek().text == "+" || lex_.peek().text == "-")) {
      BinOp b = lex_.next().text == "+" ? BinOp::Add : BinOp::Sub;
      l = Expr::make_binary(b, l, multiplicative());
    }
    return l;
  }

  ExprPtr multiplicative() {
    ExprPtr l = unary();
    while (lex_.peek().kind == Tok::Op && (lex_.peek().text == "*" || lex_.peek().text == "/")) {
      BinOp b = lex_.next().text == "*" ? BinOp::Mul : BinOp::Div;
      l = Expr::make_binary(b, l, unary());
    }
    return l;
  }

  ExprPtr unary() {
    if (lex_.peek().kind == Tok::Op && lex_.peek().text == "-") {
      lex_.next();
      return Expr::make_unary(UnOp::Neg, unary());
    }
    return primary();
  }

  ExprPtr primary() {
    const Token t = lex_.next();
    switch (t.kind) {
      case Tok::Number:
      case Tok::String: return Expr::make_literal(t.value);
      case Tok::KeyRef: return Expr::make_key();
      case Tok::LParen: {
        ExprPtr e = expr();
        if (lex_.peek().kind != Tok::RParen) throw ParseError("expected ')'", lex_.peek().line, lex_.peek().col);
        lex_.next();
        return e;
      }
      case Tok::Ident: {
        if (t.text == "true") return Expr::make_literal(Value(true));
        if (t.text == "false") return Expr::make_literal(Value(false));
        if (t.text == "if" || t.text == "then" || t.text == "else" || t.text == "and" || t.text == "or" ||
            t.text == "not")
          throw ParseError("unexpected keyword '" + t.text + "'", t.line, t.col);
        if (lex_.peek().kind == Tok::LParen) {
          auto fn = agg_fn_from_string(t.text);
          if (!fn) throw ParseError("unknown function '" + t.text + "'", t.line, t.col);
          lex_.next();
          const Token arg = lex_.next();
          if (arg.kind != Tok::Ident) throw ParseError("aggregate argument must be a field path", arg.line, arg.col);
          if (lex_.peek().kind != Tok::RParen) throw ParseError("expected ')'", lex_.peek().line, lex_.peek().col);
          lex_.next();
          if (!is_field_path(arg.text)) throw ParseError("bad field path '" + arg.text + "'", arg.line, arg.col);
          return Expr::make_aggregate(*fn, arg.text);
        }
        if (!is_field_path(t.text)) throw ParseError("bad field path '" + t.text + "'", t.line, t.col);
        return Expr::make_field(t.text);
      }
      default: throw ParseError("unexpected end of expression", t.line, t.col);
    }
  }

  bool is_kw(const char* kw) const { return lex_.peek().kind == Tok::Ident && lex_.peek().text == kw; }

  void expect_kw(const char* kw) {
    if (!is_kw(kw)) {
      const Token& t = lex_.peek();
      throw ParseError(std::string("expected '") + kw + "'", t.line, t.col);
    }
    lex_.next();
  }

  Lexer lex_;
};

}  // namespace exprdetail

inline ExprPtr parse_expr(const std::string& source) { return exprdetail::Parser(source).parse(); }

// --- Printing ----------------------------------------------------------------

namespace exprdetail {

inline int precedence(const Expr& e) {
  switch (e.kind) {
    case ExprKind::Conditional: return 0;
    case ExprKind::Binary:
      switch (e.bin) {
        case BinOp::Or: return 1;
        case BinOp::And: return 2;
        case BinOp::Eq:
        case BinOp::Ne:
        case BinOp::Lt:
        case BinOp::Le:
        case BinOp::Gt:
        case BinOp::Ge: return 4;
        case BinOp::Add:
        case BinOp::Sub: return 5;
        case BinOp::Mul:
        case BinOp::Div: return 6;
      }
      return 6;
    case ExprKind::Unary: return e.un == UnOp::Not ? 3 : 7;
    default: return 8;
  }
}

inline std::string_view spell(BinOp op) {
  switch (op) {
    case BinOp::Add: return "+";
    case BinOp::Sub: return "-";
    case BinOp::Mul: return "*";
    case BinOp::Div: return "/";
    case BinOp::Eq: return "==";
    case BinOp::Ne: return "!=";
    case BinOp::Lt: return "<";
    case BinOp::Le: return "<=";
    case BinOp::Gt: return ">";
    case BinOp::Ge: return ">=";
    case BinOp::And: return "and";
    case BinOp::Or: return "or";
  }
  return "+";
}

inline void print(const Expr& e, std::string& out, int min_prec) {
  int prec = precedence(e);
  bool parens = prec < min_prec;
  if (parens) out.push_back('(');
  switch (e.kind) {
    case ExprKind::Literal: out += e.literal.dump(); break;
    case ExprKind::FieldRef: out += e.path; break;
    case ExprKind::KeyRef: out += "$key"; break;
    case ExprKind::Aggregate:
      out += to_string(e.agg);
      out.push_back('(');
      out += e.path;
      out.push_back(')');
      break;
    case ExprKind::Unary:
      if (e.un == UnOp::Not) {
        out += "not ";
        print(*e.a, out, 3);
      } else {
        out.push_back('-');
        print(*e.a, out, 7);
      }
      break;
    case ExprKind::Binary: {
      // Left-associative chains reprint without parens on the left.
      bool comparison = prec == 4;
      print(*e.a, out, comparison ? prec + 1 : prec);
      out.push_back(' ');
      out += spell(e.bin);
      out.push_back(' ');
      print(*e.b, out, prec + 1);
      break;
    }
    case ExprKind::Conditional:
      out += "if ";
      print(*e.a, out, 0);
      out += " then ";
      print(*e.b, out, 0);
      out += " else ";
      print(*e.c, out, 0);
      break;
  }
  if (parens) out.push_back(')');
}

}  // namespace exprdetail

// Canonical text form: parse(to_string(e)) reproduces e structurally, and
// structurally equal expressions print identically (the consolidation key).
inline std::string to_string(const Expr& e) {
  std::string out;
  exprdetail::print(e, out, 0);
  return out;
}

inline std::string to_string(const ExprPtr& e) { return to_string(*e); }

inline bool expr_equal(const ExprPtr& a, const ExprPtr& b) {
  if (!a || !b) return !a && !b;
  return to_string(a) == to_string(b);
}

inline void collect_paths(const Expr& e, std::set<std::string>& out) {
  switch (e.kind) {
    case ExprKind::FieldRef: out.insert(e.path); break;
    case ExprKind::Aggregate: out.insert(e.path); break;
    default: break;
  }
  if (e.a) collect_paths(*e.a, out);
  if (e.b) collect_paths(*e.b, out);
  if (e.c) collect_paths(*e.c, out);
}

inline std::set<std::string> collect_paths(const ExprPtr& e) {
  std::set<std::string> out;
  if (e) collect_paths(*e, out);
  return out;
}

inline bool is_literal_true(const ExprPtr& e) {
  return e && e->kind == ExprKind::Literal && e->literal.is_boolean() && e->literal.get<bool>();
}

// --- Type checking -----------------------------------------------------------

class TypeCheckError : public DxError {
 public:
  TypeCheckError(const std::string& message, bool unknown_field)
      : DxError(ErrorCode::TypeError, message), unknown_field_(unknown_field) {}
  bool unknown_field() const { return unknown_field_; }

 private:
  bool unknown_field_;
};

struct TypeEnv {
  // Resolves a field path to its declared type; nullopt = unknown field.
  std::function<std::optional<FieldType>(const std::string&)> lookup;
  bool aggregating = false;
};

namespace exprdetail {

inline bool numeric(FieldType t) { return t == FieldType::Int || t == FieldType::Float; }

inline FieldType promote(FieldType a, FieldType b) {
  return (a == FieldType::Float || b == FieldType::Float) ? FieldType::Float : FieldType::Int;
}

}  // namespace exprdetail

inline FieldType check_expr(const Expr& e, const TypeEnv& env) {
  using exprdetail::numeric;
  using exprdetail::promote;
  switch (e.kind) {
    case ExprKind::Literal:
      if (e.literal.is_string()) return FieldType::String;
      if (e.literal.is_boolean()) return FieldType::Bool;
      if (e.literal.is_number_float()) return FieldType::Float;
      return FieldType::Int;
    case ExprKind::FieldRef: {
      auto t = env.lookup ? env.lookup(e.path) : std::nullopt;
      if (!t) throw TypeCheckError("unknown field '" + e.path + "'", true);
      return *t;
    }
    case ExprKind::KeyRef: return FieldType::String;
    case ExprKind::Unary: {
      FieldType a = check_expr(*e.a, env);
      if (e.un == UnOp::Not) {
        if (a != FieldType::Bool) throw TypeCheckError("'not' needs a bool operand", false);
        return FieldType::Bool;
      }
      if (!numeric(a)) throw TypeCheckError("unary '-' needs a numeric operand", false);
      return a;
    }
    case ExprKind::Binary: {
      FieldType a = check_expr(*e.a, env);
      FieldType b = check_expr(*e.b, env);
      switch (e.bin) {
        case BinOp::Add:
          if (a == FieldType::String && b == FieldType::String) return FieldType::String;
          [[fallthrough]];
        case BinOp::Sub:
        case BinOp::Mul:
        case BinOp::Div:
          if (!numeric(a) || !numeric(b))
            throw TypeCheckError(std::string("'") + std::string(exprdetail::spell(e.bin)) +
                                     "' needs numeric operands",
                                 false);
          return promote(a, b);
        case BinOp::Eq:
        case BinOp::Ne:
          if (a != b && !(numeric(a) && numeric(b)))
            throw TypeCheckError("'==' operands must have comparable types", false);
          return FieldType::Bool;
        case BinOp::Lt:
        case BinOp::Le:
        case BinOp::Gt:
        case BinOp::Ge:
          if (!((numeric(a) && numeric(b)) || (a == FieldType::String && b == FieldType::String)))
            throw TypeCheckError("ordering needs numeric or string operands", false);
          return FieldType::Bool;
        case BinOp::And:
        case BinOp::Or:
          if (a != FieldType::Bool || b != FieldType::Bool)
            throw TypeCheckError("'and'/'or' need bool operands", false);
          return FieldType::Bool;
      }
      return FieldType::Bool;
    }
    case ExprKind::Conditional: {
      if (check_expr(*e.a, env) != FieldType::Bool) throw TypeCheckError("'if' condition must be bool", false);
      FieldType t = check_expr(*e.b, env);
      FieldType f = check_expr(*e.c, env);
      if (t == f) return t;
      if (numeric(t) && numeric(f)) return FieldType::Float;
      throw TypeCheckError("'if' branches must have a common type", false);
    }
    case ExprKind::Aggregate: {
      auto t = env.lookup ? env.lookup(e.path) : std::nullopt;
      if (!t) throw TypeCheckError("unknown field '" + e.path + "'", true);
      if (e.agg == AggFn::Count) return FieldType::Int;
      // In aggregating contexts lookup yields the element type; a List
      // attribute's element type is unknown statically and checked at eval.
      if (*t == FieldType::List) return FieldType::Float;
      if (!env.aggregating)
        throw TypeCheckError("'" + std::string(to_string(e.agg)) + "' needs a list field here", false);
      switch (e.agg) {
        case AggFn::Avg:
          if (!numeric(*t)) throw TypeCheckError("'avg' needs a numeric field", false);
          return FieldType::Float;
        case AggFn::Sum:
          if (!numeric(*t)) throw TypeCheckError("'sum' needs a numeric field", false);
          return *t;
        case AggFn::Min:
        case AggFn::Max:
          if (!numeric(*t) && *t != FieldType::String)
            throw TypeCheckError("'min'/'max' need a numeric or string field", false);
          return *t;
        case AggFn::Count: return FieldType::Int;
      }
      return *t;
    }
  }
  throw TypeCheckError("malformed expression", false);
}

inline FieldType check_expr(const ExprPtr& e, const TypeEnv& env) {
  if (!e) throw TypeCheckError("empty expression", false);
  return check_expr(*e, env);
}

// --- Evaluation ----------------------------------------------------------------

struct EvalEnv {
  const Value* root = nullptr;       // field paths resolve against this object
  const std::string* key = nullptr;  // $key binding
};

// Optional hooks for consolidated evaluation: structurally identical
// subexpressions share one computation per trigger via the memo table.
struct EvalHooks {
  const std::unordered_map<const Expr*, std::string>* canon = nullptr;
  std::unordered_map<std::string, Value>* memo = nullptr;
  uint64_t* evaluations = nullptr;  // counts actual (non-memoized) node evaluations
};

namespace exprdetail {

inline double as_double(const Value& v) { return v.get<double>(); }
inline bool both_int(const Value& a, const Value& b) {
  return (a.is_number_integer() || a.is_number_unsigned()) && (b.is_number_integer() || b.is_number_unsigned());
}

inline Value arith(BinOp op, const Value& a, const Value& b) {
  if (!a.is_number() || !b.is_number()) {
    if (op == BinOp::Add && a.is_string() && b.is_string())
      return Value(a.get<std::string>() + b.get<std::string>());
    throw DxError(ErrorCode::TypeError, "arithmetic on non-numeric values");
  }
  if (both_int(a, b)) {
    int64_t x = a.get<int64_t>(), y = b.get<int64_t>();
    switch (op) {
      case BinOp::Add: return Value(x + y);
      case BinOp::Sub: return Value(x - y);
      case BinOp::Mul: return Value(x * y);
      case BinOp::Div:
        if (y == 0) throw DxError(ErrorCode::DivisionByZero, "integer division by zero");
        return Value(x / y);
      default: break;
    }
  }
  double x = as_double(a), y = as_double(b);
  switch (op) {
    case BinOp::Add: return Value(x + y);
    case BinOp::Sub: return Value(x - y);
    case BinOp::Mul: return Value(x * y);
    case BinOp::Div:
      if (y == 0.0) throw DxError(ErrorCode::DivisionByZero, "division by zero");
      return Value(x / y);
    default: break;
  }
  throw DxError(ErrorCode::TypeError, "bad arithmetic operator");
}

inline bool ordered(BinOp op, const Value& a, const Value& b) {
  if (a.is_number() && b.is_number()) {
    double x = as_double(a), y = as_double(b);
    switch (op) {
      case BinOp::Lt: return x < y;
      case BinOp::Le: return x <= y;
      case BinOp::Gt: return x > y;
      case BinOp::Ge: return x >= y;
      default: break;
    }
  }
  if (a.is_string() && b.is_string()) {
    const auto& x = a.get_ref<const std::string&>();
    const auto& y = b.get_ref<const std::string&>();
    switch (op) {
      case BinOp::Lt: return x < y;
      case BinOp::Le: return x <= y;
      case BinOp::Gt: return x > y;
      case BinOp::Ge: return x >= y;
      default: break;
    }
  }
  throw DxError(ErrorCode::TypeError, "ordering needs two numbers or two strings");
}

inline Value aggregate_list(AggFn fn, const Value& list, const std::string& path) {
  if (!list.is_array())
    throw DxError(ErrorCode::TypeError, "aggregate over non-list binding '" + path + "'");
  if (fn == AggFn::Count) return Value(static_cast<int64_t>(list.size()));
  if (list.empty()) {
    if (fn == AggFn::Sum) return Value(static_cast<int64_t>(0));
    throw DxError(ErrorCode::TypeError, std::string(to_string(fn)) + " over empty list '" + path + "'");
  }
  if ((fn == AggFn::Min || fn == AggFn::Max) && list[0].is_string()) {
    const Value* best = &list[0];
    for (const auto& v : list) {
      if (!v.is_string()) throw DxError(ErrorCode::TypeError, "aggregate over mixed elements in '" + path + "'");
      bool better = fn == AggFn::Min ? v.get_ref<const std::string&>() < best->get_ref<const std::string&>()
                                     : v.get_ref<const std::string&>() > best->get_ref<const std::string&>();
      if (better) best = &v;
    }
    return *best;
  }
  bool all_int = true;
  for (const auto& v : list) {
    if (!v.is_number()) throw DxError(ErrorCode::TypeError, "aggregate over non-numeric element in '" + path + "'");
    if (v.is_number_float()) all_int = false;
  }
  switch (fn) {
    case AggFn::Sum: {
      if (all_int) {
        int64_t s = 0;
        for (const auto& v : list) s += v.get<int64_t>();
        return Value(s);
      }
      double s = 0;
      for (const auto& v : list) s += as_double(v);
      return Value(s);
    }
    case AggFn::Avg: {
      double s = 0;
      for (const auto& v : list) s += as_double(v);
      return Value(s / static_cast<double>(list.size()));
    }
    case AggFn::Min:
    case AggFn::Max: {
      const Value* best = &list[0];
      for (const auto& v : list) {
        bool better = fn == AggFn::Min ? as_double(v) < as_double(*best) : as_double(v) > as_double(*best);
        if (better) best = &v;
      }
      return *best;
    }
    default: break;
  }
  throw DxError(ErrorCode::TypeError, "bad aggregate");
}

inline Value eval_node(const Expr& e, const EvalEnv& env, const EvalHooks* hooks);

inline Value eval_raw(const Expr& e, const EvalEnv& env, const EvalHooks* hooks) {
  switch (e.kind) {
    case ExprKind::Literal: return e.literal;
    case ExprKind::FieldRef: {
      const Value* v = env.root ? paths::get(*env.root, e.path) : nullptr;
      if (!v) throw DxError(ErrorCode::MissingBinding, "no binding for '" + e.path + "'");
      return *v;
    }
    case ExprKind::KeyRef:
      if (!env.key) throw DxError(ErrorCode::MissingBinding, "no $key in this context");
      return Value(*env.key);
    case ExprKind::Unary: {
      Value a = eval_node(*e.a, env, hooks);
      if (e.un == UnOp::Not) {
        if (!a.is_boolean()) throw DxError(ErrorCode::TypeError, "'not' on non-bool");
        return Value(!a.get<bool>());
      }
      if (a.is_number_float()) return Value(-a.get<double>());
      if (a.is_number()) return Value(-a.get<int64_t>());
      throw DxError(ErrorCode::TypeError, "unary '-' on non-number");
    }
    case ExprKind::Binary: {
      if (e.bin == BinOp::And || e.bin == BinOp::Or) {
        Value a = eval_node(*e.a, env, hooks);
        if (!a.is_boolean()) throw DxError(ErrorCode::TypeError, "boolean operator on non-bool");
        // Short-circuit: the right operand of a guard may be undefined when
        // the left already decides.
        if (e.bin == BinOp::And && !a.get<bool>()) return Value(false);
        if (e.bin == BinOp::Or && a.get<bool>()) return Value(true);
        Value b = eval_node(*e.b, env, hooks);
        if (!b.is_boolean()) throw DxError(ErrorCode::TypeError, "boolean operator on non-bool");
        return b;
      }
      Value a = eval_node(*e.a, env, hooks);
      Value b = eval_node(*e.b, env, hooks);
      switch (e.bin) {
        case BinOp::Add:
        case BinOp::Sub:
        case BinOp::Mul:
        case BinOp::Div: return arith(e.bin, a, b);
        case BinOp::Eq: return Value(a == b);
        case BinOp::Ne: return Value(a != b);
        case BinOp::Lt:
        case BinOp::Le:
        case BinOp::Gt:
        case BinOp::Ge: return Value(ordered(e.bin, a, b));
        default: break;
      }
      throw DxError(ErrorCode::TypeError, "bad operator");
    }
    case ExprKind::Conditional: {
      Value c = eval_node(*e.a, env, hooks);
      if (!c.is_boolean()) throw DxError(ErrorCode::TypeError, "'if' condition not bool");
      return c.get<bool>() ? eval_node(*e.b, env, hooks) : eval_node(*e.c, env, hooks);
    }
    case ExprKind::Aggregate: {
      const Value* v = env.root ? paths::get(*env.root, e.path) : nullptr;
      if (!v) throw DxError(ErrorCode::MissingBinding, "no binding for '" + e.path + "'");
      return aggregate_list(e.agg, *v, e.path);
    }
  }
  throw DxError(ErrorCode::Internal, "malformed expression");
}

inline Value eval_node(const Expr& e, const EvalEnv& env, const EvalHooks* hooks) {
  if (hooks && hooks->canon && hooks->memo) {
    auto it = hooks->canon->find(&e);
    if (it != hooks->canon->end()) {
      auto hit = hooks->memo->find(it->second);
      if (hit != hooks->memo->end()) return hit->second;
      if (hooks->evaluations) ++*hooks->evaluations;
      Value v = eval_raw(e, env, hooks);
      hooks->memo->emplace(it->second, v);
      return v;
    }
  }
  if (hooks && hooks->evaluations) ++*hooks->evaluations;
  return eval_raw(e, env, hooks);
}

}  // namespace exprdetail

// Deterministic evaluation: equal (expr, env) always yields the same value;
// missing paths and division by zero raise, never produce silent nulls.
inline Value eval_expr(const Expr& e, const EvalEnv& env, const EvalHooks* hooks = nullptr) {
  return exprdetail::eval_node(e, env, hooks);
}

inline Value eval_expr(const ExprPtr& e, const EvalEnv& env, const EvalHooks* hooks = nullptr) {
  return exprdetail::eval_node(*e, env, hooks);
}

inline Value eval_expr(const ExprPtr& e, const Value& bindings) {
  EvalEnv env;
  env.root = &bindings;
  return eval_expr(e, env);
}

// Registers every subexpression of `e` in the canonicalization index used by
// memoized evaluation. Returns the number of distinct canonical forms added.
inline uint64_t index_subexpressions(const ExprPtr& e, std::unordered_map<const Expr*, std::string>& canon,
                                     std::set<std::string>& distinct) {
  if (!e) return 0;
  uint64_t added = 0;
  std::string key = to_string(e);
  canon.emplace(e.get(), key);
  if (distinct.insert(key).second) ++added;
  struct Walk {
    std::unordered_map<const Expr*, std::string>& canon;
    std::set<std::string>& distinct;
    uint64_t& added;
    void operator()(const ExprPtr& n) {
      if (!n) return;
      std::string k = to_string(n);
      canon.emplace(n.get(), k);
      if (distinct.insert(k).second) ++added;
      (*this)(n->a);
      (*this)(n->b);
      (*this)(n->c);
    }
  } walk{canon, distinct, added};
  walk(e->a);
  walk(e->b);
  walk(e->c);
  return added;
}

}  // namespace knactor
