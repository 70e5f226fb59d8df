#pragma once

// Grammar files in the BNF-like DSGE format:
//
//   <fully-connected> ::= layer:fc <activation> [num-units,int,1,128,2048] <bias>
//   <activation> ::= act:linear | act:relu | act:sigmoid
//
// Tokens are nonterminal references `<name>`, terminal attributes `key:value`
// and parameter specs `[name,type,count,min,max]`. Lines without `::=`
// continue the previous rule; `#` starts a comment line.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fdenser/util.hpp"

namespace fdenser {

class GrammarError : public std::runtime_error {
 public:
  GrammarError(const std::string& msg, int line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

enum class ParamKind { integer, real };

struct ParameterSpec {
  std::string name;
  ParamKind kind = ParamKind::real;
  int count = 1;
  double min = 0.0;
  double max = 0.0;

  bool contains(double v) const {
    if (v < min || v > max) return false;
    return kind == ParamKind::real || std::floor(v) == v;
  }
  friend bool operator==(const ParameterSpec&, const ParameterSpec&) = default;
};

struct NonterminalRef {
  std::string name;
  friend bool operator==(const NonterminalRef&, const NonterminalRef&) = default;
};

struct TerminalAttribute {
  std::string key;
  std::string value;
  friend bool operator==(const TerminalAttribute&, const TerminalAttribute&) = default;
};

using Symbol = std::variant<NonterminalRef, TerminalAttribute, ParameterSpec>;
using Alternative = std::vector<Symbol>;

struct Rule {
  std::string name;
  std::vector<Alternative> alternatives;
  int line = 0;

  friend bool operator==(const Rule& a, const Rule& b) {
    return a.name == b.name && a.alternatives == b.alternatives;
  }
};

/// Parameter specs of one alternative, in order.
inline std::vector<const ParameterSpec*> parameters_of(const Alternative& alt) {
  std::vector<const ParameterSpec*> out;
  for (const auto& s : alt)
    if (auto p = std::get_if<ParameterSpec>(&s)) out.push_back(p);
  return out;
}

inline std::size_t value_count(const Alternative& alt) {
  std::size_t n = 0;
  for (const auto* p : parameters_of(alt)) n += static_cast<std::size_t>(p->count);
  return n;
}

/// Immutable rule table; rule order follows the source text.
class Grammar {
 public:
  Grammar() = default;
  explicit Grammar(std::vector<Rule> rules) : rules_(std::move(rules)) {
    for (std::size_t i = 0; i < rules_.size(); ++i) index_.emplace(rules_[i].name, i);
  }

  const std::vector<Rule>& rules() const { return rules_; }
  bool contains(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }

  const Rule* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &rules_[it->second];
  }

  const Rule& rule(std::string_view name) const {
    if (auto r = find(name)) return *r;
    throw std::out_of_range("grammar has no rule <" + std::string(name) + ">");
  }

  /// Every ParameterSpec in the grammar, first occurrence per name.
  std::map<std::string, ParameterSpec> parameter_specs() const {
    std::map<std::string, ParameterSpec> out;
    for (const auto& r : rules_)
      for (const auto& alt : r.alternatives)
        for (const auto* p : parameters_of(alt)) out.emplace(p->name, *p);
    return out;
  }

  /// (rule, referenced name) pairs whose target rule does not exist.
  std::vector<std::pair<std::string, std::string>> dangling_references() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& r : rules_)
      for (const auto& alt : r.alternatives)
        for (const auto& s : alt)
          if (auto nt = std::get_if<NonterminalRef>(&s); nt && !contains(nt->name)) out.emplace_back(r.name, nt->name);
    return out;
  }

  friend bool operator==(const Grammar& a, const Grammar& b) { return a.rules_ == b.rules_; }

 private:
  std::vector<Rule> rules_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::string param_type_name(ParamKind k) { return k == ParamKind::integer ? "int" : "float"; }

inline ParameterSpec parse_parameter(std::string_view tok, int line) {
  const std::string inner(trim(tok.substr(1, tok.size() - 2)));
  auto fields = split(inner, ',');
  if (fields.size() != 5) throw GrammarError("parameter '" + std::string(tok) + "' needs 5 fields", line);
  for (auto& f : fields) f = std::string(trim(f));
  ParameterSpec spec;
  spec.name = fields[0];
  if (spec.name.empty()) throw GrammarError("parameter with empty name", line);
  if (fields[1] == "int" || fields[1] == "integer")
    spec.kind = ParamKind::integer;
  else if (fields[1] == "float" || fields[1] == "real")
    spec.kind = ParamKind::real;
  else
    throw GrammarError("unknown parameter type '" + fields[1] + "'", line);
  auto count = parse_integer(fields[2]);
  if (!count || *count < 1) throw GrammarError("parameter count must be a positive integer", line);
  spec.count = static_cast<int>(*count);
  auto lo = parse_number(fields[3]);
  auto hi = parse_number(fields[4]);
  if (!lo || !hi) throw GrammarError("parameter bounds must be numeric", line);
  spec.min = *lo;
  spec.max = *hi;
  if (spec.min > spec.max) throw GrammarError("parameter '" + spec.name + "' has min > max", line);
  if (spec.kind == ParamKind::integer && (std::floor(spec.min) != spec.min || std::floor(spec.max) != spec.max))
    throw GrammarError("integer parameter '" + spec.name + "' has fractional bounds", line);
  return spec;
}

inline Symbol classify(const std::string& tok, int line) {
  if (tok.front() == '<') {
    if (tok.size() < 3 || tok.back() != '>') throw GrammarError("malformed nonterminal '" + tok + "'", line);
    return NonterminalRef{tok.substr(1, tok.size() - 2)};
  }
  if (tok.front() == '[') return parse_parameter(tok, line);
  const auto colon = tok.find(':');
  if (colon != std::string::npos && colon > 0 && colon + 1 < tok.size())
    return TerminalAttribute{tok.substr(0, colon), tok.substr(colon + 1)};
  throw GrammarError("unknown token shape '" + tok + "'", line);
}

struct Token {
  std::string text;  // "|" for separators
  int line;
};

inline void lex_line(std::string_view s, int line, std::vector<Token>& out) {
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
    } else if (c == '|') {
      out.push_back({"|", line});
      ++i;
    } else if (c == '[') {
      const auto close = s.find(']', i);
      if (close == std::string_view::npos) throw GrammarError("unclosed '[' in '" + std::string(s.substr(i)) + "'", line);
      std::string tok;
      for (char ch : s.substr(i, close - i + 1))
        if (ch != ' ' && ch != '\t') tok.push_back(ch);
      out.push_back({tok, line});
      i = close + 1;
    } else {
      std::size_t j = i;
      while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '|' && s[j] != '\r') ++j;
      out.push_back({std::string(s.substr(i, j - i)), line});
      i = j;
    }
  }
}

}  // namespace detail

struct GrammarParseOptions {
  /// Reject references to undefined rules (disable to collect them via validate()).
  bool require_resolved = true;
};

inline Grammar parse_grammar(std::string_view text, GrammarParseOptions options = {}) {
  if (trim(text).empty()) throw GrammarError("empty grammar", 0);

  struct Pending {
    std::string name;
    int line;
    std::vector<detail::Token> tokens;
  };
  std::vector<Pending> pending;
  std::set<std::string> seen;

  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto def = line.find("::=");
    if (def == std::string_view::npos) {
      if (pending.empty()) throw GrammarError("continuation line before any rule", line_no);
      detail::lex_line(line, line_no, pending.back().tokens);
      continue;
    }
    const auto head = trim(line.substr(0, def));
    if (head.size() < 3 || head.front() != '<' || head.back() != '>')
      throw GrammarError("rule head must be <name>, got '" + std::string(head) + "'", line_no);
    std::string name(head.substr(1, head.size() - 2));
    if (!seen.insert(name).second) throw GrammarError("duplicate rule <" + name + ">", line_no);
    pending.push_back({name, line_no, {}});
    detail::lex_line(line.substr(def + 3), line_no, pending.back().tokens);
  }

  std::vector<Rule> rules;
  for (auto& p : pending) {
    Rule rule{p.name, {Alternative{}}, p.line};
    int last_line = p.line;
    for (const auto& tok : p.tokens) {
      last_line = tok.line;
      if (tok.text == "|") {
        if (rule.alternatives.back().empty()) throw GrammarError("empty alternative in <" + p.name + ">", tok.line);
        rule.alternatives.emplace_back();
      } else {
        rule.alternatives.back().push_back(detail::classify(tok.text, tok.line));
      }
    }
    if (rule.alternatives.back().empty()) throw GrammarError("empty alternative in <" + p.name + ">", last_line);
    rules.push_back(std::move(rule));
  }

  Grammar g(std::move(rules));
  if (options.require_resolved) {
    if (auto d = g.dangling_references(); !d.empty())
      throw GrammarError("rule <" + d.front().first + "> references undefined <" + d.front().second + ">",
                         g.rule(d.front().first).line);
  }
  return g;
}

inline Grammar load_grammar(const std::string& path, GrammarParseOptions options = {}) {
  return parse_grammar(read_file(path), options);
}

inline std::string to_text(const Symbol& s) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, NonterminalRef>)
          return "<" + v.name + ">";
        else if constexpr (std::is_same_v<T, TerminalAttribute>)
          return v.key + ":" + v.value;
        else
          return "[" + v.name + "," + detail::param_type_name(v.kind) + "," + std::to_string(v.count) + "," +
                 format_number(v.min) + "," + format_number(v.max) + "]";
      },
      s);
}

/// Canonical one-line-per-rule rendering; parse_grammar(to_text(g)) == g.
inline std::string to_text(const Grammar& g) {
  std::string out;
  for (const auto& r : g.rules()) {
    out += "<" + r.name + "> ::=";
    for (std::size_t a = 0; a < r.alternatives.size(); ++a) {
      if (a > 0) out += " |";
      for (const auto& s : r.alternatives[a]) out += " " + to_text(s);
    }
    out += "\n";
  }
  return out;
}

}  // namespace fdenser
