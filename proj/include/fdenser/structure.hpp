#pragma once

// Outer-level structure: an ordered list of modules, each a range of
// evolutionary units expanding one of a set of start symbols.
//
//   layers fully-connected,dropout 1 10
//   layers softmax 1 1
//   macro learning

#include <string>
#include <vector>

#include "fdenser/grammar.hpp"
#include "fdenser/util.hpp"

namespace fdenser {

enum class ModuleKind { layers, macro };

struct ModuleSpec {
  std::vector<std::string> start_symbols;
  int min_units = 1;
  int max_units = 1;
  ModuleKind kind = ModuleKind::layers;

  friend bool operator==(const ModuleSpec&, const ModuleSpec&) = default;
};

struct OuterStructure {
  std::vector<ModuleSpec> modules;

  friend bool operator==(const OuterStructure&, const OuterStructure&) = default;
};

class StructureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::string strip_angles(std::string s) {
  if (s.size() >= 2 && s.front() == '<' && s.back() == '>') return s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> symbol_list(const std::string& field) {
  std::string f = field;
  if (f.size() >= 2 && f.front() == '(' && f.back() == ')') f = f.substr(1, f.size() - 2);
  std::vector<std::string> out;
  for (auto& part : split(f, ',')) {
    auto s = strip_angles(std::string(trim(part)));
    if (s.empty()) continue;
    out.push_back(s);
  }
  return out;
}
}  // namespace detail

inline OuterStructure parse_structure(std::string_view text) {
  OuterStructure st;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto toks = split_whitespace(line);
    const auto where = "structure line " + std::to_string(line_no) + ": ";
    ModuleSpec m;
    if (toks[0] == "layers") {
      if (toks.size() != 4) throw StructureError(where + "expected 'layers <symbols> <min> <max>'");
      m.kind = ModuleKind::layers;
      m.start_symbols = detail::symbol_list(toks[1]);
      auto lo = parse_integer(toks[2]);
      auto hi = parse_integer(toks[3]);
      if (!lo || !hi) throw StructureError(where + "unit bounds must be integers");
      m.min_units = static_cast<int>(*lo);
      m.max_units = static_cast<int>(*hi);
    } else if (toks[0] == "macro") {
      if (toks.size() != 2) throw StructureError(where + "expected 'macro <symbol>'");
      m.kind = ModuleKind::macro;
      m.start_symbols = detail::symbol_list(toks[1]);
      m.min_units = m.max_units = 1;
    } else {
      throw StructureError(where + "unknown module kind '" + toks[0] + "'");
    }
    if (m.start_symbols.empty()) throw StructureError(where + "module has no start symbols");
    if (m.min_units < 0 || m.max_units < 1 || m.min_units > m.max_units)
      throw StructureError(where + "invalid unit bounds");
    st.modules.push_back(std::move(m));
  }
  return st;
}

inline OuterStructure load_structure(const std::string& path) { return parse_structure(read_file(path)); }

inline std::string to_text(const OuterStructure& st) {
  std::string out;
  for (const auto& m : st.modules) {
    std::string syms;
    for (std::size_t i = 0; i < m.start_symbols.size(); ++i) syms += (i ? "," : "") + m.start_symbols[i];
    if (m.kind == ModuleKind::macro)
      out += "macro " + syms + "\n";
    else
      out += "layers " + syms + " " + std::to_string(m.min_units) + " " + std::to_string(m.max_units) + "\n";
  }
  return out;
}

struct Diagnostic {
  std::string message;
};

/// Empty iff the structure's start symbols exist and every reference resolves.
inline std::vector<Diagnostic> validate(const Grammar& grammar, const OuterStructure& structure) {
  std::vector<Diagnostic> out;
  int layer_modules = 0;
  int macro_modules = 0;
  for (std::size_t i = 0; i < structure.modules.size(); ++i) {
    const auto& m = structure.modules[i];
    (m.kind == ModuleKind::layers ? layer_modules : macro_modules)++;
    if (m.min_units > m.max_units)
      out.push_back({"module " + std::to_string(i) + ": min_units > max_units"});
    if (m.kind == ModuleKind::macro && (m.min_units != 1 || m.max_units != 1))
      out.push_back({"module " + std::to_string(i) + ": macro modules hold exactly one unit"});
    for (const auto& s : m.start_symbols)
      if (!grammar.contains(s))
        out.push_back({"module " + std::to_string(i) + ": start symbol <" + s + "> has no rule in the grammar"});
  }
  if (layer_modules == 0) out.push_back({"structure declares no layers module"});
  if (macro_modules != 1) out.push_back({"structure must declare exactly one macro (learning) module"});
  for (const auto& [rule, ref] : grammar.dangling_references())
    out.push_back({"rule <" + rule + "> references undefined <" + ref + ">"});
  return out;
}

}  // namespace fdenser
