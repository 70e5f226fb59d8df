#pragma once

// Two-level DSGE genotype plus the connectivity level.
//
// Outer level: per module, an ordered list of units. Inner level: per unit, one
// list of expansion genes for each nonterminal, consumed left to right during
// derivation. Connectivity level: per layer unit, relative offsets (-1 is the
// previous layer) to the layers feeding it.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fdenser/budget.hpp"
#include "fdenser/grammar.hpp"
#include "fdenser/rng.hpp"
#include "fdenser/structure.hpp"
#include "fdenser/util.hpp"

namespace fdenser {

inline constexpr int kMaxDerivationDepth = 50;

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExpansionGene {
  std::size_t choice = 0;
  std::vector<double> values;

  friend bool operator==(const ExpansionGene&, const ExpansionGene&) = default;
};

struct UnitGenotype {
  std::string start_symbol;
  std::map<std::string, std::vector<ExpansionGene>> genes;
  std::vector<int> inputs;  // relative offsets, empty for macro units

  std::size_t gene_count() const {
    std::size_t n = 0;
    for (const auto& [_, list] : genes) n += list.size();
    return n;
  }

  friend bool operator==(const UnitGenotype&, const UnitGenotype&) = default;
};

struct Individual {
  std::vector<std::vector<UnitGenotype>> modules;  // aligned with OuterStructure::modules
  Budget train_budget;
  std::optional<FitnessRecord> evaluation;
  std::uint64_t id = 0;
  std::optional<std::uint64_t> parent_id;
  std::uint64_t eval_seed = 0;  // seed of the evaluation that produced `evaluation`

  std::optional<double> fitness() const {
    if (!evaluation) return std::nullopt;
    return evaluation->fitness;
  }

  friend bool operator==(const Individual&, const Individual&) = default;
};

/// Ordered key/value attributes with unique keys (re-setting a key keeps its position).
class AttributeMap {
 public:
  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = std::move(value);
        return;
      }
    entries_.emplace_back(key, std::move(value));
  }

  const std::string* get(std::string_view key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return &v;
    return nullptr;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  friend bool operator==(const AttributeMap&, const AttributeMap&) = default;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct LayerDescriptor {
  AttributeMap attributes;
  std::vector<int> inputs;  // absolute layer indices, -1 is the network input

  friend bool operator==(const LayerDescriptor&, const LayerDescriptor&) = default;
};

struct LearningDescriptor {
  AttributeMap attributes;

  friend bool operator==(const LearningDescriptor&, const LearningDescriptor&) = default;
};

struct Phenotype {
  std::vector<LayerDescriptor> layers;
  LearningDescriptor learning;

  friend bool operator==(const Phenotype&, const Phenotype&) = default;
};

namespace detail {

inline double sample_value(const ParameterSpec& spec, Rng& rng) {
  if (spec.kind == ParamKind::integer)
    return static_cast<double>(rng.uniform_int(static_cast<std::int64_t>(spec.min), static_cast<std::int64_t>(spec.max)));
  return rng.uniform(spec.min, spec.max);
}

inline std::string render_value(const ParameterSpec& spec, double v) {
  if (spec.kind == ParamKind::integer) return std::to_string(static_cast<long long>(v));
  return format_number(v);
}

/// Depth-first derivation of one unit. With an RNG, missing genes and values
/// are sampled and appended to the unit; without one they are an error.
class Deriver {
 public:
  Deriver(const Grammar& grammar, UnitGenotype& unit, Rng* rng) : grammar_(grammar), unit_(unit), rng_(rng) {}

  AttributeMap run() {
    expand(unit_.start_symbol, 0);
    return std::move(attributes_);
  }

  const std::map<std::string, std::size_t>& consumed() const { return cursor_; }

 private:
  void expand(const std::string& nt, int depth) {
    if (depth > kMaxDerivationDepth) throw DecodeError("maximum derivation depth exceeded at <" + nt + ">");
    const Rule* rule = grammar_.find(nt);
    if (!rule) throw DecodeError("no rule for <" + nt + ">");

    const std::size_t gi = cursor_[nt]++;
    if (unit_.genes[nt].size() <= gi) {
      if (!rng_) throw DecodeError("missing expansion gene for <" + nt + ">");
      unit_.genes[nt].push_back(ExpansionGene{rng_->index(rule->alternatives.size()), {}});
    }
    const std::size_t choice = unit_.genes[nt][gi].choice;
    if (choice >= rule->alternatives.size())
      throw DecodeError("gene choice " + std::to_string(choice) + " out of range for <" + nt + "> (" +
                        std::to_string(rule->alternatives.size()) + " alternatives)");
    const Alternative& alt = rule->alternatives[choice];

    const auto specs = parameters_of(alt);
    {
      auto& values = unit_.genes[nt][gi].values;
      std::size_t pos = 0;
      for (const auto* spec : specs)
        for (int k = 0; k < spec->count; ++k, ++pos)
          if (values.size() <= pos) {
            if (!rng_) throw DecodeError("missing parameter value for '" + spec->name + "'");
            values.push_back(sample_value(*spec, *rng_));
          }
    }

    std::size_t pos = 0;
    for (const auto& sym : alt) {
      if (auto ref = std::get_if<NonterminalRef>(&sym)) {
        expand(ref->name, depth + 1);
      } else if (auto term = std::get_if<TerminalAttribute>(&sym)) {
        attributes_.set(term->key, term->value);
      } else {
        const auto& spec = std::get<ParameterSpec>(sym);
        // re-fetch: nested expansions of the same nonterminal may reallocate the list
        const auto& values = unit_.genes[nt][gi].values;
        std::string text;
        for (int k = 0; k < spec.count; ++k, ++pos) {
          if (k > 0) text += ' ';
          text += render_value(spec, values[pos]);
        }
        attributes_.set(spec.name, std::move(text));
      }
    }
  }

  const Grammar& grammar_;
  UnitGenotype& unit_;
  Rng* rng_;
  std::map<std::string, std::size_t> cursor_;
  AttributeMap attributes_;
};

inline void check_shape(const Individual& ind, const OuterStructure& structure) {
  if (ind.modules.size() != structure.modules.size())
    throw DecodeError("individual has " + std::to_string(ind.modules.size()) + " modules, structure has " +
                      std::to_string(structure.modules.size()));
}

}  // namespace detail

/// A random complete derivation of `start_symbol`, feeding from the previous layer.
inline UnitGenotype random_unit(const Grammar& grammar, const std::string& start_symbol, Rng& rng) {
  if (!grammar.contains(start_symbol)) throw DecodeError("no rule for start symbol <" + start_symbol + ">");
  UnitGenotype unit{start_symbol, {}, {-1}};
  detail::Deriver(grammar, unit, &rng).run();
  return unit;
}

inline Individual random_individual(const Grammar& grammar, const OuterStructure& structure, Budget default_budget,
                                    Rng& rng) {
  Individual ind;
  ind.train_budget = default_budget;
  for (const auto& m : structure.modules) {
    const auto n = rng.uniform_int(m.min_units, m.max_units);
    auto& units = ind.modules.emplace_back();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& sym = m.start_symbols[rng.index(m.start_symbols.size())];
      auto unit = random_unit(grammar, sym, rng);
      if (m.kind == ModuleKind::macro) unit.inputs.clear();
      units.push_back(std::move(unit));
    }
  }
  return ind;
}

/// Global (module, position) coordinates of every layer unit, in network order.
inline std::vector<std::pair<std::size_t, std::size_t>> layer_positions(const Individual& ind,
                                                                       const OuterStructure& structure) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t m = 0; m < structure.modules.size() && m < ind.modules.size(); ++m)
    if (structure.modules[m].kind == ModuleKind::layers)
      for (std::size_t u = 0; u < ind.modules[m].size(); ++u) out.emplace_back(m, u);
  return out;
}

/// Resolve relative input offsets of the layer at global index `layer` into
/// absolute indices, clamped to [-1, layer-1], deduplicated, never empty.
inline std::vector<int> resolve_inputs(const std::vector<int>& offsets, int layer) {
  std::vector<int> out;
  for (int off : offsets) {
    const int target = std::clamp(layer + off, -1, layer - 1);
    if (std::find(out.begin(), out.end(), target) == out.end()) out.push_back(target);
  }
  if (out.empty()) out.push_back(layer - 1);
  return out;
}

namespace detail {
template <class IndividualRef>
Phenotype decode_impl(IndividualRef& ind, const Grammar& grammar, const OuterStructure& structure, Rng* rng) {
  check_shape(ind, structure);
  Phenotype ph;
  int layer = 0;
  for (std::size_t m = 0; m < structure.modules.size(); ++m) {
    for (auto& unit_ref : ind.modules[m]) {
      // a const individual is decoded through a scratch copy; missing genes then throw (rng is null)
      UnitGenotype scratch;
      UnitGenotype* unit;
      if constexpr (std::is_const_v<IndividualRef>) {
        scratch = unit_ref;
        unit = &scratch;
      } else {
        unit = &unit_ref;
      }
      auto attrs = Deriver(grammar, *unit, rng).run();
      if (structure.modules[m].kind == ModuleKind::layers) {
        ph.layers.push_back({std::move(attrs), resolve_inputs(unit->inputs, layer)});
        ++layer;
      } else {
        for (const auto& [k, v] : attrs.entries()) ph.learning.attributes.set(k, v);
      }
    }
  }
  return ph;
}
}  // namespace detail

/// Decode with repair: missing genes are sampled and written back into `ind`.
inline Phenotype decode(Individual& ind, const Grammar& grammar, const OuterStructure& structure, Rng& rng) {
  return detail::decode_impl(ind, grammar, structure, &rng);
}

/// Decode a complete individual; a missing gene is a DecodeError.
inline Phenotype decode(const Individual& ind, const Grammar& grammar, const OuterStructure& structure) {
  return detail::decode_impl(ind, grammar, structure, nullptr);
}

namespace detail {
inline std::string join_inputs(const std::vector<int>& inputs) {
  std::string s;
  for (std::size_t i = 0; i < inputs.size(); ++i) s += (i ? "," : "") + std::to_string(inputs[i]);
  return s;
}

inline std::string attributes_text(const AttributeMap& a) {
  std::string s;
  for (const auto& [k, v] : a.entries()) {
    if (!s.empty()) s += ' ';
    s += k + ":" + v;
  }
  return s;
}
}  // namespace detail

/// One line per layer (`key:value ... input:i,j`), then the learning line.
inline std::string phenotype_to_text(const Phenotype& ph) {
  if (ph.layers.empty()) throw std::invalid_argument("phenotype must contain at least one layer");
  std::string out;
  for (std::size_t i = 0; i < ph.layers.size(); ++i) {
    if (i) out += '\n';
    auto line = detail::attributes_text(ph.layers[i].attributes);
    out += line + (line.empty() ? "" : " ") + "input:" + detail::join_inputs(ph.layers[i].inputs);
  }
  if (!ph.learning.attributes.empty()) out += "\n" + detail::attributes_text(ph.learning.attributes);
  return out;
}

inline Phenotype parse_phenotype(std::string_view text) {
  Phenotype ph;
  for (const auto& raw : split(text, '\n')) {
    const auto line = trim(raw);
    if (line.empty()) continue;
    AttributeMap attrs;
    std::vector<int> inputs;
    bool has_inputs = false;
    std::string last_key;
    for (const auto& tok : split_whitespace(line)) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos) {
        // continuation of a multi-valued parameter
        if (last_key.empty()) throw std::invalid_argument("phenotype token without key: '" + tok + "'");
        attrs.set(last_key, *attrs.get(last_key) + " " + tok);
        continue;
      }
      const auto key = tok.substr(0, colon);
      const auto value = tok.substr(colon + 1);
      if (key == "input") {
        has_inputs = true;
        for (const auto& part : split(value, ',')) {
          auto v = parse_integer(part);
          if (!v) throw std::invalid_argument("bad input index '" + part + "'");
          inputs.push_back(static_cast<int>(*v));
        }
        last_key.clear();
      } else {
        attrs.set(key, value);
        last_key = key;
      }
    }
    if (!attrs.entries().empty() && attrs.entries().front().first == "learning" && !has_inputs) {
      ph.learning.attributes = std::move(attrs);
    } else {
      if (!has_inputs) throw std::invalid_argument("layer line without input list: '" + std::string(line) + "'");
      ph.layers.push_back({std::move(attrs), std::move(inputs)});
    }
  }
  if (ph.layers.empty()) throw std::invalid_argument("phenotype must contain at least one layer");
  return ph;
}

}  // namespace fdenser
