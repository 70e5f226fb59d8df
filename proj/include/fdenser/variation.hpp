#pragma once

// Mutation operators: outer level (add/duplicate/remove units), inner level
// (DSGE expansion and parameter changes), connectivity level (add/remove
// inputs) and the train-time operator that extends an individual's budget.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdenser/genotype.hpp"

namespace fdenser {

enum class BudgetGrowth { additive, multiplicative };

struct MutationRates {
  double add_layer = 0.25;
  double remove_layer = 0.25;
  double dsge = 0.15;
  double add_input = 0.0;
  double remove_input = 0.0;
  double train_time = 0.20;
  double duplicate_fraction = 0.5;  // share of add_layer events that copy an existing unit

  BudgetGrowth growth = BudgetGrowth::additive;
  double growth_factor = 2.0;  // only for BudgetGrowth::multiplicative

  void check() const {
    for (double r : {add_layer, remove_layer, dsge, add_input, remove_input, train_time, duplicate_fraction})
      if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("mutation rates must lie in [0, 1]");
    if (growth == BudgetGrowth::multiplicative && !(growth_factor > 1.0))
      throw std::invalid_argument("multiplicative budget growth needs a factor > 1");
  }

  friend bool operator==(const MutationRates&, const MutationRates&) = default;
};

class NoApplicableOperator : public std::runtime_error {
 public:
  NoApplicableOperator() : std::runtime_error("no applicable operator") {}
};

inline constexpr int kMaxMutationAttempts = 100;

/// Clamp every layer unit's offsets to reference an earlier layer (or, for the
/// oldest reachable offset, the network input) and drop duplicates.
inline void normalize_connectivity(Individual& ind, const OuterStructure& structure) {
  const auto positions = layer_positions(ind, structure);
  for (std::size_t g = 0; g < positions.size(); ++g) {
    auto& unit = ind.modules[positions[g].first][positions[g].second];
    std::vector<int> out;
    for (int off : unit.inputs) {
      const int clamped = std::clamp(off, -static_cast<int>(g) - 1, -1);
      if (std::find(out.begin(), out.end(), clamped) == out.end()) out.push_back(clamped);
    }
    if (out.empty()) out.push_back(-1);
    unit.inputs = std::move(out);
  }
}

namespace detail {
inline std::size_t global_index(const Individual& ind, const OuterStructure& structure, std::size_t module,
                                std::size_t pos) {
  std::size_t g = 0;
  for (std::size_t m = 0; m < module; ++m)
    if (structure.modules[m].kind == ModuleKind::layers) g += ind.modules[m].size();
  return g + pos;
}
}  // namespace detail

inline bool add_layer(Individual& ind, std::size_t module, const Grammar& grammar, const OuterStructure& structure,
                      double duplicate_fraction, Rng& rng) {
  const auto& spec = structure.modules.at(module);
  auto& units = ind.modules.at(module);
  if (static_cast<int>(units.size()) >= spec.max_units) return false;

  UnitGenotype unit;
  if (!units.empty() && rng.bernoulli(duplicate_fraction))
    unit = units[rng.index(units.size())];
  else
    unit = random_unit(grammar, spec.start_symbols[rng.index(spec.start_symbols.size())], rng);
  const std::size_t pos = rng.index(units.size() + 1);

  if (spec.kind == ModuleKind::layers) {
    const auto g = static_cast<int>(detail::global_index(ind, structure, module, pos));
    // the new unit is spliced in front of the layer at the insertion point;
    // other references that skip over it keep their absolute target
    const auto positions = layer_positions(ind, structure);
    for (int old_j = g; old_j < static_cast<int>(positions.size()); ++old_j) {
      auto& later = ind.modules[positions[old_j].first][positions[old_j].second];
      for (int& off : later.inputs)
        if (old_j + off < g && !(old_j == g && off == -1)) off -= 1;
    }
  } else {
    unit.inputs.clear();
  }
  units.insert(units.begin() + static_cast<std::ptrdiff_t>(pos), std::move(unit));
  if (spec.kind == ModuleKind::layers) normalize_connectivity(ind, structure);
  return true;
}

inline bool remove_layer(Individual& ind, std::size_t module, const OuterStructure& structure, Rng& rng) {
  const auto& spec = structure.modules.at(module);
  auto& units = ind.modules.at(module);
  if (static_cast<int>(units.size()) <= spec.min_units || units.empty()) return false;

  const std::size_t pos = rng.index(units.size());
  if (spec.kind == ModuleKind::layers) {
    const auto g = static_cast<int>(detail::global_index(ind, structure, module, pos));
    const auto positions = layer_positions(ind, structure);
    for (int j = g + 1; j < static_cast<int>(positions.size()); ++j) {
      auto& later = ind.modules[positions[j].first][positions[j].second];
      for (int& off : later.inputs) {
        const int target = j + off;
        if (target == g)
          off = -1;  // the removed layer's consumers fall back to their previous layer
        else if (target < g)
          off += 1;
      }
    }
  }
  units.erase(units.begin() + static_cast<std::ptrdiff_t>(pos));
  if (spec.kind == ModuleKind::layers) normalize_connectivity(ind, structure);
  return true;
}

/// Re-derive a unit, sampling missing genes and dropping genes the derivation no longer reads.
inline void prune_and_repair(UnitGenotype& unit, const Grammar& grammar, Rng& rng) {
  detail::Deriver deriver(grammar, unit, &rng);
  deriver.run();
  const auto& used = deriver.consumed();
  for (auto it = unit.genes.begin(); it != unit.genes.end();) {
    auto c = used.find(it->first);
    const std::size_t keep = c == used.end() ? 0 : c->second;
    if (it->second.size() > keep) it->second.resize(keep);
    it = it->second.empty() ? unit.genes.erase(it) : std::next(it);
  }
}

inline bool dsge_mutate(Individual& ind, const Grammar& grammar, Rng& rng) {
  struct Site {
    UnitGenotype* unit;
    std::string nt;
    std::size_t index;
  };
  std::vector<Site> sites;
  for (auto& module : ind.modules)
    for (auto& unit : module)
      for (auto& [nt, list] : unit.genes) {
        const Rule* rule = grammar.find(nt);
        if (!rule) continue;
        for (std::size_t i = 0; i < list.size(); ++i) {
          const bool alternatives = rule->alternatives.size() > 1;
          const bool values = list[i].choice < rule->alternatives.size() &&
                              value_count(rule->alternatives[list[i].choice]) > 0;
          if (alternatives || values) sites.push_back({&unit, nt, i});
        }
      }
  if (sites.empty()) return false;

  const auto& site = sites[rng.index(sites.size())];
  const Rule& rule = grammar.rule(site.nt);
  auto& gene = site.unit->genes[site.nt][site.index];
  const auto& alt = rule.alternatives[gene.choice];
  const bool has_values = value_count(alt) > 0;

  if (rule.alternatives.size() > 1 && (!has_values || rng.bernoulli(0.5))) {
    std::size_t c = rng.index(rule.alternatives.size() - 1);
    if (c >= gene.choice) ++c;
    gene.choice = c;
    gene.values.clear();
    prune_and_repair(*site.unit, grammar, rng);
    return true;
  }

  std::vector<const ParameterSpec*> slot_specs;
  for (const auto* spec : parameters_of(alt))
    for (int c = 0; c < spec->count; ++c) slot_specs.push_back(spec);
  for (std::size_t i = gene.values.size(); i < slot_specs.size(); ++i)
    gene.values.push_back(detail::sample_value(*slot_specs[i], rng));
  const std::size_t k = rng.index(slot_specs.size());
  gene.values[k] = detail::sample_value(*slot_specs[k], rng);
  return true;
}

inline bool add_input(Individual& ind, const OuterStructure& structure, Rng& rng) {
  const auto positions = layer_positions(ind, structure);
  std::vector<std::pair<std::size_t, std::vector<int>>> options;
  for (std::size_t g = 1; g < positions.size(); ++g) {
    const auto& unit = ind.modules[positions[g].first][positions[g].second];
    std::vector<int> free;
    for (int off = -1; off >= -static_cast<int>(g); --off)
      if (std::find(unit.inputs.begin(), unit.inputs.end(), off) == unit.inputs.end()) free.push_back(off);
    if (!free.empty()) options.emplace_back(g, std::move(free));
  }
  if (options.empty()) return false;
  const auto& [g, free] = options[rng.index(options.size())];
  ind.modules[positions[g].first][positions[g].second].inputs.push_back(free[rng.index(free.size())]);
  return true;
}

inline bool remove_input(Individual& ind, const OuterStructure& structure, Rng& rng) {
  std::vector<UnitGenotype*> options;
  for (const auto& [m, u] : layer_positions(ind, structure))
    if (ind.modules[m][u].inputs.size() >= 2) options.push_back(&ind.modules[m][u]);
  if (options.empty()) return false;
  auto& inputs = options[rng.index(options.size())]->inputs;
  inputs.erase(inputs.begin() + static_cast<std::ptrdiff_t>(rng.index(inputs.size())));
  return true;
}

inline Budget grown_budget(const Budget& current, const Budget& default_budget, const MutationRates& rates) {
  if (rates.growth == BudgetGrowth::multiplicative) return {current.mode, current.amount * rates.growth_factor};
  return {current.mode, current.amount + default_budget.amount};
}

struct MutationReport {
  bool structural = false;  // any outer, inner or connectivity operator changed the genotype
  bool train_time = false;  // the budget was extended (only when nothing structural fired)
};

/// Offspring of `parent`. Structural changes reset the budget to the default;
/// a lone train-time mutation extends it. Attempts repeat until something fires.
inline Individual mutate(const Individual& parent, const Grammar& grammar, const OuterStructure& structure,
                         const MutationRates& rates, const Budget& default_budget, Rng& rng,
                         MutationReport* report = nullptr) {
  for (int attempt = 0; attempt < kMaxMutationAttempts; ++attempt) {
    Individual child = parent;
    child.evaluation.reset();
    child.parent_id = parent.id;
    child.eval_seed = 0;

    bool structural = false;
    for (std::size_t m = 0; m < structure.modules.size(); ++m) {
      if (structure.modules[m].kind != ModuleKind::layers) continue;
      if (rng.bernoulli(rates.add_layer))
        structural |= add_layer(child, m, grammar, structure, rates.duplicate_fraction, rng);
      if (rng.bernoulli(rates.remove_layer)) structural |= remove_layer(child, m, structure, rng);
    }
    if (rng.bernoulli(rates.dsge)) structural |= dsge_mutate(child, grammar, rng);
    if (rng.bernoulli(rates.add_input)) structural |= add_input(child, structure, rng);
    if (rng.bernoulli(rates.remove_input)) structural |= remove_input(child, structure, rng);
    const bool time = rng.bernoulli(rates.train_time);

    if (structural) {
      child.train_budget = default_budget;
      if (report) *report = {true, false};
      return child;
    }
    if (time) {
      child.train_budget = grown_budget(parent.train_budget, default_budget, rates);
      if (report) *report = {false, true};
      return child;
    }
  }
  throw NoApplicableOperator();
}

}  // namespace fdenser
