#pragma once

// Oracles and fixtures shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "fdenser/data.hpp"
#include "fdenser/engine.hpp"
#include "fdenser/genotype.hpp"
#include "fdenser/grammar.hpp"
#include "fdenser/network.hpp"
#include "fdenser/structure.hpp"

namespace support {

using namespace fdenser;

inline std::filesystem::path source_path(const std::string& rel) {
  return std::filesystem::path(FDENSER_SOURCE_DIR) / rel;
}

inline Grammar shipped_grammar(const std::string& name) {
  return load_grammar(source_path("grammars/" + name + ".grammar").string());
}

inline OuterStructure shipped_structure(const std::string& name) {
  return load_structure(source_path("grammars/" + name + ".structure").string());
}

inline PreparedData rings_data(std::size_t per_class, double noise, std::uint64_t seed, std::size_t train,
                               std::size_t val, std::size_t test) {
  return prepare(split(make_rings(per_class, noise, seed), train, val, test, seed));
}

/// Brute-force pairwise count: wins of a over b, ties count one half.
inline double pairwise_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

// ---------------------------------------------------------------------------
// Parent selection as literally written in the method description.

inline const Individual& select_fittest(const std::vector<const Individual*>& pop) {
  const Individual* best = pop.front();
  for (const auto* i : pop) {
    const double a = i->fitness().value_or(-1), b = best->fitness().value_or(-1);
    if (a > b || (a == b && i->id < best->id)) best = i;
  }
  return *best;
}

inline Individual selection_transcript(const std::vector<Individual>& population, double default_time,
                                        const std::function<double(const Individual&, double)>& retrain) {
  std::vector<const Individual*> all;
  for (const auto& i : population) all.push_back(&i);
  Individual parent = select_fittest(all);
  if (parent.train_budget.amount > default_time) {
    std::vector<const Individual*> rest;
    for (const auto* i : all)
      if (i->id != parent.id) rest.push_back(i);
    Individual tmp_parent = select_fittest(rest);
    tmp_parent.train_budget.amount = parent.train_budget.amount;
    tmp_parent.evaluation->fitness = retrain(tmp_parent, parent.train_budget.amount);
    if (tmp_parent.fitness() > parent.fitness())
      return tmp_parent;
    else
      return parent;
  } else {
    return parent;
  }
}

// ---------------------------------------------------------------------------
// Cheap deterministic stand-in for training: fitness is a hash of the
// genotype and seed, nudged upwards by longer budgets.

inline FitnessRecord stub_evaluation(const Individual& ind, std::uint64_t seed) {
  Json genes = Json::array();
  for (const auto& m : ind.modules)
    for (const auto& u : m) genes.push_back(to_json(u));
  const std::uint64_t h = splitmix64(fnv1a64(genes.dump()) ^ seed);
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  FitnessRecord r;
  r.fitness = 0.5 * u + 0.4 * (1.0 - 1.0 / (1.0 + ind.train_budget.amount));
  r.validation_accuracy = r.fitness;
  r.test_accuracy = r.fitness - 0.01;
  r.epochs_run = static_cast<int>(ind.train_budget.amount);
  r.stopped_by = StopReason::budget;
  return r;
}

// ---------------------------------------------------------------------------
// Genotype invariants; returns a description of the first violation or "".

inline std::string genotype_violation(const Individual& ind, const Grammar& grammar, const OuterStructure& structure) {
  if (ind.modules.size() != structure.modules.size()) return "module count";
  int g = 0;
  for (std::size_t m = 0; m < structure.modules.size(); ++m) {
    const auto& spec = structure.modules[m];
    const auto n = static_cast<int>(ind.modules[m].size());
    if (n < spec.min_units || n > spec.max_units) return "unit count " + std::to_string(n) + " in module " + std::to_string(m);
    for (const auto& unit : ind.modules[m]) {
      if (std::find(spec.start_symbols.begin(), spec.start_symbols.end(), unit.start_symbol) == spec.start_symbols.end())
        return "start symbol " + unit.start_symbol;
      if (spec.kind == ModuleKind::macro) {
        if (!unit.inputs.empty()) return "macro unit with inputs";
      } else {
        if (unit.inputs.empty()) return "layer without inputs";
        for (std::size_t i = 0; i < unit.inputs.size(); ++i) {
          const int off = unit.inputs[i];
          if (off > -1 || off < -(g + 1)) return "offset " + std::to_string(off) + " at layer " + std::to_string(g);
          for (std::size_t j = 0; j < i; ++j)
            if (unit.inputs[j] == off) return "duplicate input";
        }
        ++g;
      }
      for (const auto& [nt, genes] : unit.genes) {
        const Rule* rule = grammar.find(nt);
        if (!rule) return "gene for unknown <" + nt + ">";
        for (const auto& gene : genes) {
          if (gene.choice >= rule->alternatives.size()) return "choice out of range in <" + nt + ">";
          std::vector<const ParameterSpec*> slots;
          for (const auto* p : parameters_of(rule->alternatives[gene.choice]))
            for (int c = 0; c < p->count; ++c) slots.push_back(p);
          if (gene.values.size() != slots.size()) return "value count in <" + nt + ">";
          for (std::size_t k = 0; k < slots.size(); ++k)
            if (!slots[k]->contains(gene.values[k])) return "value out of bounds for " + slots[k]->name;
        }
      }
    }
  }
  Phenotype ph;
  try {
    ph = decode(ind, grammar, structure);
  } catch (const std::exception& e) {
    return std::string("decode: ") + e.what();
  }
  const auto specs = grammar.parameter_specs();
  // key:value pairs written literally in the grammar are not bound by the parameter range
  std::set<std::pair<std::string, std::string>> literal;
  for (const auto& rule : grammar.rules())
    for (const auto& alt : rule.alternatives)
      for (const auto& sym : alt)
        if (const auto* t = std::get_if<TerminalAttribute>(&sym)) literal.emplace(t->key, t->value);
  for (std::size_t i = 0; i < ph.layers.size(); ++i) {
    for (int in : ph.layers[i].inputs)
      if (in >= static_cast<int>(i) || in < -1) return "resolved input " + std::to_string(in);
    for (const auto& [k, v] : ph.layers[i].attributes.entries())
      if (auto s = specs.find(k); s != specs.end() && !literal.count({k, v}))
        for (const auto& tok : split_whitespace(v))
          if (!s->second.contains(*parse_number(tok))) return "attribute " + k + "=" + v + " out of bounds";
  }
  return "";
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle.

/// Mean cross-entropy of the network on (x, labels); dropout masks are
/// replayed from `mask_seed` so every evaluation sees the same mask.
template <typename S>
S loss_at(Network<S>& net, const Matrix<S>& x, const std::vector<int>& labels, std::uint64_t mask_seed) {
  Rng rng(mask_seed);
  const Matrix<S> p = net.forward(x, true, rng);
  S sum = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    sum -= std::log(std::max(p(r, labels[static_cast<std::size_t>(r)]), static_cast<S>(kProbabilityFloor)));
  return sum / static_cast<S>(x.rows());
}

struct GradientReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

inline constexpr long double kFiniteDifferenceStep = 1e-6L;

/// Relative error |a - n| / max(|a|, |n|), with absolute comparison for
/// near-zero pairs where relative error is meaningless.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-7) return std::abs(analytic - numeric) < 1e-9 ? 0.0 : std::abs(analytic - numeric) / 1e-7;
  return std::abs(analytic - numeric) / scale;
}

/// Analytic double-precision gradients of `ph` against central differences.
/// The differences are taken on a long double twin with identical weights
/// and masks: in double, round-off alone is ~1e-10, too coarse for the
/// near-zero gradients of e.g. a batch-norm feeding another batch-norm.
inline GradientReport check_gradients(const Phenotype& ph, Shape shape, int classes, std::uint64_t init_seed,
                                      const Matrix<double>& x, const std::vector<int>& labels,
                                      std::uint64_t mask_seed) {
  Rng init(init_seed);
  auto net = compile<double>(ph, shape, classes, init);
  Rng rng(mask_seed);
  Matrix<double> p = net.forward(x, true, rng);
  for (Eigen::Index r = 0; r < p.rows(); ++r) p(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
  net.backward_logits(p / static_cast<double>(x.rows()));
  std::vector<Matrix<double>> analytic;
  for (auto* g : net.gradients()) analytic.push_back(*g);

  Rng unused(0);
  auto twin = compile<long double>(ph, shape, classes, unused);
  std::vector<Matrix<long double>> state;
  for (const auto& t : net.state()) state.push_back(t.cast<long double>());
  twin.load_state(state);
  const Matrix<long double> wide_x = x.cast<long double>();

  GradientReport report;
  auto params = twin.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = *params[k];
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const long double saved = w.data()[i];
      w.data()[i] = saved + kFiniteDifferenceStep;
      const long double up = loss_at(twin, wide_x, labels, mask_seed);
      w.data()[i] = saved - kFiniteDifferenceStep;
      const long double down = loss_at(twin, wide_x, labels, mask_seed);
      w.data()[i] = saved;
      const auto numeric = static_cast<double>((up - down) / (2 * kFiniteDifferenceStep));
      report.max_relative_error =
          std::max(report.max_relative_error, relative_error(analytic[k].data()[i], numeric));
      ++report.checked;
    }
  }
  return report;
}

/// Random small architecture mixing dense, conv, pooling, batch-norm and
/// dropout layers, sometimes with skip inputs; all activations are smooth
/// except relu, whose kinks are measure-zero for random inputs.
inline std::string random_architecture(Rng& rng, bool image) {
  static const char* acts[] = {"linear", "relu", "sigmoid"};
  auto act = [&] { return std::string("act:") + acts[rng.index(3)]; };
  auto tf = [&] { return std::string(rng.bernoulli(0.5) ? "True" : "False"); };
  std::vector<std::string> lines;
  auto add = [&](std::string s, std::string inputs = "") {
    if (inputs.empty()) inputs = std::to_string(static_cast<int>(lines.size()) - 1);
    lines.push_back(s + " input:" + inputs);
  };
  if (image) {
    const auto n = rng.uniform_int(1, 3);
    for (std::int64_t i = 0; i < n; ++i) {
      switch (rng.index(5)) {
        case 0:
        case 1:
          add("layer:conv num-filters:" + std::to_string(rng.uniform_int(2, 3)) + " filter-shape:" +
              std::to_string(rng.uniform_int(1, 3)) + " stride:" + std::to_string(rng.uniform_int(1, 2)) +
              " padding:" + (rng.bernoulli(0.5) ? "same" : "valid") + " " + act() + " bias:" + tf());
          break;
        case 2:
          add(std::string("layer:") + (rng.bernoulli(0.5) ? "pool-max" : "pool-avg") + " kernel-size:2 stride:" +
              std::to_string(rng.uniform_int(1, 2)) + " padding:" + (rng.bernoulli(0.5) ? "same" : "valid"));
          break;
        case 3:
          add("layer:batch-norm");
          break;
        default:
          add("layer:dropout rate:0.3");
      }
    }
  }
  const auto dense = rng.uniform_int(0, 2);
  for (std::int64_t i = 0; i < dense; ++i) {
    if (rng.bernoulli(0.3)) add("layer:batch-norm");
    add("layer:fc " + act() + " num-units:" + std::to_string(rng.uniform_int(3, 6)) + " bias:" + tf());
    if (rng.bernoulli(0.3)) add("layer:dropout rate:0.25");
  }
  std::string inputs;
  const int last = static_cast<int>(lines.size()) - 1;
  if (last >= 1 && rng.bernoulli(0.4)) inputs = std::to_string(last - 1) + "," + std::to_string(last);
  add("layer:fc act:softmax num-units:3 bias:True", inputs);
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  return text;
}

}  // namespace support
