#pragma once

// Wiring shared by the command-line tool and the tests: load a configured
// problem, build its evaluator, re-train individuals into exportable models.

#include <string>

#include "fdenser/config.hpp"
#include "fdenser/data.hpp"
#include "fdenser/engine.hpp"
#include "fdenser/evaluator.hpp"
#include "fdenser/grammar.hpp"
#include "fdenser/model_io.hpp"
#include "fdenser/structure.hpp"

namespace fdenser {

struct Problem {
  Grammar grammar;
  OuterStructure structure;
  PreparedData data;
};

inline Dataset load_dataset(const RunConfiguration& c) {
  Dataset ds;
  if (c.dataset == "rings")
    ds = make_rings(c.rings_per_class, c.rings_noise, c.split_seed());
  else if (c.dataset == "csv")
    ds = load_csv(c.dataset_path.string(), c.label_column);
  else if (c.dataset == "cifar10")
    ds = load_cifar10_binary(c.dataset_path);
  else
    throw ConfigError("unknown dataset '" + c.dataset + "'");
  return split(std::move(ds), c.train_size, c.validation_size, c.test_size, c.split_seed());
}

inline Problem load_problem(const RunConfiguration& c) {
  c.validate();
  Problem p{load_grammar(c.grammar.string()), load_structure(c.structure.string()), {}};
  const auto issues = validate(p.grammar, p.structure);
  if (!issues.empty()) {
    std::string msg = "grammar and structure disagree:";
    for (const auto& d : issues) msg += "\n  " + d.message;
    throw ConfigError(msg);
  }
  p.data = prepare(load_dataset(c));
  return p;
}

inline EvaluateFn make_evaluator(const Problem& p) {
  return [&p](const Individual& ind, std::uint64_t seed) {
    return evaluate(ind, p.grammar, p.structure, p.data, seed);
  };
}

struct RetrainedModel {
  FitnessRecord record;
  std::optional<TrainedModel> model;  // absent when the individual is invalid
};

/// Train `ind` from scratch under `budget` and keep the resulting network.
inline RetrainedModel retrain_model(const Individual& ind, const Budget& budget, const Problem& p, std::uint64_t seed) {
  Individual copy = ind;
  copy.train_budget = budget;
  TrainOptions options;
  options.keep_model = true;
  auto result = train_individual(copy, p.grammar, p.structure, p.data, seed, options);
  RetrainedModel out{result.record, std::nullopt};
  if (result.model) {
    TrainedModel m;
    m.phenotype = decode(copy, p.grammar, p.structure);
    m.input_shape = p.data.shape;
    m.num_classes = p.data.num_classes;
    m.normalizer = p.data.normalizer;
    m.label_values = p.data.label_values;
    m.network = std::move(*result.model);
    out.model = std::move(m);
  }
  return out;
}

}  // namespace fdenser
