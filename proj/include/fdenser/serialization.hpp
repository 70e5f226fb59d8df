#pragma once

// JSON form of individuals and fitness records, as embedded in checkpoints.
//
//   {"id": 7, "parent_id": 3, "eval_seed": 123,
//    "budget": {"mode": "epochs", "amount": 3},
//    "evaluation": {...} | null,
//    "modules": [[{"start": "features", "inputs": [-1],
//                  "genes": {"features": [{"choice": 0, "values": []}], ...}}, ...], ...]}
//
// Doubles are written with round-trip precision; a NaN test accuracy is null.

#include <cmath>
#include <limits>
#include <string>

#include "json.hpp"

#include "fdenser/budget.hpp"
#include "fdenser/genotype.hpp"

namespace fdenser {

using Json = nlohmann::json;

inline Json to_json(const Budget& b) { return {{"mode", to_string(b.mode)}, {"amount", b.amount}}; }

inline Budget budget_from_json(const Json& j) {
  Budget b;
  b.mode = parse_budget_mode(j.at("mode").get<std::string>());
  b.amount = j.at("amount").get<double>();
  return b;
}

inline Json nullable(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

inline double nullable_double(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline Json to_json(const FitnessRecord& r) {
  return {{"fitness", r.fitness},
          {"validation_accuracy", r.validation_accuracy},
          {"test_accuracy", nullable(r.test_accuracy)},
          {"epochs_run", r.epochs_run},
          {"elapsed_seconds", r.elapsed_seconds},
          {"stopped_by", to_string(r.stopped_by)},
          {"message", r.message}};
}

inline FitnessRecord record_from_json(const Json& j) {
  FitnessRecord r;
  r.fitness = j.at("fitness").get<double>();
  r.validation_accuracy = j.at("validation_accuracy").get<double>();
  r.test_accuracy = nullable_double(j.at("test_accuracy"));
  r.epochs_run = j.at("epochs_run").get<int>();
  r.elapsed_seconds = j.at("elapsed_seconds").get<double>();
  r.stopped_by = parse_stop_reason(j.at("stopped_by").get<std::string>());
  r.message = j.at("message").get<std::string>();
  return r;
}

inline Json to_json(const UnitGenotype& u) {
  Json genes = Json::object();
  for (const auto& [nt, list] : u.genes) {
    Json arr = Json::array();
    for (const auto& g : list) arr.push_back({{"choice", g.choice}, {"values", g.values}});
    genes[nt] = std::move(arr);
  }
  return {{"start", u.start_symbol}, {"inputs", u.inputs}, {"genes", std::move(genes)}};
}

inline UnitGenotype unit_from_json(const Json& j) {
  UnitGenotype u;
  u.start_symbol = j.at("start").get<std::string>();
  u.inputs = j.at("inputs").get<std::vector<int>>();
  for (const auto& [nt, arr] : j.at("genes").items()) {
    auto& list = u.genes[nt];
    for (const auto& g : arr)
      list.push_back({g.at("choice").get<std::size_t>(), g.at("values").get<std::vector<double>>()});
  }
  return u;
}

inline Json to_json(const Individual& ind) {
  Json modules = Json::array();
  for (const auto& m : ind.modules) {
    Json units = Json::array();
    for (const auto& u : m) units.push_back(to_json(u));
    modules.push_back(std::move(units));
  }
  return {{"id", ind.id},
          {"parent_id", ind.parent_id ? Json(*ind.parent_id) : Json(nullptr)},
          {"eval_seed", ind.eval_seed},
          {"budget", to_json(ind.train_budget)},
          {"evaluation", ind.evaluation ? to_json(*ind.evaluation) : Json(nullptr)},
          {"modules", std::move(modules)}};
}

inline Individual individual_from_json(const Json& j) {
  Individual ind;
  ind.id = j.at("id").get<std::uint64_t>();
  if (!j.at("parent_id").is_null()) ind.parent_id = j.at("parent_id").get<std::uint64_t>();
  ind.eval_seed = j.at("eval_seed").get<std::uint64_t>();
  ind.train_budget = budget_from_json(j.at("budget"));
  if (!j.at("evaluation").is_null()) ind.evaluation = record_from_json(j.at("evaluation"));
  for (const auto& m : j.at("modules")) {
    auto& units = ind.modules.emplace_back();
    for (const auto& u : m) units.push_back(unit_from_json(u));
  }
  return ind;
}

}  // namespace fdenser
