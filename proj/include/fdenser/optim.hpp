#pragma once

// The three evolvable learning algorithms and their grammar-exposed
// hyperparameters. Every update uses lr_t = lr / (1 + decay * t), where t is
// the number of updates already applied.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <type_traits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdenser/genotype.hpp"
#include "fdenser/grammar.hpp"
#include "fdenser/network.hpp"

namespace fdenser {

enum class Algorithm { gradient_descent, rmsprop, adam };

inline constexpr double kOptimizerEpsilon = 1e-8;

struct LearningStrategy {
  Algorithm algorithm = Algorithm::gradient_descent;
  double lr = 0.01;
  double momentum = 0.0;
  bool nesterov = false;
  double rho = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double decay = 0.0;
  int batch_size = 32;
  std::optional<int> early_stop_patience;  // absent: the grammar does not evolve early stopping

  friend bool operator==(const LearningStrategy&, const LearningStrategy&) = default;
};

inline double effective_lr(const LearningStrategy& s, std::int64_t t) {
  return s.lr / (1.0 + s.decay * static_cast<double>(t));
}

template <class S>
struct OptimizerState {
  std::int64_t step_count = 0;
  std::vector<Matrix<S>> first;   // velocity (gd), square average (rmsprop), first moment (adam)
  std::vector<Matrix<S>> second;  // second moment (adam)

  friend bool operator==(const OptimizerState& a, const OptimizerState& b) {
    return a.step_count == b.step_count && a.first == b.first && a.second == b.second;
  }
};

/// One update of every parameter tensor in place.
template <class S>
void step(const LearningStrategy& s, OptimizerState<S>& state, std::type_identity_t<std::span<Matrix<S>* const>> params,
          std::type_identity_t<std::span<Matrix<S>* const>> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols())
      throw std::invalid_argument("optimizer: parameter/gradient shape mismatch");

  auto init_slots = [&](std::vector<Matrix<S>>& slots) {
    if (slots.size() == params.size()) return;
    slots.clear();
    for (auto* p : params) slots.push_back(Matrix<S>::Zero(p->rows(), p->cols()));
  };
  init_slots(state.first);
  if (s.algorithm == Algorithm::adam) init_slots(state.second);

  const double t = static_cast<double>(state.step_count);
  const S lr_t = static_cast<S>(effective_lr(s, state.step_count));
  const S eps = static_cast<S>(kOptimizerEpsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = *params[i];
    const auto& g = *grads[i];
    switch (s.algorithm) {
      case Algorithm::gradient_descent: {
        auto& v = state.first[i];
        const S mu = static_cast<S>(s.momentum);
        v = mu * v - lr_t * g;
        if (s.nesterov)
          theta += mu * v - lr_t * g;
        else
          theta += v;
        break;
      }
      case Algorithm::rmsprop: {
        auto& a = state.first[i];
        const S rho = static_cast<S>(s.rho);
        a = rho * a + (S(1) - rho) * g.cwiseProduct(g);
        theta.array() -= lr_t * g.array() / (a.array().sqrt() + eps);
        break;
      }
      case Algorithm::adam: {
        auto& m = state.first[i];
        auto& v = state.second[i];
        const S b1 = static_cast<S>(s.beta1), b2 = static_cast<S>(s.beta2);
        m = b1 * m + (S(1) - b1) * g;
        v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
        const S c1 = static_cast<S>(1.0 - std::pow(s.beta1, t + 1.0));
        const S c2 = static_cast<S>(1.0 - std::pow(s.beta2, t + 1.0));
        theta.array() -= lr_t * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        break;
      }
    }
  }
  ++state.step_count;
}

class StrategyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Bounds {
  double min;
  double max;
};

/// Ranges of the learning hyperparameters in the shipped grammars.
inline std::map<std::string, Bounds> default_learning_bounds() {
  return {{"lr", {0.0001, 0.1}},       {"momentum", {0.68, 0.99}}, {"decay", {0.000001, 0.001}},
          {"beta1", {0.5, 1.0}},       {"beta2", {0.5, 1.0}},      {"rho", {0.5, 1.0}},
          {"batch_size", {50, 500}},   {"early_stop", {5, 20}}};
}

/// Learning hyperparameter ranges as declared by `grammar`, falling back to the defaults.
inline std::map<std::string, Bounds> learning_bounds(const Grammar& grammar) {
  auto out = default_learning_bounds();
  for (const auto& [name, spec] : grammar.parameter_specs())
    if (out.count(name)) out[name] = {spec.min, spec.max};
  return out;
}

inline LearningStrategy strategy_from_descriptor(const LearningDescriptor& desc,
                                                 const std::map<std::string, Bounds>& bounds = default_learning_bounds()) {
  const auto& a = desc.attributes;
  const auto* algo = a.get("learning");
  if (!algo) throw StrategyError("learning descriptor has no 'learning' attribute");
  LearningStrategy s;
  if (*algo == "gradient-descent")
    s.algorithm = Algorithm::gradient_descent;
  else if (*algo == "rmsprop")
    s.algorithm = Algorithm::rmsprop;
  else if (*algo == "adam")
    s.algorithm = Algorithm::adam;
  else
    throw StrategyError("unknown learning algorithm '" + *algo + "'");

  auto number = [&](const std::string& key) -> std::optional<double> {
    const auto* text = a.get(key);
    if (!text) return std::nullopt;
    auto v = parse_number(*text);
    if (!v) throw StrategyError("'" + key + "' is not numeric: '" + *text + "'");
    if (auto b = bounds.find(key); b != bounds.end() && (*v < b->second.min || *v > b->second.max))
      throw StrategyError("'" + key + "' = " + *text + " outside [" + format_number(b->second.min) + ", " +
                          format_number(b->second.max) + "]");
    return v;
  };
  auto required = [&](const std::string& key) {
    auto v = number(key);
    if (!v) throw StrategyError("learning descriptor is missing '" + key + "'");
    return *v;
  };

  for (const auto& [key, _] : a.entries()) {
    static const std::set<std::string> known = {"learning", "lr",   "momentum", "nesterov",  "rho",
                                                "beta1",    "beta2", "decay",   "batch_size", "early_stop"};
    if (!known.count(key)) throw StrategyError("unknown learning attribute '" + key + "'");
  }

  s.lr = required("lr");
  s.decay = number("decay").value_or(0.0);
  s.batch_size = static_cast<int>(required("batch_size"));
  if (s.batch_size < 1) throw StrategyError("batch_size must be positive");
  if (auto p = number("early_stop")) s.early_stop_patience = static_cast<int>(*p);
  switch (s.algorithm) {
    case Algorithm::gradient_descent:
      s.momentum = number("momentum").value_or(0.0);
      if (const auto* n = a.get("nesterov")) {
        if (*n != "True" && *n != "False") throw StrategyError("nesterov must be True or False");
        s.nesterov = *n == "True";
      }
      break;
    case Algorithm::rmsprop:
      s.rho = required("rho");
      break;
    case Algorithm::adam:
      s.beta1 = required("beta1");
      s.beta2 = required("beta2");
      break;
  }
  return s;
}

}  // namespace fdenser
