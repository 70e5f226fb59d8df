#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace fdenser {

enum class BudgetMode { wall_clock_seconds, epochs };

inline std::string to_string(BudgetMode m) { return m == BudgetMode::epochs ? "epochs" : "seconds"; }

inline BudgetMode parse_budget_mode(const std::string& s) {
  if (s == "epochs" || s == "epoch") return BudgetMode::epochs;
  if (s == "seconds" || s == "wall_clock_seconds" || s == "wall-clock" || s == "time") return BudgetMode::wall_clock_seconds;
  throw std::invalid_argument("unknown budget mode '" + s + "'");
}

/// Maximum training allowance of one individual.
struct Budget {
  BudgetMode mode = BudgetMode::epochs;
  double amount = 1.0;

  Budget() = default;
  Budget(BudgetMode m, double a) : mode(m), amount(a) {
    if (!(a > 0.0)) throw std::invalid_argument("budget amount must be positive");
  }

  static Budget epochs(double n) { return {BudgetMode::epochs, n}; }
  static Budget seconds(double s) { return {BudgetMode::wall_clock_seconds, s}; }

  friend bool operator==(const Budget&, const Budget&) = default;
};

enum class StopReason { budget, early_stop, nan, invalid };

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::budget: return "budget";
    case StopReason::early_stop: return "early_stop";
    case StopReason::nan: return "nan";
    case StopReason::invalid: return "invalid";
  }
  return "?";
}

inline StopReason parse_stop_reason(const std::string& s) {
  if (s == "budget") return StopReason::budget;
  if (s == "early_stop") return StopReason::early_stop;
  if (s == "nan") return StopReason::nan;
  if (s == "invalid") return StopReason::invalid;
  throw std::invalid_argument("unknown stop reason '" + s + "'");
}

inline constexpr double kInvalidFitness = -1.0;

struct FitnessRecord {
  double fitness = kInvalidFitness;
  double validation_accuracy = 0.0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN when there is no test split
  int epochs_run = 0;
  double elapsed_seconds = 0.0;
  StopReason stopped_by = StopReason::invalid;
  std::string message;  // diagnostic for invalid individuals

  static FitnessRecord invalid(std::string why, StopReason reason = StopReason::invalid) {
    FitnessRecord r;
    r.stopped_by = reason;
    r.message = std::move(why);
    return r;
  }

  bool operator==(const FitnessRecord& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return fitness == o.fitness && validation_accuracy == o.validation_accuracy &&
           same(test_accuracy, o.test_accuracy) && epochs_run == o.epochs_run &&
           elapsed_seconds == o.elapsed_seconds && stopped_by == o.stopped_by && message == o.message;
  }
};

}  // namespace fdenser
