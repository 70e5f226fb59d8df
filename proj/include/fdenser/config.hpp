#pragma once

// Run configuration: one `key = value` per line, `#` starts a comment.
// Relative paths are resolved against the directory of the file.
//
//   grammar = ../grammars/fc.grammar      structure = ../grammars/fc.structure
//   dataset = rings | csv | cifar10       dataset_path = <csv file or cifar directory>
//   label_column = label                  rings_per_class = 1500    rings_noise = 0.1
//   train_size / validation_size / test_size
//   lambda, generations, seed, workers
//   budget_mode = epochs | seconds        budget = 3
//   rate.add_layer, rate.remove_layer, rate.dsge, rate.add_input, rate.remove_input,
//   rate.train_time, rate.duplicate
//   budget_growth = additive | multiplicative   growth_factor = 2
//   output_dir = runs/fc-rings            (relative to $FDENSER_OUTPUT_ROOT if set, else the working directory)

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "fdenser/budget.hpp"
#include "fdenser/engine.hpp"
#include "fdenser/util.hpp"
#include "fdenser/variation.hpp"

namespace fdenser {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputRootVariable = "FDENSER_OUTPUT_ROOT";

struct RunConfiguration {
  std::filesystem::path grammar;
  std::filesystem::path structure;
  std::string dataset = "rings";
  std::filesystem::path dataset_path;
  std::string label_column = "label";
  std::size_t rings_per_class = 1500;
  double rings_noise = 0.25;
  std::size_t train_size = 2000;
  std::size_t validation_size = 500;
  std::size_t test_size = 500;
  std::optional<std::uint64_t> data_seed;  // defaults to the run seed
  EngineConfig engine;

  RunConfiguration() {
    engine.generations = 150;
    engine.default_budget = Budget::seconds(600);
  }

  std::uint64_t split_seed() const { return data_seed.value_or(engine.seed); }

  /// Apply one setting; `base` resolves relative paths.
  void set(const std::string& key, const std::string& value, const std::filesystem::path& base = {}) {
    auto path = [&] {
      std::filesystem::path p(value);
      return p.is_relative() && !base.empty() ? std::filesystem::weakly_canonical(base / p) : p;
    };
    auto number = [&] {
      auto v = parse_number(value);
      if (!v) throw ConfigError("'" + key + "' expects a number, got '" + value + "'");
      return *v;
    };
    auto integer = [&]() -> std::int64_t {
      auto v = parse_integer(value);
      if (!v) throw ConfigError("'" + key + "' expects an integer, got '" + value + "'");
      return *v;
    };
    auto count = [&]() -> std::size_t {
      const auto v = integer();
      if (v < 0) throw ConfigError("'" + key + "' must not be negative");
      return static_cast<std::size_t>(v);
    };
    auto& r = engine.rates;
    if (key == "grammar") grammar = path();
    else if (key == "structure") structure = path();
    else if (key == "dataset") dataset = value;
    else if (key == "dataset_path") dataset_path = path();
    else if (key == "label_column") label_column = value;
    else if (key == "rings_per_class") rings_per_class = count();
    else if (key == "rings_noise") rings_noise = number();
    else if (key == "train_size") train_size = count();
    else if (key == "validation_size") validation_size = count();
    else if (key == "test_size") test_size = count();
    else if (key == "data_seed") data_seed = static_cast<std::uint64_t>(integer());
    else if (key == "lambda") engine.lambda = static_cast<int>(integer());
    else if (key == "generations") engine.generations = static_cast<int>(integer());
    else if (key == "seed") engine.seed = static_cast<std::uint64_t>(integer());
    else if (key == "workers") engine.workers = static_cast<int>(integer());
    else if (key == "budget_mode") engine.default_budget.mode = parse_budget_mode(value);
    else if (key == "budget") engine.default_budget.amount = number();
    else if (key == "rate.add_layer") r.add_layer = number();
    else if (key == "rate.remove_layer") r.remove_layer = number();
    else if (key == "rate.dsge") r.dsge = number();
    else if (key == "rate.add_input") r.add_input = number();
    else if (key == "rate.remove_input") r.remove_input = number();
    else if (key == "rate.train_time") r.train_time = number();
    else if (key == "rate.duplicate") r.duplicate_fraction = number();
    else if (key == "budget_growth") {
      if (value == "additive") r.growth = BudgetGrowth::additive;
      else if (value == "multiplicative") r.growth = BudgetGrowth::multiplicative;
      else throw ConfigError("budget_growth must be additive or multiplicative");
    } else if (key == "growth_factor") r.growth_factor = number();
    else if (key == "output_dir") engine.output_dir = value;
    else throw ConfigError("unknown configuration key '" + key + "'");
  }

  /// Semantic checks; `check_files` also requires the referenced files to exist.
  void validate(bool check_files = true) const {
    try {
      engine.check();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(engine.default_budget.amount > 0)) throw ConfigError("budget must be positive");
    if (dataset != "rings" && dataset != "csv" && dataset != "cifar10")
      throw ConfigError("dataset must be rings, csv or cifar10 (got '" + dataset + "')");
    if (grammar.empty()) throw ConfigError("no grammar configured");
    if (structure.empty()) throw ConfigError("no structure configured");
    if (!check_files) return;
    for (const auto& p : {grammar, structure})
      if (!std::filesystem::exists(p)) throw ConfigError("file not found: " + p.string());
    if (dataset != "rings" && !std::filesystem::exists(dataset_path))
      throw ConfigError("dataset not found: " + dataset_path.string());
  }

  /// Output directory after applying the output-root environment override.
  std::filesystem::path output_dir() const {
    const auto& dir = engine.output_dir;
    if (const char* root = std::getenv(kOutputRootVariable); root && *root && dir.is_relative())
      return std::filesystem::path(root) / dir;
    return dir.empty() ? std::filesystem::path("fdenser-run") : dir;
  }

  /// Canonical text with absolute paths; parse_config(to_text()) reproduces the configuration.
  std::string to_text() const {
    const auto& r = engine.rates;
    std::ostringstream o;
    o << "grammar = " << grammar.string() << "\n"
      << "structure = " << structure.string() << "\n"
      << "dataset = " << dataset << "\n";
    if (!dataset_path.empty()) o << "dataset_path = " << dataset_path.string() << "\n";
    o << "label_column = " << label_column << "\n"
      << "rings_per_class = " << rings_per_class << "\n"
      << "rings_noise = " << format_number(rings_noise) << "\n"
      << "train_size = " << train_size << "\n"
      << "validation_size = " << validation_size << "\n"
      << "test_size = " << test_size << "\n";
    if (data_seed) o << "data_seed = " << *data_seed << "\n";
    o << "lambda = " << engine.lambda << "\n"
      << "generations = " << engine.generations << "\n"
      << "seed = " << engine.seed << "\n"
      << "workers = " << engine.workers << "\n"
      << "budget_mode = " << to_string(engine.default_budget.mode) << "\n"
      << "budget = " << format_number(engine.default_budget.amount) << "\n"
      << "rate.add_layer = " << format_number(r.add_layer) << "\n"
      << "rate.remove_layer = " << format_number(r.remove_layer) << "\n"
      << "rate.dsge = " << format_number(r.dsge) << "\n"
      << "rate.add_input = " << format_number(r.add_input) << "\n"
      << "rate.remove_input = " << format_number(r.remove_input) << "\n"
      << "rate.train_time = " << format_number(r.train_time) << "\n"
      << "rate.duplicate = " << format_number(r.duplicate_fraction) << "\n"
      << "budget_growth = " << (r.growth == BudgetGrowth::additive ? "additive" : "multiplicative") << "\n"
      << "growth_factor = " << format_number(r.growth_factor) << "\n";
    if (!engine.output_dir.empty()) o << "output_dir = " << engine.output_dir.string() << "\n";
    return o.str();
  }
};

inline RunConfiguration parse_config(std::string_view text, const std::filesystem::path& base = {}) {
  RunConfiguration c;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(std::string_view(line).substr(0, eq)));
    const std::string value(trim(std::string_view(line).substr(eq + 1)));
    try {
      c.set(key, value, base);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

inline RunConfiguration load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("configuration not found: " + path.string());
  return parse_config(read_file(path.string()), std::filesystem::absolute(path).parent_path());
}

}  // namespace fdenser
