#pragma once

// (1+lambda) evolutionary strategy with budget-aware parent selection,
// per-generation logs and checksummed checkpoints.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fdenser/budget.hpp"
#include "fdenser/genotype.hpp"
#include "fdenser/rng.hpp"
#include "fdenser/serialization.hpp"
#include "fdenser/structure.hpp"
#include "fdenser/util.hpp"
#include "fdenser/variation.hpp"

namespace fdenser {

struct EngineConfig {
  int lambda = 4;
  int generations = 150;
  MutationRates rates;
  Budget default_budget = Budget::seconds(600);
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;  // empty: no files are written
  int workers = 1;                   // concurrent offspring evaluations

  void check() const {
    if (lambda < 1) throw std::invalid_argument("lambda must be at least 1");
    if (generations < 1) throw std::invalid_argument("generations must be at least 1");
    if (workers < 1) throw std::invalid_argument("workers must be at least 1");
    rates.check();
  }
};

struct GenerationRecord {
  int generation = 0;  // 1-based
  std::uint64_t parent_id = 0;
  double best_fitness = kInvalidFitness;
  double best_test_accuracy = 0.0;
  Budget best_budget;
  int evaluations = 0;
  bool retrained = false;        // the budget-aware branch of parent selection ran
  bool retrain_won = false;      // ... and the retrained runner-up replaced the incumbent
  double incumbent_budget = 0;   // budget of the fittest individual when selection began
  double wall_seconds = 0.0;

  friend bool operator==(const GenerationRecord& a, const GenerationRecord& b) {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return a.generation == b.generation && a.parent_id == b.parent_id && a.best_fitness == b.best_fitness &&
           same(a.best_test_accuracy, b.best_test_accuracy) && a.best_budget == b.best_budget &&
           a.evaluations == b.evaluations && a.retrained == b.retrained && a.retrain_won == b.retrain_won &&
           a.incumbent_budget == b.incumbent_budget && a.wall_seconds == b.wall_seconds;
  }
};

struct RunState {
  int generation = 0;  // completed generations; equals history.size()
  Individual parent;
  std::vector<GenerationRecord> history;
  std::string rng_state;     // mutation stream
  std::uint64_t next_id = 0;
  std::string context;       // opaque payload carried through checkpoints (the CLI stores its configuration)

  friend bool operator==(const RunState&, const RunState&) = default;
};

/// Evaluate an individual under its own budget with the given seed.
using EvaluateFn = std::function<FitnessRecord(const Individual&, std::uint64_t seed)>;

inline std::size_t fittest_index(const std::vector<Individual>& individuals) {
  if (individuals.empty()) throw std::invalid_argument("fittest of an empty population");
  auto score = [](const Individual& i) { return i.fitness().value_or(kInvalidFitness); };
  std::size_t best = 0;
  for (std::size_t i = 1; i < individuals.size(); ++i) {
    const double a = score(individuals[i]), b = score(individuals[best]);
    if (a > b || (a == b && individuals[i].id < individuals[best].id)) best = i;
  }
  return best;
}

inline const Individual& fittest(const std::vector<Individual>& individuals) {
  return individuals[fittest_index(individuals)];
}

struct SelectionTrace {
  bool retrained = false;
  bool retrain_won = false;
  double incumbent_budget = 0.0;
};

/// Retrain callback: `candidate` arrives with its budget raised to the
/// incumbent's and returns the fresh evaluation.
using RetrainFn = std::function<FitnessRecord(const Individual& candidate)>;

/// Fittest individual; when it was trained for longer than the default, the
/// runner-up is retrained with the same budget and replaces it only if strictly fitter.
inline Individual select_parent(const std::vector<Individual>& population, const Budget& default_budget,
                                const RetrainFn& retrain, SelectionTrace* trace = nullptr) {
  const std::size_t p = fittest_index(population);
  const Individual& parent = population[p];
  SelectionTrace t;
  t.incumbent_budget = parent.train_budget.amount;
  Individual chosen = parent;
  if (parent.train_budget.amount > default_budget.amount && population.size() > 1) {
    std::vector<Individual> rest;
    for (std::size_t i = 0; i < population.size(); ++i)
      if (i != p) rest.push_back(population[i]);
    Individual tmp = fittest(rest);
    tmp.train_budget = parent.train_budget;
    tmp.evaluation = retrain(tmp);
    t.retrained = true;
    if (tmp.fitness().value_or(kInvalidFitness) > parent.fitness().value_or(kInvalidFitness)) {
      chosen = std::move(tmp);
      t.retrain_won = true;
    }
  }
  if (trace) *trace = t;
  return chosen;
}

// ---------------------------------------------------------------------------
// Checkpoints: "fdenser-checkpoint <version> <fnv1a64 hex of body>\n<json body>"

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "fdenser-checkpoint";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Json to_json(const GenerationRecord& r) {
  return {{"generation", r.generation},
          {"parent_id", r.parent_id},
          {"best_fitness", r.best_fitness},
          {"best_test_accuracy", nullable(r.best_test_accuracy)},
          {"best_budget", to_json(r.best_budget)},
          {"evaluations", r.evaluations},
          {"retrained", r.retrained},
          {"retrain_won", r.retrain_won},
          {"incumbent_budget", r.incumbent_budget},
          {"wall_seconds", r.wall_seconds}};
}

inline GenerationRecord generation_from_json(const Json& j) {
  GenerationRecord r;
  r.generation = j.at("generation").get<int>();
  r.parent_id = j.at("parent_id").get<std::uint64_t>();
  r.best_fitness = j.at("best_fitness").get<double>();
  r.best_test_accuracy = nullable_double(j.at("best_test_accuracy"));
  r.best_budget = budget_from_json(j.at("best_budget"));
  r.evaluations = j.at("evaluations").get<int>();
  r.retrained = j.at("retrained").get<bool>();
  r.retrain_won = j.at("retrain_won").get<bool>();
  r.incumbent_budget = j.at("incumbent_budget").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

inline std::string checkpoint_text(const RunState& s) {
  Json history = Json::array();
  for (const auto& r : s.history) history.push_back(to_json(r));
  const Json body = {{"generation", s.generation}, {"parent", to_json(s.parent)},   {"history", history},
                     {"rng_state", s.rng_state},   {"next_id", s.next_id},          {"context", s.context}};
  const std::string text = body.dump(1);
  char header[96];
  std::snprintf(header, sizeof header, "%s %d %016llx\n", kCheckpointMagic, kCheckpointVersion,
                static_cast<unsigned long long>(fnv1a64(text)));
  return header + text;
}

inline RunState parse_checkpoint(const std::string& data) {
  const auto nl = data.find('\n');
  if (nl == std::string::npos) throw CheckpointError("checkpoint is truncated (no header)");
  const auto fields = split_whitespace(data.substr(0, nl));
  if (fields.size() != 3 || fields[0] != kCheckpointMagic) throw CheckpointError("not a checkpoint file");
  if (fields[1] != std::to_string(kCheckpointVersion))
    throw CheckpointError("checkpoint version " + fields[1] + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::string body = data.substr(nl + 1);
  char expected[32];
  std::snprintf(expected, sizeof expected, "%016llx", static_cast<unsigned long long>(fnv1a64(body)));
  if (fields[2] != expected) throw CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)");
  try {
    const Json j = Json::parse(body);
    RunState s;
    s.generation = j.at("generation").get<int>();
    s.parent = individual_from_json(j.at("parent"));
    for (const auto& r : j.at("history")) s.history.push_back(generation_from_json(r));
    s.rng_state = j.at("rng_state").get<std::string>();
    s.next_id = j.at("next_id").get<std::uint64_t>();
    s.context = j.at("context").get<std::string>();
    return s;
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint body: ") + e.what());
  }
}

/// Write through a temporary file and rename, so readers never see a partial file.
inline void write_atomically(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void checkpoint(const RunState& s, const std::filesystem::path& path) { write_atomically(path, checkpoint_text(s)); }

inline RunState restore(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Logs

inline constexpr const char* kLogHeader =
    "generation,best_fitness,best_test_accuracy,best_budget_seconds,evaluations,wall_seconds";

/// One row per completed generation. Wall time is only meaningful (and only
/// written) under wall-clock budgets, so epoch-budget logs are reproducible byte for byte.
inline std::string log_csv(const std::vector<GenerationRecord>& history) {
  std::string out = std::string(kLogHeader) + "\n";
  for (const auto& r : history) {
    const bool wall = r.best_budget.mode == BudgetMode::wall_clock_seconds;
    out += std::to_string(r.generation) + "," + format_number(r.best_fitness) + "," +
           (std::isnan(r.best_test_accuracy) ? std::string("NA") : format_number(r.best_test_accuracy)) + "," +
           format_number(r.best_budget.amount) + "," + std::to_string(r.evaluations) + "," +
           (wall ? format_number(r.wall_seconds) : std::string("NA")) + "\n";
  }
  return out;
}

inline constexpr const char* kDetailHeader =
    "generation,parent_id,budget_mode,incumbent_budget,retrained,retrain_won,wall_seconds";

inline std::string detail_csv(const std::vector<GenerationRecord>& history) {
  std::string out = std::string(kDetailHeader) + "\n";
  for (const auto& r : history)
    out += std::to_string(r.generation) + "," + std::to_string(r.parent_id) + "," + to_string(r.best_budget.mode) +
           "," + format_number(r.incumbent_budget) + "," + (r.retrained ? "1" : "0") + "," +
           (r.retrain_won ? "1" : "0") + "," + format_number(r.wall_seconds) + "\n";
  return out;
}

struct LogRow {
  int generation = 0;
  double best_fitness = 0;
  double best_test_accuracy = 0;
  double best_budget = 0;
  int evaluations = 0;
  std::optional<double> wall_seconds;
};

inline std::vector<LogRow> parse_log_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kLogHeader) throw std::runtime_error("not a generation log");
  std::vector<LogRow> rows;
  auto num = [](const std::string& s) {
    if (s == "NA") return std::numeric_limits<double>::quiet_NaN();
    auto v = parse_number(s);
    if (!v) throw std::runtime_error("bad number in generation log: '" + s + "'");
    return *v;
  };
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != 6) throw std::runtime_error("generation log row has " + std::to_string(cells.size()) + " cells");
    LogRow r;
    r.generation = static_cast<int>(num(cells[0]));
    r.best_fitness = num(cells[1]);
    r.best_test_accuracy = num(cells[2]);
    r.best_budget = num(cells[3]);
    r.evaluations = static_cast<int>(num(cells[4]));
    if (cells[5] != "NA") r.wall_seconds = num(cells[5]);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Evolution

inline constexpr std::uint64_t kMutationStreamTag = 0x6d75746174696f6eULL;

inline std::uint64_t evaluation_seed(std::uint64_t run_seed, int generation, std::size_t index) {
  return derive_seed(run_seed, {static_cast<std::uint64_t>(generation), static_cast<std::uint64_t>(index)});
}

namespace detail {
inline FitnessRecord guarded(const EvaluateFn& evaluate, const Individual& ind, std::uint64_t seed) {
  try {
    return evaluate(ind, seed);
  } catch (const std::exception& e) {
    return FitnessRecord::invalid(e.what());
  }
}

/// Evaluate every individual; results land at their own index whatever the completion order.
inline void evaluate_all(std::vector<Individual>& inds, const std::vector<std::uint64_t>& seeds,
                         const EvaluateFn& evaluate, int workers) {
  const auto n = inds.size();
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
  auto run = [&](std::size_t i) {
    inds[i].eval_seed = seeds[i];
    inds[i].evaluation = guarded(evaluate, inds[i], seeds[i]);
  };
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) run(i);
    });
  for (auto& th : pool) th.join();
}
}  // namespace detail

class Engine {
 public:
  using Observer = std::function<void(const RunState&, const std::vector<Individual>& population)>;

  Engine(EngineConfig config, const Grammar& grammar, const OuterStructure& structure, EvaluateFn evaluate)
      : config_(std::move(config)), grammar_(grammar), structure_(structure), evaluate_(std::move(evaluate)) {
    config_.check();
  }

  /// Called after every completed generation with the evaluated population.
  void set_observer(Observer o) { observer_ = std::move(o); }

  /// Generation 0: a random parent, evaluated.
  RunState initialize(std::string context = {}) const {
    RunState s;
    s.context = std::move(context);
    Rng rng(derive_seed(config_.seed, {kMutationStreamTag}));
    std::vector<Individual> pop{random_individual(grammar_, structure_, config_.default_budget, rng)};
    pop[0].id = s.next_id++;
    detail::evaluate_all(pop, {evaluation_seed(config_.seed, 0, 0)}, evaluate_, 1);
    s.parent = std::move(pop[0]);
    s.rng_state = rng.state();
    return s;
  }

  /// One generation: lambda offspring, then parent selection over {parent} + offspring.
  void step(RunState& s) const {
    const auto start = std::chrono::steady_clock::now();
    const int gen = s.generation + 1;
    Rng rng;
    rng.set_state(s.rng_state);

    std::vector<Individual> offspring;
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < config_.lambda; ++i) {
      Individual child = mutate(s.parent, grammar_, structure_, config_.rates, config_.default_budget, rng);
      child.id = s.next_id++;
      offspring.push_back(std::move(child));
      seeds.push_back(evaluation_seed(config_.seed, gen, static_cast<std::size_t>(i)));
    }
    detail::evaluate_all(offspring, seeds, evaluate_, config_.workers);

    std::vector<Individual> population{s.parent};
    population.insert(population.end(), offspring.begin(), offspring.end());

    int evaluations = config_.lambda;
    const std::uint64_t retrain_seed = evaluation_seed(config_.seed, gen, static_cast<std::size_t>(config_.lambda));
    SelectionTrace trace;
    Individual next = select_parent(
        population, config_.default_budget,
        [&](const Individual& tmp) {
          ++evaluations;
          return detail::guarded(evaluate_, tmp, retrain_seed);
        },
        &trace);
    if (trace.retrain_won) next.eval_seed = retrain_seed;

    GenerationRecord rec;
    rec.generation = gen;
    rec.parent_id = next.id;
    rec.best_fitness = next.fitness().value_or(kInvalidFitness);
    rec.best_test_accuracy = next.evaluation ? next.evaluation->test_accuracy : std::numeric_limits<double>::quiet_NaN();
    rec.best_budget = next.train_budget;
    rec.evaluations = evaluations;
    rec.retrained = trace.retrained;
    rec.retrain_won = trace.retrain_won;
    rec.incumbent_budget = trace.incumbent_budget;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    s.parent = std::move(next);
    s.history.push_back(rec);
    s.generation = gen;
    s.rng_state = rng.state();
    if (observer_) observer_(s, population);
  }

  /// Run (or continue) until `generations` are complete, persisting after every generation.
  RunState run(std::optional<RunState> resume_from = std::nullopt, std::string context = {}) const {
    RunState s = resume_from ? std::move(*resume_from) : initialize(std::move(context));
    if (!resume_from) persist(s);
    while (s.generation < config_.generations) {
      step(s);
      persist(s);
    }
    return s;
  }

  void persist(const RunState& s) const {
    if (config_.output_dir.empty()) return;
    checkpoint(s, config_.output_dir / "checkpoint.ckpt");
    write_atomically(config_.output_dir / "log.csv", log_csv(s.history));
    write_atomically(config_.output_dir / "details.csv", detail_csv(s.history));
  }

  const EngineConfig& config() const { return config_; }

 private:
  EngineConfig config_;
  const Grammar& grammar_;
  const OuterStructure& structure_;
  EvaluateFn evaluate_;
  Observer observer_;
};

/// Convenience wrapper: a complete run from scratch.
inline RunState evolve(const EngineConfig& config, const Grammar& grammar, const OuterStructure& structure,
                       const EvaluateFn& evaluate) {
  return Engine(config, grammar, structure, evaluate).run();
}

}  // namespace fdenser
