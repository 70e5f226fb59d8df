// fdenser: run, resume and analyse evolutionary searches from the command line.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdenser/config.hpp"
#include "fdenser/engine.hpp"
#include "fdenser/model_io.hpp"
#include "fdenser/run.hpp"
#include "fdenser/stats.hpp"

namespace fs = std::filesystem;
using namespace fdenser;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> generations;
  std::optional<int> lambda;
  std::optional<int> workers;
  std::optional<std::string> output;
  std::optional<double> budget;
  std::optional<std::string> budget_mode;

  void apply(RunConfiguration& c) const {
    if (seed) c.engine.seed = *seed;
    if (generations) c.engine.generations = *generations;
    if (lambda) c.engine.lambda = *lambda;
    if (workers) c.engine.workers = *workers;
    if (output) c.engine.output_dir = *output;
    if (budget) c.engine.default_budget.amount = *budget;
    if (budget_mode) c.engine.default_budget.mode = parse_budget_mode(*budget_mode);
  }
};

void progress(const RunState& s, const std::vector<Individual>& population) {
  const auto& r = s.history.back();
  int invalid = 0;
  for (const auto& i : population) invalid += i.fitness().value_or(kInvalidFitness) < 0;
  std::cout << "generation " << r.generation << ": best fitness " << format_number(r.best_fitness) << ", test "
            << format_number(r.best_test_accuracy) << ", budget " << format_number(r.best_budget.amount) << " "
            << to_string(r.best_budget.mode) << (r.retrained ? (r.retrain_won ? ", retrain won" : ", retrain lost") : "")
            << (invalid ? ", invalid " + std::to_string(invalid) : "") << "\n"
            << std::flush;
}

/// Best phenotype text, best individual JSON and the re-trained best model.
void export_best(const RunState& s, const Problem& p, const fs::path& dir) {
  const auto& best = s.parent;
  write_atomically(dir / "best.json", to_json(best).dump(1) + "\n");
  Phenotype ph;
  try {
    ph = decode(best, p.grammar, p.structure);
  } catch (const std::exception& e) {
    std::cerr << "best individual does not decode: " << e.what() << "\n";
    return;
  }
  write_atomically(dir / "best.phenotype", phenotype_to_text(ph) + "\n");
  // same seed and budget as the evaluation that produced the recorded fitness
  auto retrained = retrain_model(best, best.train_budget, p, best.eval_seed);
  if (!retrained.model) {
    std::cerr << "best individual could not be trained: " << retrained.record.message << "\n";
    return;
  }
  save_model(*retrained.model, dir / "best.model");
  std::cout << "best model: validation " << format_number(retrained.record.validation_accuracy) << ", test "
            << format_number(retrained.record.test_accuracy) << " -> " << (dir / "best.model").string() << "\n";
}

int run_engine(RunConfiguration config, std::optional<RunState> resume_from) {
  const fs::path dir = config.output_dir();
  config.engine.output_dir = dir;
  const Problem problem = load_problem(config);
  fs::create_directories(dir);
  write_atomically(dir / "config.conf", config.to_text());
  Engine engine(config.engine, problem.grammar, problem.structure, make_evaluator(problem));
  engine.set_observer(progress);
  if (resume_from) resume_from->context = config.to_text();
  const RunState s = engine.run(std::move(resume_from), config.to_text());
  export_best(s, problem, dir);
  return 0;
}

RunConfiguration config_of(const RunState& s) {
  if (s.context.empty()) throw ConfigError("checkpoint carries no run configuration");
  return parse_config(s.context);
}

std::vector<double> read_column(const std::string& path, const std::string& column) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::vector<double> out;
  std::optional<std::size_t> index;
  bool first = true;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (first) {
      first = false;
      if (!parse_number(trim(cells[0]))) {  // header row
        for (std::size_t i = 0; i < cells.size(); ++i)
          if (trim(cells[i]) == column) index = i;
        if (!index && cells.size() > 1) throw std::runtime_error(path + " has no column '" + column + "'");
        continue;
      }
    }
    const std::size_t k = index.value_or(0);
    if (k >= cells.size()) throw std::runtime_error(path + ": short row");
    auto v = parse_number(trim(cells[k]));
    if (!v) throw std::runtime_error(path + ": not a number: '" + cells[k] + "'");
    out.push_back(*v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grammar-based neuroevolution with evolvable training budgets"};
  app.require_subcommand(1);

  Overrides ov;
  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--seed", ov.seed, "run seed");
    cmd->add_option("--generations", ov.generations, "number of generations");
    cmd->add_option("--lambda", ov.lambda, "offspring per generation");
    cmd->add_option("--workers", ov.workers, "concurrent offspring evaluations");
    cmd->add_option("--output", ov.output, "output directory");
    cmd->add_option("--budget", ov.budget, "default training budget");
    cmd->add_option("--budget-mode", ov.budget_mode, "epochs or seconds");
  };

  std::string config_path;
  auto* evolve = app.add_subcommand("evolve", "run an evolutionary search");
  evolve->add_option("config", config_path, "run configuration file")->required();
  add_overrides(evolve);

  std::string checkpoint_path;
  std::optional<int> resume_generations, resume_workers;
  auto* resume = app.add_subcommand("resume", "continue a run from its checkpoint");
  resume->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  resume->add_option("--generations", resume_generations, "extend the run to this many generations");
  resume->add_option("--workers", resume_workers, "concurrent offspring evaluations");

  double retrain_budget = 0;
  std::optional<std::string> retrain_mode, retrain_model_path;
  std::optional<std::uint64_t> retrain_seed;
  auto* retrain = app.add_subcommand("retrain", "re-train the best individual of a run under a new budget");
  retrain->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  retrain->add_option("--budget", retrain_budget, "training budget")->required();
  retrain->add_option("--budget-mode", retrain_mode, "epochs or seconds (default: the run's mode)");
  retrain->add_option("--seed", retrain_seed, "training seed (default: the individual's evaluation seed)");
  retrain->add_option("--model", retrain_model_path, "also export the re-trained model here");

  std::string model_path, data_path, predictions_path, drop_column;
  auto* predict = app.add_subcommand("predict", "classify the rows of a CSV file with an exported model");
  predict->add_option("model", model_path, "model file")->required();
  predict->add_option("data", data_path, "CSV file with a header row")->required();
  predict->add_option("--drop-column", drop_column, "ignore this column (e.g. the label)");
  predict->add_option("--output", predictions_path, "write predictions here instead of stdout");

  std::vector<std::string> run_dirs;
  std::string stats_path;
  auto* export_stats = app.add_subcommand("export-stats", "summarise finished runs as CSV");
  export_stats->add_option("runs", run_dirs, "run directories")->required();
  export_stats->add_option("--output", stats_path, "write the summary here instead of stdout");

  std::string sample_a, sample_b, column = "best_test_accuracy";
  auto* compare = app.add_subcommand("compare", "Mann-Whitney U test between two samples");
  compare->add_option("a", sample_a, "CSV file (export-stats output or one number per line)")->required();
  compare->add_option("b", sample_b, "CSV file (export-stats output or one number per line)")->required();
  compare->add_option("--column", column, "column to compare when the files have a header");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*evolve) {
      auto config = load_config(config_path);
      ov.apply(config);
      return run_engine(std::move(config), std::nullopt);
    }

    if (*resume) {
      RunState s = restore(checkpoint_path);
      auto config = config_of(s);
      if (resume_generations) config.engine.generations = *resume_generations;
      if (resume_workers) config.engine.workers = *resume_workers;
      if (s.generation >= config.engine.generations) {
        std::cout << "run already complete (" << s.generation << " generations)\n";
        return 0;
      }
      return run_engine(std::move(config), std::move(s));
    }

    if (*retrain) {
      const RunState s = restore(checkpoint_path);
      const auto config = config_of(s);
      const Problem problem = load_problem(config);
      Budget budget{retrain_mode ? parse_budget_mode(*retrain_mode) : s.parent.train_budget.mode, retrain_budget};
      if (!(budget.amount > 0)) throw ConfigError("budget must be positive");
      auto result = retrain_model(s.parent, budget, problem, retrain_seed.value_or(s.parent.eval_seed));
      Json out = to_json(result.record);
      out["budget"] = to_json(budget);
      out["individual"] = s.parent.id;
      std::cout << out.dump(1) << "\n";
      if (retrain_model_path && result.model) save_model(*result.model, *retrain_model_path);
      return result.record.fitness < 0 ? 1 : 0;
    }

    if (*predict) {
      auto model = load_model(model_path);
      const auto table = read_numeric_csv(data_path);
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < table.header.size(); ++i)
        if (table.header[i] != drop_column) keep.push_back(i);
      if (static_cast<int>(keep.size()) != model.input_shape.size())
        throw std::runtime_error(data_path + " has " + std::to_string(keep.size()) + " feature columns, model expects " +
                                 std::to_string(model.input_shape.size()));
      Matrix<float> x(static_cast<Eigen::Index>(table.rows.size()), static_cast<Eigen::Index>(keep.size()));
      for (std::size_t r = 0; r < table.rows.size(); ++r)
        for (std::size_t c = 0; c < keep.size(); ++c)
          x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<float>(table.rows[r][keep[c]]);
      const auto classes = model.predict(x);
      std::ostringstream out;
      out << "row,prediction\n";
      for (std::size_t r = 0; r < classes.size(); ++r) out << r << "," << format_number(model.label_of(classes[r])) << "\n";
      if (predictions_path.empty())
        std::cout << out.str();
      else
        write_atomically(predictions_path, out.str());
      return 0;
    }

    if (*export_stats) {
      std::ostringstream out;
      out << "run,generations,best_fitness,best_test_accuracy,best_budget,budget_mode\n";
      for (const auto& d : run_dirs) {
        const fs::path ckpt = fs::is_directory(d) ? fs::path(d) / "checkpoint.ckpt" : fs::path(d);
        const RunState s = restore(ckpt);
        const auto& e = s.parent.evaluation;
        out << d << "," << s.generation << "," << format_number(s.parent.fitness().value_or(kInvalidFitness)) << ","
            << (e ? format_number(e->test_accuracy) : "NA") << "," << format_number(s.parent.train_budget.amount) << ","
            << to_string(s.parent.train_budget.mode) << "\n";
      }
      if (stats_path.empty())
        std::cout << out.str();
      else
        write_atomically(stats_path, out.str());
      return 0;
    }

    if (*compare) {
      const auto a = read_column(sample_a, column), b = read_column(sample_b, column);
      const auto r = mann_whitney_u(a, b);
      std::cout << "n_a=" << a.size() << " n_b=" << b.size() << "\n"
                << "U=" << format_number(r.u) << "\n"
                << "z=" << format_number(r.z) << "\n"
                << "p=" << format_number(r.p_value) << "\n"
                << "r=" << format_number(r.effect_size_r) << "\n"
                << "effect=" << to_string(r.effect) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
