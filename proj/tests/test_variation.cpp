#include <gtest/gtest.h>

#include "fdenser/serialization.hpp"
#include "fdenser/variation.hpp"
#include "support.hpp"

using namespace fdenser;

namespace {

const Grammar& fc() {
  static const Grammar g = support::shipped_grammar("fc");
  return g;
}

const OuterStructure& fc_structure() {
  static const OuterStructure s = support::shipped_structure("fc");
  return s;
}

MutationRates only(double MutationRates::*field) {
  MutationRates r;
  r.add_layer = r.remove_layer = r.dsge = r.add_input = r.remove_input = r.train_time = 0.0;
  if (field) r.*field = 1.0;
  return r;
}

// chain of n dense layers in the first module, each reading its predecessor
Individual chain(std::size_t n, Rng& rng) {
  const auto st = parse_structure("layers fully-connected 1 10\nlayers softmax 1 1\nmacro learning\n");
  auto ind = random_individual(fc(), st, Budget::epochs(1), rng);
  ind.modules[0].clear();
  for (std::size_t i = 0; i < n; ++i) ind.modules[0].push_back(random_unit(fc(), "fully-connected", rng));
  return ind;
}

}  // namespace

TEST(Mutate, LoneTrainTimeAddsDefaultBudget) {
  Rng rng(1);
  auto parent = random_individual(fc(), fc_structure(), Budget::seconds(600), rng);
  MutationReport report;
  const auto child = mutate(parent, fc(), fc_structure(), only(&MutationRates::train_time), Budget::seconds(600), rng, &report);
  EXPECT_EQ(child.train_budget, Budget::seconds(1200));
  EXPECT_TRUE(report.train_time);
  EXPECT_FALSE(report.structural);
  EXPECT_EQ(child.modules, parent.modules);
}

TEST(Mutate, StructuralChangeResetsBudget) {
  Rng rng(2);
  auto parent = random_individual(fc(), fc_structure(), Budget::seconds(600), rng);
  parent.modules[0].resize(1);
  parent.train_budget = Budget::seconds(1800);
  auto rates = only(&MutationRates::add_layer);
  rates.train_time = 1.0;  // ignored when a structural operator fires
  MutationReport report;
  const auto child = mutate(parent, fc(), fc_structure(), rates, Budget::seconds(600), rng, &report);
  EXPECT_EQ(child.train_budget, Budget::seconds(600));
  EXPECT_TRUE(report.structural);
  EXPECT_EQ(child.modules[0].size(), 2u);
}

TEST(Mutate, MultiplicativeGrowthOption) {
  Rng rng(3);
  auto parent = random_individual(fc(), fc_structure(), Budget::seconds(600), rng);
  parent.train_budget = Budget::seconds(900);
  auto rates = only(&MutationRates::train_time);
  rates.growth = BudgetGrowth::multiplicative;
  rates.growth_factor = 2.0;
  EXPECT_EQ(mutate(parent, fc(), fc_structure(), rates, Budget::seconds(600), rng).train_budget, Budget::seconds(1800));
}

TEST(Mutate, NoApplicableOperator) {
  Rng rng(4);
  auto parent = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
  parent.modules[0].resize(1);
  EXPECT_THROW(mutate(parent, fc(), fc_structure(), only(nullptr), Budget::epochs(1), rng), NoApplicableOperator);
  // remove_layer alone can never apply at min_units
  EXPECT_THROW(mutate(parent, fc(), fc_structure(), only(&MutationRates::remove_layer), Budget::epochs(1), rng),
               NoApplicableOperator);
  try {
    mutate(parent, fc(), fc_structure(), only(nullptr), Budget::epochs(1), rng);
  } catch (const std::exception& e) {
    EXPECT_STREQ(e.what(), "no applicable operator");
  }
}

TEST(Mutate, RetriesUntilSomethingFires) {
  Rng rng(5);
  auto parent = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
  parent.modules[0].resize(1);
  auto rates = only(&MutationRates::remove_layer);
  rates.train_time = 0.05;
  MutationReport report;
  const auto child = mutate(parent, fc(), fc_structure(), rates, Budget::epochs(1), rng, &report);
  EXPECT_TRUE(report.train_time);
  EXPECT_EQ(child.train_budget, Budget::epochs(2));
}

TEST(Mutate, OffspringMetadata) {
  Rng rng(6);
  auto parent = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
  parent.id = 17;
  parent.eval_seed = 99;
  parent.evaluation = FitnessRecord{};
  parent.evaluation->fitness = 0.5;
  const auto child = mutate(parent, fc(), fc_structure(), MutationRates{}, Budget::epochs(1), rng);
  EXPECT_EQ(child.parent_id, std::optional<std::uint64_t>(17));
  EXPECT_FALSE(child.evaluation);
  EXPECT_EQ(child.eval_seed, 0u);
}

TEST(AddLayer, NoOpAtMaxUnits) {
  Rng rng(7);
  auto ind = chain(10, rng);
  const auto before = ind;
  EXPECT_FALSE(add_layer(ind, 0, fc(), fc_structure(), 0.5, rng));
  EXPECT_EQ(ind, before);
}

TEST(AddLayer, DuplicateCopiesAttributes) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto ind = chain(1, rng);
    const auto source = decode(ind, fc(), fc_structure()).layers[0].attributes;
    ASSERT_TRUE(add_layer(ind, 0, fc(), fc_structure(), 1.0, rng));
    const auto ph = decode(ind, fc(), fc_structure());
    EXPECT_EQ(ph.layers[0].attributes, source);
    EXPECT_EQ(ph.layers[1].attributes, source);
  }
}

TEST(AddLayer, RandomPathUsesModuleStartSymbols) {
  Rng rng(9);
  std::set<std::string> seen;
  for (int trial = 0; trial < 100; ++trial) {
    auto ind = chain(1, rng);
    ASSERT_TRUE(add_layer(ind, 0, fc(), fc_structure(), 0.0, rng));
    for (const auto& u : ind.modules[0]) seen.insert(u.start_symbol);
  }
  EXPECT_EQ(seen, (std::set<std::string>{"fully-connected", "dropout"}));
}

TEST(AddLayer, NewLayerIsReadByItsSuccessor) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    auto ind = chain(3, rng);
    const auto before = decode(ind, fc(), fc_structure());
    ASSERT_TRUE(add_layer(ind, 0, fc(), fc_structure(), 0.0, rng));
    const auto after = decode(ind, fc(), fc_structure());
    // in a chain every layer still reads exactly its predecessor
    for (std::size_t i = 0; i < after.layers.size(); ++i)
      EXPECT_EQ(after.layers[i].inputs, (std::vector<int>{static_cast<int>(i) - 1}));
    EXPECT_EQ(after.layers.size(), before.layers.size() + 1);
  }
}

TEST(AddLayer, SkipReferencesKeepTheirTarget) {
  Rng rng(11);
  auto ind = chain(3, rng);
  ind.modules[1][0].inputs = {-1, -3};  // softmax (layer 3) reads layers 2 and 0
  Rng pick(0);
  // insert at every position and check the skip still lands on the old layer 0
  for (int trial = 0; trial < 100; ++trial) {
    auto copy = ind;
    const auto old = decode(copy, fc(), fc_structure());
    ASSERT_TRUE(add_layer(copy, 0, fc(), fc_structure(), 0.0, pick));
    const auto ph = decode(copy, fc(), fc_structure());
    const auto& soft = ph.layers.back().inputs;
    // find where the original layer 0 now sits
    int origin = -2;
    for (std::size_t i = 0; i < copy.modules[0].size(); ++i)
      if (copy.modules[0][i] == ind.modules[0][0] && ph.layers[i].attributes == old.layers[0].attributes) {
        origin = static_cast<int>(i);
        break;
      }
    ASSERT_GE(origin, 0);
    EXPECT_NE(std::find(soft.begin(), soft.end(), origin), soft.end());
  }
}

TEST(RemoveLayer, BoundsAndRemap) {
  Rng rng(12);
  auto one = chain(1, rng);
  EXPECT_FALSE(remove_layer(one, 0, fc_structure(), rng));
  auto five = chain(5, rng);
  ASSERT_TRUE(remove_layer(five, 0, fc_structure(), rng));
  EXPECT_EQ(five.modules[0].size(), 4u);
  EXPECT_EQ(support::genotype_violation(five, fc(), fc_structure()), "");
}

TEST(RemoveLayer, ExhaustiveSkipCases) {
  // every removal position against every skip target in a 4-layer body
  Rng rng(13);
  const auto base = chain(4, rng);
  for (int target = 0; target < 4; ++target) {
    for (int seed = 0; seed < 40; ++seed) {
      auto ind = base;
      ind.modules[1][0].inputs = {-1, target - 4};
      Rng r(static_cast<std::uint64_t>(seed));
      ASSERT_TRUE(remove_layer(ind, 0, fc_structure(), r));
      ASSERT_EQ(support::genotype_violation(ind, fc(), fc_structure()), "");
      const auto ph = decode(ind, fc(), fc_structure());
      for (std::size_t i = 0; i < ph.layers.size(); ++i)
        for (int in : ph.layers[i].inputs) EXPECT_LT(in, static_cast<int>(i));
    }
  }
  // the removed skip target falls back to the previous layer
  auto ind = base;
  ind.modules[0][1].inputs = {-1};
  ind.modules[1][0].inputs = {-4};  // softmax (layer 4) reads only layer 0
  Rng r(0);
  for (int tries = 0; tries < 100; ++tries) {
    auto copy = ind;
    const auto before = copy.modules[0];
    remove_layer(copy, 0, fc_structure(), r);
    if (copy.modules[0].front() != before.front()) {
      EXPECT_EQ(copy.modules[1][0].inputs, (std::vector<int>{-1}));
      return;
    }
  }
  FAIL() << "layer 0 was never removed";
}

TEST(Dsge, SkipsSingleAlternativeGenes) {
  UnitGenotype soft{"softmax", {{"softmax", {{0, {}}}}}, {-1}};
  Individual ind;
  ind.modules = {{soft}};
  Rng rng(14);
  EXPECT_FALSE(dsge_mutate(ind, fc(), rng));
}

TEST(Dsge, DropoutRateStaysInBounds) {
  Rng rng(15);
  for (int i = 0; i < 500; ++i) {
    Individual ind;
    ind.modules = {{random_unit(fc(), "dropout", rng)}};
    ASSERT_TRUE(dsge_mutate(ind, fc(), rng));
    const double v = ind.modules[0][0].genes.at("dropout")[0].values.at(0);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 0.7);
  }
}

TEST(Dsge, ActivationMovesAwayFromRelu) {
  Rng rng(16);
  std::set<std::size_t> seen;
  for (int i = 0; i < 200; ++i) {
    UnitGenotype act{"activation", {{"activation", {{1, {}}}}}, {-1}};
    Individual ind;
    ind.modules = {{act}};
    ASSERT_TRUE(dsge_mutate(ind, fc(), rng));
    seen.insert(ind.modules[0][0].genes.at("activation")[0].choice);
  }
  EXPECT_EQ(seen, (std::set<std::size_t>{0, 2}));
}

TEST(Connectivity, SingleLayerIsNoOp) {
  Rng rng(17);
  const auto st = parse_structure("layers fully-connected 1 1\n");
  Individual ind;
  ind.modules = {{random_unit(fc(), "fully-connected", rng)}};
  EXPECT_FALSE(add_input(ind, st, rng));
  EXPECT_FALSE(remove_input(ind, st, rng));
}

TEST(Connectivity, AddOnFourthLayerOfChain) {
  const auto st = parse_structure("layers fully-connected 4 4\n");
  Rng rng(18);
  for (int i = 0; i < 200; ++i) {
    Individual ind;
    ind.modules.resize(1);
    for (int k = 0; k < 4; ++k) ind.modules[0].push_back(random_unit(fc(), "fully-connected", rng));
    ind.modules[0][0].inputs = {-1};
    ind.modules[0][1].inputs = {-1};
    ind.modules[0][2].inputs = {-1, -2};
    ind.modules[0][3].inputs = {-1, -2};
    ASSERT_TRUE(add_input(ind, st, rng));  // only layer 3 has a free earlier offset
    const auto& in = ind.modules[0][3].inputs;
    EXPECT_EQ(in, (std::vector<int>{-1, -2, -3}));
  }
}

TEST(Connectivity, RemoveLeavesOne) {
  const auto st = parse_structure("layers fully-connected 4 4\n");
  Rng rng(19);
  Individual ind;
  ind.modules.resize(1);
  for (int k = 0; k < 4; ++k) ind.modules[0].push_back(random_unit(fc(), "fully-connected", rng));
  ind.modules[0][3].inputs = {-1, -3};
  ASSERT_TRUE(remove_input(ind, st, rng));
  EXPECT_EQ(ind.modules[0][3].inputs.size(), 1u);
  EXPECT_FALSE(remove_input(ind, st, rng));
}

TEST(Mutate, ParentIsNeverAliased) {
  Rng rng(20);
  MutationRates rates;
  rates.add_input = rates.remove_input = 0.3;
  for (int i = 0; i < 200; ++i) {
    const auto parent = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
    const auto bytes = to_json(parent).dump();
    auto child = mutate(parent, fc(), fc_structure(), rates, Budget::epochs(1), rng);
    for (auto& m : child.modules)
      for (auto& u : m) u.genes.clear(), u.inputs.push_back(-1);
    EXPECT_EQ(to_json(parent).dump(), bytes);
  }
}

TEST(Mutate, ClosureOverRepeatedMutation) {
  for (const char* name : {"fc", "cnn"}) {
    const auto g = support::shipped_grammar(name);
    const auto st = support::shipped_structure(name);
    MutationRates rates;
    rates.add_input = rates.remove_input = 0.2;
    Rng rng(21);
    auto ind = random_individual(g, st, Budget::epochs(1), rng);
    for (int i = 0; i < 1000; ++i) {
      MutationReport report;
      auto child = mutate(ind, g, st, rates, Budget::epochs(1), rng, &report);
      ASSERT_EQ(support::genotype_violation(child, g, st), "") << name << " step " << i;
      if (report.structural)
        EXPECT_EQ(child.train_budget, Budget::epochs(1));
      else
        EXPECT_EQ(child.train_budget.amount, ind.train_budget.amount + 1);
      ind = std::move(child);
    }
  }
}
