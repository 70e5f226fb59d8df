#include <gtest/gtest.h>

#include "fdenser/genotype.hpp"
#include "fdenser/serialization.hpp"
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
}  // namespace

TEST(RandomUnit, SingleAlternativeRuleHasOneBareGene) {
  Rng rng(1);
  const auto u = random_unit(fc(), "softmax", rng);
  ASSERT_EQ(u.genes.size(), 1u);
  ASSERT_EQ(u.genes.at("softmax").size(), 1u);
  EXPECT_EQ(u.genes.at("softmax")[0].choice, 0u);
  EXPECT_TRUE(u.genes.at("softmax")[0].values.empty());
}

TEST(RandomUnit, ActivationChoiceAndDropoutRate) {
  Rng rng(2);
  std::set<std::size_t> seen;
  for (int i = 0; i < 200; ++i) {
    const auto act = random_unit(fc(), "activation", rng);
    seen.insert(act.genes.at("activation")[0].choice);
    const auto drop = random_unit(fc(), "dropout", rng);
    const auto& v = drop.genes.at("dropout")[0].values;
    ASSERT_EQ(v.size(), 1u);
    EXPECT_GE(v[0], 0.0);
    EXPECT_LE(v[0], 0.7);
  }
  EXPECT_EQ(seen, (std::set<std::size_t>{0, 1, 2}));
}

TEST(RandomUnit, UnknownStartSymbolThrows) {
  Rng rng(3);
  EXPECT_THROW(random_unit(fc(), "pooling", rng), DecodeError);
}

TEST(RandomUnit, RecursiveGrammarHitsDepthCap) {
  const auto g = parse_grammar("<a> ::= x:1 <a>\n");
  Rng rng(4);
  EXPECT_THROW(random_unit(g, "a", rng), DecodeError);
}

TEST(RandomIndividual, RespectsModuleBoundsAndBudget) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto ind = random_individual(fc(), fc_structure(), Budget::seconds(600), rng);
    ASSERT_EQ(ind.modules.size(), 3u);
    EXPECT_GE(ind.modules[0].size(), 1u);
    EXPECT_LE(ind.modules[0].size(), 10u);
    EXPECT_EQ(ind.modules[1].size(), 1u);
    EXPECT_EQ(ind.modules[2].size(), 1u);
    EXPECT_EQ(ind.train_budget, Budget::seconds(600));
  }
  const auto forced = parse_structure("layers fully-connected 3 3\nlayers softmax 1 1\nmacro learning\n");
  EXPECT_EQ(random_individual(fc(), forced, Budget::epochs(1), rng).modules[0].size(), 3u);
}

TEST(Decode, SoftmaxUnitAttributes) {
  UnitGenotype u{"softmax", {{"softmax", {{0, {}}}}}, {-1}};
  Individual ind;
  ind.modules = {{u}, {}, {}};
  const auto st = parse_structure("layers softmax 1 1\nlayers softmax 0 1\nmacro learning\n");
  const auto ph = decode(ind, fc(), st);
  ASSERT_EQ(ph.layers.size(), 1u);
  const std::vector<std::pair<std::string, std::string>> expected = {
      {"layer", "fc"}, {"act", "softmax"}, {"num-units", "10"}, {"bias", "True"}};
  EXPECT_EQ(ph.layers[0].attributes.entries(), expected);
  EXPECT_EQ(phenotype_to_text(ph), "layer:fc act:softmax num-units:10 bias:True input:-1");
}

TEST(Decode, FullyConnectedManualTrace) {
  UnitGenotype u;
  u.start_symbol = "fully-connected";
  u.inputs = {-1};
  u.genes["fully-connected"] = {{0, {1024}}};
  u.genes["activation"] = {{1, {}}};
  u.genes["bias"] = {{0, {}}};
  Individual ind;
  ind.modules = {{u}};
  const auto ph = decode(ind, fc(), parse_structure("layers fully-connected 1 1\n"));
  const std::vector<std::pair<std::string, std::string>> expected = {
      {"layer", "fc"}, {"act", "relu"}, {"num-units", "1024"}, {"bias", "True"}};
  EXPECT_EQ(ph.layers[0].attributes.entries(), expected);
}

TEST(Decode, RepairAppendsAndIsIdempotent) {
  const auto& st = fc_structure();
  Individual ind;
  ind.modules = {{UnitGenotype{"fully-connected", {}, {-1}}}, {UnitGenotype{"softmax", {}, {-1}}},
                 {UnitGenotype{"learning", {}, {}}}};
  EXPECT_THROW(decode(static_cast<const Individual&>(ind), fc(), st), DecodeError);
  Rng rng(6);
  const auto before = ind;
  const auto first = decode(ind, fc(), st, rng);
  EXPECT_GT(ind.modules[0][0].gene_count(), before.modules[0][0].gene_count());
  const auto repaired = ind;
  Rng other(99);
  EXPECT_EQ(decode(ind, fc(), st, other), first);
  EXPECT_EQ(ind, repaired);  // nothing left to repair
  EXPECT_EQ(decode(static_cast<const Individual&>(ind), fc(), st), first);
}

TEST(Decode, NeverDeletesGenes) {
  Rng rng(7);
  auto ind = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
  // surplus genes are kept even though the derivation does not read them
  ind.modules[0][0].genes["bias"].push_back({1, {}});
  ind.modules[0][0].genes["bias"].push_back({0, {}});
  const auto count = ind.modules[0][0].gene_count();
  decode(ind, fc(), fc_structure(), rng);
  EXPECT_EQ(ind.modules[0][0].gene_count(), count);
}

TEST(Decode, ChoiceOutOfRangeIsReported) {
  Rng rng(8);
  auto ind = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
  ind.modules[1][0].genes["softmax"][0].choice = 3;
  EXPECT_THROW(decode(static_cast<const Individual&>(ind), fc(), fc_structure()), DecodeError);
  EXPECT_THROW(decode(ind, fc(), fc_structure(), rng), DecodeError);
}

TEST(Decode, RandomIndividualsSatisfyInvariants) {
  for (const char* name : {"fc", "cnn"}) {
    const auto g = support::shipped_grammar(name);
    const auto st = support::shipped_structure(name);
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
      const auto ind = random_individual(g, st, Budget::epochs(1), rng);
      ASSERT_EQ(support::genotype_violation(ind, g, st), "") << name << " #" << i;
      EXPECT_EQ(decode(ind, g, st), decode(ind, g, st));
    }
  }
}

TEST(Decode, ResolvedInputsPointBackwards) {
  EXPECT_EQ(resolve_inputs({-1}, 0), (std::vector<int>{-1}));
  EXPECT_EQ(resolve_inputs({-1, -3}, 3), (std::vector<int>{2, 0}));
  EXPECT_EQ(resolve_inputs({-9, -1, -1}, 2), (std::vector<int>{-1, 1}));
  EXPECT_EQ(resolve_inputs({}, 2), (std::vector<int>{1}));
}

TEST(Phenotype, TextFormatAndRoundTrip) {
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    const auto ind = random_individual(fc(), fc_structure(), Budget::epochs(1), rng);
    const auto ph = decode(ind, fc(), fc_structure());
    const auto text = phenotype_to_text(ph);
    EXPECT_EQ(parse_phenotype(text), ph);
    const auto last = text.substr(text.rfind('\n') + 1);
    EXPECT_EQ(last.rfind("learning:", 0), 0u) << last;
  }
  EXPECT_THROW(phenotype_to_text(Phenotype{}), std::invalid_argument);
  EXPECT_THROW(parse_phenotype("learning:adam lr:0.1"), std::invalid_argument);
}

TEST(Phenotype, GradientDescentLine) {
  Phenotype ph;
  ph.layers.push_back({});
  ph.layers[0].attributes.set("layer", "fc");
  ph.layers[0].inputs = {-1};
  ph.learning.attributes.set("learning", "gradient-descent");
  ph.learning.attributes.set("lr", "0.01");
  const auto text = phenotype_to_text(ph);
  EXPECT_EQ(text.substr(text.find('\n') + 1), "learning:gradient-descent lr:0.01");
}

TEST(Serialization, IndividualJsonRoundTrip) {
  Rng rng(11);
  for (const char* name : {"fc", "cnn"}) {
    const auto g = support::shipped_grammar(name);
    const auto st = support::shipped_structure(name);
    auto ind = random_individual(g, st, Budget::seconds(600), rng);
    ind.id = 42;
    ind.parent_id = 7;
    ind.eval_seed = 0xdeadbeefcafeULL;
    FitnessRecord r;
    r.fitness = 0.123456789012345678;
    r.validation_accuracy = r.fitness;
    r.epochs_run = 3;
    r.elapsed_seconds = 1.0 / 3.0;
    r.stopped_by = StopReason::early_stop;
    ind.evaluation = r;
    EXPECT_EQ(individual_from_json(Json::parse(to_json(ind).dump())), ind);
    ind.evaluation.reset();
    ind.parent_id.reset();
    EXPECT_EQ(individual_from_json(Json::parse(to_json(ind).dump())), ind);
  }
}
