#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "cgan/errors.hpp"
#include "cgan/experiment.hpp"

namespace cgan {
namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.corpus.num_facts = 24;
  c.corpus.vocab = VocabProfile{20, 2, 30};
  c.corpus.train_episodes = 40;
  c.corpus.test_episodes = 6;
  c.corpus.seed = 3;
  c.model.context_length = 24;
  c.model.num_layers = 1;
  c.model.num_heads = 2;
  c.model.embed_dim = 8;
  c.model.mlp_multiplier = 2;
  c.train.max_steps = 15;
  c.train.batch_size = 4;
  c.reweight.ig.steps = 4;
  c.seeds = {1, 2};
  c.ccs_series_episodes = 1;
  return c;
}

std::string dump(const ExperimentConfig& c) { return experiment_config_to_json(c).dump(); }

void expect_config_error(const nlohmann::json& j, const std::string& fragment) {
  try {
    experiment_config_from_json(j);
    FAIL() << "expected ConfigError mentioning " << fragment;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

TEST(ExperimentConfig, JsonRoundTrip) {
  const ExperimentConfig d = ExperimentConfig::defaults();
  EXPECT_EQ(dump(experiment_config_from_json(experiment_config_to_json(d))), dump(d));
  EXPECT_EQ(dump(experiment_config_from_json(nlohmann::json::object())), dump(d));
  const ExperimentConfig t = tiny_config();
  EXPECT_EQ(dump(experiment_config_from_json(nlohmann::json::parse(dump(t)))), dump(t));
}

TEST(ExperimentConfig, StrictKeysAndTypes) {
  expect_config_error({{"modle", {}}}, "'modle'");
  expect_config_error({{"reweight", {{"tau", 10}}}}, "'reweight.tau'");
  expect_config_error({{"corpus", {{"vocab", {{"colours", 3}}}}}}, "'corpus.vocab.colours'");
  expect_config_error({{"train", {{"max_steps", "many"}}}}, "'train.max_steps'");
  expect_config_error({{"reweight", {{"aggregation", "median"}}}}, "median");
  expect_config_error({{"seeds", nlohmann::json::array()}}, "seeds");
  expect_config_error({{"corpus", {{"num_facts", 3}}}}, "num_facts");
  expect_config_error({{"reweight", {{"s_floor", 0.0}}}}, "s_floor");
}

TEST(ExperimentConfig, Overrides) {
  nlohmann::json doc = experiment_config_to_json(ExperimentConfig::defaults());
  apply_override(doc, "reweight.tau_percentile=10");
  apply_override(doc, "reweight.aggregation=rollout");
  apply_override(doc, "seeds=[7]");
  const ExperimentConfig c = experiment_config_from_json(doc);
  EXPECT_EQ(c.reweight.ccs.tau_percentile, 10.0);
  EXPECT_EQ(c.reweight.aggregation, AggregationPolicy::rollout);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{7}));
  nlohmann::json empty = nlohmann::json::object();
  apply_override(empty, "a.b.c=\"x y\"");
  EXPECT_EQ(empty["a"]["b"]["c"], "x y");
  EXPECT_THROW(apply_override(empty, "novalue"), ConfigError);
}

TEST(ExperimentConfig, DigestTracksContent) {
  const ExperimentConfig a = tiny_config();
  ExperimentConfig b = tiny_config();
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_EQ(config_digest(a).size(), 16u);
  b.reweight.top_k = 4;
  EXPECT_NE(config_digest(a), config_digest(b));
}

TEST(RunSeeds, LabelledAndDeterministic) {
  const RunSeeds a = derive_run_seeds(1);
  EXPECT_EQ(a.model, derive_run_seeds(1).model);
  EXPECT_EQ((std::set<std::uint64_t>{a.model, a.train, a.gat}).size(), 3u);
  EXPECT_NE(derive_run_seeds(2).model, a.model);
}

TEST(Spread, MeanMinMax) {
  const Spread s = spread({0.25, 0.5, 0.75, 0.5});
  EXPECT_EQ(s.mean, 0.5);
  EXPECT_EQ(s.min, 0.25);
  EXPECT_EQ(s.max, 0.75);
}

TEST(RunExperiment, IdentityPolicyGivesIdenticalRows) {
  ExperimentConfig c = tiny_config();
  c.reweight.ccs.tau_percentile = 0.0;
  const EvalReport r = run_experiment(c);
  ASSERT_EQ(r.runs.size(), 2u);
  for (const SeedResult& run : r.runs) {
    EXPECT_EQ(run.baseline.answers, run.reweighted.answers);
    EXPECT_EQ(run.baseline.counts, run.reweighted.counts);
    EXPECT_EQ(run.baseline.hallucination_rate, run.reweighted.hallucination_rate);
    EXPECT_EQ(run.relative_reduction, 0.0);
    EXPECT_EQ(run.changed_answers, 0u);
    EXPECT_EQ(run.suppressed_steps, 0u);
  }
  const std::string table = report_table_csv(r);
  std::istringstream lines(table);
  std::string header, base, rw;
  std::getline(lines, header);
  EXPECT_EQ(header, "seed,condition,hallucination_rate,factual_accuracy,in_evidence_wrong_rate,correct,in_evidence_wrong,hallucinated");
  while (std::getline(lines, base) && std::getline(lines, rw)) {
    EXPECT_EQ(base.substr(base.find(",baseline,") + 10), rw.substr(rw.find(",reweighted,") + 12));
  }
  for (const CcsSeries& s : r.ccs_series)
    for (const CcsRow& row : s.rows) EXPECT_EQ(row.ccs_before, row.ccs_after);
}

TEST(RunExperiment, DeterministicReportWithSchema) {
  const ExperimentConfig c = tiny_config();
  const EvalReport a = run_experiment(c), b = run_experiment(c);
  const std::string ja = report_to_json(a).dump(2);
  EXPECT_EQ(ja, report_to_json(b).dump(2));
  EXPECT_EQ(report_table_csv(a), report_table_csv(b));
  EXPECT_EQ(report_ccs_csv(a), report_ccs_csv(b));

  const nlohmann::json j = nlohmann::json::parse(ja);
  EXPECT_EQ(j["format"], "cgan-eval-report");
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["config_digest"], config_digest(c));
  EXPECT_EQ(dump(experiment_config_from_json(j["config"])), dump(c));
  for (const char* key : {"seeds", "runs", "summary", "ccs_series", "literature_reference"})
    EXPECT_TRUE(j.contains(key)) << key;
  ASSERT_EQ(j["runs"].size(), 2u);
  for (const auto& run : j["runs"]) {
    for (const char* cond : {"baseline", "reweighted"}) {
      const double h = run[cond]["hallucination_rate"], a2 = run[cond]["factual_accuracy"],
                   w = run[cond]["in_evidence_wrong_rate"];
      EXPECT_GE(h, 0.0);
      EXPECT_LE(h, 1.0);
      EXPECT_NEAR(h + a2 + w, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(j["summary"]["num_seeds"], 2);
  EXPECT_EQ(j["ccs_series"].size(), 2u);
  EXPECT_EQ(report_ccs_csv(a).substr(0, 13), "seed,episode,");
}

TEST(RunExperiment, TrainedGraphLayerIsReportedAndDeterministic) {
  ExperimentConfig c = tiny_config();
  c.seeds = {1};
  c.gat.train = true;
  c.gat.train_episodes = 8;
  c.gat.train_steps = 6;
  c.gat.batch_size = 2;
  const EvalReport a = run_experiment(c), b = run_experiment(c);
  EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());
  ASSERT_TRUE(a.runs[0].gat_training.has_value());
  const GatTrainingSummary& g = *a.runs[0].gat_training;
  EXPECT_GT(g.examples, 0u);
  EXPECT_TRUE(std::isfinite(g.initial_loss) && std::isfinite(g.final_loss));

  const PreparedData data = prepare_data(c);
  const TrainResult model = train_seed(c, data, 1);
  const GatTrainResult direct = train_graph_layer(c, data, model.params, 1);
  EXPECT_EQ(direct.examples, g.examples);
  EXPECT_EQ(direct.final_loss, g.final_loss);
  EXPECT_NE(direct.params, gat_for_seed(c, c.model.embed_dim, 1));

  const nlohmann::json j = report_to_json(a);
  EXPECT_EQ(j["runs"][0]["gat_training"]["examples"], g.examples);
  c.gat.train = false;
  EXPECT_TRUE(report_to_json(run_experiment(c))["runs"][0]["gat_training"].is_null());
  expect_config_error({{"gat", {{"batch_size", 0}}}}, "gat.batch_size");
  expect_config_error({{"gat", {{"train", "yes"}}}}, "gat.train");
}

TEST(RunExperiment, ErrorsCarryTheSeed) {
  ExperimentConfig c = tiny_config();
  c.model.context_length = 12;  // shorter than every episode
  c.seeds = {9};
  try {
    run_experiment(c);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("seed 9"), std::string::npos) << e.what();
  }
}

TEST(LiteratureReference, TableValues) {
  const auto rows = literature_reference();
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].hallucination_rate, 0.342);
  EXPECT_EQ(rows[0].factual_accuracy, 0.618);
  EXPECT_EQ(rows[1].hallucination_rate, 0.275);
  EXPECT_EQ(rows[1].factual_accuracy, 0.684);
  EXPECT_EQ(rows[2].hallucination_rate, 0.197);
  EXPECT_EQ(rows[2].factual_accuracy, 0.798);
}

}  // namespace
}  // namespace cgan
