#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "cgan/metrics.hpp"
#include "test_support.hpp"

namespace cgan {
namespace {

using Strings = std::vector<std::string>;

TEST(Metrics, WorkedExamples) {
  const Strings gold{"v1", "v2", "v3", "v4", "v5"};
  const std::vector<Strings> evidence(5, Strings{"s", "r", "v9"});
  EXPECT_EQ(hallucination_rate(gold, gold, evidence), 0.0);
  EXPECT_EQ(factual_accuracy(gold, gold), 1.0);
  const Strings two_wrong{"v1", "x", "v3", "y", "v5"};
  EXPECT_NEAR(hallucination_rate(two_wrong, gold, evidence), 0.4, 1e-15);
  EXPECT_EQ(factual_accuracy(Strings{"a", "b"}, Strings{"c", "d"}), 0.0);
  EXPECT_EQ(factual_accuracy(Strings{"a", "b", "c", "x"}, Strings{"a", "b", "c", "d"}), 0.75);
}

TEST(Metrics, CopiedDistractorValueInEvidenceIsNotAHallucination) {
  // evidence listed explicitly, including the distractor fact's value
  const Strings gold{"france"};
  const std::vector<Strings> evidence{{"paris", "capital_of", "france", "rome", "capital_of", "italy"}};
  const Strings copied{"italy"};
  EXPECT_EQ(classify("italy", "france", evidence[0]), Outcome::in_evidence_wrong);
  EXPECT_EQ(hallucination_rate(copied, gold, evidence), 0.0);
  EXPECT_EQ(factual_accuracy(copied, gold), 0.0);
  EXPECT_EQ(classify("spain", "france", evidence[0]), Outcome::hallucinated);
  EXPECT_EQ(classify("france", "france", Strings{}), Outcome::correct);
}

TEST(Metrics, OutcomesPartitionThePredictions) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = testing::random_size(rng, 1, 40);
    Strings pred, gold;
    std::vector<Strings> evidence;
    for (std::size_t i = 0; i < n; ++i) {
      pred.push_back("t" + std::to_string(rng() % 6));
      gold.push_back("t" + std::to_string(rng() % 6));
      Strings ev;
      for (std::size_t k = 0, m = rng() % 4; k < m; ++k) ev.push_back("t" + std::to_string(rng() % 6));
      evidence.push_back(ev);
    }
    const OutcomeCounts c = cgan::partition(pred, gold, evidence);
    EXPECT_EQ(c.total(), n);
    const double h = hallucination_rate(pred, gold, evidence), a = factual_accuracy(pred, gold);
    EXPECT_EQ(c.rate(c.hallucinated), h);
    EXPECT_EQ(c.rate(c.correct), a);
    EXPECT_NEAR(h + a + c.rate(c.in_evidence_wrong), 1.0, 1e-15);
    EXPECT_EQ(c.correct + c.in_evidence_wrong + c.hallucinated, n);
  }
}

TEST(Metrics, RejectsMisalignedLists) {
  const Strings two{"a", "b"}, one{"a"};
  const std::vector<Strings> ev(2);
  EXPECT_THROW(hallucination_rate(two, one, ev), std::invalid_argument);
  EXPECT_THROW(hallucination_rate(two, two, std::vector<Strings>(1)), std::invalid_argument);
  EXPECT_THROW(factual_accuracy(two, one), std::invalid_argument);
}

TEST(CcsReportCsv, RoundTrip) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<CcsRow> rows;
    for (std::size_t i = 0, n = testing::random_size(rng, 0, 6); i < n; ++i) {
      CcsRow r;
      r.position = rng() % 100;
      r.token = i % 3 == 0 ? "a,\"b\"" : "v" + std::to_string(i);
      if (rng() % 4) r.ccs_before = std::uniform_real_distribution<double>(-1e5, 1e5)(rng);
      if (rng() % 4) r.ccs_after = std::uniform_real_distribution<double>(0, 1e-9)(rng);
      r.suppressed = rng() % 2;
      rows.push_back(r);
    }
    EXPECT_EQ(parse_ccs_report_csv(ccs_report_csv(rows)), rows);
  }
  EXPECT_EQ(ccs_report_csv(std::vector<CcsRow>{{7, "x", 0.5, std::nullopt, true}}),
            "position,token,ccs_before,ccs_after,suppressed\n7,x,0.5,,1\n");
  EXPECT_THROW(parse_ccs_report_csv("pos,token\n"), std::invalid_argument);
  EXPECT_THROW(parse_ccs_report_csv("position,token,ccs_before,ccs_after,suppressed\n1,x,2\n"),
               std::invalid_argument);
  EXPECT_THROW(parse_ccs_report_csv("position,token,ccs_before,ccs_after,suppressed\n1,x,2,3,yes\n"),
               std::invalid_argument);
}

struct SeededEpisode {
  Vocabulary vocab{{";", "Q", "?", "s1", "s2", "r1", "v1", "v2", "v3", "v4"}};
  ModelParams params;
  GatParams gat;
  std::vector<TokenId> prompt;
  FactStore store;
  ReweightPolicy policy;

  SeededEpisode() {
    ModelConfig c;
    c.vocab_size = vocab.size();
    c.context_length = 20;
    c.num_layers = 2;
    c.num_heads = 2;
    c.embed_dim = 8;
    c.mlp_multiplier = 2;
    c.dropout_rate = 0.0;
    c.seed = 21;
    params = init_model(c);
    gat = GatParams::init(c.embed_dim + 2, 8, 4, 4);
    prompt = vocab.encode(std::string_view("s1 r1 v1 ; s2 r1 v2 ; Q s2 r1 ?"));
    const std::vector<Fact> facts{{"s1", "r1", "v1"}, {"s2", "r1", "v2"}};
    store = FactStore::ingest(facts);
    policy.ig.steps = 16;
    policy.refresh_every = 1;
    policy.query_window = 3;
    policy.ccs.tau_percentile = 50.0;
  }

  ReweightedGeneration run(double tau) const {
    ReweightPolicy p = policy;
    p.ccs.tau_percentile = tau;
    return generate_reweighted(params, vocab, prompt, store, gat, p, 4);
  }
};

TEST(CcsReport, IdentityRunHasEqualScores) {
  const SeededEpisode ep;
  const ReweightedGeneration plain = ep.run(0.0);
  for (const CcsRow& r : ccs_report(plain, plain)) {
    ASSERT_TRUE(r.ccs_before.has_value());
    EXPECT_EQ(r.ccs_before, r.ccs_after);
    EXPECT_FALSE(r.suppressed);
  }
  ReweightedGeneration other = plain;
  other.prompt.pop_back();
  EXPECT_THROW(ccs_report(plain, other), std::invalid_argument);
}

// Before-scores recomputed from scratch: final-layer head-mean attention of
// the generating row times |IG| of the emitted token.
TEST(CcsReport, BeforeScoresMatchDirectComputation) {
  const SeededEpisode ep;
  const ReweightedGeneration plain = ep.run(0.0);
  const std::vector<TokenId> baseline = generate(ep.params, ep.prompt, GenerateOptions{4}).tokens;
  ASSERT_EQ(plain.tokens, baseline);
  const std::size_t n = ep.prompt.size();
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<TokenId> seq = ep.prompt;
    seq.insert(seq.end(), baseline.begin(), baseline.begin() + static_cast<std::ptrdiff_t>(t + 1));
    const AttentionTrace trace = forward(ep.params, seq).trace;
    const AttributionRow row = integrated_gradients(ep.params, seq, n, t, ep.policy.ig);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double alpha = 0.5 * (trace.at(1, 0).at(n + t - 1, j) + trace.at(1, 1).at(n + t - 1, j));
      s += alpha * std::abs(row.inputs[j]);
    }
    ASSERT_TRUE(plain.steps[t].token_ccs.has_value());
    EXPECT_NEAR(*plain.steps[t].token_ccs, s, 1e-12);
  }
}

TEST(CcsReport, MatchesGoldenFixture) {
  const SeededEpisode ep;
  const std::vector<CcsRow> rows = ccs_report(ep.run(50.0), ep.run(0.0));
  std::ifstream in(std::string(CGAN_GOLDEN_DIR) + "/ccs_report.csv");
  std::stringstream golden;
  golden << in.rdbuf();
  const std::vector<CcsRow> want = parse_ccs_report_csv(golden.str());
  ASSERT_EQ(rows.size(), want.size()) << ccs_report_csv(rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].position, want[i].position);
    EXPECT_EQ(rows[i].token, want[i].token);
    EXPECT_EQ(rows[i].suppressed, want[i].suppressed);
    // the last bits of IG depend on the BLAS kernels of the build machine
    ASSERT_EQ(rows[i].ccs_before.has_value(), want[i].ccs_before.has_value());
    ASSERT_EQ(rows[i].ccs_after.has_value(), want[i].ccs_after.has_value());
    if (rows[i].ccs_before) EXPECT_NEAR(*rows[i].ccs_before, *want[i].ccs_before, 1e-9 * *want[i].ccs_before);
    if (rows[i].ccs_after) EXPECT_NEAR(*rows[i].ccs_after, *want[i].ccs_after, 1e-9 * *want[i].ccs_after);
  }
}

}  // namespace
}  // namespace cgan
