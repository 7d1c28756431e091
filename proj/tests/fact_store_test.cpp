#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "cgan/fact_store.hpp"
#include "test_support.hpp"

namespace cgan {
namespace {

std::vector<Fact> synthetic_facts(std::size_t subjects, std::size_t relations) {
  std::vector<Fact> facts;
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t r = 0; r < relations; ++r)
      facts.push_back({"s" + std::to_string(s), "r" + std::to_string(r), "v" + std::to_string((s * 7 + r) % 31)});
  return facts;
}

// Scores every fact in order and keeps the k best, earlier facts first on ties.
EvidenceSet linear_scan(const std::vector<Fact>& facts, const std::vector<std::string>& query, std::size_t k) {
  std::vector<std::pair<int, std::size_t>> scored;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    int s = 0;
    if (std::find(query.begin(), query.end(), facts[i].subject) != query.end()) ++s;
    if (std::find(query.begin(), query.end(), facts[i].relation) != query.end()) ++s;
    if (s > 0) scored.emplace_back(-s, i);
  }
  std::sort(scored.begin(), scored.end());
  EvidenceSet out;
  for (std::size_t i = 0; i < scored.size() && i < k; ++i) {
    out.facts.push_back(facts[scored[i].second]);
    out.scores.push_back(-scored[i].first);
  }
  return out;
}

TEST(FactStore, EmptyStoreRetrievesNothing) {
  const FactStore store = FactStore::ingest({});
  const std::vector<std::string> q{"paris", "capital_of"};
  EXPECT_EQ(store.size(), 0u);
  EXPECT_TRUE(store.retrieve(q, 5).empty());
}

TEST(FactStore, ExactSubjectIsRetrieved) {
  const std::vector<Fact> facts{{"rome", "capital_of", "italy"}, {"paris", "capital_of", "france"}};
  const FactStore store = FactStore::ingest(facts);
  const std::vector<std::string> q{"paris"};
  const EvidenceSet e = store.retrieve(q, 1);
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e.facts[0], facts[1]);
  EXPECT_EQ(e.scores[0], 1.0);
  // subject plus relation outranks relation alone even though rome came first
  const std::vector<std::string> q2{"capital_of", "paris"};
  EXPECT_EQ(store.retrieve(q2, 2).facts, (std::vector<Fact>{facts[1], facts[0]}));
  const std::vector<std::string> none{"berlin"};
  EXPECT_TRUE(store.retrieve(none, 3).empty());
}

TEST(FactStore, ConflictNamesBothFacts) {
  const std::vector<Fact> facts{{"paris", "capital_of", "france"}, {"paris", "capital_of", "spain"}};
  try {
    FactStore::ingest(facts);
    FAIL() << "expected FactConflict";
  } catch (const FactConflict& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("france"), std::string::npos);
    EXPECT_NE(msg.find("spain"), std::string::npos);
  }
  const std::vector<Fact> dup{{"a", "b", "c"}, {"a", "b", "c"}};
  EXPECT_EQ(FactStore::ingest(dup).size(), 1u);
  const std::vector<Fact> blank{{"a", "", "c"}};
  EXPECT_THROW(FactStore::ingest(blank), std::invalid_argument);
  const std::vector<std::string> q{"a"};
  EXPECT_THROW(FactStore::ingest(dup).retrieve(q, 0), std::invalid_argument);
}

TEST(FactStore, TenThousandFactsMatchLinearScan) {
  const std::vector<Fact> facts = synthetic_facts(1000, 10);
  const FactStore store = FactStore::ingest(facts);
  ASSERT_EQ(store.size(), 10000u);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> q;
    const std::size_t len = testing::random_size(rng, 0, 6);
    for (std::size_t i = 0; i < len; ++i) {
      switch (rng() % 3) {
        case 0: q.push_back("s" + std::to_string(rng() % 1000)); break;
        case 1: q.push_back("r" + std::to_string(rng() % 10)); break;
        default: q.push_back("noise" + std::to_string(rng() % 5)); break;
      }
    }
    const std::size_t k = testing::random_size(rng, 1, 25);
    const EvidenceSet got = store.retrieve(q, k);
    const EvidenceSet want = linear_scan(facts, q, k);
    ASSERT_EQ(got.facts, want.facts) << "trial " << trial;
    ASSERT_EQ(got.scores, want.scores);
    EXPECT_TRUE(std::is_sorted(got.scores.rbegin(), got.scores.rend()));
    EXPECT_LE(got.size(), k);
  }
}

TEST(FactStore, ReingestionIsOrderStable) {
  const std::vector<Fact> facts = synthetic_facts(20, 4);
  const std::vector<std::string> q{"r1", "s3", "s7"};
  EXPECT_EQ(FactStore::ingest(facts).retrieve(q, 10).facts, FactStore::ingest(facts).retrieve(q, 10).facts);
}

TEST(Entailment, BinaryMode) {
  EvidenceSet e;
  e.facts = {{"paris", "capital_of", "france"}};
  e.scores = {2.0};
  EXPECT_EQ(entailment_factor("france", NodeRole::output, e, EntailmentMode::binary), 1.0);
  EXPECT_EQ(entailment_factor("paris", NodeRole::input, e, EntailmentMode::binary), 1.0);
  EXPECT_EQ(entailment_factor("spain", NodeRole::output, e, EntailmentMode::binary, 0.1), 0.1);
  EXPECT_EQ(entailment_factor("france", NodeRole::output, EvidenceSet{}, EntailmentMode::binary), 0.1);
}

TEST(Entailment, OverlapHalfMatched) {
  // abcdef has 3-grams abc bcd cde def; the evidence covers the first two
  EvidenceSet e;
  e.facts = {{"abcd", "zzz", "yyy"}};
  EXPECT_NEAR(entailment_factor("abcdef", NodeRole::output, e, EntailmentMode::overlap, 0.1), 0.55, 1e-15);
  EXPECT_EQ(char_ngrams("ab", 3), (std::vector<std::string>{"ab"}));
}

TEST(Entailment, BinaryIsTheOverlapLimit) {
  EvidenceSet e;
  e.facts = {{"alpha", "beta", "gamma"}};
  for (const std::string tok : {"alpha", "gamma", "qqqqq"}) {
    EXPECT_EQ(entailment_factor(tok, NodeRole::output, e, EntailmentMode::overlap, 0.2),
              entailment_factor(tok, NodeRole::output, e, EntailmentMode::binary, 0.2));
  }
}

TEST(Entailment, FactorStaysInRange) {
  std::mt19937_64 rng(2);
  const auto word = [&] {
    std::string w;
    for (std::size_t i = 0, n = testing::random_size(rng, 1, 7); i < n; ++i) w += static_cast<char>('a' + rng() % 4);
    return w;
  };
  for (int trial = 0; trial < 500; ++trial) {
    EvidenceSet e;
    for (std::size_t i = 0, n = testing::random_size(rng, 0, 3); i < n; ++i) e.facts.push_back({word(), word(), word()});
    const double f_min = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    for (auto mode : {EntailmentMode::binary, EntailmentMode::overlap}) {
      const double f = entailment_factor(word(), NodeRole::input, e, mode, f_min);
      EXPECT_GE(f, f_min);
      EXPECT_LE(f, 1.0);
    }
  }
  EXPECT_THROW(LexicalEntailment(EntailmentMode::binary, 0.0), std::invalid_argument);
}

TEST(FactsJsonl, RoundTripAndStrictness) {
  const std::vector<Fact> facts = synthetic_facts(3, 2);
  std::stringstream s;
  write_facts_jsonl(s, facts);
  EXPECT_EQ(read_facts_jsonl(s), facts);
  std::istringstream extra(R"({"subject":"a","relation":"b","value":"c","weight":1})");
  EXPECT_THROW(read_facts_jsonl(extra), std::invalid_argument);
  std::istringstream missing("\n{\"subject\":\"a\",\"relation\":\"b\"}\n");
  try {
    read_facts_jsonl(missing);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

}  // namespace
}  // namespace cgan
