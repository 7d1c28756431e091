#include <gtest/gtest.h>

#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "cgan/causal_graph.hpp"
#include "test_support.hpp"

namespace cgan {
namespace {

// Random causal attention maps with rows summing to 1.
AttentionTrace random_trace(std::mt19937_64& rng, std::size_t layers, std::size_t heads, std::size_t len) {
  AttentionTrace t{layers, heads, len, {}};
  for (std::size_t i = 0; i < layers * heads; ++i) {
    Tensor m({len, len});
    for (std::size_t q = 0; q < len; ++q) {
      double z = 0.0;
      for (std::size_t k = 0; k <= q; ++k) z += (m.at(q, k) = std::uniform_real_distribution<double>(0.01, 1.0)(rng));
      for (std::size_t k = 0; k <= q; ++k) m.at(q, k) /= z;
    }
    t.maps.push_back(m);
  }
  return t;
}

AttributionMatrix attributions_of(const Tensor& scores) {
  AttributionMatrix a;
  a.scores = scores;
  a.residuals.assign(scores.shape()[0], 0.0);
  for (std::size_t i = 0; i < scores.shape()[0]; ++i) a.output_scores.emplace_back(i, 0.0);
  return a;
}

AlphaMatrix alpha_of(const Tensor& alpha) {
  AlphaMatrix a;
  a.alpha = alpha;
  a.output_alpha = Tensor({alpha.shape()[0], alpha.shape()[0]});
  for (std::size_t i = 0; i < alpha.shape()[0]; ++i) {
    double s = 0.0;
    for (double v : alpha.row(i)) s += v;
    a.input_mass.push_back(s);
  }
  return a;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(AggregateAttention, SingleHeadPassesRowsThrough) {
  std::mt19937_64 rng(1);
  const AttentionTrace t = random_trace(rng, 1, 1, 6);
  const AlphaMatrix a = aggregate_attention(t, 4, 2, AggregationPolicy::final_layer_mean_heads);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(a.alpha.at(i, j), t.maps[0].at(3 + i, j));
  EXPECT_EQ(a.output_alpha.at(1, 0), t.maps[0].at(4, 4));
}

TEST(AggregateAttention, MeanOfTwoHeads) {
  AttentionTrace t{1, 2, 2, {Tensor::matrix({{1, 0}, {1, 0}}), Tensor::matrix({{1, 0}, {0, 1}})}};
  const AlphaMatrix a = aggregate_attention(t, 1, 1, AggregationPolicy::final_layer_mean_heads);
  EXPECT_EQ(a.alpha.at(0, 0), 1.0);
  t.maps = {Tensor::matrix({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}}), Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 1, 0}})};
  t.seq_len = 3;
  const AlphaMatrix b = aggregate_attention(t, 2, 1, AggregationPolicy::final_layer_mean_heads);
  EXPECT_EQ(b.alpha.at(0, 0), 0.5);
  EXPECT_EQ(b.alpha.at(0, 1), 0.5);
}

TEST(AggregateAttention, AllLayersMeanMatchesTripleLoop) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t len = testing::random_size(rng, 3, 9), n = testing::random_size(rng, 1, len - 1);
    const AttentionTrace t = random_trace(rng, 3, 4, len);
    const AlphaMatrix a = aggregate_attention(t, n, len - n, AggregationPolicy::all_layers_mean);
    for (std::size_t i = 0; i < len - n; ++i) {
      const std::size_t q = n + i - 1;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t l = 0; l < 3; ++l)
          for (std::size_t h = 0; h < 4; ++h) s += t.at(l, h).at(q, j);
        EXPECT_NEAR(a.alpha.at(i, j), s / 12.0, 1e-12);
      }
    }
  }
}

TEST(AggregateAttention, RolloutIsProductOfHeadMeans) {
  std::mt19937_64 rng(3);
  const std::size_t len = 7, n = 4;
  const AttentionTrace t = random_trace(rng, 3, 2, len);
  // R = A_2 A_1 A_0 with A_l the head mean of layer l.
  std::vector<std::vector<double>> prod(len, std::vector<double>(len, 0.0));
  for (std::size_t r = 0; r < len; ++r) prod[r][r] = 1.0;
  for (std::size_t l = 0; l < 3; ++l) {
    std::vector<std::vector<double>> next(len, std::vector<double>(len, 0.0));
    for (std::size_t r = 0; r < len; ++r)
      for (std::size_t c = 0; c < len; ++c)
        for (std::size_t k = 0; k < len; ++k)
          next[r][c] += 0.5 * (t.at(l, 0).at(r, k) + t.at(l, 1).at(r, k)) * prod[k][c];
    prod = next;
  }
  const AlphaMatrix a = aggregate_attention(t, n, len - n, AggregationPolicy::rollout);
  for (std::size_t i = 0; i < len - n; ++i)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(a.alpha.at(i, j), prod[n + i - 1][j], 1e-12);
}

TEST(AggregateAttention, RolloutWithOneLayerIsFinalLayer) {
  std::mt19937_64 rng(4);
  const AttentionTrace t = random_trace(rng, 1, 3, 6);
  const AlphaMatrix a = aggregate_attention(t, 3, 3, AggregationPolicy::rollout);
  const AlphaMatrix b = aggregate_attention(t, 3, 3, AggregationPolicy::final_layer_mean_heads);
  EXPECT_EQ(a.alpha, b.alpha);
}

TEST(AggregateAttention, StepTracesMatchFullTrace) {
  std::mt19937_64 rng(5);
  const AttentionTrace full = random_trace(rng, 2, 2, 7);
  std::vector<AttentionTrace> steps;
  for (std::size_t i = 0; i < 3; ++i) {
    AttentionTrace s{2, 2, 5 + i, {}};
    for (const Tensor& m : full.maps) {
      Tensor cut({5 + i, 5 + i});
      for (std::size_t q = 0; q < 5 + i; ++q)
        for (std::size_t k = 0; k <= q; ++k) cut.at(q, k) = m.at(q, k);
      s.maps.push_back(cut);
    }
    steps.push_back(s);
  }
  for (auto policy : {AggregationPolicy::final_layer_mean_heads, AggregationPolicy::all_layers_mean,
                      AggregationPolicy::rollout}) {
    const AlphaMatrix a = aggregate_attention(steps, 5, policy);
    const AlphaMatrix b = aggregate_attention(full, 5, 3, policy);
    EXPECT_EQ(a.alpha, b.alpha);
    EXPECT_EQ(a.input_mass, b.input_mass);
  }
}

TEST(AggregateAttention, RowsAreNonNegativeWithMassAtMostOne) {
  std::mt19937_64 rng(6);
  for (auto policy : {AggregationPolicy::final_layer_mean_heads, AggregationPolicy::all_layers_mean,
                      AggregationPolicy::rollout}) {
    const AttentionTrace t = random_trace(rng, 2, 3, 9);
    const AlphaMatrix a = aggregate_attention(t, 5, 4, policy);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0, out = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(a.alpha.at(i, j), 0.0);
        s += a.alpha.at(i, j);
      }
      for (std::size_t k = 0; k < i; ++k) out += a.output_alpha.at(i, k);
      EXPECT_NEAR(a.input_mass[i], s, 1e-15);
      EXPECT_LE(s, 1.0 + 1e-12);
      EXPECT_NEAR(s + out, 1.0, 1e-12);
    }
  }
}

TEST(AggregateAttention, RejectsShortTraces) {
  std::mt19937_64 rng(7);
  const AttentionTrace t = random_trace(rng, 1, 1, 4);
  EXPECT_THROW(aggregate_attention(t, 3, 3, AggregationPolicy::rollout), std::invalid_argument);
  EXPECT_THROW(aggregate_attention(t, 0, 1, AggregationPolicy::rollout), std::invalid_argument);
}

TEST(Ccs, WorkedExamples) {
  const CcsVector v = ccs(Tensor::matrix({{0.5, 0.5}, {0.0, 0.0}}), Tensor::matrix({{0.2, -0.4}, {3.0, 7.0}}),
                          CcsOptions{CcsNorm::none, 25.0, false});
  EXPECT_NEAR(v.raw[0], 0.3, 1e-15);
  EXPECT_EQ(v.raw[1], 0.0);
}

TEST(Ccs, MatchesDoubleLoop) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = testing::random_size(rng, 1, 6), n = testing::random_size(rng, 1, 9);
    const Tensor alpha = testing::random_tensor({m, n}, rng, 0.0, 1.0);
    const Tensor attr = testing::random_tensor({m, n}, rng, -2.0, 2.0);
    const CcsVector v = ccs(alpha, attr, CcsOptions{});
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += alpha.at(i, j) * std::abs(attr.at(i, j));
      EXPECT_NEAR(v.raw[i], s, 1e-12);
      EXPECT_GE(v.normalized[i], 0.0);
      EXPECT_LE(v.normalized[i], 1.0);
    }
  }
}

TEST(Ccs, MonotoneInAttributionMagnitude) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor alpha = testing::random_tensor({3, 5}, rng, 0.01, 1.0);
    Tensor attr = testing::random_tensor({3, 5}, rng, -1.0, 1.0);
    const CcsVector before = ccs(alpha, attr, CcsOptions{});
    const std::size_t i = testing::random_size(rng, 0, 2), j = testing::random_size(rng, 0, 4);
    attr.at(i, j) += attr.at(i, j) >= 0 ? 0.5 : -0.5;
    EXPECT_GE(ccs(alpha, attr, CcsOptions{}).raw[i], before.raw[i]);
  }
}

TEST(Ccs, ScaleCovariance) {
  std::mt19937_64 rng(10);
  const Tensor alpha = testing::random_tensor({4, 6}, rng, 0.0, 1.0);
  const Tensor attr = testing::random_tensor({4, 6}, rng);
  Tensor scaled = attr;
  for (auto& v : scaled.values()) v *= 4.0;  // a power of two keeps the products exact
  const CcsVector a = ccs(alpha, attr, CcsOptions{}), b = ccs(alpha, scaled, CcsOptions{});
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(b.raw[i], 4.0 * a.raw[i]);
    EXPECT_EQ(b.normalized[i], a.normalized[i]);
  }
  EXPECT_EQ(a.low, b.low);
}

TEST(Ccs, LowFlagsAreStrictlyBelowThePercentile) {
  // normalized scores 0, 1/3, 2/3, 1 -> 25th percentile 0.25 flags only the first
  const Tensor alpha = Tensor::matrix({{1.0}, {1.0}, {1.0}, {1.0}});
  const CcsVector v = ccs(alpha, Tensor::matrix({{1.0}, {2.0}, {3.0}, {4.0}}), CcsOptions{});
  EXPECT_NEAR(v.threshold, 0.25, 1e-15);
  EXPECT_EQ(v.low, (std::vector<bool>{true, false, false, false}));
  CcsOptions zero;
  zero.tau_percentile = 0.0;
  const CcsVector none = ccs(alpha, Tensor::matrix({{1.0}, {2.0}, {3.0}, {4.0}}), zero);
  EXPECT_EQ(none.low, (std::vector<bool>(4, false)));
}

TEST(Ccs, ConstantRowsNormalizeToOneAndFlagNothing) {
  const CcsVector v = ccs(Tensor::matrix({{0.5}, {0.5}}), Tensor::matrix({{2.0}, {-2.0}}), CcsOptions{});
  EXPECT_EQ(v.normalized, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(v.low, (std::vector<bool>{false, false}));
}

TEST(Ccs, RenormalizeByInputMass) {
  const Tensor alpha = Tensor::matrix({{0.2, 0.2}, {0.5, 0.5}});
  const Tensor attr = Tensor::matrix({{1.0, 1.0}, {1.0, 1.0}});
  CcsOptions o;
  o.renormalize_by_input_mass = true;
  const std::vector<double> mass{0.4, 1.0};
  const CcsVector v = ccs(alpha, attr, o, mass);
  EXPECT_NEAR(v.raw[0], 0.4, 1e-15);  // raw is unchanged
  EXPECT_EQ(v.normalized, (std::vector<double>{1.0, 1.0}));
  EXPECT_THROW(ccs(alpha, attr, o), std::invalid_argument);
}

TEST(Ccs, RejectsMismatchedShapes) {
  EXPECT_THROW(ccs(Tensor({2, 3}), Tensor({3, 2}), CcsOptions{}), ShapeError);
  CcsOptions o;
  o.tau_percentile = 101.0;
  EXPECT_THROW(ccs(Tensor({2, 3}), Tensor({2, 3}), o), std::invalid_argument);
}

TEST(Percentile, LinearInterpolation) {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(percentile(v, 0), 1.0);
  EXPECT_EQ(percentile(v, 100), 4.0);
  EXPECT_NEAR(percentile(v, 50), 2.5, 1e-15);
  EXPECT_THROW(percentile(std::vector<double>{}, 10), std::invalid_argument);
}

TEST(BuildGraph, DenseEdgesCarrySignedWeights) {
  std::mt19937_64 rng(11);
  const Tensor alpha = testing::random_tensor({2, 3}, rng, 0.0, 1.0);
  const Tensor attr = testing::random_tensor({2, 3}, rng);
  const std::vector<std::string> in{"a", "b", "c"}, out{"x", "y"};
  const CausalGraph g = build_graph(alpha_of(alpha), attributions_of(attr), in, out);
  ASSERT_EQ(g.nodes.size(), 5u);
  ASSERT_EQ(g.edges.size(), 6u);
  std::size_t e = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j, ++e) {
      EXPECT_EQ(g.edges[e].src, j);
      EXPECT_EQ(g.edges[e].dst, 3 + i);
      EXPECT_EQ(g.edges[e].weight, alpha.at(i, j) * attr.at(i, j));
    }
  const CcsVector v = ccs(alpha, attr, CcsOptions{});
  EXPECT_EQ(*g.nodes[3].ccs, v.raw[0]);
  EXPECT_EQ(*g.nodes[4].ccs, v.raw[1]);
  EXPECT_FALSE(g.nodes[0].ccs.has_value());
}

TEST(BuildGraph, PruningIsDisplayOnly) {
  std::mt19937_64 rng(12);
  const Tensor alpha = testing::random_tensor({2, 3}, rng, 0.0, 1.0);
  const Tensor attr = testing::random_tensor({2, 3}, rng);
  const std::vector<std::string> in{"a", "b", "c"}, out{"x", "y"};
  GraphOptions o;
  o.prune_below = std::numeric_limits<double>::infinity();
  const CausalGraph pruned = build_graph(alpha_of(alpha), attributions_of(attr), in, out, o);
  const CausalGraph dense = build_graph(alpha_of(alpha), attributions_of(attr), in, out);
  EXPECT_TRUE(pruned.edges.empty());
  EXPECT_EQ(pruned.nodes, dense.nodes);
  o.prune_below = -1.0;
  EXPECT_THROW(build_graph(alpha_of(alpha), attributions_of(attr), in, out, o), std::invalid_argument);
}

TEST(BuildGraph, OptionalOutputEdges) {
  const Tensor alpha = Tensor::matrix({{0.5}, {0.25}});
  AlphaMatrix a = alpha_of(alpha);
  a.output_alpha.at(1, 0) = 0.75;
  AttributionMatrix attr = attributions_of(Tensor::matrix({{1.0}, {2.0}}));
  attr.output_scores[1] = {-4.0};
  GraphOptions o;
  o.include_output_edges = true;
  const std::vector<std::string> in{"a"}, out{"x", "y"};
  const CausalGraph g = build_graph(a, attr, in, out, o);
  ASSERT_EQ(g.edges.size(), 3u);
  EXPECT_EQ(g.edges[2], (GraphEdge{1, 2, 0.75, -4.0, -3.0}));
}

// 3 inputs, 2 outputs, hand-picked values so every number is checkable:
// weights 0.2 -0.06 0.02 / 0.02 0.3 -0.09, raw scores 0.28 and 0.41.
CausalGraph fixture_graph() {
  const Tensor alpha = Tensor::matrix({{0.5, 0.3, 0.2}, {0.1, 0.6, 0.3}});
  const Tensor attr = Tensor::matrix({{0.4, -0.2, 0.1}, {0.2, 0.5, -0.3}});
  const std::vector<std::string> in{"paris", "capital_of", "?"}, out{"france", "\"q\""};
  return build_graph(alpha_of(alpha), attributions_of(attr), in, out);
}

TEST(ExportDot, MatchesGoldenFile) {
  const std::string dot = export_dot(fixture_graph());
  EXPECT_EQ(dot, read_file(std::string(CGAN_GOLDEN_DIR) + "/graph_3x2.dot"));
  EXPECT_EQ(dot, export_dot(fixture_graph()));
}

TEST(ExportDot, EmptyOutputHasOnlyInputNodes) {
  AlphaMatrix a = alpha_of(Tensor({0, 2}));
  const std::vector<std::string> in{"a", "b"}, out{};
  const CausalGraph g = build_graph(a, attributions_of(Tensor({0, 2})), in, out);
  EXPECT_EQ(export_dot(g),
            "digraph causal_graph {\n  rankdir=LR;\n"
            "  n0 [label=\"a@0\", shape=box];\n"
            "  n1 [label=\"b@1\", shape=box];\n}\n");
}

TEST(GraphJson, TwoNodeFixture) {
  CausalGraph g;
  g.tokens_in = {"k"};
  g.tokens_out = {"v"};
  g.nodes = {GraphNode{0, "k", 0, NodeRole::input, std::nullopt, 1.0},
             GraphNode{1, "v", 1, NodeRole::output, 0.25, 0.5}};
  g.edges = {GraphEdge{0, 1, 0.5, -0.5, -0.25}};
  const std::string expected = R"({
  "version": 1,
  "tokens_in": [
    "k"
  ],
  "tokens_out": [
    "v"
  ],
  "policy": "final_layer_mean_heads",
  "nodes": [
    {
      "id": 0,
      "token": "k",
      "pos": 0,
      "role": "input",
      "f": 1.0
    },
    {
      "id": 1,
      "token": "v",
      "pos": 1,
      "role": "output",
      "ccs": 0.25,
      "f": 0.5
    }
  ],
  "edges": [
    {
      "src": 0,
      "dst": 1,
      "alpha": 0.5,
      "ig": -0.5,
      "weight": -0.25
    }
  ]
}
)";
  EXPECT_EQ(export_json(g), expected);
  EXPECT_EQ(import_json(expected), g);
}

TEST(GraphJson, RandomRoundTrips) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = testing::random_size(rng, 1, 5), m = testing::random_size(rng, 0, 4);
    CausalGraph g;
    g.policy = static_cast<AggregationPolicy>(testing::random_size(rng, 0, 2));
    for (std::size_t j = 0; j < n + m; ++j) {
      const std::string tok = "t" + std::to_string(testing::random_size(rng, 0, 99)) + (j % 3 == 0 ? "\"\\" : "");
      (j < n ? g.tokens_in : g.tokens_out).push_back(tok);
      GraphNode node{j, tok, j, j < n ? NodeRole::input : NodeRole::output, std::nullopt, std::nullopt};
      if (j >= n) node.ccs = u(rng) * 1e-7;
      if (rng() % 2) node.f = u(rng);
      g.nodes.push_back(node);
    }
    for (std::size_t e = 0; e < n * m; ++e) {
      g.edges.push_back(GraphEdge{e % n, n + e / n, u(rng), u(rng) * 1e-12, u(rng) * 1e200});
    }
    EXPECT_EQ(import_json(export_json(g)), g);
  }
}

TEST(GraphJson, SchemaIsExact) {
  const nlohmann::ordered_json j = graph_to_json(fixture_graph());
  std::vector<std::string> keys;
  for (const auto& [k, _] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"version", "tokens_in", "tokens_out", "policy", "nodes", "edges"}));
  keys.clear();
  for (const auto& [k, _] : j["edges"][0].items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"src", "dst", "alpha", "ig", "weight"}));
  keys.clear();
  for (const auto& [k, _] : j["nodes"][3].items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"id", "token", "pos", "role", "ccs"}));
}

TEST(GraphJson, StrictLoader) {
  nlohmann::json j = nlohmann::json::parse(export_json(fixture_graph()));
  nlohmann::json extra = j;
  extra["nodes"][0]["colour"] = "red";
  EXPECT_THROW(graph_from_json(extra), std::invalid_argument);
  nlohmann::json version = j;
  version["version"] = 2;
  EXPECT_THROW(graph_from_json(version), std::invalid_argument);
  nlohmann::json dangling = j;
  dangling["edges"][0]["dst"] = 99;
  EXPECT_THROW(graph_from_json(dangling), std::invalid_argument);
  nlohmann::json missing = j;
  missing.erase("policy");
  EXPECT_THROW(graph_from_json(missing), std::invalid_argument);
}

}  // namespace
}  // namespace cgan
