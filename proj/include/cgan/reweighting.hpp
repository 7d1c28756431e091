#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cgan/attribution.hpp"
#include "cgan/causal_graph.hpp"
#include "cgan/fact_store.hpp"
#include "cgan/model.hpp"
#include "cgan/vocabulary.hpp"
#include "json.hpp"

namespace cgan {

/// Single-layer multi-head graph attention followed by a sigmoid readout.
///
/// For receiver v and neighbour u (u = v included):
///   e_vu = LeakyReLU(a_h . [W_h x_v || W_h x_u]),  c_vu = softmax_u(e_vu),
///   h_v  = mean_h sum_u c_vu W_h x_u,              score_v = sigmoid(r . h_v).
struct GatParams {
  std::size_t in_features = 0;
  std::size_t hidden = 8;
  std::size_t num_heads = 4;
  double leaky_slope = 0.2;
  /// Feature dropout while training the layer; inference never drops.
  double dropout = 0.3;
  std::uint64_t seed = 0;

  std::vector<Tensor> w;  // per head, in_features x hidden
  std::vector<Tensor> a;  // per head, 2 * hidden
  Tensor readout;         // hidden

  /// Glorot-uniform weights drawn from `seed`.
  static GatParams init(std::size_t in_features, std::size_t hidden = 8, std::size_t num_heads = 4,
                        std::uint64_t seed = 0, double leaky_slope = 0.2, double dropout = 0.3);
  void validate() const;

  bool operator==(const GatParams&) const = default;
};

/// Directed edge src -> dst; dst aggregates from src.
using GatEdge = std::pair<std::size_t, std::size_t>;

struct GatResult {
  std::vector<double> scores;  // one per node, in (0, 1)
  /// neighbours[v]: sorted in-neighbours of v including v itself.
  std::vector<std::vector<std::size_t>> neighbours;
  /// coefficients[h][v][k]: weight of neighbours[v][k] for head h.
  std::vector<std::vector<std::vector<double>>> coefficients;
};

/// `features` is (nodes x in_features). Self-loops are added automatically and
/// duplicate edges collapse.
GatResult gat_forward(const Tensor& features, std::span<const GatEdge> edges,
                      const GatParams& params);
std::vector<double> gat_scores(const Tensor& features, std::span<const GatEdge> edges,
                               const GatParams& params);

nlohmann::ordered_json gat_to_json(const GatParams& params);
GatParams gat_from_json(const nlohmann::json& j);

/// Which key positions a plan suppresses and why.
struct NodeFlags {
  std::vector<bool> low;
  /// Normalized score of the lowest output that flagged the node; 1 if none.
  std::vector<double> ccs;
};

/// Treats every scored output as its own node.
NodeFlags flags_from_ccs(const CcsVector& ccs);

/// Each low-scoring output flags its `top_k` prompt tokens with the largest
/// |alpha * I| edge weight. `weights` is (outputs x inputs).
NodeFlags flag_inputs(const CcsVector& ccs, const Tensor& weights, std::size_t top_k);

struct PlanEntry {
  double s = 1.0;
  bool flagged = false;
  double ccs = 1.0;
  double f = 1.0;
  double gat = 1.0;

  bool operator==(const PlanEntry&) const = default;
};

/// Per key position suppression factor s in (0, 1].
struct ReweightPlan {
  std::vector<PlanEntry> entries;

  std::size_t size() const { return entries.size(); }
  std::vector<double> factors() const;
  std::vector<std::size_t> suppressed() const;
  bool is_identity() const;

  static ReweightPlan identity(std::size_t keys);
};

/// s = max(s_floor, f * gat) for flagged nodes, 1 otherwise.
ReweightPlan make_plan(const NodeFlags& flags, std::span<const double> f,
                       std::span<const double> gat, double s_floor = 0.05);

/// softmax(logits + ln s). Rejects s <= 0 and length mismatches.
std::vector<double> reweight_attention(std::span<const double> logits, std::span<const double> s);

struct ReweightPolicy {
  CcsOptions ccs;  // tau_percentile 0 makes every plan the identity
  AggregationPolicy aggregation = AggregationPolicy::final_layer_mean_heads;
  IgOptions ig;
  double s_floor = 0.05;
  std::size_t top_k = 3;
  /// Recompute attributions every `refresh_every` steps and reuse the cached
  /// rows in between.
  std::size_t refresh_every = 4;
  std::size_t retrieval_k = 1;
  /// Number of trailing prompt tokens used as the retrieval query; 0 uses the
  /// whole prompt.
  std::size_t query_window = 0;
  EntailmentMode entailment = EntailmentMode::binary;
  double f_min = 0.1;
  /// Also suppress earlier generated tokens that scored low.
  bool include_output_keys = false;
  /// Apply the bias in every layer instead of the final one.
  bool all_layers = false;
};

/// Node features for the graph layer: token embedding, normalized score
/// (1 for prompt tokens), entailment factor.
Tensor gat_features(const ModelParams& params, std::span<const TokenId> tokens,
                    std::size_t num_inputs, std::span<const double> output_ccs,
                    std::span<const double> f);

/// Evidence for a prompt: the last query_window tokens (all when 0) form the
/// retrieval query.
EvidenceSet retrieve_evidence(const Vocabulary& vocab, std::span<const TokenId> prompt,
                              const FactStore& store, const ReweightPolicy& policy);

/// What one decode step feeds the graph layer and make_plan. `tokens` is the
/// episode so far including the greedy candidate, so the generating row is
/// tokens.size() - 2 and sees `keys` = tokens.size() - 1 positions.
struct StepGraph {
  CcsVector scores;  // outputs covered by attribution rows
  Tensor weights;    // covered x inputs, alpha * I
  bool any_flag = false;
  std::size_t keys = 0;
  // The fields below are only filled when any_flag is set.
  Tensor features;   // one node per prompt token, then per covered output
  std::vector<GatEdge> edges;
  NodeFlags key_flags;
  std::vector<double> key_f;

  /// Graph score for keys that are graph nodes, 1 for the rest.
  std::vector<double> key_gat(std::span<const double> node_scores) const;
};

/// `rows` are the attribution rows of outputs 0.. in order; `trace` is the
/// plain forward over `tokens` without the candidate.
StepGraph build_step_graph(const ModelParams& params, const Vocabulary& vocab,
                           std::span<const TokenId> tokens, std::size_t num_inputs,
                           std::span<const AttributionRow> rows, const AttentionTrace& trace,
                           const ReweightPolicy& policy, const EvidenceSet& evidence,
                           const EntailmentModel& entailment);

struct StepDiagnostics {
  std::size_t step = 0;
  std::vector<double> ccs;   // normalized scores of the outputs covered so far
  std::vector<double> plan;  // s per key position
  std::string token;
  std::vector<std::size_t> suppressed;
  std::string candidate;              // greedy token before re-weighting
  std::optional<double> token_ccs;    // raw score of the emitted token

  bool operator==(const StepDiagnostics&) const = default;
};

struct ReweightedGeneration {
  std::vector<std::string> prompt;
  std::vector<TokenId> tokens;
  std::vector<StepDiagnostics> steps;
};

/// Greedy decoding with fact-anchored re-weighting of the generating row's
/// attention. Each step scores the episode so far (including the greedy
/// candidate), retrieves evidence for the query, runs the graph layer, and
/// re-decodes the row with the resulting plan.
ReweightedGeneration generate_reweighted(const ModelParams& params, const Vocabulary& vocab,
                                         std::span<const TokenId> prompt, const FactStore& store,
                                         const GatParams& gat, const ReweightPolicy& policy,
                                         std::size_t max_new_tokens,
                                         const EntailmentModel* entailment = nullptr);

nlohmann::ordered_json diagnostics_to_json(const StepDiagnostics& step);
StepDiagnostics diagnostics_from_json(const nlohmann::json& j);

}  // namespace cgan
