#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgan/attribution.hpp"
#include "cgan/fact_store.hpp"
#include "cgan/model.hpp"
#include "json.hpp"

namespace cgan {

enum class AggregationPolicy {
  final_layer_mean_heads,
  all_layers_mean,
  /// Product of the head-averaged maps of every layer, last layer first. With
  /// one layer this is final_layer_mean_heads.
  rollout,
};

std::string to_string(AggregationPolicy policy);
AggregationPolicy aggregation_from_string(const std::string& name);

/// Aggregated attention from the row that generated each output token to the
/// prompt tokens (m x n), plus the same rows restricted to earlier outputs.
struct AlphaMatrix {
  Tensor alpha;          // m x n, unrenormalized
  Tensor output_alpha;   // m x m, entry (i, k) for k < i, zero elsewhere
  std::vector<double> input_mass;  // row sums of alpha
  AggregationPolicy policy = AggregationPolicy::final_layer_mean_heads;

  std::size_t outputs() const { return input_mass.size(); }
};

/// `traces[i]` is the trace of the forward pass that produced output i; its
/// row n + i - 1 is read. Any trace covering that row works, since causal
/// attention rows do not depend on later tokens.
AlphaMatrix aggregate_attention(std::span<const AttentionTrace> traces, std::size_t num_inputs,
                                AggregationPolicy policy);

/// Same, reading every output row from one trace of the full sequence.
AlphaMatrix aggregate_attention(const AttentionTrace& full_trace, std::size_t num_inputs,
                                std::size_t num_outputs, AggregationPolicy policy);

enum class CcsNorm { none, row_minmax };

std::string to_string(CcsNorm norm);
CcsNorm ccs_norm_from_string(const std::string& name);

struct CcsOptions {
  CcsNorm norm = CcsNorm::row_minmax;
  /// Outputs whose normalized score is strictly below this percentile of the
  /// episode's normalized scores are flagged. 0 flags nothing.
  double tau_percentile = 25.0;
  /// Divide each raw score by its row's input attention mass before
  /// normalizing.
  bool renormalize_by_input_mass = false;
};

struct CcsVector {
  std::vector<double> raw;         // sum_j alpha_ij |I_ij|
  std::vector<double> normalized;  // in [0, 1] under row_minmax
  std::vector<bool> low;
  double threshold = 0.0;

  std::size_t size() const { return raw.size(); }
};

/// Percentile with linear interpolation between closest ranks.
double percentile(std::span<const double> values, double p);

/// Min-max scaling to [0, 1]; a constant vector maps to all ones.
std::vector<double> minmax_normalize(std::span<const double> values);

/// Contribution score per output: sum over prompt tokens of aggregated
/// attention times attribution magnitude. Shapes must match.
CcsVector ccs(const Tensor& alpha, const Tensor& attributions, const CcsOptions& options = {},
              std::span<const double> input_mass = {});
CcsVector ccs(const AlphaMatrix& alpha, const AttributionMatrix& attributions,
              const CcsOptions& options = {});

struct GraphNode {
  std::size_t id = 0;
  std::string token;
  std::size_t position = 0;
  NodeRole role = NodeRole::input;
  std::optional<double> ccs;  // raw score, output nodes only
  std::optional<double> f;    // entailment factor once computed

  bool operator==(const GraphNode&) const = default;
};

struct GraphEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double alpha = 0.0;
  double ig = 0.0;
  double weight = 0.0;  // alpha * ig, signed

  bool operator==(const GraphEdge&) const = default;
};

/// Nodes are the prompt tokens (ids 0..n-1) followed by the generated tokens
/// (ids n..n+m-1); edges run from a token to a generated token it fed.
struct CausalGraph {
  std::vector<std::string> tokens_in;
  std::vector<std::string> tokens_out;
  AggregationPolicy policy = AggregationPolicy::final_layer_mean_heads;
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;

  std::size_t num_inputs() const { return tokens_in.size(); }
  std::size_t num_outputs() const { return tokens_out.size(); }

  bool operator==(const CausalGraph&) const = default;
};

struct GraphOptions {
  /// Edges with |weight| below this are left out; scores are unaffected.
  double prune_below = 0.0;
  /// Also add edges from earlier generated tokens.
  bool include_output_edges = false;
  CcsOptions ccs;
};

CausalGraph build_graph(const AlphaMatrix& alpha, const AttributionMatrix& attributions,
                        std::span<const std::string> tokens_in,
                        std::span<const std::string> tokens_out, const GraphOptions& options = {});

/// Graphviz digraph. Nodes in id order labelled token@position (outputs also
/// carry their score); edge pen width is proportional to |weight|.
std::string export_dot(const CausalGraph& graph);

inline constexpr int kGraphJsonVersion = 1;

nlohmann::ordered_json graph_to_json(const CausalGraph& graph);
CausalGraph graph_from_json(const nlohmann::json& j);
std::string export_json(const CausalGraph& graph);
CausalGraph import_json(const std::string& text);

}  // namespace cgan
