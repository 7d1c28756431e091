#include "cgan/causal_graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace cgan {

std::string to_string(AggregationPolicy policy) {
  switch (policy) {
    case AggregationPolicy::final_layer_mean_heads: return "final_layer_mean_heads";
    case AggregationPolicy::all_layers_mean: return "all_layers_mean";
    case AggregationPolicy::rollout: return "rollout";
  }
  return "unknown";
}

AggregationPolicy aggregation_from_string(const std::string& name) {
  for (auto p : {AggregationPolicy::final_layer_mean_heads, AggregationPolicy::all_layers_mean,
                 AggregationPolicy::rollout}) {
    if (to_string(p) == name) return p;
  }
  throw std::invalid_argument("unknown aggregation policy '" + name + "'");
}

std::string to_string(CcsNorm norm) { return norm == CcsNorm::none ? "none" : "row_minmax"; }

CcsNorm ccs_norm_from_string(const std::string& name) {
  if (name == "none") return CcsNorm::none;
  if (name == "row_minmax") return CcsNorm::row_minmax;
  throw std::invalid_argument("unknown CCS normalization '" + name + "'");
}

namespace {

// Head-averaged attention row `q` of one layer.
std::vector<double> mean_heads_row(const AttentionTrace& t, std::size_t layer, std::size_t q) {
  std::vector<double> row(t.seq_len, 0.0);
  for (std::size_t h = 0; h < t.num_heads; ++h) {
    auto src = t.at(layer, h).row(q);
    for (std::size_t k = 0; k < t.seq_len; ++k) row[k] += src[k];
  }
  for (double& v : row) v /= static_cast<double>(t.num_heads);
  return row;
}

std::vector<double> aggregated_row(const AttentionTrace& t, std::size_t q, AggregationPolicy policy) {
  const std::size_t last = t.num_layers - 1;
  switch (policy) {
    case AggregationPolicy::final_layer_mean_heads:
      return mean_heads_row(t, last, q);
    case AggregationPolicy::all_layers_mean: {
      std::vector<double> row(t.seq_len, 0.0);
      for (std::size_t l = 0; l < t.num_layers; ++l) {
        for (std::size_t h = 0; h < t.num_heads; ++h) {
          auto src = t.at(l, h).row(q);
          for (std::size_t k = 0; k < t.seq_len; ++k) row[k] += src[k];
        }
      }
      for (double& v : row) v /= static_cast<double>(t.num_layers * t.num_heads);
      return row;
    }
    case AggregationPolicy::rollout: {
      std::vector<double> v = mean_heads_row(t, last, q);
      for (std::size_t l = last; l-- > 0;) {
        std::vector<double> next(t.seq_len, 0.0);
        for (std::size_t r = 0; r < t.seq_len; ++r) {
          if (v[r] == 0.0) continue;
          const auto mixed = mean_heads_row(t, l, r);
          for (std::size_t k = 0; k < t.seq_len; ++k) next[k] += v[r] * mixed[k];
        }
        v = std::move(next);
      }
      return v;
    }
  }
  throw std::invalid_argument("unknown aggregation policy");
}

void fill_row(AlphaMatrix& out, std::size_t i, std::size_t n, const std::vector<double>& row) {
  double mass = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out.alpha.at(i, j) = row[j];
    mass += row[j];
  }
  out.input_mass[i] = mass;
  for (std::size_t k = 0; k < i; ++k) out.output_alpha.at(i, k) = row[n + k];
}

AlphaMatrix empty_alpha(std::size_t m, std::size_t n, AggregationPolicy policy) {
  AlphaMatrix out;
  out.alpha = Tensor({m, n});
  out.output_alpha = Tensor({m, m});
  out.input_mass.assign(m, 0.0);
  out.policy = policy;
  return out;
}

void check_trace(const AttentionTrace& t, std::size_t q) {
  if (t.num_layers == 0 || t.num_heads == 0 || t.maps.size() != t.num_layers * t.num_heads) {
    throw std::invalid_argument("aggregate_attention: malformed trace");
  }
  if (q >= t.seq_len) {
    throw std::invalid_argument("aggregate_attention: trace of length " +
                                std::to_string(t.seq_len) + " has no row " + std::to_string(q));
  }
}

}  // namespace

AlphaMatrix aggregate_attention(std::span<const AttentionTrace> traces, std::size_t num_inputs,
                                AggregationPolicy policy) {
  if (num_inputs == 0) throw std::invalid_argument("aggregate_attention: no input tokens");
  AlphaMatrix out = empty_alpha(traces.size(), num_inputs, policy);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const std::size_t q = num_inputs + i - 1;
    check_trace(traces[i], q);
    fill_row(out, i, num_inputs, aggregated_row(traces[i], q, policy));
  }
  return out;
}

AlphaMatrix aggregate_attention(const AttentionTrace& full_trace, std::size_t num_inputs,
                                std::size_t num_outputs, AggregationPolicy policy) {
  if (num_inputs == 0) throw std::invalid_argument("aggregate_attention: no input tokens");
  AlphaMatrix out = empty_alpha(num_outputs, num_inputs, policy);
  for (std::size_t i = 0; i < num_outputs; ++i) {
    const std::size_t q = num_inputs + i - 1;
    check_trace(full_trace, q);
    fill_row(out, i, num_inputs, aggregated_row(full_trace, q, policy));
  }
  return out;
}

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile must lie in [0, 100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> minmax_normalize(std::span<const double> values) {
  if (values.empty()) return {};
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo;
  const double range = *hi - *lo;
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(range > 0.0 ? (v - min) / range : 1.0);
  return out;
}

CcsVector ccs(const Tensor& alpha, const Tensor& attributions, const CcsOptions& options,
              std::span<const double> input_mass) {
  require_shape("ccs", alpha.shape(), attributions.shape());
  if (alpha.rank() != 2) throw ShapeError("ccs: expected (outputs x inputs) matrices");
  if (!(options.tau_percentile >= 0.0 && options.tau_percentile <= 100.0)) {
    throw std::invalid_argument("ccs: tau_percentile must lie in [0, 100]");
  }
  const std::size_t m = alpha.shape()[0];
  const std::size_t n = alpha.shape()[1];
  if (options.renormalize_by_input_mass && input_mass.size() != m) {
    throw std::invalid_argument("ccs: renormalizing needs one input mass per output");
  }
  CcsVector out;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += alpha.at(i, j) * std::abs(attributions.at(i, j));
    out.raw.push_back(s);
  }
  std::vector<double> basis = out.raw;
  if (options.renormalize_by_input_mass) {
    for (std::size_t i = 0; i < m; ++i) {
      if (input_mass[i] > 0.0) basis[i] /= input_mass[i];
    }
  }
  out.normalized = options.norm == CcsNorm::row_minmax ? minmax_normalize(basis) : basis;
  out.low.assign(m, false);
  if (m > 0) {
    out.threshold = percentile(out.normalized, options.tau_percentile);
    for (std::size_t i = 0; i < m; ++i) out.low[i] = out.normalized[i] < out.threshold;
  }
  return out;
}

CcsVector ccs(const AlphaMatrix& alpha, const AttributionMatrix& attributions,
              const CcsOptions& options) {
  return ccs(alpha.alpha, attributions.scores, options, alpha.input_mass);
}

CausalGraph build_graph(const AlphaMatrix& alpha, const AttributionMatrix& attributions,
                        std::span<const std::string> tokens_in,
                        std::span<const std::string> tokens_out, const GraphOptions& options) {
  const std::size_t n = tokens_in.size();
  const std::size_t m = tokens_out.size();
  require_shape("build_graph alpha", Shape{m, n}, alpha.alpha.shape());
  require_shape("build_graph attributions", Shape{m, n}, attributions.scores.shape());
  if (options.prune_below < 0.0 || std::isnan(options.prune_below)) {
    throw std::invalid_argument("build_graph: prune_below must be >= 0");
  }
  if (options.include_output_edges && attributions.output_scores.size() != m) {
    throw std::invalid_argument("build_graph: output edges need attributions to earlier outputs");
  }
  const CcsVector scores = ccs(alpha, attributions, options.ccs);

  CausalGraph g;
  g.tokens_in.assign(tokens_in.begin(), tokens_in.end());
  g.tokens_out.assign(tokens_out.begin(), tokens_out.end());
  g.policy = alpha.policy;
  for (std::size_t j = 0; j < n; ++j) {
    g.nodes.push_back(GraphNode{j, tokens_in[j], j, NodeRole::input, std::nullopt, std::nullopt});
  }
  for (std::size_t i = 0; i < m; ++i) {
    g.nodes.push_back(
        GraphNode{n + i, tokens_out[i], n + i, NodeRole::output, scores.raw[i], std::nullopt});
  }
  auto add_edge = [&](std::size_t src, std::size_t dst, double a, double ig) {
    const double w = a * ig;
    if (std::abs(w) < options.prune_below) return;
    g.edges.push_back(GraphEdge{src, dst, a, ig, w});
  };
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      add_edge(j, n + i, alpha.alpha.at(i, j), attributions.scores.at(i, j));
    }
    if (options.include_output_edges) {
      const auto& prior = attributions.output_scores[i];
      if (prior.size() != i) {
        throw std::invalid_argument("build_graph: output attribution row " + std::to_string(i) +
                                    " has the wrong length");
      }
      for (std::size_t k = 0; k < i; ++k) add_edge(n + k, n + i, alpha.output_alpha.at(i, k), prior[k]);
    }
  }
  return g;
}

namespace {

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string role_name(NodeRole role) { return role == NodeRole::input ? "input" : "output"; }

NodeRole role_from_name(const std::string& name) {
  if (name == "input") return NodeRole::input;
  if (name == "output") return NodeRole::output;
  throw std::invalid_argument("unknown node role '" + name + "'");
}

}  // namespace

std::string export_dot(const CausalGraph& g) {
  constexpr double kMaxPenWidth = 5.0;
  double max_abs = 0.0;
  for (const auto& e : g.edges) max_abs = std::max(max_abs, std::abs(e.weight));

  std::string out = "digraph causal_graph {\n  rankdir=LR;\n";
  for (const auto& node : g.nodes) {
    std::string label = dot_escape(node.token) + "@" + std::to_string(node.position);
    if (node.ccs) label += "\\nccs=" + fixed6(*node.ccs);
    if (node.f) label += "\\nf=" + fixed6(*node.f);
    out += "  n" + std::to_string(node.id) + " [label=\"" + label + "\", shape=" +
           (node.role == NodeRole::input ? "box" : "ellipse") + "];\n";
  }
  for (const auto& e : g.edges) {
    const double width = max_abs > 0.0 ? kMaxPenWidth * std::abs(e.weight) / max_abs : 0.0;
    out += "  n" + std::to_string(e.src) + " -> n" + std::to_string(e.dst) + " [penwidth=" +
           fixed6(width) + ", color=\"" + (e.weight < 0.0 ? "red" : "black") + "\", label=\"" +
           fixed6(e.weight) + "\"];\n";
  }
  out += "}\n";
  return out;
}

nlohmann::ordered_json graph_to_json(const CausalGraph& g) {
  nlohmann::ordered_json j;
  j["version"] = kGraphJsonVersion;
  j["tokens_in"] = g.tokens_in;
  j["tokens_out"] = g.tokens_out;
  j["policy"] = to_string(g.policy);
  auto nodes = nlohmann::ordered_json::array();
  for (const auto& node : g.nodes) {
    nlohmann::ordered_json jn;
    jn["id"] = node.id;
    jn["token"] = node.token;
    jn["pos"] = node.position;
    jn["role"] = role_name(node.role);
    if (node.ccs) jn["ccs"] = *node.ccs;
    if (node.f) jn["f"] = *node.f;
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = std::move(nodes);
  auto edges = nlohmann::ordered_json::array();
  for (const auto& e : g.edges) {
    nlohmann::ordered_json je;
    je["src"] = e.src;
    je["dst"] = e.dst;
    je["alpha"] = e.alpha;
    je["ig"] = e.ig;
    je["weight"] = e.weight;
    edges.push_back(std::move(je));
  }
  j["edges"] = std::move(edges);
  return j;
}

namespace {

void require_keys(const nlohmann::json& j, std::initializer_list<const char*> required,
                  std::initializer_list<const char*> optional, const std::string& where) {
  for (const char* k : required) {
    if (!j.contains(k)) throw std::invalid_argument(where + " is missing '" + k + "'");
  }
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : required) known |= key == k;
    for (const char* k : optional) known |= key == k;
    if (!known) throw std::invalid_argument(where + " has unknown key '" + key + "'");
  }
}

}  // namespace

CausalGraph graph_from_json(const nlohmann::json& j) {
  require_keys(j, {"version", "tokens_in", "tokens_out", "policy", "nodes", "edges"}, {}, "graph");
  if (j.at("version").get<int>() != kGraphJsonVersion) {
    throw std::invalid_argument("unsupported graph version " + j.at("version").dump());
  }
  CausalGraph g;
  g.tokens_in = j.at("tokens_in").get<std::vector<std::string>>();
  g.tokens_out = j.at("tokens_out").get<std::vector<std::string>>();
  g.policy = aggregation_from_string(j.at("policy").get<std::string>());
  for (const auto& jn : j.at("nodes")) {
    require_keys(jn, {"id", "token", "pos", "role"}, {"ccs", "f"}, "graph node");
    GraphNode node;
    node.id = jn.at("id").get<std::size_t>();
    node.token = jn.at("token").get<std::string>();
    node.position = jn.at("pos").get<std::size_t>();
    node.role = role_from_name(jn.at("role").get<std::string>());
    if (jn.contains("ccs")) node.ccs = jn.at("ccs").get<double>();
    if (jn.contains("f")) node.f = jn.at("f").get<double>();
    g.nodes.push_back(std::move(node));
  }
  for (const auto& je : j.at("edges")) {
    require_keys(je, {"src", "dst", "alpha", "ig", "weight"}, {}, "graph edge");
    g.edges.push_back(GraphEdge{je.at("src").get<std::size_t>(), je.at("dst").get<std::size_t>(),
                                je.at("alpha").get<double>(), je.at("ig").get<double>(),
                                je.at("weight").get<double>()});
  }
  if (g.nodes.size() != g.tokens_in.size() + g.tokens_out.size()) {
    throw std::invalid_argument("graph node count does not match its token lists");
  }
  for (const auto& e : g.edges) {
    if (e.src >= g.nodes.size() || e.dst >= g.nodes.size()) {
      throw std::invalid_argument("graph edge refers to a missing node");
    }
  }
  return g;
}

std::string export_json(const CausalGraph& graph) { return graph_to_json(graph).dump(2) + "\n"; }

CausalGraph import_json(const std::string& text) {
  return graph_from_json(nlohmann::json::parse(text));
}

}  // namespace cgan
