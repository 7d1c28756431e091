#include "cgan/reweighting.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "cgan/checkpoint.hpp"
#include "cgan/rng.hpp"

namespace cgan {

GatParams GatParams::init(std::size_t in_features, std::size_t hidden, std::size_t num_heads,
                          std::uint64_t seed, double leaky_slope, double dropout) {
  if (in_features == 0 || hidden == 0 || num_heads == 0) {
    throw std::invalid_argument("GatParams: in_features, hidden and num_heads must be >= 1");
  }
  GatParams p;
  p.in_features = in_features;
  p.hidden = hidden;
  p.num_heads = num_heads;
  p.leaky_slope = leaky_slope;
  p.dropout = dropout;
  p.seed = seed;
  std::mt19937_64 gen(derive_seed(seed, "gat"));
  auto glorot = [&](Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = dist(gen);
    return t;
  };
  for (std::size_t h = 0; h < num_heads; ++h) {
    p.w.push_back(glorot({in_features, hidden}, in_features, hidden));
    p.a.push_back(glorot({2 * hidden}, 2 * hidden, 1));
  }
  p.readout = glorot({hidden}, hidden, 1);
  p.validate();
  return p;
}

void GatParams::validate() const {
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) {
    throw std::invalid_argument("GatParams: leaky_slope must lie in (0, 1)");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw std::invalid_argument("GatParams: dropout must lie in [0, 1)");
  }
  if (num_heads == 0 || w.size() != num_heads || a.size() != num_heads) {
    throw std::invalid_argument("GatParams: expected one W and one a per head");
  }
  for (std::size_t h = 0; h < num_heads; ++h) {
    require_shape("GatParams W", Shape{in_features, hidden}, w[h].shape());
    require_shape("GatParams a", Shape{2 * hidden}, a[h].shape());
  }
  require_shape("GatParams readout", Shape{hidden}, readout.shape());
}

GatResult gat_forward(const Tensor& features, std::span<const GatEdge> edges,
                      const GatParams& params) {
  params.validate();
  if (features.rank() != 2 || features.shape()[1] != params.in_features) {
    throw ShapeError("gat: node features are " + to_string(features.shape()) + " but the layer expects " +
                     std::to_string(params.in_features) + " features per node");
  }
  const std::size_t nodes = features.shape()[0];
  const std::size_t hid = params.hidden;

  GatResult out;
  std::vector<std::set<std::size_t>> in(nodes);
  for (std::size_t v = 0; v < nodes; ++v) in[v].insert(v);
  for (const auto& [src, dst] : edges) {
    if (src >= nodes || dst >= nodes) throw std::out_of_range("gat: edge refers to a missing node");
    in[dst].insert(src);
  }
  for (const auto& s : in) out.neighbours.emplace_back(s.begin(), s.end());

  std::vector<double> mean_hidden(nodes * hid, 0.0);
  for (std::size_t h = 0; h < params.num_heads; ++h) {
    // Projected features W x for every node.
    std::vector<double> proj(nodes * hid, 0.0);
    for (std::size_t v = 0; v < nodes; ++v) {
      auto x = features.row(v);
      for (std::size_t f = 0; f < params.in_features; ++f) {
        const double xf = x[f];
        if (xf == 0.0) continue;
        for (std::size_t c = 0; c < hid; ++c) proj[v * hid + c] += xf * params.w[h].at(f, c);
      }
    }
    // a = [a_recv ; a_send]: the pair score splits into two dot products.
    std::vector<double> recv(nodes, 0.0), send(nodes, 0.0);
    for (std::size_t v = 0; v < nodes; ++v) {
      for (std::size_t c = 0; c < hid; ++c) {
        recv[v] += params.a[h][c] * proj[v * hid + c];
        send[v] += params.a[h][hid + c] * proj[v * hid + c];
      }
    }
    auto& head_coeffs = out.coefficients.emplace_back(nodes);
    for (std::size_t v = 0; v < nodes; ++v) {
      const auto& nb = out.neighbours[v];
      std::vector<double> e(nb.size());
      for (std::size_t k = 0; k < nb.size(); ++k) {
        const double z = recv[v] + send[nb[k]];
        e[k] = z > 0.0 ? z : params.leaky_slope * z;
      }
      const double mx = *std::max_element(e.begin(), e.end());
      double total = 0.0;
      for (double& x : e) total += (x = std::exp(x - mx));
      for (double& x : e) x /= total;
      for (std::size_t k = 0; k < nb.size(); ++k) {
        for (std::size_t c = 0; c < hid; ++c) mean_hidden[v * hid + c] += e[k] * proj[nb[k] * hid + c];
      }
      head_coeffs[v] = std::move(e);
    }
  }
  for (std::size_t v = 0; v < nodes; ++v) {
    double z = 0.0;
    for (std::size_t c = 0; c < hid; ++c) {
      z += params.readout[c] * mean_hidden[v * hid + c] / static_cast<double>(params.num_heads);
    }
    out.scores.push_back(1.0 / (1.0 + std::exp(-z)));
  }
  return out;
}

std::vector<double> gat_scores(const Tensor& features, std::span<const GatEdge> edges,
                               const GatParams& params) {
  return gat_forward(features, edges, params).scores;
}

nlohmann::ordered_json gat_to_json(const GatParams& p) {
  nlohmann::ordered_json j;
  j["in_features"] = p.in_features;
  j["hidden"] = p.hidden;
  j["num_heads"] = p.num_heads;
  j["leaky_slope"] = p.leaky_slope;
  j["dropout"] = p.dropout;
  j["seed"] = p.seed;
  auto w = nlohmann::ordered_json::array();
  auto a = nlohmann::ordered_json::array();
  for (std::size_t h = 0; h < p.num_heads; ++h) {
    w.push_back(tensor_to_json(p.w[h]));
    a.push_back(tensor_to_json(p.a[h]));
  }
  j["w"] = std::move(w);
  j["a"] = std::move(a);
  j["readout"] = tensor_to_json(p.readout);
  return j;
}

GatParams gat_from_json(const nlohmann::json& j) {
  GatParams p;
  p.in_features = j.at("in_features").get<std::size_t>();
  p.hidden = j.at("hidden").get<std::size_t>();
  p.num_heads = j.at("num_heads").get<std::size_t>();
  p.leaky_slope = j.at("leaky_slope").get<double>();
  p.dropout = j.at("dropout").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& t : j.at("w")) p.w.push_back(tensor_from_json(t));
  for (const auto& t : j.at("a")) p.a.push_back(tensor_from_json(t));
  p.readout = tensor_from_json(j.at("readout"));
  p.validate();
  return p;
}

NodeFlags flags_from_ccs(const CcsVector& ccs) {
  NodeFlags flags;
  flags.low = ccs.low;
  flags.ccs = ccs.normalized;
  return flags;
}

NodeFlags flag_inputs(const CcsVector& ccs, const Tensor& weights, std::size_t top_k) {
  if (weights.rank() != 2 || weights.shape()[0] != ccs.size()) {
    throw ShapeError("flag_inputs: weights must have one row per scored output");
  }
  const std::size_t n = weights.shape()[1];
  NodeFlags flags;
  flags.low.assign(n, false);
  flags.ccs.assign(n, 1.0);
  for (std::size_t i = 0; i < ccs.size(); ++i) {
    if (!ccs.low[i]) continue;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Largest |weight| first; earlier positions win ties.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(weights.at(i, a)) > std::abs(weights.at(i, b));
    });
    for (std::size_t r = 0; r < std::min(top_k, n); ++r) {
      const std::size_t j = order[r];
      flags.low[j] = true;
      flags.ccs[j] = std::min(flags.ccs[j], ccs.normalized[i]);
    }
  }
  return flags;
}

std::vector<double> ReweightPlan::factors() const {
  std::vector<double> s;
  s.reserve(entries.size());
  for (const auto& e : entries) s.push_back(e.s);
  return s;
}

std::vector<std::size_t> ReweightPlan::suppressed() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (entries[k].s < 1.0) out.push_back(k);
  }
  return out;
}

bool ReweightPlan::is_identity() const {
  return std::all_of(entries.begin(), entries.end(), [](const PlanEntry& e) { return e.s == 1.0; });
}

ReweightPlan ReweightPlan::identity(std::size_t keys) {
  ReweightPlan plan;
  plan.entries.assign(keys, PlanEntry{});
  return plan;
}

ReweightPlan make_plan(const NodeFlags& flags, std::span<const double> f,
                       std::span<const double> gat, double s_floor) {
  const std::size_t n = flags.low.size();
  if (flags.ccs.size() != n || f.size() != n || gat.size() != n) {
    throw std::invalid_argument("make_plan: scores, factors and graph scores must cover the same nodes");
  }
  if (!(s_floor > 0.0 && s_floor <= 1.0)) {
    throw std::invalid_argument("make_plan: s_floor must lie in (0, 1]");
  }
  ReweightPlan plan;
  for (std::size_t k = 0; k < n; ++k) {
    PlanEntry e;
    e.flagged = flags.low[k];
    e.ccs = flags.ccs[k];
    e.f = f[k];
    e.gat = gat[k];
    if (e.flagged) e.s = std::min(1.0, std::max(s_floor, f[k] * gat[k]));
    plan.entries.push_back(e);
  }
  return plan;
}

std::vector<double> reweight_attention(std::span<const double> logits, std::span<const double> s) {
  if (logits.size() != s.size()) {
    throw std::invalid_argument("reweight_attention: plan covers " + std::to_string(s.size()) +
                                " keys but the row has " + std::to_string(logits.size()));
  }
  if (logits.empty()) throw std::invalid_argument("reweight_attention: empty row");
  std::vector<double> z(logits.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (!(s[k] > 0.0)) {
      throw std::invalid_argument("reweight_attention: suppression factor at key " +
                                  std::to_string(k) + " is not positive");
    }
    z[k] = logits[k] + std::log(s[k]);
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) total += (v = std::exp(v - mx));
  for (double& v : z) v /= total;
  return z;
}

Tensor gat_features(const ModelParams& params, std::span<const TokenId> tokens,
                    std::size_t num_inputs, std::span<const double> output_ccs,
                    std::span<const double> f) {
  const std::size_t nodes = tokens.size();
  const std::size_t d = params.config.embed_dim;
  if (num_inputs > nodes || output_ccs.size() != nodes - num_inputs || f.size() != nodes) {
    throw std::invalid_argument("gat_features: node counts disagree");
  }
  Tensor x({nodes, d + 2});
  for (std::size_t v = 0; v < nodes; ++v) {
    auto emb = params.token_embedding.row(tokens[v]);
    auto row = x.row(v);
    std::copy(emb.begin(), emb.end(), row.begin());
    row[d] = v < num_inputs ? 1.0 : output_ccs[v - num_inputs];
    row[d + 1] = f[v];
  }
  return x;
}

namespace {

double aggregated_ccs(const AttentionTrace& trace, std::size_t num_inputs, std::size_t output_index,
                      AggregationPolicy policy, std::span<const double> attributions) {
  const AlphaMatrix alpha =
      aggregate_attention(trace, num_inputs + output_index, 1, policy);  // row n + i - 1
  double s = 0.0;
  for (std::size_t j = 0; j < num_inputs; ++j) s += alpha.alpha.at(0, j) * std::abs(attributions[j]);
  return s;
}

}  // namespace

EvidenceSet retrieve_evidence(const Vocabulary& vocab, std::span<const TokenId> prompt,
                              const FactStore& store, const ReweightPolicy& policy) {
  const std::size_t n = prompt.size();
  const std::size_t window = policy.query_window == 0 ? n : std::min(policy.query_window, n);
  const std::vector<std::string> query = vocab.decode(prompt.last(window));
  return store.retrieve(query, policy.retrieval_k);
}

StepGraph build_step_graph(const ModelParams& params, const Vocabulary& vocab,
                           std::span<const TokenId> tokens, std::size_t num_inputs,
                           std::span<const AttributionRow> rows, const AttentionTrace& trace,
                           const ReweightPolicy& policy, const EvidenceSet& evidence,
                           const EntailmentModel& entailment) {
  const std::size_t n = num_inputs;
  const std::size_t covered = rows.size();
  if (covered == 0 || n + covered > tokens.size()) {
    throw std::invalid_argument("build_step_graph: need 1.." + std::to_string(tokens.size() - n) +
                                " attribution rows");
  }
  const std::size_t keys = tokens.size() - 1;  // the query row sees positions <= len - 2
  StepGraph g;
  g.keys = keys;
  const AttributionMatrix attributions = AttributionMatrix::from_rows(
      std::vector<AttributionRow>(rows.begin(), rows.end()), n, policy.ig);
  const AlphaMatrix alpha = aggregate_attention(trace, n, covered, policy.aggregation);
  g.scores = ccs(alpha, attributions, policy.ccs);

  g.weights = Tensor({covered, n});
  for (std::size_t i = 0; i < covered; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      g.weights.at(i, j) = alpha.alpha.at(i, j) * attributions.scores.at(i, j);
    }
  }
  const NodeFlags input_flags = flag_inputs(g.scores, g.weights, policy.top_k);
  g.any_flag = std::any_of(input_flags.low.begin(), input_flags.low.end(), [](bool b) { return b; }) ||
               (policy.include_output_keys &&
                std::any_of(g.scores.low.begin(), g.scores.low.end(), [](bool b) { return b; }));
  if (!g.any_flag) return g;

  // Graph nodes: prompt tokens then the covered outputs.
  const std::span<const TokenId> node_tokens = tokens.first(n + covered);
  std::vector<double> f;
  for (std::size_t v = 0; v < node_tokens.size(); ++v) {
    f.push_back(entailment.factor(vocab.token(node_tokens[v]),
                                  v < n ? NodeRole::input : NodeRole::output, evidence));
  }
  for (std::size_t i = 0; i < covered; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (g.weights.at(i, j) != 0.0) g.edges.emplace_back(j, n + i);
    }
  }
  g.features = gat_features(params, node_tokens, n, g.scores.normalized, f);

  for (std::size_t k = 0; k < keys; ++k) {
    bool low = false;
    double score = 1.0;
    if (k < n) {
      low = input_flags.low[k];
      score = input_flags.ccs[k];
    } else if (policy.include_output_keys && k - n < covered) {
      low = g.scores.low[k - n];
      score = g.scores.normalized[k - n];
    }
    g.key_flags.low.push_back(low);
    g.key_flags.ccs.push_back(score);
    g.key_f.push_back(k < n + covered ? f[k] : 1.0);
  }
  return g;
}

std::vector<double> StepGraph::key_gat(std::span<const double> node_scores) const {
  std::vector<double> out(keys, 1.0);
  for (std::size_t k = 0; k < keys && k < node_scores.size(); ++k) out[k] = node_scores[k];
  return out;
}

ReweightedGeneration generate_reweighted(const ModelParams& params, const Vocabulary& vocab,
                                         std::span<const TokenId> prompt, const FactStore& store,
                                         const GatParams& gat, const ReweightPolicy& policy,
                                         std::size_t max_new_tokens,
                                         const EntailmentModel* entailment) {
  const ModelConfig& config = params.config;
  if (prompt.empty()) throw std::invalid_argument("generate_reweighted: empty prompt");
  if (prompt.size() + max_new_tokens > config.context_length) {
    throw std::invalid_argument("generate_reweighted: prompt of " + std::to_string(prompt.size()) +
                                " tokens plus " + std::to_string(max_new_tokens) +
                                " new tokens exceeds context_length " +
                                std::to_string(config.context_length));
  }
  check_tokens(config, prompt);
  if (vocab.size() != config.vocab_size) {
    throw std::invalid_argument("generate_reweighted: vocabulary does not match the model");
  }
  if (gat.in_features != config.embed_dim + 2) {
    throw std::invalid_argument("generate_reweighted: graph layer expects " +
                                std::to_string(gat.in_features) + " features, model provides " +
                                std::to_string(config.embed_dim + 2));
  }
  if (policy.refresh_every == 0) throw std::invalid_argument("refresh_every must be >= 1");
  const LexicalEntailment lexical(policy.entailment, policy.f_min);
  const EntailmentModel& model = entailment ? *entailment : lexical;

  const std::size_t n = prompt.size();
  ReweightedGeneration out;
  out.prompt = vocab.decode(prompt);

  const EvidenceSet evidence = retrieve_evidence(vocab, prompt, store, policy);

  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  // Attribution rows by output index, valid while the token they explain is
  // still the token at that index.
  std::map<std::size_t, std::pair<TokenId, AttributionRow>> cache;
  auto cached = [&](std::size_t i, TokenId token) -> const AttributionRow* {
    auto it = cache.find(i);
    return it != cache.end() && it->second.first == token ? &it->second.second : nullptr;
  };

  for (std::size_t t = 0; t < max_new_tokens; ++t) {
    const std::size_t q = n + t - 1;
    const ForwardResult base = forward(params, seq);
    const TokenId candidate = static_cast<TokenId>(argmax(base.logits.row(q)));
    std::vector<TokenId> tentative = seq;
    tentative.push_back(candidate);
    const bool refresh = t % policy.refresh_every == 0;

    if (refresh) {
      for (std::size_t i = 0; i <= t; ++i) {
        if (!cached(i, tentative[n + i])) {
          cache[i] = {tentative[n + i], integrated_gradients(params, tentative, n, i, policy.ig)};
        }
      }
    }
    std::size_t covered = 0;
    while (covered <= t && cached(covered, tentative[n + covered])) ++covered;

    StepDiagnostics diag;
    diag.step = t;
    diag.candidate = vocab.token(candidate);
    ReweightPlan plan = ReweightPlan::identity(q + 1);
    if (covered > 0) {
      std::vector<AttributionRow> rows;
      for (std::size_t i = 0; i < covered; ++i) rows.push_back(*cached(i, tentative[n + i]));
      const StepGraph graph =
          build_step_graph(params, vocab, tentative, n, rows, base.trace, policy, evidence, model);
      diag.ccs = graph.scores.normalized;
      if (graph.any_flag) {
        const std::vector<double> node_gat = gat_scores(graph.features, graph.edges, gat);
        plan = make_plan(graph.key_flags, graph.key_f, graph.key_gat(node_gat), policy.s_floor);
      }
    }

    TokenId token = candidate;
    const AttentionTrace* emitted_trace = &base.trace;
    std::optional<ForwardResult> biased;
    if (!plan.is_identity()) {
      AttentionBias bias;
      bias.query = q;
      bias.all_layers = policy.all_layers;
      for (double s : plan.factors()) bias.key_bias.push_back(std::log(s));
      biased = forward(params, seq, &bias);
      token = static_cast<TokenId>(argmax(biased->logits.row(q)));
      emitted_trace = &biased->trace;
    }

    seq.push_back(token);
    if (refresh && !cached(t, token)) {
      cache[t] = {token, integrated_gradients(params, seq, n, t, policy.ig)};
    }
    if (const AttributionRow* row = cached(t, token)) {
      diag.token_ccs = aggregated_ccs(*emitted_trace, n, t, policy.aggregation, row->inputs);
    }
    diag.plan = plan.factors();
    diag.suppressed = plan.suppressed();
    diag.token = vocab.token(token);
    out.steps.push_back(std::move(diag));
  }
  out.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(n), seq.end());
  return out;
}

nlohmann::ordered_json diagnostics_to_json(const StepDiagnostics& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["ccs"] = s.ccs;
  j["plan"] = s.plan;
  j["token"] = s.token;
  j["suppressed"] = s.suppressed;
  j["candidate"] = s.candidate;
  j["token_ccs"] = s.token_ccs ? nlohmann::ordered_json(*s.token_ccs) : nlohmann::ordered_json();
  return j;
}

StepDiagnostics diagnostics_from_json(const nlohmann::json& j) {
  StepDiagnostics s;
  s.step = j.at("step").get<std::size_t>();
  s.ccs = j.at("ccs").get<std::vector<double>>();
  s.plan = j.at("plan").get<std::vector<double>>();
  s.token = j.at("token").get<std::string>();
  s.suppressed = j.at("suppressed").get<std::vector<std::size_t>>();
  if (j.contains("candidate")) s.candidate = j.at("candidate").get<std::string>();
  if (j.contains("token_ccs") && !j.at("token_ccs").is_null()) {
    s.token_ccs = j.at("token_ccs").get<double>();
  }
  return s;
}

}  // namespace cgan
