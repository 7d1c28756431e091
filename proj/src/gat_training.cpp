#include "cgan/gat_training.hpp"

#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "cgan/attribution.hpp"
#include "cgan/rng.hpp"

namespace cgan {

namespace {

Tensor as_column(const Tensor& t) {
  return Tensor({t.size(), 1}, std::vector<double>(t.values().begin(), t.values().end()));
}

ValueId leaf(Record& rec, Tensor value, bool trainable) {
  return trainable ? rec.input(std::move(value)) : rec.constant(std::move(value));
}

Tensor drop_features(const Tensor& x, const DropoutPlan& plan, std::uint64_t example) {
  Tensor out = x;
  const double keep = 1.0 / (1.0 - plan.rate);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = counter_uniform({plan.seed, plan.step, example, i});
    out[i] = u < plan.rate ? 0.0 : out[i] * keep;
  }
  return out;
}

}  // namespace

GatNodes bind_gat(Record& rec, const GatParams& params, bool trainable) {
  params.validate();
  GatNodes g;
  for (const Tensor& w : params.w) g.ordered.push_back(g.w.emplace_back(leaf(rec, w, trainable)));
  for (const Tensor& a : params.a) {
    g.ordered.push_back(g.a.emplace_back(leaf(rec, as_column(a), trainable)));
  }
  g.readout = leaf(rec, as_column(params.readout), trainable);
  g.ordered.push_back(g.readout);
  return g;
}

std::vector<Tensor*> gat_tensors(GatParams& params) {
  std::vector<Tensor*> out;
  for (Tensor& w : params.w) out.push_back(&w);
  for (Tensor& a : params.a) out.push_back(&a);
  out.push_back(&params.readout);
  return out;
}

ValueId build_gat(Record& rec, const GatNodes& g, const GatParams& params, ValueId features,
                  std::span<const GatEdge> edges) {
  const Tensor& x = rec.value(features);
  if (x.rank() != 2 || x.shape()[1] != params.in_features) {
    throw ShapeError("gat: node features are " + to_string(x.shape()) + " but the layer expects " +
                     std::to_string(params.in_features) + " features per node");
  }
  const std::size_t nodes = x.shape()[0];
  const std::size_t hid = params.hidden;
  std::vector<std::set<std::size_t>> in(nodes);
  for (std::size_t v = 0; v < nodes; ++v) in[v].insert(v);
  for (const auto& [src, dst] : edges) {
    if (src >= nodes || dst >= nodes) throw std::out_of_range("gat: edge refers to a missing node");
    in[dst].insert(src);
  }

  std::optional<ValueId> total;
  for (std::size_t h = 0; h < params.num_heads; ++h) {
    const ValueId proj = rec.matmul(features, g.w[h]);
    const ValueId recv = rec.matmul(proj, rec.slice(g.a[h], 0, hid, 0, 1));
    const ValueId send = rec.matmul(proj, rec.slice(g.a[h], hid, 2 * hid, 0, 1));
    std::vector<ValueId> rows;
    for (std::size_t v = 0; v < nodes; ++v) {
      const std::vector<std::size_t> nb(in[v].begin(), in[v].end());
      const ValueId z = rec.add(rec.embedding(recv, std::vector<std::size_t>(nb.size(), v)),
                                rec.embedding(send, nb));
      // LeakyReLU(z) = relu(z) - slope * relu(-z)
      const ValueId e = rec.add(rec.relu(z), rec.scale(rec.relu(rec.scale(z, -1.0)), -params.leaky_slope));
      const ValueId c = rec.softmax(rec.transpose(e));
      rows.push_back(rec.matmul(c, rec.embedding(proj, nb)));
    }
    const ValueId head = rows.size() == 1 ? rows.front() : rec.concat_rows(rows);
    total = total ? rec.add(*total, head) : head;
  }
  const ValueId mean = rec.scale(*total, 1.0 / static_cast<double>(params.num_heads));
  return rec.sigmoid(rec.matmul(mean, g.readout));
}

std::vector<GatExample> collect_gat_examples(const ModelParams& params, const Vocabulary& vocab,
                                             const Episode& episode, const FactStore& store,
                                             const ReweightPolicy& policy,
                                             const EntailmentModel* entailment) {
  const std::size_t n = episode.target.begin;
  if (n == 0 || episode.target.end != episode.tokens.size() || episode.target.empty()) {
    throw std::invalid_argument("collect_gat_examples: episode needs a prompt followed by its target");
  }
  check_tokens(params.config, episode.tokens);
  const LexicalEntailment lexical(policy.entailment, policy.f_min);
  const EntailmentModel& model = entailment ? *entailment : lexical;
  const std::span<const TokenId> tokens(episode.tokens);
  const EvidenceSet evidence = retrieve_evidence(vocab, tokens.first(n), store, policy);

  std::vector<AttributionRow> gold_rows;
  for (std::size_t i = 0; i < episode.target.size(); ++i) {
    gold_rows.push_back(integrated_gradients(params, tokens, n, i, policy.ig));
  }

  std::vector<GatExample> out;
  for (std::size_t t = 0; t < episode.target.size(); ++t) {
    std::vector<TokenId> seq(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n + t));
    const ForwardResult base = forward(params, seq);
    const auto candidate = static_cast<TokenId>(argmax(base.logits.row(seq.size() - 1)));
    std::vector<TokenId> tentative = seq;
    tentative.push_back(candidate);
    std::vector<AttributionRow> rows(gold_rows.begin(), gold_rows.begin() + static_cast<std::ptrdiff_t>(t));
    rows.push_back(candidate == tokens[n + t] ? gold_rows[t]
                                              : integrated_gradients(params, tentative, n, t, policy.ig));
    StepGraph graph = build_step_graph(params, vocab, tentative, n, rows, base.trace, policy, evidence, model);
    if (graph.any_flag) out.push_back(GatExample{std::move(seq), tokens[n + t], std::move(graph)});
  }
  return out;
}

double gat_batch_loss(const ModelParams& model, const GatParams& gat,
                      std::span<const GatExample> batch, const ReweightPolicy& policy,
                      const std::optional<DropoutPlan>& dropout, std::vector<Tensor>* grads) {
  if (batch.empty()) throw std::invalid_argument("gat_batch_loss: empty batch");
  Record rec;
  const GatNodes g = bind_gat(rec, gat, grads != nullptr);
  const ParamNodes p = bind_params(rec, model, false);

  std::optional<ValueId> total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const GatExample& ex = batch[b];
    const StepGraph& graph = ex.graph;
    const std::size_t len = ex.context.size();
    if (!graph.any_flag || graph.keys != len) {
      throw std::invalid_argument("gat_batch_loss: example graph does not match its context");
    }
    const Tensor features = dropout && dropout->rate > 0.0 ? drop_features(graph.features, *dropout, b)
                                                           : graph.features;
    const ValueId scores = build_gat(rec, g, gat, rec.constant(features), graph.edges);
    const std::size_t nodes = graph.features.shape()[0];

    // ln s per key, following make_plan; clamped entries carry no gradient.
    std::vector<ValueId> log_s;
    for (std::size_t k = 0; k < len; ++k) {
      if (!graph.key_flags.low[k]) {
        log_s.push_back(rec.constant(Tensor({1, 1})));
        continue;
      }
      const double f = graph.key_f[k];
      const double gat_k = k < nodes ? rec.value(scores).at(k, 0) : 1.0;
      const double raw = f * gat_k;
      if (k < nodes && raw > policy.s_floor && raw < 1.0) {
        log_s.push_back(rec.log(rec.scale(rec.slice(scores, k, k + 1, 0, 1), f)));
      } else {
        const double s = std::min(1.0, std::max(policy.s_floor, raw));
        log_s.push_back(rec.constant(Tensor({1, 1}, {std::log(s)})));
      }
    }
    const ValueId row = log_s.size() == 1 ? log_s.front() : rec.concat_cols(log_s);
    ValueId matrix = row;
    if (len > 1) {
      const ValueId parts[] = {rec.constant(Tensor({len - 1, len})), row};
      matrix = rec.concat_rows(parts);
    }

    const std::vector<std::size_t> ids(ex.context.begin(), ex.context.end());
    const ValueId emb = rec.embedding(p.token_embedding, ids);
    ForwardOptions fo;
    fo.last_row_only = true;
    fo.tape_bias = TapeBias{0, matrix, policy.all_layers};
    const ForwardNodes f = build_forward(rec, p, model.config, emb, std::span(&len, 1), fo);
    const ValueId ce = rec.cross_entropy(f.logits, {ex.target}, {1.0});
    total = total ? rec.add(*total, ce) : ce;
  }
  const ValueId loss = rec.scale(*total, 1.0 / static_cast<double>(batch.size()));
  const double value = rec.value(loss).item();
  if (grads) {
    const std::vector<Tensor> all = rec.backward(loss);
    GatParams shapes = gat;
    const std::vector<Tensor*> targets = gat_tensors(shapes);
    grads->clear();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      grads->emplace_back(targets[i]->shape(),
                          std::vector<double>(all[i].values().begin(), all[i].values().end()));
    }
  }
  return value;
}

GatTrainResult train_gat(const ModelParams& model, GatParams gat, std::span<const GatExample> examples,
                         const ReweightPolicy& policy, const GatTrainSpec& spec,
                         const std::function<void(std::size_t, double)>& on_step) {
  if (spec.batch_size == 0) throw std::invalid_argument("train_gat: batch_size must be >= 1");
  if (!(spec.learning_rate > 0.0)) throw std::invalid_argument("train_gat: learning_rate must be positive");
  GatTrainResult result;
  result.examples = examples.size();
  if (examples.empty()) {
    result.params = std::move(gat);
    return result;
  }
  result.initial_loss = gat_batch_loss(model, gat, examples, policy);

  std::mt19937_64 sampler(derive_seed(spec.seed, "gat-batches"));
  std::uniform_int_distribution<std::size_t> pick(0, examples.size() - 1);
  const std::uint64_t dropout_seed = derive_seed(spec.seed, "gat-dropout");
  const std::vector<Tensor*> weights = gat_tensors(gat);
  std::vector<Tensor> m1, m2;
  for (const Tensor* w : weights) {
    m1.emplace_back(w->shape());
    m2.emplace_back(w->shape());
  }

  std::vector<GatExample> batch;
  std::vector<Tensor> grads;
  for (std::size_t step = 0; step < spec.max_steps; ++step) {
    batch.clear();
    for (std::size_t b = 0; b < spec.batch_size; ++b) batch.push_back(examples[pick(sampler)]);
    const double loss =
        gat_batch_loss(model, gat, batch, policy, DropoutPlan{dropout_seed, step, gat.dropout}, &grads);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged(step, "graph layer training diverged at step " + std::to_string(step));
    }
    const double t = static_cast<double>(step + 1);
    const double bias1 = 1.0 - std::pow(spec.beta1, t);
    const double bias2 = 1.0 - std::pow(spec.beta2, t);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      Tensor& w = *weights[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = grads[i][j];
        m1[i][j] = spec.beta1 * m1[i][j] + (1.0 - spec.beta1) * gj;
        m2[i][j] = spec.beta2 * m2[i][j] + (1.0 - spec.beta2) * gj * gj;
        w[j] -= spec.learning_rate * (m1[i][j] / bias1) / (std::sqrt(m2[i][j] / bias2) + spec.epsilon);
      }
    }
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  result.final_loss = gat_batch_loss(model, gat, examples, policy);
  result.params = std::move(gat);
  return result;
}

}  // namespace cgan
