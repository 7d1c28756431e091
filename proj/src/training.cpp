#include "cgan/training.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "cgan/errors.hpp"
#include "cgan/rng.hpp"

namespace cgan {

void TrainSpec::require_valid() const {
  std::vector<std::string> errors;
  if (!(learning_rate > 0.0)) errors.push_back("learning_rate: must be > 0");
  if (batch_size == 0) errors.push_back("batch_size: must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) errors.push_back("beta1: must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) errors.push_back("beta2: must lie in [0, 1)");
  if (!(epsilon > 0.0)) errors.push_back("epsilon: must be > 0");
  if (weight_decay < 0.0) errors.push_back("weight_decay: must be >= 0");
  if (grad_clip < 0.0) errors.push_back("grad_clip: must be >= 0");
  if (causal_reg_weight < 0.0) errors.push_back("causal_reg_weight: must be >= 0");
  if (errors.empty()) return;
  std::string msg = "invalid train spec:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::vector<std::size_t> penalized_rows(const Episode& episode, RegularizerScope scope) {
  const Span t = episode.target;
  if (t.empty() || t.begin == 0) return {};
  if (scope == RegularizerScope::answer_token) return {t.end - 2};
  std::vector<std::size_t> rows;
  for (std::size_t q = t.begin - 1; q + 1 < t.end; ++q) rows.push_back(q);
  return rows;
}

namespace {

// Earlier target tokens count as outside too: attending to them is not
// support from the evidence.
bool outside_evidence(const Episode& e, std::size_t key) { return !e.evidence.contains(key); }

// Per-sequence weights for the penalty, already divided by heads and the
// number of penalized rows in the batch.
Tensor penalty_mask(const Episode& e, RegularizerScope scope, double weight) {
  const std::size_t len = e.tokens.size();
  Tensor mask({len, len});
  for (std::size_t q : penalized_rows(e, scope)) {
    for (std::size_t k = 0; k <= q; ++k) {
      if (outside_evidence(e, k)) mask.at(q, k) = weight;
    }
  }
  return mask;
}

void validate_episode(const ModelConfig& config, const Episode& e) {
  if (e.tokens.size() < 2) throw std::invalid_argument("episode needs at least two tokens");
  check_tokens(config, e.tokens);
  if (!e.target.empty() && (e.target.begin == 0 || e.target.end > e.tokens.size())) {
    throw std::invalid_argument("episode target span does not fit the sequence");
  }
  if (e.evidence.end > e.tokens.size()) {
    throw std::invalid_argument("episode evidence span does not fit the sequence");
  }
}

}  // namespace

double causal_penalty(std::span<const Tensor> final_layer, const Episode& episode,
                      RegularizerScope scope) {
  const auto rows = penalized_rows(episode, scope);
  if (rows.empty() || final_layer.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q : rows) {
    for (const Tensor& map : final_layer) {
      auto row = map.row(q);
      for (std::size_t k = 0; k <= q; ++k) {
        if (outside_evidence(episode, k)) total += row[k];
      }
    }
  }
  return total / (static_cast<double>(final_layer.size()) * static_cast<double>(rows.size()));
}

LossBreakdown batch_loss(const ModelParams& params, std::span<const Episode> batch,
                         const TrainSpec& spec, const std::optional<DropoutPlan>& dropout,
                         std::vector<Tensor>* grads) {
  const ModelConfig& config = params.config;
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");

  std::vector<std::size_t> lengths;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> targets;
  std::vector<double> weights;
  std::size_t penalty_rows = 0;
  for (const Episode& e : batch) {
    validate_episode(config, e);
    lengths.push_back(e.tokens.size());
    const std::size_t len = e.tokens.size();
    for (std::size_t q = 0; q < len; ++q) {
      ids.push_back(e.tokens[q]);
      const bool supervised =
          q + 1 < len && (e.target.empty() ? true : e.target.contains(q + 1));
      targets.push_back(q + 1 < len ? e.tokens[q + 1] : 0);
      weights.push_back(supervised ? 1.0 : 0.0);
    }
    penalty_rows += penalized_rows(e, spec.reg_scope).size();
  }

  Record rec;
  const ParamNodes p = bind_params(rec, params, grads != nullptr);
  const ValueId emb = rec.embedding(p.token_embedding, ids);
  ForwardOptions options;
  options.dropout = dropout;
  const ForwardNodes f = build_forward(rec, p, config, emb, lengths, options);
  const ValueId ce = rec.cross_entropy(f.logits, std::move(targets), std::move(weights));

  ValueId penalty = rec.constant(Tensor::scalar(0.0));
  if (penalty_rows > 0) {
    const double w = 1.0 / (static_cast<double>(config.num_heads) *
                            static_cast<double>(penalty_rows));
    const std::size_t last = config.num_layers - 1;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      if (penalized_rows(batch[s], spec.reg_scope).empty()) continue;
      const ValueId mask = rec.constant(penalty_mask(batch[s], spec.reg_scope, w));
      for (std::size_t h = 0; h < config.num_heads; ++h) {
        penalty = rec.add(penalty, rec.sum(rec.multiply(f.attention_at(last, s, h), mask)));
      }
    }
  }
  const ValueId total = rec.add(ce, rec.scale(penalty, spec.causal_reg_weight));

  LossBreakdown out;
  out.total = rec.value(total).item();
  out.cross_entropy = rec.value(ce).item();
  out.causal_penalty = rec.value(penalty).item();
  if (grads) *grads = rec.backward(total);
  return out;
}

TrainResult train(ModelParams params, std::span<const Episode> corpus, const TrainSpec& spec,
                  const std::function<void(const StepRecord&)>& on_step) {
  spec.require_valid();
  params.config.require_valid();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  for (const Episode& e : corpus) validate_episode(params.config, e);

  std::mt19937_64 sampler(derive_seed(spec.seed, "batches"));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  const std::uint64_t dropout_seed = derive_seed(spec.seed, "dropout");

  auto named = params.named();
  std::vector<Tensor> m1, m2;
  for (const auto& [name, t] : named) {
    m1.emplace_back(t->shape());
    m2.emplace_back(t->shape());
  }

  TrainResult result;
  std::vector<Episode> batch;
  std::vector<Tensor> grads;
  for (std::size_t step = 0; step < spec.max_steps; ++step) {
    batch.clear();
    for (std::size_t b = 0; b < spec.batch_size; ++b) batch.push_back(corpus[pick(sampler)]);
    std::optional<DropoutPlan> dropout;
    if (params.config.dropout_rate > 0.0) {
      dropout = DropoutPlan{dropout_seed, step, params.config.dropout_rate};
    }
    const LossBreakdown loss = batch_loss(params, batch, spec, dropout, &grads);
    if (!std::isfinite(loss.total)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss=" << loss.total
          << " cross_entropy=" << loss.cross_entropy << " causal_penalty=" << loss.causal_penalty;
      throw TrainingDiverged(step, msg.str());
    }

    double norm_sq = 0.0;
    for (const Tensor& g : grads) {
      for (double v : g.values()) norm_sq += v * v;
    }
    const double norm = std::sqrt(norm_sq);
    const double clip = spec.grad_clip > 0.0 && norm > spec.grad_clip ? spec.grad_clip / norm : 1.0;

    const double t = static_cast<double>(step + 1);
    const double bias1 = 1.0 - std::pow(spec.beta1, t);
    const double bias2 = 1.0 - std::pow(spec.beta2, t);
    for (std::size_t i = 0; i < named.size(); ++i) {
      Tensor& w = *named[i].second;
      const bool decay = w.rank() == 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = grads[i][j] * clip;
        m1[i][j] = spec.beta1 * m1[i][j] + (1.0 - spec.beta1) * g;
        m2[i][j] = spec.beta2 * m2[i][j] + (1.0 - spec.beta2) * g * g;
        const double update = (m1[i][j] / bias1) / (std::sqrt(m2[i][j] / bias2) + spec.epsilon);
        w[j] -= spec.learning_rate * (update + (decay ? spec.weight_decay * w[j] : 0.0));
      }
    }
    if (!params.all_finite()) {
      throw TrainingDiverged(step, "training diverged at step " + std::to_string(step) +
                                       ": non-finite parameters after update");
    }
    result.history.push_back(StepRecord{step, loss});
    if (on_step) on_step(result.history.back());
  }
  result.params = std::move(params);
  return result;
}

}  // namespace cgan
