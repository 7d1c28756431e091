#include "cgan/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "cgan/errors.hpp"
#include "cgan/rng.hpp"

namespace cgan {

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> errors;
  if (vocab_size == 0) errors.push_back("vocab_size: must be >= 1");
  if (context_length == 0) errors.push_back("context_length: must be >= 1");
  if (num_layers == 0) errors.push_back("num_layers: must be >= 1");
  if (num_heads == 0) errors.push_back("num_heads: must be >= 1");
  if (embed_dim == 0) errors.push_back("embed_dim: must be >= 1");
  if (num_heads != 0 && embed_dim % num_heads != 0) {
    errors.push_back("embed_dim: " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                     std::to_string(num_heads));
  }
  if (mlp_multiplier == 0) errors.push_back("mlp_multiplier: must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    errors.push_back("dropout_rate: must lie in [0, 1)");
  }
  return errors;
}

void ModelConfig::require_valid() const {
  const auto errors = validate();
  if (errors.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("token_embedding", &token_embedding);
  out.emplace_back("position_embedding", &position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerParams& p = layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    out.emplace_back(prefix + "ln1_gain", &p.ln1_gain);
    out.emplace_back(prefix + "ln1_bias", &p.ln1_bias);
    out.emplace_back(prefix + "w_query", &p.w_query);
    out.emplace_back(prefix + "b_query", &p.b_query);
    out.emplace_back(prefix + "w_key", &p.w_key);
    out.emplace_back(prefix + "b_key", &p.b_key);
    out.emplace_back(prefix + "w_value", &p.w_value);
    out.emplace_back(prefix + "b_value", &p.b_value);
    out.emplace_back(prefix + "w_proj", &p.w_proj);
    out.emplace_back(prefix + "b_proj", &p.b_proj);
    out.emplace_back(prefix + "ln2_gain", &p.ln2_gain);
    out.emplace_back(prefix + "ln2_bias", &p.ln2_bias);
    out.emplace_back(prefix + "w_up", &p.w_up);
    out.emplace_back(prefix + "b_up", &p.b_up);
    out.emplace_back(prefix + "w_down", &p.w_down);
    out.emplace_back(prefix + "b_down", &p.b_down);
  }
  out.emplace_back("final_gain", &final_gain);
  out.emplace_back("final_bias", &final_bias);
  out.emplace_back("w_out", &w_out);
  out.emplace_back("b_out", &b_out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  auto mutable_names = const_cast<ModelParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_names.size());
  for (auto& [name, t] : mutable_names) out.emplace_back(std::move(name), t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : named()) total += t->size();
  return total;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, t] : named()) {
    if (!t->all_finite()) return false;
  }
  return true;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t m = c.mlp_multiplier;
  const std::size_t per_layer = 4 * d * d + 2 * m * d * d + 9 * d + m * d;
  return 2 * c.vocab_size * d + c.context_length * d + c.num_layers * per_layer + 2 * d +
         c.vocab_size;
}

ModelParams init_model(const ModelConfig& config) {
  config.require_valid();
  std::mt19937_64 gen(derive_seed(config.seed, "init_model"));
  auto normal = [&](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = dist(gen);
    return t;
  };
  const std::size_t d = config.embed_dim;
  const std::size_t h = config.mlp_dim();
  constexpr double kStd = 0.02;
  const double residual_std = kStd / std::sqrt(2.0 * static_cast<double>(config.num_layers));

  ModelParams p;
  p.config = config;
  p.token_embedding = normal({config.vocab_size, d}, kStd);
  p.position_embedding = normal({config.context_length, d}, kStd);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams layer;
    layer.ln1_gain = Tensor::filled({d}, 1.0);
    layer.ln1_bias = Tensor({d});
    layer.w_query = normal({d, d}, kStd);
    layer.b_query = Tensor({d});
    layer.w_key = normal({d, d}, kStd);
    layer.b_key = Tensor({d});
    layer.w_value = normal({d, d}, kStd);
    layer.b_value = Tensor({d});
    layer.w_proj = normal({d, d}, residual_std);
    layer.b_proj = Tensor({d});
    layer.ln2_gain = Tensor::filled({d}, 1.0);
    layer.ln2_bias = Tensor({d});
    layer.w_up = normal({d, h}, kStd);
    layer.b_up = Tensor({h});
    layer.w_down = normal({h, d}, residual_std);
    layer.b_down = Tensor({d});
    p.layers.push_back(std::move(layer));
  }
  p.final_gain = Tensor::filled({d}, 1.0);
  p.final_bias = Tensor({d});
  p.w_out = normal({d, config.vocab_size}, kStd);
  p.b_out = Tensor({config.vocab_size});
  return p;
}

ParamNodes bind_params(Record& rec, const ModelParams& params, bool trainable) {
  ParamNodes n;
  auto bind = [&](const Tensor& t) {
    const ValueId id = trainable ? rec.input(t, true) : rec.constant(t);
    n.ordered.push_back(id);
    return id;
  };
  n.token_embedding = bind(params.token_embedding);
  n.position_embedding = bind(params.position_embedding);
  for (const LayerParams& p : params.layers) {
    ParamNodes::Layer l;
    l.ln1_gain = bind(p.ln1_gain);
    l.ln1_bias = bind(p.ln1_bias);
    l.w_query = bind(p.w_query);
    l.b_query = bind(p.b_query);
    l.w_key = bind(p.w_key);
    l.b_key = bind(p.b_key);
    l.w_value = bind(p.w_value);
    l.b_value = bind(p.b_value);
    l.w_proj = bind(p.w_proj);
    l.b_proj = bind(p.b_proj);
    l.ln2_gain = bind(p.ln2_gain);
    l.ln2_bias = bind(p.ln2_bias);
    l.w_up = bind(p.w_up);
    l.b_up = bind(p.b_up);
    l.w_down = bind(p.w_down);
    l.b_down = bind(p.b_down);
    n.layers.push_back(l);
  }
  n.final_gain = bind(params.final_gain);
  n.final_bias = bind(params.final_bias);
  n.w_out = bind(params.w_out);
  n.b_out = bind(params.b_out);
  return n;
}

namespace {

enum DropoutSite : std::uint64_t { kEmbeddingSite = 1, kAttentionSite = 2, kMlpSite = 3 };

// Inverted-dropout mask as a constant multiplier. Each element is keyed by
// (seed, step, site, layer, sequence, position, column).
ValueId apply_dropout(Record& rec, ValueId x, const DropoutPlan& plan, std::uint64_t site,
                      std::uint64_t layer, std::span<const std::size_t> lengths) {
  const Tensor& v = rec.value(x);
  Tensor mask(v.shape());
  const double keep = 1.0 / (1.0 - plan.rate);
  std::size_t row = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    for (std::size_t pos = 0; pos < lengths[s]; ++pos, ++row) {
      auto m = mask.row(row);
      for (std::size_t c = 0; c < m.size(); ++c) {
        const double u = counter_uniform({plan.seed, plan.step, site, layer, s, pos, c});
        m[c] = u < plan.rate ? 0.0 : keep;
      }
    }
  }
  return rec.multiply(x, rec.constant(std::move(mask)));
}

}  // namespace

ForwardNodes build_forward(Record& rec, const ParamNodes& p, const ModelConfig& config,
                           ValueId token_embeddings, std::span<const std::size_t> lengths,
                           const ForwardOptions& options) {
  const std::size_t d = config.embed_dim;
  const std::size_t heads = config.num_heads;
  const std::size_t hd = config.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool dropout = options.dropout && options.dropout->rate > 0.0;

  std::size_t total_rows = 0;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> position_ids;
  for (std::size_t len : lengths) {
    if (len == 0) throw std::invalid_argument("build_forward: empty sequence");
    if (len > config.context_length) {
      throw std::invalid_argument("build_forward: sequence of " + std::to_string(len) +
                                  " tokens exceeds context_length " +
                                  std::to_string(config.context_length));
    }
    offsets.push_back(total_rows);
    total_rows += len;
    for (std::size_t i = 0; i < len; ++i) position_ids.push_back(i);
  }
  require_shape("build_forward token_embeddings", Shape{total_rows, d},
                rec.value(token_embeddings).shape());
  if (options.bias) {
    const AttentionBias& b = *options.bias;
    if (b.sequence >= lengths.size() || b.query >= lengths[b.sequence] ||
        b.key_bias.size() != b.query + 1) {
      throw std::invalid_argument("build_forward: attention bias does not fit the batch");
    }
  }
  if (options.tape_bias) {
    const TapeBias& b = *options.tape_bias;
    if (b.sequence >= lengths.size()) {
      throw std::invalid_argument("build_forward: attention bias does not fit the batch");
    }
    require_shape("build_forward tape bias", Shape{lengths[b.sequence], lengths[b.sequence]},
                  rec.value(b.matrix).shape());
  }

  ForwardNodes out;
  out.sequences = lengths.size();
  out.heads = heads;

  ValueId x = rec.add(token_embeddings, rec.embedding(p.position_embedding, position_ids));
  if (dropout) x = apply_dropout(rec, x, *options.dropout, kEmbeddingSite, 0, lengths);

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const ParamNodes::Layer& w = p.layers[l];
    const bool biased_layer =
        options.bias && (options.bias->all_layers || l + 1 == p.layers.size());

    const ValueId h = rec.layer_norm(x, w.ln1_gain, w.ln1_bias);
    const ValueId q = rec.add_bias(rec.matmul(h, w.w_query), w.b_query);
    const ValueId k = rec.add_bias(rec.matmul(h, w.w_key), w.b_key);
    const ValueId v = rec.add_bias(rec.matmul(h, w.w_value), w.b_value);

    std::vector<ValueId> seq_outputs;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
      const std::size_t r0 = offsets[s];
      const std::size_t r1 = r0 + lengths[s];
      std::vector<ValueId> head_outputs;
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t c0 = hh * hd;
        const ValueId qh = rec.slice(q, r0, r1, c0, c0 + hd);
        const ValueId kh = rec.slice(k, r0, r1, c0, c0 + hd);
        const ValueId vh = rec.slice(v, r0, r1, c0, c0 + hd);
        ValueId scores = rec.scale(rec.matmul(qh, rec.transpose(kh)), score_scale);
        if (biased_layer && options.bias->sequence == s) {
          Tensor bias({lengths[s], lengths[s]});
          auto row = bias.row(options.bias->query);
          for (std::size_t c = 0; c < options.bias->key_bias.size(); ++c) {
            row[c] = options.bias->key_bias[c];
          }
          scores = rec.add(scores, rec.constant(std::move(bias)));
        }
        if (options.tape_bias && options.tape_bias->sequence == s &&
            (options.tape_bias->all_layers || l + 1 == p.layers.size())) {
          scores = rec.add(scores, options.tape_bias->matrix);
        }
        const ValueId probs = rec.softmax(scores, SoftmaxMask::causal);
        out.attention.push_back(probs);
        head_outputs.push_back(rec.matmul(probs, vh));
      }
      seq_outputs.push_back(rec.concat_cols(head_outputs));
    }
    const ValueId mixed = seq_outputs.size() == 1 ? seq_outputs.front()
                                                  : rec.concat_rows(seq_outputs);
    ValueId attn = rec.add_bias(rec.matmul(mixed, w.w_proj), w.b_proj);
    if (dropout) attn = apply_dropout(rec, attn, *options.dropout, kAttentionSite, l, lengths);
    x = rec.add(x, attn);

    const ValueId h2 = rec.layer_norm(x, w.ln2_gain, w.ln2_bias);
    const ValueId up = rec.gelu(rec.add_bias(rec.matmul(h2, w.w_up), w.b_up));
    ValueId mlp = rec.add_bias(rec.matmul(up, w.w_down), w.b_down);
    if (dropout) mlp = apply_dropout(rec, mlp, *options.dropout, kMlpSite, l, lengths);
    x = rec.add(x, mlp);
  }

  if (options.last_row_only) {
    std::vector<ValueId> last_rows;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
      const std::size_t r = offsets[s] + lengths[s] - 1;
      last_rows.push_back(rec.slice(x, r, r + 1, 0, d));
    }
    x = last_rows.size() == 1 ? last_rows.front() : rec.concat_rows(last_rows);
  }
  const ValueId hf = rec.layer_norm(x, p.final_gain, p.final_bias);
  out.logits = rec.add_bias(rec.matmul(hf, p.w_out), p.b_out);
  return out;
}

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.size() > config.context_length) {
    throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds context_length " +
                                std::to_string(config.context_length));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= config.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " is outside vocab_size " +
                              std::to_string(config.vocab_size));
    }
  }
}

ForwardResult forward(const ModelParams& params, std::span<const TokenId> tokens,
                      const AttentionBias* bias) {
  const ModelConfig& config = params.config;
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  check_tokens(config, tokens);

  Record rec;
  const ParamNodes p = bind_params(rec, params, false);
  const std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  const ValueId emb = rec.embedding(p.token_embedding, ids);
  const std::size_t len = tokens.size();
  ForwardOptions options;
  options.bias = bias;
  const ForwardNodes nodes = build_forward(rec, p, config, emb, std::span(&len, 1), options);

  ForwardResult result;
  result.logits = rec.value(nodes.logits);
  result.trace.num_layers = config.num_layers;
  result.trace.num_heads = config.num_heads;
  result.trace.seq_len = len;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      result.trace.maps.push_back(rec.value(nodes.attention_at(l, 0, h)));
    }
  }
  return result;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Generation generate(const ModelParams& params, std::span<const TokenId> prompt,
                    const GenerateOptions& options) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (prompt.size() + options.max_new_tokens > params.config.context_length) {
    throw std::invalid_argument("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                                std::to_string(options.max_new_tokens) +
                                " new tokens exceeds context_length " +
                                std::to_string(params.config.context_length));
  }
  check_tokens(params.config, prompt);

  Generation gen;
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < options.max_new_tokens; ++step) {
    ForwardResult r = forward(params, seq);
    const auto next = static_cast<TokenId>(argmax(r.logits.row(seq.size() - 1)));
    gen.tokens.push_back(next);
    gen.traces.push_back(std::move(r.trace));
    seq.push_back(next);
  }
  return gen;
}

}  // namespace cgan
