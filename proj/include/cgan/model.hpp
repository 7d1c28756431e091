#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cgan/record.hpp"
#include "cgan/tensor.hpp"
#include "cgan/vocabulary.hpp"

namespace cgan {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_length = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t embed_dim = 64;
  /// MLP hidden width as a multiple of embed_dim.
  std::size_t mlp_multiplier = 4;
  double dropout_rate = 0.3;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_dim() const { return embed_dim * mlp_multiplier; }

  /// One message per violated field; empty when the config is usable.
  std::vector<std::string> validate() const;
  /// Throws ConfigError listing every violation.
  void require_valid() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_query, b_query, w_key, b_key, w_value, b_value;
  Tensor w_proj, b_proj;
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, b_up, w_down, b_down;

  bool operator==(const LayerParams&) const = default;
};

struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // context x d
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor w_out, b_out;  // d x vocab, vocab

  /// Every parameter tensor with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;

  std::size_t parameter_count() const;
  bool all_finite() const;

  bool operator==(const ModelParams&) const = default;
};

/// Closed-form parameter count:
/// 2 V d + C d + L (12 d^2 + 13 d) + 2 d + V for mlp_multiplier 4, in general
/// 2 V d + C d + L (4 d^2 + 2 m d^2 + 9 d + m d) + 2 d + V.
std::size_t expected_parameter_count(const ModelConfig& config);

/// Deterministic initialization from config.seed: N(0, 0.02) weights, with the
/// two residual projections scaled by 1/sqrt(2 L); zero biases; unit gains.
ModelParams init_model(const ModelConfig& config);

/// Per layer and head, the (seq x seq) attention matrix from query to key.
struct AttentionTrace {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t seq_len = 0;
  std::vector<Tensor> maps;  // layer-major

  const Tensor& at(std::size_t layer, std::size_t head) const {
    return maps.at(layer * num_heads + head);
  }
};

/// Additive bias on pre-softmax attention scores of one query row. Used by
/// fact-anchored re-weighting to add ln(s_k) to each key k.
struct AttentionBias {
  std::size_t sequence = 0;
  std::size_t query = 0;
  std::vector<double> key_bias;  // one entry per key position <= query
  bool all_layers = false;       // otherwise final layer only
};

struct DropoutPlan {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  double rate = 0.0;
};

/// Attention bias held on the record so gradients reach it. `matrix` is
/// (len x len) for the chosen sequence and is added to its attention scores
/// before the causal softmax.
struct TapeBias {
  std::size_t sequence = 0;
  ValueId matrix;
  bool all_layers = false;
};

struct ForwardOptions {
  /// Only project the final row of each sequence to logits.
  bool last_row_only = false;
  std::optional<DropoutPlan> dropout;
  const AttentionBias* bias = nullptr;
  std::optional<TapeBias> tape_bias;
};

/// Handles to the model parameters inside a Record.
struct ParamNodes {
  struct Layer {
    ValueId ln1_gain, ln1_bias;
    ValueId w_query, b_query, w_key, b_key, w_value, b_value;
    ValueId w_proj, b_proj;
    ValueId ln2_gain, ln2_bias;
    ValueId w_up, b_up, w_down, b_down;
  };
  ValueId token_embedding, position_embedding;
  std::vector<Layer> layers;
  ValueId final_gain, final_bias, w_out, b_out;
  /// Same order as ModelParams::named().
  std::vector<ValueId> ordered;
};

/// Registers every parameter as a record input (trainable) or constant.
ParamNodes bind_params(Record& rec, const ModelParams& params, bool trainable);

struct ForwardNodes {
  ValueId logits;
  /// attention[(layer * sequences + seq) * heads + head], each (len x len).
  std::vector<ValueId> attention;
  std::size_t sequences = 0;
  std::size_t heads = 0;

  ValueId attention_at(std::size_t layer, std::size_t seq, std::size_t head) const {
    return attention[(layer * sequences + seq) * heads + head];
  }
};

/// Appends the decoder to `rec`. `token_embeddings` stacks the token
/// embedding rows of every sequence (sum(lengths) x d); positional embeddings
/// are added here. Logits have one row per token, or one per sequence with
/// last_row_only.
ForwardNodes build_forward(Record& rec, const ParamNodes& params, const ModelConfig& config,
                           ValueId token_embeddings, std::span<const std::size_t> lengths,
                           const ForwardOptions& options = {});

/// Rejects out-of-range ids and sequences longer than the context.
void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

struct ForwardResult {
  Tensor logits;  // seq x vocab
  AttentionTrace trace;
};

/// Inference-mode forward pass (dropout off) recording every attention map.
ForwardResult forward(const ModelParams& params, std::span<const TokenId> tokens,
                      const AttentionBias* bias = nullptr);

/// Index of the largest entry; the lowest index wins ties.
std::size_t argmax(std::span<const double> values);

struct GenerateOptions {
  std::size_t max_new_tokens = 0;
};

struct Generation {
  std::vector<TokenId> tokens;
  std::vector<AttentionTrace> traces;  // one per generated token
};

/// Greedy decoding; the trace of every step is kept.
Generation generate(const ModelParams& params, std::span<const TokenId> prompt,
                    const GenerateOptions& options);

}  // namespace cgan
