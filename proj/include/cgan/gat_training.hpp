#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cgan/fact_store.hpp"
#include "cgan/model.hpp"
#include "cgan/record.hpp"
#include "cgan/reweighting.hpp"
#include "cgan/training.hpp"
#include "cgan/vocabulary.hpp"

namespace cgan {

/// Handles to the graph layer's weights inside a Record. Attention vectors and
/// the readout are bound as column matrices.
struct GatNodes {
  std::vector<ValueId> w;
  std::vector<ValueId> a;  // 2 * hidden x 1
  ValueId readout;         // hidden x 1
  /// w..., a..., readout: the order of gat_tensors().
  std::vector<ValueId> ordered;
};

GatNodes bind_gat(Record& rec, const GatParams& params, bool trainable);

/// Every weight tensor of the layer: W per head, a per head, readout.
std::vector<Tensor*> gat_tensors(GatParams& params);

/// Same computation as gat_forward, recorded so gradients reach the weights
/// and the features. Returns a (nodes x 1) column of scores.
ValueId build_gat(Record& rec, const GatNodes& nodes, const GatParams& params, ValueId features,
                  std::span<const GatEdge> edges);

/// One teacher-forced decode step whose plan suppresses something.
struct GatExample {
  std::vector<TokenId> context;  // episode so far; the generating row is the last
  TokenId target = 0;
  StepGraph graph;
};

/// Replays the re-weighted decoding of `episode` with the gold target fed
/// back at every step, so each example asks what the plan should have done
/// given a correct history. Attribution rows are recomputed at every step.
std::vector<GatExample> collect_gat_examples(const ModelParams& params, const Vocabulary& vocab,
                                             const Episode& episode, const FactStore& store,
                                             const ReweightPolicy& policy,
                                             const EntailmentModel* entailment = nullptr);

/// Cross entropy of each example's target after re-weighting with the graph
/// layer's plan, averaged over `batch`. With a dropout plan, input features
/// are dropped; `grads` follows gat_tensors() order.
double gat_batch_loss(const ModelParams& model, const GatParams& gat,
                      std::span<const GatExample> batch, const ReweightPolicy& policy,
                      const std::optional<DropoutPlan>& dropout = std::nullopt,
                      std::vector<Tensor>* grads = nullptr);

struct GatTrainSpec {
  std::size_t max_steps = 200;
  std::size_t batch_size = 8;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
};

struct GatTrainResult {
  GatParams params;
  std::size_t examples = 0;
  std::vector<double> losses;  // one per step, with dropout
  double initial_loss = 0.0;   // full set, no dropout
  double final_loss = 0.0;
};

/// Adam on the graph layer only; the language model stays frozen.
GatTrainResult train_gat(const ModelParams& model, GatParams gat, std::span<const GatExample> examples,
                         const ReweightPolicy& policy, const GatTrainSpec& spec,
                         const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace cgan
