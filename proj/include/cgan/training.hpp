#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "cgan/model.hpp"

namespace cgan {

/// Half-open token range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

/// One encoded training or evaluation sequence. `target` marks the supervised
/// continuation; everything before it is the prompt. `evidence` marks the
/// prompt tokens that support the target.
struct Episode {
  std::vector<TokenId> tokens;
  Span evidence;
  Span target;

  bool operator==(const Episode&) const = default;
};

/// Which query rows the attention regularizer looks at.
enum class RegularizerScope {
  answer_token,  // the row that generates the last target token
  target_span,   // every row that generates a target token
};

struct TrainSpec {
  /// Learning rate used for fine-tuning large pretrained models; kept for
  /// reference. Training from scratch at toy scale uses `learning_rate`.
  static constexpr double kFineTuneLearningRate = 2e-5;

  double learning_rate = 2e-3;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 1.0;
  std::size_t max_steps = 500;
  double causal_reg_weight = 0.1;
  RegularizerScope reg_scope = RegularizerScope::answer_token;
  std::uint64_t seed = 0;

  void require_valid() const;
};

struct LossBreakdown {
  double total = 0.0;
  double cross_entropy = 0.0;
  double causal_penalty = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown loss;
};

struct TrainResult {
  ModelParams params;
  std::vector<StepRecord> history;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Query rows whose attention the regularizer penalizes.
std::vector<std::size_t> penalized_rows(const Episode& episode, RegularizerScope scope);

/// Mean over penalized rows of the head-averaged attention mass that lands on
/// positions outside the evidence span, earlier target tokens included. `final_layer` holds one
/// (len x len) map per head.
double causal_penalty(std::span<const Tensor> final_layer, const Episode& episode,
                      RegularizerScope scope);

/// Loss of one batch: mean cross-entropy over target rows plus
/// causal_reg_weight times the causal penalty. When `grads` is given it
/// receives d(total)/d(param) in ModelParams::named() order.
LossBreakdown batch_loss(const ModelParams& params, std::span<const Episode> batch,
                         const TrainSpec& spec, const std::optional<DropoutPlan>& dropout,
                         std::vector<Tensor>* grads = nullptr);

/// AdamW on uniformly sampled batches. Throws TrainingDiverged on a
/// non-finite loss.
TrainResult train(ModelParams params, std::span<const Episode> corpus, const TrainSpec& spec,
                  const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace cgan
