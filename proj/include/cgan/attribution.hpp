#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgan/model.hpp"
#include "json.hpp"

namespace cgan {

/// Builds sum_k F(x_k) for `count` path points stacked along the rows of
/// `batched` (count * rows x cols) and returns the scalar's handle.
using BatchedScalarFn = std::function<ValueId(Record& rec, ValueId batched, std::size_t count)>;

struct PathAttribution {
  Tensor attribution;  // same shape as the input
  double f_input = 0.0;
  double f_baseline = 0.0;
};

/// Integrated gradients of a scalar function along the straight path from
/// `baseline` to `input`, right Riemann sum with `steps` points:
///   A = (x - x') * (1/steps) * sum_{k=1..steps} dF/dx (x' + (k/steps)(x - x')).
/// Path points are evaluated `chunk` at a time and the gradient sum is
/// accumulated in step order. A fixed `chunk` gives bit-identical results;
/// changing it only moves the last few bits, since the stacked matrix
/// products round differently at different batch sizes.
PathAttribution path_integrated_gradients(const BatchedScalarFn& fn, const Tensor& input,
                                          const Tensor& baseline, std::size_t steps,
                                          std::size_t chunk = 64);

enum class BaselineKind {
  zero,       // all-zero token embeddings
  pad_token,  // every position replaced by the embedding of `pad_token`
};

std::string to_string(BaselineKind kind);
BaselineKind baseline_from_string(const std::string& name);

struct IgOptions {
  std::size_t steps = 64;
  BaselineKind baseline = BaselineKind::zero;
  TokenId pad_token = 0;
  std::size_t chunk = 64;
};

/// Attribution of one generated token. `inputs` holds one signed score per
/// prompt token; `outputs` one per earlier generated token. Only `inputs`
/// enter the contribution score; both are needed for completeness.
struct AttributionRow {
  std::vector<double> inputs;
  std::vector<double> outputs;
  double f_input = 0.0;
  double f_baseline = 0.0;

  double total() const;
  /// |sum of all attributions - (F(x) - F(baseline))|.
  double residual() const;
};

/// Integrated gradients for the generated token at index `output_index` of
/// the continuation that starts at `prompt_length`. The target scalar is the
/// pre-softmax logit of that token at the position that produced it; token
/// embeddings move along the path while positional embeddings stay fixed.
/// Scores are summed over embedding dimensions.
AttributionRow integrated_gradients(const ModelParams& params, std::span<const TokenId> sequence,
                                    std::size_t prompt_length, std::size_t output_index,
                                    const IgOptions& options = {});

double completeness_residual(const ModelParams& params, std::span<const TokenId> sequence,
                             std::size_t prompt_length, std::size_t output_index,
                             const IgOptions& options = {});

/// m x n signed influence scores of prompt tokens on generated tokens.
struct AttributionMatrix {
  Tensor scores;  // m x n
  BaselineKind baseline = BaselineKind::zero;
  std::size_t steps = 0;
  std::vector<double> residuals;  // one per row
  /// Attributions to earlier generated tokens; kept for completeness checks.
  std::vector<std::vector<double>> output_scores;

  std::size_t outputs() const { return residuals.size(); }
  std::size_t inputs() const { return scores.rank() == 2 ? scores.shape()[1] : 0; }

  static AttributionMatrix from_rows(std::span<const AttributionRow> rows, std::size_t inputs,
                                     const IgOptions& options);
};

AttributionMatrix attribution_matrix(const ModelParams& params, std::span<const TokenId> sequence,
                                     std::size_t prompt_length, const IgOptions& options = {});

/// {shape, data (row-major), baseline, steps, residuals}.
nlohmann::ordered_json attribution_to_json(const AttributionMatrix& matrix);
AttributionMatrix attribution_from_json(const nlohmann::json& j);

}  // namespace cgan
