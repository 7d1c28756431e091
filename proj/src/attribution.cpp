#include "cgan/attribution.hpp"

#include <cmath>
#include <stdexcept>

namespace cgan {

namespace {

Tensor stack_path_points(const Tensor& input, const Tensor& baseline, std::size_t first,
                         std::size_t count, std::size_t steps) {
  const std::size_t n = input.size();
  Shape shape = input.shape();
  if (shape.size() != 2) shape = {1, n};
  Tensor out({count * shape[0], shape[1]});
  for (std::size_t k = 0; k < count; ++k) {
    const double t = static_cast<double>(first + k + 1) / static_cast<double>(steps);
    for (std::size_t e = 0; e < n; ++e) {
      out[k * n + e] = baseline[e] + t * (input[e] - baseline[e]);
    }
  }
  return out;
}

double evaluate_at(const BatchedScalarFn& fn, const Tensor& point) {
  Record rec;
  Tensor as_matrix = point;
  if (point.rank() != 2) as_matrix = Tensor({1, point.size()}, std::vector<double>(point.values().begin(), point.values().end()));
  const ValueId leaf = rec.input(std::move(as_matrix), false);
  return rec.value(fn(rec, leaf, 1)).item();
}

}  // namespace

PathAttribution path_integrated_gradients(const BatchedScalarFn& fn, const Tensor& input,
                                          const Tensor& baseline, std::size_t steps,
                                          std::size_t chunk) {
  if (steps == 0) throw std::invalid_argument("integrated gradients: steps must be >= 1");
  if (chunk == 0) throw std::invalid_argument("integrated gradients: chunk must be >= 1");
  require_shape("integrated gradients baseline", input.shape(), baseline.shape());

  const std::size_t n = input.size();
  std::vector<double> grad_sum(n, 0.0);
  for (std::size_t first = 0; first < steps; first += chunk) {
    const std::size_t count = std::min(chunk, steps - first);
    Record rec;
    const ValueId leaf = rec.input(stack_path_points(input, baseline, first, count, steps));
    const ValueId f = fn(rec, leaf, count);
    const Tensor grad = rec.backward(f).front();
    for (std::size_t k = 0; k < count; ++k) {
      for (std::size_t e = 0; e < n; ++e) grad_sum[e] += grad[k * n + e];
    }
  }

  PathAttribution out;
  out.attribution = Tensor(input.shape());
  for (std::size_t e = 0; e < n; ++e) {
    out.attribution[e] = (input[e] - baseline[e]) * grad_sum[e] / static_cast<double>(steps);
  }
  out.f_input = evaluate_at(fn, input);
  out.f_baseline = evaluate_at(fn, baseline);
  return out;
}

std::string to_string(BaselineKind kind) {
  return kind == BaselineKind::zero ? "zero" : "pad_token";
}

BaselineKind baseline_from_string(const std::string& name) {
  if (name == "zero") return BaselineKind::zero;
  if (name == "pad_token") return BaselineKind::pad_token;
  throw std::invalid_argument("unknown baseline '" + name + "' (expected zero or pad_token)");
}

double AttributionRow::total() const {
  double t = 0.0;
  for (double v : inputs) t += v;
  for (double v : outputs) t += v;
  return t;
}

double AttributionRow::residual() const { return std::abs(total() - (f_input - f_baseline)); }

AttributionRow integrated_gradients(const ModelParams& params, std::span<const TokenId> sequence,
                                    std::size_t prompt_length, std::size_t output_index,
                                    const IgOptions& options) {
  const ModelConfig& config = params.config;
  if (prompt_length == 0 || prompt_length > sequence.size()) {
    throw std::invalid_argument("integrated gradients: prompt length " +
                                std::to_string(prompt_length) + " does not fit a sequence of " +
                                std::to_string(sequence.size()));
  }
  if (output_index >= sequence.size() - prompt_length) {
    throw std::out_of_range("integrated gradients: output index " + std::to_string(output_index) +
                            " is outside the " + std::to_string(sequence.size() - prompt_length) +
                            " generated tokens");
  }
  check_tokens(config, sequence);
  if (options.baseline == BaselineKind::pad_token && options.pad_token >= config.vocab_size) {
    throw std::out_of_range("integrated gradients: pad token is outside the vocabulary");
  }

  const std::size_t position = prompt_length + output_index;  // where y_i sits
  const std::size_t len = position;                          // rows feeding its logit
  const std::size_t d = config.embed_dim;
  const TokenId target = sequence[position];

  Tensor input({len, d});
  Tensor baseline({len, d});
  for (std::size_t r = 0; r < len; ++r) {
    auto src = params.token_embedding.row(sequence[r]);
    std::copy(src.begin(), src.end(), input.row(r).begin());
    if (options.baseline == BaselineKind::pad_token) {
      auto pad = params.token_embedding.row(options.pad_token);
      std::copy(pad.begin(), pad.end(), baseline.row(r).begin());
    }
  }

  const BatchedScalarFn logit_of_target = [&](Record& rec, ValueId batched, std::size_t count) {
    const ParamNodes p = bind_params(rec, params, false);
    const std::vector<std::size_t> lengths(count, len);
    ForwardOptions fo;
    fo.last_row_only = true;
    const ForwardNodes nodes = build_forward(rec, p, config, batched, lengths, fo);
    Tensor select({count, config.vocab_size});
    for (std::size_t k = 0; k < count; ++k) select.at(k, target) = 1.0;
    return rec.sum(rec.multiply(nodes.logits, rec.constant(std::move(select))));
  };

  const PathAttribution path =
      path_integrated_gradients(logit_of_target, input, baseline, options.steps, options.chunk);

  AttributionRow row;
  row.f_input = path.f_input;
  row.f_baseline = path.f_baseline;
  for (std::size_t r = 0; r < len; ++r) {
    double s = 0.0;
    for (double v : path.attribution.row(r)) s += v;
    (r < prompt_length ? row.inputs : row.outputs).push_back(s);
  }
  return row;
}

double completeness_residual(const ModelParams& params, std::span<const TokenId> sequence,
                             std::size_t prompt_length, std::size_t output_index,
                             const IgOptions& options) {
  return integrated_gradients(params, sequence, prompt_length, output_index, options).residual();
}

AttributionMatrix AttributionMatrix::from_rows(std::span<const AttributionRow> rows,
                                               std::size_t inputs, const IgOptions& options) {
  AttributionMatrix m;
  m.scores = Tensor({rows.size(), inputs});
  m.baseline = options.baseline;
  m.steps = options.steps;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].inputs.size() != inputs) {
      throw std::invalid_argument("attribution rows disagree on the number of inputs");
    }
    std::copy(rows[i].inputs.begin(), rows[i].inputs.end(), m.scores.row(i).begin());
    m.residuals.push_back(rows[i].residual());
    m.output_scores.push_back(rows[i].outputs);
  }
  return m;
}

AttributionMatrix attribution_matrix(const ModelParams& params, std::span<const TokenId> sequence,
                                     std::size_t prompt_length, const IgOptions& options) {
  std::vector<AttributionRow> rows;
  for (std::size_t i = 0; prompt_length + i < sequence.size(); ++i) {
    rows.push_back(integrated_gradients(params, sequence, prompt_length, i, options));
  }
  return AttributionMatrix::from_rows(rows, prompt_length, options);
}

nlohmann::ordered_json attribution_to_json(const AttributionMatrix& m) {
  nlohmann::ordered_json j;
  j["shape"] = {m.outputs(), m.inputs()};
  j["data"] = std::vector<double>(m.scores.values().begin(), m.scores.values().end());
  j["baseline"] = to_string(m.baseline);
  j["steps"] = m.steps;
  j["residuals"] = m.residuals;
  return j;
}

AttributionMatrix attribution_from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items()) {
    if (key != "shape" && key != "data" && key != "baseline" && key != "steps" &&
        key != "residuals") {
      throw std::invalid_argument("unknown attribution key '" + key + "'");
    }
  }
  AttributionMatrix m;
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) throw std::invalid_argument("attribution shape must have two entries");
  m.scores = Tensor({shape[0], shape[1]}, j.at("data").get<std::vector<double>>());
  m.baseline = baseline_from_string(j.at("baseline").get<std::string>());
  m.steps = j.at("steps").get<std::size_t>();
  m.residuals = j.at("residuals").get<std::vector<double>>();
  if (m.residuals.size() != shape[0]) {
    throw std::invalid_argument("attribution residuals must have one entry per row");
  }
  return m;
}

}  // namespace cgan
