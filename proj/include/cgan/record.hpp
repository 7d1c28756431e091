#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cgan/tensor.hpp"

namespace cgan {

/// Handle to a value held by a Record.
struct ValueId {
  std::uint32_t index = 0;
  bool operator==(const ValueId&) const = default;
};

enum class OpKind : std::uint8_t {
  input,
  constant,
  matmul,
  transpose,
  add,
  add_bias,
  multiply,
  scale,
  softmax,
  layer_norm,
  embedding,
  gelu,
  relu,
  sigmoid,
  log,
  cross_entropy,
  slice,
  concat_rows,
  concat_cols,
  sum,
  pick,
};

std::string_view op_name(OpKind kind);

enum class SoftmaxMask : std::uint8_t { none, causal };

/// An ordered list of primitive operations over dense tensors.
///
/// Operations are evaluated eagerly as they are appended, so the record can be
/// used like an ordinary expression builder. Because every node only refers to
/// earlier nodes, the list is topologically ordered and can be replayed after
/// replacing input values (`forward_eval`), and differentiated in reverse
/// (`backward`).
///
/// Leaves come in two flavours: inputs, which may be replaced on replay and
/// receive gradients when `requires_grad` is set, and constants, which never
/// change and never receive gradients.
///
/// The only broadcasting rule is `add_bias` (row vector added to every row of
/// a matrix). All other operand shape mismatches raise ShapeError.
class Record {
 public:
  ValueId input(Tensor value, bool requires_grad = true);
  ValueId constant(Tensor value);

  ValueId matmul(ValueId a, ValueId b);
  ValueId transpose(ValueId a);
  ValueId add(ValueId a, ValueId b);
  ValueId add_bias(ValueId a, ValueId bias);
  ValueId multiply(ValueId a, ValueId b);
  ValueId scale(ValueId a, double factor);
  /// Row-wise softmax. With a causal mask, row r of an (m x n) matrix only
  /// sees columns c <= r + (n - m); masked entries are exactly zero.
  ValueId softmax(ValueId a, SoftmaxMask mask = SoftmaxMask::none);
  ValueId layer_norm(ValueId x, ValueId gain, ValueId bias, double eps = 1e-5);
  /// Gathers rows of `table` (V x d) at `ids`.
  ValueId embedding(ValueId table, std::vector<std::size_t> ids);
  /// Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
  ValueId gelu(ValueId a);
  ValueId relu(ValueId a);
  ValueId sigmoid(ValueId a);
  /// Natural log; non-positive arguments raise std::domain_error.
  ValueId log(ValueId a);
  /// Weighted mean negative log-likelihood of `targets` under softmax(logits).
  /// Rows with zero weight are ignored. Returns a scalar.
  ValueId cross_entropy(ValueId logits, std::vector<std::size_t> targets,
                        std::vector<double> weights);
  /// Rows [r0, r1) and columns [c0, c1) of a matrix.
  ValueId slice(ValueId a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
  ValueId concat_rows(std::span<const ValueId> parts);
  ValueId concat_cols(std::span<const ValueId> parts);
  ValueId sum(ValueId a);
  ValueId pick(ValueId a, std::size_t r, std::size_t c);

  const Tensor& value(ValueId id) const;
  const Tensor& grad(ValueId id) const;
  OpKind kind(ValueId id) const;
  std::size_t size() const { return nodes_.size(); }

  void mark_output(ValueId id);
  const std::vector<ValueId>& outputs() const { return outputs_; }
  const std::vector<ValueId>& inputs() const { return inputs_; }

  /// Replaces the value of an input leaf; the shape must match.
  void set_input(ValueId id, Tensor value);
  /// Re-evaluates every non-leaf operation in order.
  void replay();
  /// Assigns `inputs` to the input leaves in declaration order, replays, and
  /// returns the values of the marked outputs.
  std::vector<Tensor> forward_eval(std::span<const Tensor> inputs);

  /// Reverse accumulation from `output` seeded with `seed` (same shape as the
  /// output). Returns the gradients of every input leaf in declaration order;
  /// inputs that do not require gradients get a zero tensor.
  std::vector<Tensor> backward(ValueId output, const Tensor& seed);
  std::vector<Tensor> backward(ValueId output);

 private:
  struct Node {
    OpKind kind = OpKind::input;
    std::vector<std::uint32_t> args;
    Tensor value;
    Tensor grad;
    Tensor cache;
    bool needs_grad = false;
    double scalar = 0.0;
    std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
    SoftmaxMask mask = SoftmaxMask::none;
    std::vector<std::size_t> indices;
    std::vector<double> weights;
  };

  ValueId push(Node node);
  const Node& node(ValueId id) const;
  void evaluate(Node& n);
  void propagate(Node& n);

  std::vector<Node> nodes_;
  std::vector<ValueId> inputs_;
  std::vector<ValueId> outputs_;
  bool have_grads_ = false;
};

}  // namespace cgan
