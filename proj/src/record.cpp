#include "cgan/record.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cgan {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

void require_rank2(OpKind kind, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op_name(kind)) + ": expected a matrix, got shape " +
                     to_string(t.shape()));
  }
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::multiply: return "multiply";
    case OpKind::scale: return "scale";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::gelu: return "gelu";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log: return "log";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::slice: return "slice";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::sum: return "sum";
    case OpKind::pick: return "pick";
  }
  return "unknown";
}

const Record::Node& Record::node(ValueId id) const {
  if (id.index >= nodes_.size()) {
    throw std::out_of_range("Record: unknown value id " + std::to_string(id.index));
  }
  return nodes_[id.index];
}

const Tensor& Record::value(ValueId id) const { return node(id).value; }

const Tensor& Record::grad(ValueId id) const {
  const Node& n = node(id);
  if (!have_grads_ || !n.needs_grad) {
    throw std::logic_error("Record::grad: no gradient recorded for value " +
                           std::to_string(id.index));
  }
  return n.grad;
}

OpKind Record::kind(ValueId id) const { return node(id).kind; }

ValueId Record::push(Node n) {
  for (std::uint32_t a : n.args) {
    if (a >= nodes_.size()) throw std::out_of_range("Record: operand refers to a later value");
    n.needs_grad = n.needs_grad || nodes_[a].needs_grad;
  }
  evaluate(n);
  nodes_.push_back(std::move(n));
  have_grads_ = false;
  return ValueId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

ValueId Record::input(Tensor value, bool requires_grad) {
  Node n;
  n.kind = OpKind::input;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  ValueId id{static_cast<std::uint32_t>(nodes_.size() - 1)};
  inputs_.push_back(id);
  return id;
}

ValueId Record::constant(Tensor value) {
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return ValueId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

ValueId Record::matmul(ValueId a, ValueId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_rank2(OpKind::matmul, av);
  require_rank2(OpKind::matmul, bv);
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ, lhs " + to_string(av.shape()) + " rhs " +
                     to_string(bv.shape()));
  }
  Node n;
  n.kind = OpKind::matmul;
  n.args = {a.index, b.index};
  return push(std::move(n));
}

ValueId Record::transpose(ValueId a) {
  require_rank2(OpKind::transpose, value(a));
  Node n;
  n.kind = OpKind::transpose;
  n.args = {a.index};
  return push(std::move(n));
}

ValueId Record::add(ValueId a, ValueId b) {
  require_shape("add", value(a).shape(), value(b).shape());
  Node n;
  n.kind = OpKind::add;
  n.args = {a.index, b.index};
  return push(std::move(n));
}

ValueId Record::add_bias(ValueId a, ValueId bias) {
  const Tensor& av = value(a);
  require_rank2(OpKind::add_bias, av);
  require_shape("add_bias", Shape{av.cols()}, value(bias).shape());
  Node n;
  n.kind = OpKind::add_bias;
  n.args = {a.index, bias.index};
  return push(std::move(n));
}

ValueId Record::multiply(ValueId a, ValueId b) {
  require_shape("multiply", value(a).shape(), value(b).shape());
  Node n;
  n.kind = OpKind::multiply;
  n.args = {a.index, b.index};
  return push(std::move(n));
}

ValueId Record::scale(ValueId a, double factor) {
  Node n;
  n.kind = OpKind::scale;
  n.args = {a.index};
  n.scalar = factor;
  return push(std::move(n));
}

ValueId Record::softmax(ValueId a, SoftmaxMask mask) {
  const Tensor& av = value(a);
  if (av.rank() != 1 && av.rank() != 2) {
    throw ShapeError("softmax: expected a vector or matrix, got " + to_string(av.shape()));
  }
  if (mask == SoftmaxMask::causal && av.rows() > av.cols()) {
    throw ShapeError("softmax: causal mask needs rows <= cols, got " + to_string(av.shape()));
  }
  Node n;
  n.kind = OpKind::softmax;
  n.args = {a.index};
  n.mask = mask;
  return push(std::move(n));
}

ValueId Record::layer_norm(ValueId x, ValueId gain, ValueId bias, double eps) {
  const Tensor& xv = value(x);
  require_rank2(OpKind::layer_norm, xv);
  require_shape("layer_norm gain", Shape{xv.cols()}, value(gain).shape());
  require_shape("layer_norm bias", Shape{xv.cols()}, value(bias).shape());
  Node n;
  n.kind = OpKind::layer_norm;
  n.args = {x.index, gain.index, bias.index};
  n.scalar = eps;
  return push(std::move(n));
}

ValueId Record::embedding(ValueId table, std::vector<std::size_t> ids) {
  const Tensor& tv = value(table);
  require_rank2(OpKind::embedding, tv);
  for (std::size_t id : ids) {
    if (id >= tv.rows()) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
  }
  Node n;
  n.kind = OpKind::embedding;
  n.args = {table.index};
  n.indices = std::move(ids);
  return push(std::move(n));
}

ValueId Record::gelu(ValueId a) {
  Node n;
  n.kind = OpKind::gelu;
  n.args = {a.index};
  return push(std::move(n));
}

ValueId Record::relu(ValueId a) {
  Node n;
  n.kind = OpKind::relu;
  n.args = {a.index};
  return push(std::move(n));
}

ValueId Record::sigmoid(ValueId a) {
  Node n;
  n.kind = OpKind::sigmoid;
  n.args = {a.index};
  return push(std::move(n));
}

ValueId Record::log(ValueId a) {
  Node n;
  n.kind = OpKind::log;
  n.args = {a.index};
  return push(std::move(n));
}

ValueId Record::cross_entropy(ValueId logits, std::vector<std::size_t> targets,
                              std::vector<double> weights) {
  const Tensor& lv = value(logits);
  require_rank2(OpKind::cross_entropy, lv);
  if (targets.size() != lv.rows() || weights.size() != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(lv.rows()) + " logit rows but " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= lv.cols()) throw std::out_of_range("cross_entropy: target out of range");
    if (weights[r] < 0.0) throw std::invalid_argument("cross_entropy: negative weight");
    total += weights[r];
  }
  if (total <= 0.0) throw std::invalid_argument("cross_entropy: weights sum to zero");
  Node n;
  n.kind = OpKind::cross_entropy;
  n.args = {logits.index};
  n.indices = std::move(targets);
  n.weights = std::move(weights);
  n.scalar = total;
  return push(std::move(n));
}

ValueId Record::slice(ValueId a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  const Tensor& av = value(a);
  require_rank2(OpKind::slice, av);
  if (r0 > r1 || r1 > av.rows() || c0 > c1 || c1 > av.cols()) {
    throw ShapeError("slice: range rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") outside " + to_string(av.shape()));
  }
  Node n;
  n.kind = OpKind::slice;
  n.args = {a.index};
  n.r0 = r0;
  n.r1 = r1;
  n.c0 = c0;
  n.c1 = c1;
  return push(std::move(n));
}

ValueId Record::concat_rows(std::span<const ValueId> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Node n;
  n.kind = OpKind::concat_rows;
  const std::size_t cols = value(parts.front()).cols();
  for (ValueId p : parts) {
    require_rank2(OpKind::concat_rows, value(p));
    if (value(p).cols() != cols) {
      throw ShapeError("concat_rows: expected " + std::to_string(cols) + " columns, got shape " +
                       to_string(value(p).shape()));
    }
    n.args.push_back(p.index);
  }
  return push(std::move(n));
}

ValueId Record::concat_cols(std::span<const ValueId> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Node n;
  n.kind = OpKind::concat_cols;
  const std::size_t rows = value(parts.front()).rows();
  for (ValueId p : parts) {
    require_rank2(OpKind::concat_cols, value(p));
    if (value(p).rows() != rows) {
      throw ShapeError("concat_cols: expected " + std::to_string(rows) + " rows, got shape " +
                       to_string(value(p).shape()));
    }
    n.args.push_back(p.index);
  }
  return push(std::move(n));
}

ValueId Record::sum(ValueId a) {
  Node n;
  n.kind = OpKind::sum;
  n.args = {a.index};
  return push(std::move(n));
}

ValueId Record::pick(ValueId a, std::size_t r, std::size_t c) {
  const Tensor& av = value(a);
  if (r >= av.rows() || c >= av.cols()) {
    throw ShapeError("pick: element (" + std::to_string(r) + "," + std::to_string(c) +
                     ") outside " + to_string(av.shape()));
  }
  Node n;
  n.kind = OpKind::pick;
  n.args = {a.index};
  n.r0 = r;
  n.c0 = c;
  return push(std::move(n));
}

void Record::mark_output(ValueId id) {
  node(id);
  outputs_.push_back(id);
}

void Record::set_input(ValueId id, Tensor value) {
  if (id.index >= nodes_.size() || nodes_[id.index].kind != OpKind::input) {
    throw std::invalid_argument("set_input: value " + std::to_string(id.index) +
                                " is not an input leaf");
  }
  require_shape("set_input", nodes_[id.index].value.shape(), value.shape());
  nodes_[id.index].value = std::move(value);
  have_grads_ = false;
}

void Record::replay() {
  for (Node& n : nodes_) {
    if (n.kind != OpKind::input && n.kind != OpKind::constant) evaluate(n);
  }
  have_grads_ = false;
}

std::vector<Tensor> Record::forward_eval(std::span<const Tensor> inputs) {
  if (inputs.size() != inputs_.size()) {
    throw std::invalid_argument("forward_eval: record declares " + std::to_string(inputs_.size()) +
                                " inputs, got " + std::to_string(inputs.size()));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& declared = nodes_[inputs_[i].index].value;
    if (declared.shape() != inputs[i].shape()) {
      throw ShapeError("forward_eval: input " + std::to_string(i) + " expected shape " +
                       to_string(declared.shape()) + ", got " + to_string(inputs[i].shape()));
    }
    nodes_[inputs_[i].index].value = inputs[i];
  }
  replay();
  std::vector<Tensor> out;
  out.reserve(outputs_.size());
  for (ValueId id : outputs_) out.push_back(nodes_[id.index].value);
  return out;
}

void Record::evaluate(Node& n) {
  auto arg = [&](std::size_t k) -> const Tensor& { return nodes_[n.args[k]].value; };
  switch (n.kind) {
    case OpKind::input:
    case OpKind::constant:
      return;
    case OpKind::matmul: {
      const Tensor& a = arg(0);
      const Tensor& b = arg(1);
      n.value = Tensor(Shape{a.rows(), b.cols()});
      as_matrix(n.value).noalias() = as_matrix(a) * as_matrix(b);
      return;
    }
    case OpKind::transpose: {
      const Tensor& a = arg(0);
      n.value = Tensor(Shape{a.cols(), a.rows()});
      as_matrix(n.value) = as_matrix(a).transpose();
      return;
    }
    case OpKind::add: {
      const Tensor& a = arg(0);
      const Tensor& b = arg(1);
      n.value = a;
      for (std::size_t i = 0; i < b.size(); ++i) n.value[i] += b[i];
      return;
    }
    case OpKind::add_bias: {
      const Tensor& a = arg(0);
      const Tensor& b = arg(1);
      n.value = a;
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = n.value.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
      }
      return;
    }
    case OpKind::multiply: {
      const Tensor& a = arg(0);
      const Tensor& b = arg(1);
      n.value = a;
      for (std::size_t i = 0; i < b.size(); ++i) n.value[i] *= b[i];
      return;
    }
    case OpKind::scale: {
      n.value = arg(0);
      for (double& v : n.value.values()) v *= n.scalar;
      return;
    }
    case OpKind::softmax: {
      const Tensor& a = arg(0);
      n.value = Tensor(a.shape());
      const std::size_t rows = a.rows();
      const std::size_t cols = a.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t visible =
            n.mask == SoftmaxMask::causal ? r + (cols - rows) + 1 : cols;
        auto in = a.row(r);
        auto out = n.value.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < visible; ++c) mx = std::max(mx, in[c]);
        double total = 0.0;
        for (std::size_t c = 0; c < visible; ++c) {
          out[c] = std::exp(in[c] - mx);
          total += out[c];
        }
        for (std::size_t c = 0; c < visible; ++c) out[c] /= total;
      }
      return;
    }
    case OpKind::layer_norm: {
      const Tensor& x = arg(0);
      const Tensor& g = arg(1);
      const Tensor& b = arg(2);
      const std::size_t rows = x.rows();
      const std::size_t cols = x.cols();
      n.value = Tensor(x.shape());
      n.cache = Tensor(x.shape());
      n.weights.assign(rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        auto in = x.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + n.scalar);
        n.weights[r] = rstd;
        auto xhat = n.cache.row(r);
        auto out = n.value.row(r);
        for (std::size_t c = 0; c < cols; ++c) {
          xhat[c] = (in[c] - mean) * rstd;
          out[c] = xhat[c] * g[c] + b[c];
        }
      }
      return;
    }
    case OpKind::embedding: {
      const Tensor& table = arg(0);
      const std::size_t d = table.cols();
      n.value = Tensor(Shape{n.indices.size(), d});
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        auto src = table.row(n.indices[r]);
        std::copy(src.begin(), src.end(), n.value.row(r).begin());
      }
      return;
    }
    case OpKind::gelu: {
      n.value = arg(0);
      for (double& v : n.value.values()) {
        const double u = kGeluScale * (v + kGeluCubic * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
      }
      return;
    }
    case OpKind::relu: {
      n.value = arg(0);
      for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
      return;
    }
    case OpKind::sigmoid: {
      n.value = arg(0);
      for (double& v : n.value.values()) v = 1.0 / (1.0 + std::exp(-v));
      return;
    }
    case OpKind::log: {
      n.value = arg(0);
      for (double& v : n.value.values()) {
        if (!(v > 0.0)) throw std::domain_error("log: argument is not positive");
        v = std::log(v);
      }
      return;
    }
    case OpKind::cross_entropy: {
      const Tensor& logits = arg(0);
      n.cache = Tensor(logits.shape());
      double loss = 0.0;
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto in = logits.row(r);
        auto p = n.cache.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
          p[c] = std::exp(in[c] - mx);
          total += p[c];
        }
        for (double& v : p) v /= total;
        if (n.weights[r] != 0.0) {
          const double log_p = in[n.indices[r]] - mx - std::log(total);
          loss -= n.weights[r] * log_p;
        }
      }
      n.value = Tensor::scalar(loss / n.scalar);
      return;
    }
    case OpKind::slice: {
      const Tensor& a = arg(0);
      n.value = Tensor(Shape{n.r1 - n.r0, n.c1 - n.c0});
      for (std::size_t r = n.r0; r < n.r1; ++r) {
        auto src = a.row(r);
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(n.c0),
                  src.begin() + static_cast<std::ptrdiff_t>(n.c1),
                  n.value.row(r - n.r0).begin());
      }
      return;
    }
    case OpKind::concat_rows: {
      std::size_t rows = 0;
      for (std::uint32_t a : n.args) rows += nodes_[a].value.rows();
      const std::size_t cols = nodes_[n.args.front()].value.cols();
      std::vector<double> data;
      data.reserve(rows * cols);
      for (std::uint32_t a : n.args) {
        auto v = nodes_[a].value.values();
        data.insert(data.end(), v.begin(), v.end());
      }
      n.value = Tensor(Shape{rows, cols}, std::move(data));
      return;
    }
    case OpKind::concat_cols: {
      const std::size_t rows = nodes_[n.args.front()].value.rows();
      std::size_t cols = 0;
      for (std::uint32_t a : n.args) cols += nodes_[a].value.cols();
      n.value = Tensor(Shape{rows, cols});
      std::size_t offset = 0;
      for (std::uint32_t a : n.args) {
        const Tensor& part = nodes_[a].value;
        for (std::size_t r = 0; r < rows; ++r) {
          auto src = part.row(r);
          std::copy(src.begin(), src.end(),
                    n.value.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
        }
        offset += part.cols();
      }
      return;
    }
    case OpKind::sum: {
      double total = 0.0;
      for (double v : arg(0).values()) total += v;
      n.value = Tensor::scalar(total);
      return;
    }
    case OpKind::pick: {
      n.value = Tensor::scalar(arg(0).at(n.r0, n.c0));
      return;
    }
  }
}

void Record::propagate(Node& n) {
  const Tensor& g = n.grad;
  auto target = [&](std::size_t k) -> Node* {
    Node& a = nodes_[n.args[k]];
    return a.needs_grad ? &a : nullptr;
  };
  switch (n.kind) {
    case OpKind::input:
    case OpKind::constant:
      return;
    case OpKind::matmul: {
      const Tensor& a = nodes_[n.args[0]].value;
      const Tensor& b = nodes_[n.args[1]].value;
      if (Node* ta = target(0)) as_matrix(ta->grad).noalias() += as_matrix(g) * as_matrix(b).transpose();
      if (Node* tb = target(1)) as_matrix(tb->grad).noalias() += as_matrix(a).transpose() * as_matrix(g);
      return;
    }
    case OpKind::transpose: {
      if (Node* ta = target(0)) as_matrix(ta->grad) += as_matrix(g).transpose();
      return;
    }
    case OpKind::add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (Node* t = target(k)) {
          for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
        }
      }
      return;
    }
    case OpKind::add_bias: {
      if (Node* ta = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) ta->grad[i] += g[i];
      }
      if (Node* tb = target(1)) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto row = g.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) tb->grad[c] += row[c];
        }
      }
      return;
    }
    case OpKind::multiply: {
      const Tensor& a = nodes_[n.args[0]].value;
      const Tensor& b = nodes_[n.args[1]].value;
      if (Node* ta = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) ta->grad[i] += g[i] * b[i];
      }
      if (Node* tb = target(1)) {
        for (std::size_t i = 0; i < g.size(); ++i) tb->grad[i] += g[i] * a[i];
      }
      return;
    }
    case OpKind::scale: {
      if (Node* ta = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) ta->grad[i] += g[i] * n.scalar;
      }
      return;
    }
    case OpKind::softmax: {
      Node* ta = target(0);
      if (!ta) return;
      const Tensor& y = n.value;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = g.row(r);
        auto out = ta->grad.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
        for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
      }
      return;
    }
    case OpKind::layer_norm: {
      const Tensor& gain = nodes_[n.args[1]].value;
      const std::size_t rows = g.rows();
      const std::size_t cols = g.cols();
      Node* tx = target(0);
      Node* tg = target(1);
      Node* tb = target(2);
      for (std::size_t r = 0; r < rows; ++r) {
        auto gr = g.row(r);
        auto xhat = n.cache.row(r);
        if (tg) {
          for (std::size_t c = 0; c < cols; ++c) tg->grad[c] += gr[c] * xhat[c];
        }
        if (tb) {
          for (std::size_t c = 0; c < cols; ++c) tb->grad[c] += gr[c];
        }
        if (tx) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = gr[c] * gain[c];
            mean_d += d;
            mean_dx += d * xhat[c];
          }
          mean_d /= static_cast<double>(cols);
          mean_dx /= static_cast<double>(cols);
          auto out = tx->grad.row(r);
          const double rstd = n.weights[r];
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = gr[c] * gain[c];
            out[c] += rstd * (d - mean_d - xhat[c] * mean_dx);
          }
        }
      }
      return;
    }
    case OpKind::embedding: {
      Node* tt = target(0);
      if (!tt) return;
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        auto src = g.row(r);
        auto dst = tt->grad.row(n.indices[r]);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
      return;
    }
    case OpKind::gelu: {
      Node* ta = target(0);
      if (!ta) return;
      const Tensor& x = nodes_[n.args[0]].value;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        const double u = kGeluScale * (v + kGeluCubic * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
        ta->grad[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
      return;
    }
    case OpKind::relu: {
      Node* ta = target(0);
      if (!ta) return;
      const Tensor& x = nodes_[n.args[0]].value;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0) ta->grad[i] += g[i];
      }
      return;
    }
    case OpKind::sigmoid: {
      Node* ta = target(0);
      if (!ta) return;
      for (std::size_t i = 0; i < n.value.size(); ++i) {
        const double y = n.value[i];
        ta->grad[i] += g[i] * y * (1.0 - y);
      }
      return;
    }
    case OpKind::log: {
      Node* ta = target(0);
      if (!ta) return;
      const Tensor& x = nodes_[n.args[0]].value;
      for (std::size_t i = 0; i < x.size(); ++i) ta->grad[i] += g[i] / x[i];
      return;
    }
    case OpKind::cross_entropy: {
      Node* ta = target(0);
      if (!ta) return;
      const double upstream = g[0];
      for (std::size_t r = 0; r < n.cache.rows(); ++r) {
        const double w = n.weights[r];
        if (w == 0.0) continue;
        const double factor = upstream * w / n.scalar;
        auto p = n.cache.row(r);
        auto out = ta->grad.row(r);
        for (std::size_t c = 0; c < p.size(); ++c) out[c] += factor * p[c];
        out[n.indices[r]] -= factor;
      }
      return;
    }
    case OpKind::slice: {
      Node* ta = target(0);
      if (!ta) return;
      for (std::size_t r = n.r0; r < n.r1; ++r) {
        auto src = g.row(r - n.r0);
        auto dst = ta->grad.row(r);
        for (std::size_t c = n.c0; c < n.c1; ++c) dst[c] += src[c - n.c0];
      }
      return;
    }
    case OpKind::concat_rows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.args.size(); ++k) {
        Node& part = nodes_[n.args[k]];
        const std::size_t count = part.value.size();
        if (part.needs_grad) {
          for (std::size_t i = 0; i < count; ++i) part.grad[i] += g[offset + i];
        }
        offset += count;
      }
      return;
    }
    case OpKind::concat_cols: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.args.size(); ++k) {
        Node& part = nodes_[n.args[k]];
        const std::size_t cols = part.value.cols();
        if (part.needs_grad) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto src = g.row(r);
            auto dst = part.grad.row(r);
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[offset + c];
          }
        }
        offset += cols;
      }
      return;
    }
    case OpKind::sum: {
      if (Node* ta = target(0)) {
        for (double& v : ta->grad.values()) v += g[0];
      }
      return;
    }
    case OpKind::pick: {
      if (Node* ta = target(0)) ta->grad.at(n.r0, n.c0) += g[0];
      return;
    }
  }
}

std::vector<Tensor> Record::backward(ValueId output, const Tensor& seed) {
  const Node& out = node(output);
  if (seed.shape() != out.value.shape()) {
    throw ShapeError("backward: seed shape " + to_string(seed.shape()) +
                     " does not match output shape " + to_string(out.value.shape()));
  }
  for (Node& n : nodes_) {
    if (n.needs_grad) {
      if (n.grad.shape() != n.value.shape()) {
        n.grad = Tensor(n.value.shape());
      } else {
        n.grad.fill(0.0);
      }
    }
  }
  if (nodes_[output.index].needs_grad) {
    nodes_[output.index].grad = seed;
    for (std::size_t i = output.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad) propagate(n);
    }
  }
  have_grads_ = true;

  std::vector<Tensor> grads;
  grads.reserve(inputs_.size());
  for (ValueId id : inputs_) {
    const Node& n = nodes_[id.index];
    if (n.needs_grad && id.index <= output.index) {
      grads.push_back(n.grad);
    } else {
      grads.emplace_back(n.value.shape());
    }
  }
  return grads;
}

std::vector<Tensor> Record::backward(ValueId output) {
  return backward(output, Tensor::filled(node(output).value.shape(), 1.0));
}

}  // namespace cgan
