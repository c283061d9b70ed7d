#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "circuitlab/tensor.hpp"

namespace circuitlab {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
  friend bool operator==(Var, Var) = default;
  friend auto operator<=>(Var, Var) = default;
};

enum class OpKind { Leaf, MatMul, Add, Mul, Scale, RmsNorm, Softmax, Gelu, Embedding, Slice, Concat };

const char* op_name(OpKind kind);

class Gradients {
 public:
  bool contains(Var v) const { return grads_.count(v.id) > 0; }
  const Tensor& operator[](Var v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<std::size_t, Tensor> grads_;
};

/// Records primitive operations in execution order. Each call evaluates the
/// primitive immediately in 64-bit arithmetic and appends it; ids are
/// therefore a topological order.
///
/// Binary element-wise ops accept either equal shapes or a right operand
/// whose shape is a trailing suffix of the left operand's shape (broadcast
/// over leading batch dimensions only).
class Tape {
 public:
  Var leaf(Tensor value);

  /// a: (..., m, k). b: (k, n) shared across leading dims, or (batch, k, n)
  /// with a of shape (batch, m, k). With transpose_b, b is read as (n, k).
  Var matmul(Var a, Var b, bool transpose_b = false);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  /// x / sqrt(mean(x^2) + eps) along the last dimension.
  Var rms_norm(Var a, double eps = 1e-6);
  /// Softmax along the last dimension. With causal, the last two dims must be
  /// square and entries above the diagonal are excluded (exactly zero).
  Var softmax(Var a, bool causal = false);
  /// Exact (erf) GELU.
  Var gelu(Var a);
  /// Gathers rows of a (vocab, d) table. Output shape is lead_shape + {d};
  /// an empty lead_shape means {ids.size()}.
  Var embedding(Var table, std::span<const int> ids, Shape lead_shape = {});
  /// Columns [begin, end) of the last dimension.
  Var slice(Var a, std::size_t begin, std::size_t end);
  /// Concatenation along the last dimension.
  Var concat(std::span<const Var> parts);

  const Tensor& value(Var v) const;
  OpKind kind(Var v) const;
  std::span<const std::size_t> inputs(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode pass from `output` seeded with `seed` (same shape as the
  /// output). Returns d(seed . output)/d(v) for each v in wrt; a requested
  /// var the output does not depend on gets an all-zero gradient.
  Gradients backward(Var output, const Tensor& seed, std::span<const Var> wrt) const;

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool transpose_b = false;
    bool causal = false;
    double scalar = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<int> ids;
    std::vector<double> aux;
  };

  const Node& node(Var v) const;
  Var push(Node n);
  void accumulate(std::vector<Tensor>& grads, std::size_t id, const Tensor& g) const;
  void backprop_node(std::size_t id, const Tensor& g, std::vector<Tensor>& grads,
                     const std::vector<char>& needed) const;

  std::vector<Node> nodes_;
};

using NamedTensors = std::map<std::string, Tensor>;
using NamedVars = std::map<std::string, Var>;

/// A differentiable program: given leaf vars for named inputs, records its
/// computation on the tape and returns named output vars.
using Program = std::function<NamedVars(Tape&, const NamedVars&)>;

struct ForwardResult {
  NamedTensors outputs;
  NamedVars input_vars;
  NamedVars output_vars;
  Tape tape;
};

ForwardResult forward(const Program& program, const NamedTensors& inputs);

/// Gradients of a single named output (seeded with `seed`) with respect to
/// every program input.
NamedTensors backward(const ForwardResult& run, const std::string& output, const Tensor& seed);

}  // namespace circuitlab
