#include "circuitlab/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace circuitlab {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const double* data, std::size_t rows, std::size_t cols) {
  return ConstMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap as_matrix(double* data, std::size_t rows, std::size_t cols) {
  return MutMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return;
  if (b.rank() < a.rank() && is_suffix(a.shape(), b.shape())) return;
  throw ShapeError(std::string(op) + ": cannot combine " + to_string(a.shape()) + " with " +
                   to_string(b.shape()));
}

void require_finite(const Tensor& t, OpKind kind) {
  if (!t.all_finite()) throw NonFiniteError(std::string("non-finite value produced by ") + op_name(kind));
}

// Sums a gradient shaped like `full` down to the broadcast operand's shape.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor out(shape);
  const std::size_t n = out.numel();
  for (std::size_t base = 0; base < g.numel(); base += n)
    for (std::size_t j = 0; j < n; ++j) out[j] += g[base + j];
  return out;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct MatmulDims {
  std::size_t batch = 1;  // number of independent products
  std::size_t m = 0, k = 0, n = 0;
  bool shared_b = true;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 && b.rank() == 2) {
    throw ShapeError("matmul: left operand must have rank >= 2, got " + to_string(a.shape()));
  }
  MatmulDims d;
  if (b.rank() == 2) {
    d.k = a.cols();
    d.m = a.rows();
    const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
    d.n = transpose_b ? b.dim(0) : b.dim(1);
    if (bk != d.k) {
      throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " +
                       to_string(b.shape()) + (transpose_b ? "^T" : ""));
    }
    return d;
  }
  if (b.rank() == 3 && a.rank() == 3 && a.dim(0) == b.dim(0)) {
    d.shared_b = false;
    d.batch = a.dim(0);
    d.m = a.dim(1);
    d.k = a.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    d.n = transpose_b ? b.dim(1) : b.dim(2);
    if (bk != d.k) {
      throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " +
                       to_string(b.shape()) + (transpose_b ? "^T" : ""));
    }
    return d;
  }
  throw ShapeError("matmul: unsupported operand shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()));
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::RmsNorm: return "rms_norm";
    case OpKind::Softmax: return "softmax";
    case OpKind::Gelu: return "gelu";
    case OpKind::Embedding: return "embedding";
    case OpKind::Slice: return "slice";
    case OpKind::Concat: return "concat";
  }
  return "unknown";
}

const Tensor& Gradients::operator[](Var v) const {
  auto it = grads_.find(v.id);
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for var " + std::to_string(v.id));
  return it->second;
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("var " + std::to_string(v.id) + " is not on the tape");
  return nodes_[v.id];
}

Var Tape::push(Node n) {
  require_finite(n.value, n.kind);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
OpKind Tape::kind(Var v) const { return node(v).kind; }
std::span<const std::size_t> Tape::inputs(Var v) const { return node(v).inputs; }

Var Tape::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b, bool transpose_b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  const MatmulDims d = matmul_dims(ta, tb, transpose_b);
  Shape out_shape = ta.shape();
  out_shape.back() = d.n;
  Tensor out(out_shape);
  for (std::size_t i = 0; i < d.batch; ++i) {
    const double* pa = ta.values().data() + i * d.m * d.k;
    const double* pb = tb.values().data() + (d.shared_b ? 0 : i * d.k * d.n);
    double* pc = out.values().data() + i * d.m * d.n;
    auto A = as_matrix(pa, d.m, d.k);
    auto C = as_matrix(pc, d.m, d.n);
    if (transpose_b) {
      C.noalias() = A * as_matrix(pb, d.n, d.k).transpose();
    } else {
      C.noalias() = A * as_matrix(pb, d.k, d.n);
    }
  }
  Node n;
  n.kind = OpKind::MatMul;
  n.inputs = {a.id, b.id};
  n.transpose_b = transpose_b;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_broadcast(ta, tb, "add");
  Tensor out = ta;
  const std::size_t nb = tb.numel();
  for (std::size_t base = 0; base < out.numel(); base += nb)
    for (std::size_t j = 0; j < nb; ++j) out[base + j] += tb[j];
  Node n;
  n.kind = OpKind::Add;
  n.inputs = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_broadcast(ta, tb, "mul");
  Tensor out = ta;
  const std::size_t nb = tb.numel();
  for (std::size_t base = 0; base < out.numel(); base += nb)
    for (std::size_t j = 0; j < nb; ++j) out[base + j] *= tb[j];
  Node n;
  n.kind = OpKind::Mul;
  n.inputs = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  Tensor out = value(a);
  for (auto& v : out.values()) v *= factor;
  Node n;
  n.kind = OpKind::Scale;
  n.inputs = {a.id};
  n.scalar = factor;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::rms_norm(Var a, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("rms_norm: eps must be positive");
  const Tensor& x = value(a);
  Tensor out = x;
  std::vector<double> inv(x.rows());
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(c) + eps);
    for (auto& v : row) v *= inv[r];
  }
  Node n;
  n.kind = OpKind::RmsNorm;
  n.inputs = {a.id};
  n.scalar = eps;
  n.aux = std::move(inv);
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::softmax(Var a, bool causal) {
  const Tensor& x = value(a);
  const std::size_t c = x.cols();
  if (causal && (x.rank() < 2 || x.dim(x.rank() - 2) != c)) {
    throw ShapeError("causal softmax needs square trailing dims, got " + to_string(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t limit = causal ? (r % c) + 1 : c;
    auto in = x.row(r);
    auto o = out.row(r);
    double mx = in[0];
    for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < limit; ++j) o[j] /= total;
  }
  Node n;
  n.kind = OpKind::Softmax;
  n.inputs = {a.id};
  n.causal = causal;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::gelu(Var a) {
  Tensor out = value(a);
  for (auto& v : out.values()) v = gelu_value(v);
  Node n;
  n.kind = OpKind::Gelu;
  n.inputs = {a.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::embedding(Var table, std::span<const int> ids, Shape lead_shape) {
  const Tensor& t = value(table);
  if (t.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + to_string(t.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  if (lead_shape.empty()) lead_shape = {ids.size()};
  if (shape_numel(lead_shape) != ids.size()) {
    throw ShapeError("embedding: lead shape " + to_string(lead_shape) + " does not hold " +
                     std::to_string(ids.size()) + " ids");
  }
  const std::size_t d = t.dim(1);
  Shape out_shape = lead_shape;
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= t.dim(0)) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(t.dim(0)) + " rows");
    }
    auto src = t.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  Node n;
  n.kind = OpKind::Embedding;
  n.inputs = {table.id};
  n.ids.assign(ids.begin(), ids.end());
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = value(a);
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                     to_string(x.shape()));
  }
  Shape s = x.shape();
  s.back() = end - begin;
  Tensor out(s);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin), src.begin() + static_cast<std::ptrdiff_t>(end),
              out.row(r).begin());
  }
  Node n;
  n.kind = OpKind::Slice;
  n.inputs = {a.id};
  n.begin = begin;
  n.end = end;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = value(parts[0]);
  std::size_t width = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    if (t.rank() != first.rank() || t.rows() != first.rows() ||
        !std::equal(t.shape().begin(), t.shape().end() - 1, first.shape().begin())) {
      throw ShapeError("concat: leading dims differ between " + to_string(first.shape()) + " and " +
                       to_string(t.shape()));
    }
    width += t.cols();
  }
  Shape s = first.shape();
  s.back() = width;
  Tensor out(s);
  Node n;
  n.kind = OpKind::Concat;
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    for (std::size_t r = 0; r < t.rows(); ++r) {
      auto src = t.row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += t.cols();
    n.inputs.push_back(p.id);
  }
  n.value = std::move(out);
  return push(std::move(n));
}

void Tape::accumulate(std::vector<Tensor>& grads, std::size_t id, const Tensor& g) const {
  Tensor& slot = grads[id];
  if (slot.empty()) {
    slot = g;
    return;
  }
  auto dst = slot.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backprop_node(std::size_t id, const Tensor& g, std::vector<Tensor>& grads,
                         const std::vector<char>& needed) const {
  const Node& n = nodes_[id];
  auto wants = [&](std::size_t k) { return needed[n.inputs[k]] != 0; };
  switch (n.kind) {
    case OpKind::Leaf:
      return;
    case OpKind::MatMul: {
      const Tensor& ta = nodes_[n.inputs[0]].value;
      const Tensor& tb = nodes_[n.inputs[1]].value;
      const MatmulDims d = matmul_dims(ta, tb, n.transpose_b);
      if (wants(0)) {
        Tensor ga(ta.shape());
        for (std::size_t i = 0; i < d.batch; ++i) {
          auto G = as_matrix(g.values().data() + i * d.m * d.n, d.m, d.n);
          const double* pb = tb.values().data() + (d.shared_b ? 0 : i * d.k * d.n);
          auto GA = as_matrix(ga.values().data() + i * d.m * d.k, d.m, d.k);
          if (n.transpose_b) {
            GA.noalias() = G * as_matrix(pb, d.n, d.k);
          } else {
            GA.noalias() = G * as_matrix(pb, d.k, d.n).transpose();
          }
        }
        accumulate(grads, n.inputs[0], ga);
      }
      if (wants(1)) {
        Tensor gb(tb.shape());
        for (std::size_t i = 0; i < d.batch; ++i) {
          auto G = as_matrix(g.values().data() + i * d.m * d.n, d.m, d.n);
          auto A = as_matrix(ta.values().data() + i * d.m * d.k, d.m, d.k);
          double* pgb = gb.values().data() + (d.shared_b ? 0 : i * d.k * d.n);
          if (n.transpose_b) {
            as_matrix(pgb, d.n, d.k).noalias() += G.transpose() * A;
          } else {
            as_matrix(pgb, d.k, d.n).noalias() += A.transpose() * G;
          }
        }
        accumulate(grads, n.inputs[1], gb);
      }
      return;
    }
    case OpKind::Add: {
      if (wants(0)) accumulate(grads, n.inputs[0], g);
      if (wants(1)) accumulate(grads, n.inputs[1], reduce_to(g, nodes_[n.inputs[1]].value.shape()));
      return;
    }
    case OpKind::Mul: {
      const Tensor& ta = nodes_[n.inputs[0]].value;
      const Tensor& tb = nodes_[n.inputs[1]].value;
      const std::size_t nb = tb.numel();
      if (wants(0)) {
        Tensor ga = g;
        for (std::size_t base = 0; base < ga.numel(); base += nb)
          for (std::size_t j = 0; j < nb; ++j) ga[base + j] *= tb[j];
        accumulate(grads, n.inputs[0], ga);
      }
      if (wants(1)) {
        Tensor full = g;
        for (std::size_t i = 0; i < full.numel(); ++i) full[i] *= ta[i];
        accumulate(grads, n.inputs[1], reduce_to(full, tb.shape()));
      }
      return;
    }
    case OpKind::Scale: {
      if (!wants(0)) return;
      Tensor ga = g;
      for (auto& v : ga.values()) v *= n.scalar;
      accumulate(grads, n.inputs[0], ga);
      return;
    }
    case OpKind::RmsNorm: {
      if (!wants(0)) return;
      const Tensor& y = n.value;
      const std::size_t c = y.cols();
      Tensor ga(y.shape());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto gy = g.row(r);
        auto yr = y.row(r);
        auto out = ga.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gy[j] * yr[j];
        const double inv = n.aux[r];
        const double mean_dot = dot / static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) out[j] = inv * (gy[j] - yr[j] * mean_dot);
      }
      accumulate(grads, n.inputs[0], ga);
      return;
    }
    case OpKind::Softmax: {
      if (!wants(0)) return;
      const Tensor& y = n.value;
      const std::size_t c = y.cols();
      Tensor ga(y.shape());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        const std::size_t limit = n.causal ? (r % c) + 1 : c;
        auto gy = g.row(r);
        auto yr = y.row(r);
        auto out = ga.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < limit; ++j) dot += gy[j] * yr[j];
        for (std::size_t j = 0; j < limit; ++j) out[j] = yr[j] * (gy[j] - dot);
      }
      accumulate(grads, n.inputs[0], ga);
      return;
    }
    case OpKind::Gelu: {
      if (!wants(0)) return;
      const Tensor& x = nodes_[n.inputs[0]].value;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= gelu_derivative(x[i]);
      accumulate(grads, n.inputs[0], ga);
      return;
    }
    case OpKind::Embedding: {
      if (!wants(0)) return;
      const Tensor& table = nodes_[n.inputs[0]].value;
      Tensor gt(table.shape());
      for (std::size_t i = 0; i < n.ids.size(); ++i) {
        auto src = g.row(i);
        auto dst = gt.row(static_cast<std::size_t>(n.ids[i]));
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      accumulate(grads, n.inputs[0], gt);
      return;
    }
    case OpKind::Slice: {
      if (!wants(0)) return;
      const Tensor& x = nodes_[n.inputs[0]].value;
      Tensor ga(x.shape());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto src = g.row(r);
        std::copy(src.begin(), src.end(), ga.row(r).begin() + static_cast<std::ptrdiff_t>(n.begin));
      }
      accumulate(grads, n.inputs[0], ga);
      return;
    }
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = nodes_[n.inputs[k]].value;
        if (wants(k)) {
          Tensor gp(part.shape());
          for (std::size_t r = 0; r < part.rows(); ++r) {
            auto src = g.row(r).subspan(offset, part.cols());
            std::copy(src.begin(), src.end(), gp.row(r).begin());
          }
          accumulate(grads, n.inputs[k], gp);
        }
        offset += part.cols();
      }
      return;
    }
  }
}

Gradients Tape::backward(Var output, const Tensor& seed, std::span<const Var> wrt) const {
  const Node& out = node(output);
  if (seed.shape() != out.value.shape()) {
    throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " does not match output shape " +
                     to_string(out.value.shape()));
  }
  std::vector<char> needed(nodes_.size(), 0);
  std::vector<char> requested(nodes_.size(), 0);
  for (Var v : wrt) {
    node(v);
    needed[v.id] = 1;
    requested[v.id] = 1;
  }
  // A node needs a gradient iff some requested var lies upstream of it.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (needed[i]) continue;
    for (std::size_t in : nodes_[i].inputs) {
      if (needed[in]) {
        needed[i] = 1;
        break;
      }
    }
  }
  std::vector<Tensor> grads(nodes_.size());
  if (needed[output.id]) grads[output.id] = seed;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    if (grads[i].empty() || nodes_[i].kind == OpKind::Leaf) continue;
    backprop_node(i, grads[i], grads, needed);
    if (!requested[i]) grads[i] = Tensor();
  }
  Gradients result;
  for (Var v : wrt) {
    const Tensor& g = grads[v.id];
    result.grads_[v.id] = g.empty() ? Tensor(nodes_[v.id].value.shape()) : g;
  }
  return result;
}

ForwardResult forward(const Program& program, const NamedTensors& inputs) {
  ForwardResult r;
  for (const auto& [name, t] : inputs) r.input_vars[name] = r.tape.leaf(t);
  r.output_vars = program(r.tape, r.input_vars);
  for (const auto& [name, v] : r.output_vars) r.outputs[name] = r.tape.value(v);
  return r;
}

NamedTensors backward(const ForwardResult& run, const std::string& output, const Tensor& seed) {
  auto it = run.output_vars.find(output);
  if (it == run.output_vars.end()) throw std::out_of_range("program has no output named '" + output + "'");
  std::vector<Var> wrt;
  for (const auto& [name, v] : run.input_vars) wrt.push_back(v);
  Gradients g = run.tape.backward(it->second, seed, wrt);
  NamedTensors out;
  for (const auto& [name, v] : run.input_vars) out[name] = g[v];
  return out;
}

}  // namespace circuitlab
