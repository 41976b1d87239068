#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "m2m/error.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

// Primitive operations of the expression graph. The set is closed under
// differentiation: the gradient of any graph is again a graph over these
// primitives, so a second call to gradient() yields second-order graphs.
//
//   leaf            named input or trainable parameter
//   ones            constant tensor of ones (seeds adjoints)
//   matmul          2-d product with transpose flags
//   add             same-shape, or (n,f)+(f) bias broadcast
//   mul             elementwise product, same shape
//   relu / step     step is relu's derivative; d(step) := 0
//   tanh_
//   power           x^p elementwise, constant p
//   recip0          1/x with value and derivative 0 at x=0 (norm subgradient)
//   affine          p0*x + p1 elementwise, constant p0, p1
//   sum / mean      axis all -> scalar, rows: (n,f)->(f), cols: (n,f)->(n)
//   l2norm_rows     (n,f) -> (n,) Euclidean norm of each row
//   lerp            alpha (n,) blends rows: alpha*a + (1-alpha)*b
//   bcast           scalar -> arbitrary shape
//   bcast_row       (f) -> (n,f), rows repeated
//   bcast_col       (n) -> (n,f), columns repeated
enum class Op {
  leaf,
  ones,
  matmul,
  add,
  mul,
  relu,
  step,
  tanh_,
  power,
  recip0,
  affine,
  sum,
  mean,
  l2norm_rows,
  lerp,
  bcast,
  bcast_row,
  bcast_col,
};

enum class Axis { all, rows, cols };

struct GraphNode {
  Op op = Op::leaf;
  int a = -1, b = -1, c = -1;  // operand node ids
  Shape shape;                 // inferred at construction
  double p0 = 0.0, p1 = 0.0;   // power exponent / affine coefficients
  Axis axis = Axis::all;
  bool trans_a = false, trans_b = false;
  std::string name;  // leaves only
  bool trainable = false;
};

class ExprGraph;
using Bindings = std::map<std::string, Tensor>;

// Topologically ordered DAG of primitives with named leaves and outputs.
// Immutable once built except for appending; safe to share across threads
// for concurrent evaluation.
class ExprGraph {
 public:
  int input(const std::string& name, Shape shape, bool trainable = false) {
    if (leaves_.count(name))
      throw validation_error("graph: duplicate leaf '" + name + "'");
    GraphNode n;
    n.op = Op::leaf;
    n.shape = std::move(shape);
    n.name = name;
    n.trainable = trainable;
    int id = push(std::move(n));
    leaves_[name] = id;
    return id;
  }

  int param(const std::string& name, Shape shape) { return input(name, std::move(shape), true); }

  int ones(Shape shape) {
    GraphNode n;
    n.op = Op::ones;
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa.size() != 2 || sb.size() != 2)
      throw validation_error("matmul: operands must be rank 2, got " + shape_str(sa) + " and " +
                             shape_str(sb));
    std::size_t ar = trans_a ? sa[1] : sa[0], ac = trans_a ? sa[0] : sa[1];
    std::size_t br = trans_b ? sb[1] : sb[0], bc = trans_b ? sb[0] : sb[1];
    if (ac != br)
      throw validation_error("matmul: inner extents differ, " + shape_str(sa) + (trans_a ? "^T" : "") +
                             " x " + shape_str(sb) + (trans_b ? "^T" : ""));
    GraphNode n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.shape = {ar, bc};
    return push(std::move(n));
  }

  int add(int a, int b) {
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    bool bias = sa.size() == 2 && sb.size() == 1 && sa[1] == sb[0];
    if (!(sa == sb || bias))
      throw validation_error("add: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    GraphNode n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    n.shape = sa;
    return push(std::move(n));
  }

  // a - b, as a composite
  int sub(int a, int b) { return add(a, affine(b, -1.0, 0.0)); }

  int mul(int a, int b) {
    if (at(a).shape != at(b).shape)
      throw validation_error("mul: shapes differ, " + shape_str(at(a).shape) + " vs " +
                             shape_str(at(b).shape));
    GraphNode n;
    n.op = Op::mul;
    n.a = a;
    n.b = b;
    n.shape = at(a).shape;
    return push(std::move(n));
  }

  int relu(int a) { return unary(Op::relu, a); }
  int step(int a) { return unary(Op::step, a); }
  int tanh_(int a) { return unary(Op::tanh_, a); }
  int recip0(int a) { return unary(Op::recip0, a); }

  int power(int a, double exponent) {
    GraphNode n;
    n.op = Op::power;
    n.a = a;
    n.p0 = exponent;
    n.shape = at(a).shape;
    return push(std::move(n));
  }

  int affine(int a, double scale, double shift) {
    GraphNode n;
    n.op = Op::affine;
    n.a = a;
    n.p0 = scale;
    n.p1 = shift;
    n.shape = at(a).shape;
    return push(std::move(n));
  }

  int sum(int a, Axis axis = Axis::all) { return reduce(Op::sum, a, axis); }
  int mean(int a, Axis axis = Axis::all) { return reduce(Op::mean, a, axis); }

  int l2norm_rows(int a) {
    const Shape& s = at(a).shape;
    if (s.size() != 2) throw validation_error("l2norm_rows: operand must be rank 2");
    GraphNode n;
    n.op = Op::l2norm_rows;
    n.a = a;
    n.shape = {s[0]};
    return push(std::move(n));
  }

  // alpha*a + (1-alpha)*b with one alpha per row
  int lerp(int a, int b, int alpha) {
    const Shape& sa = at(a).shape;
    if (sa != at(b).shape || sa.size() != 2)
      throw validation_error("lerp: endpoint shapes must match and be rank 2");
    if (at(alpha).shape != Shape{sa[0]})
      throw validation_error("lerp: alpha must have one entry per row");
    GraphNode n;
    n.op = Op::lerp;
    n.a = a;
    n.b = b;
    n.c = alpha;
    n.shape = sa;
    return push(std::move(n));
  }

  int bcast(int a, Shape shape) {
    if (!at(a).shape.empty()) throw validation_error("bcast: operand must be scalar");
    GraphNode n;
    n.op = Op::bcast;
    n.a = a;
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  int bcast_row(int a, std::size_t rows) {
    if (at(a).shape.size() != 1) throw validation_error("bcast_row: operand must be rank 1");
    GraphNode n;
    n.op = Op::bcast_row;
    n.a = a;
    n.shape = {rows, at(a).shape[0]};
    return push(std::move(n));
  }

  int bcast_col(int a, std::size_t cols) {
    if (at(a).shape.size() != 1) throw validation_error("bcast_col: operand must be rank 1");
    GraphNode n;
    n.op = Op::bcast_col;
    n.a = a;
    n.shape = {at(a).shape[0], cols};
    return push(std::move(n));
  }

  void mark_output(const std::string& name, int id) {
    at(id);
    if (outputs_.count(name)) throw validation_error("graph: duplicate output '" + name + "'");
    outputs_[name] = id;
  }

  const GraphNode& at(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw validation_error("graph: node id " + std::to_string(id) + " out of range");
    return nodes_[static_cast<std::size_t>(id)];
  }

  const Shape& shape_of(int id) const { return at(id).shape; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const std::map<std::string, int>& leaves() const { return leaves_; }
  const std::map<std::string, int>& outputs() const { return outputs_; }

  int leaf_id(const std::string& name) const {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw validation_error("graph: unknown leaf '" + name + "'");
    return it->second;
  }

  int output_id(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw validation_error("graph: unknown output '" + name + "'");
    return it->second;
  }

 private:
  int unary(Op op, int a) {
    GraphNode n;
    n.op = op;
    n.a = a;
    n.shape = at(a).shape;
    return push(std::move(n));
  }

  int reduce(Op op, int a, Axis axis) {
    const Shape& s = at(a).shape;
    GraphNode n;
    n.op = op;
    n.a = a;
    n.axis = axis;
    if (axis == Axis::all) {
      n.shape = {};
    } else {
      if (s.size() != 2) throw validation_error("reduce: axis variants need rank-2 operand");
      n.shape = axis == Axis::rows ? Shape{s[1]} : Shape{s[0]};
    }
    return push(std::move(n));
  }

  int push(GraphNode n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<GraphNode> nodes_;
  std::map<std::string, int> leaves_;
  std::map<std::string, int> outputs_;
};

namespace detail {

inline void matmul_kernel(const Tensor& A, const Tensor& B, bool tA, bool tB, Tensor& out) {
  std::size_t m = out.extent(0), n = out.extent(1);
  std::size_t k = tA ? A.extent(0) : A.extent(1);
  const double* a = A.data().data();
  const double* b = B.data().data();
  double* o = out.data().data();
  std::fill(o, o + m * n, 0.0);
  std::size_t lda = A.extent(1), ldb = B.extent(1);
  if (!tA && !tB) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double av = a[i * lda + p];
        if (av == 0.0) continue;
        const double* br = b + p * ldb;
        double* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
      }
  } else if (tA && !tB) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        double av = a[p * lda + i];
        if (av == 0.0) continue;
        const double* br = b + p * ldb;
        double* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
      }
  } else if (!tA && tB) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double* ar = a + i * lda;
        const double* br = b + j * ldb;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
        o[i * n + j] = acc;
      }
  } else {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        double av = a[p * lda + i];
        if (av == 0.0) continue;
        double* orow = o + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * b[j * ldb + p];
      }
  }
}

inline std::vector<char> live_nodes(const ExprGraph& g, const std::vector<int>& roots) {
  std::vector<char> live(g.size(), 0);
  std::vector<int> stack(roots);
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    if (id < 0 || live[static_cast<std::size_t>(id)]) continue;
    live[static_cast<std::size_t>(id)] = 1;
    const GraphNode& n = g.at(id);
    stack.push_back(n.a);
    stack.push_back(n.b);
    stack.push_back(n.c);
  }
  return live;
}

}  // namespace detail

// Evaluates the requested outputs. Pure: identical bindings give bit-identical
// results. Throws on unbound leaves, shape mismatches and non-finite
// intermediates.
inline Bindings evaluate(const ExprGraph& g, const Bindings& bindings,
                         const std::vector<std::string>& which) {
  for (const auto& [name, t] : bindings) {
    int id = g.leaf_id(name);
    if (t.shape() != g.at(id).shape)
      throw validation_error("evaluate: binding '" + name + "' has shape " + shape_str(t.shape()) +
                             ", leaf declared " + shape_str(g.at(id).shape));
  }
  std::vector<int> roots;
  roots.reserve(which.size());
  for (const auto& name : which) roots.push_back(g.output_id(name));
  std::vector<char> live = detail::live_nodes(g, roots);

  std::vector<Tensor> vals(g.size());
  for (std::size_t id = 0; id < g.size(); ++id) {
    if (!live[id]) continue;
    const GraphNode& n = g.at(static_cast<int>(id));
    Tensor& out = vals[id];
    switch (n.op) {
      case Op::leaf: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) throw validation_error("evaluate: unbound leaf '" + n.name + "'");
        out = it->second;
        break;
      }
      case Op::ones:
        out = Tensor::full(n.shape, 1.0);
        break;
      case Op::matmul:
        out = Tensor::zeros(n.shape);
        detail::matmul_kernel(vals[n.a], vals[n.b], n.trans_a, n.trans_b, out);
        break;
      case Op::add: {
        const Tensor& a = vals[n.a];
        const Tensor& b = vals[n.b];
        out = a;
        if (a.same_shape(b)) {
          for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
        } else {  // (n,f) + (f)
          std::size_t rows = a.extent(0), cols = a.extent(1);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += b[j];
        }
        break;
      }
      case Op::mul: {
        out = vals[n.a];
        const Tensor& b = vals[n.b];
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
        break;
      }
      case Op::relu: {
        out = vals[n.a];
        for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
        break;
      }
      case Op::step: {
        out = vals[n.a];
        for (auto& v : out.data()) v = v > 0.0 ? 1.0 : 0.0;
        break;
      }
      case Op::tanh_: {
        out = vals[n.a];
        for (auto& v : out.data()) v = std::tanh(v);
        break;
      }
      case Op::power: {
        out = vals[n.a];
        for (auto& v : out.data()) v = std::pow(v, n.p0);
        break;
      }
      case Op::recip0: {
        out = vals[n.a];
        for (auto& v : out.data()) v = v == 0.0 ? 0.0 : 1.0 / v;
        break;
      }
      case Op::affine: {
        out = vals[n.a];
        for (auto& v : out.data()) v = n.p0 * v + n.p1;
        break;
      }
      case Op::sum:
      case Op::mean: {
        const Tensor& a = vals[n.a];
        bool is_mean = n.op == Op::mean;
        if (n.axis == Axis::all) {
          double acc = 0.0;
          for (double v : a.data()) acc += v;
          if (is_mean) acc /= static_cast<double>(a.numel());
          out = Tensor::scalar(acc);
        } else if (n.axis == Axis::rows) {
          std::size_t rows = a.extent(0), cols = a.extent(1);
          out = Tensor::zeros({cols});
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out[j] += a.at(i, j);
          if (is_mean)
            for (auto& v : out.data()) v /= static_cast<double>(rows);
        } else {
          std::size_t rows = a.extent(0), cols = a.extent(1);
          out = Tensor::zeros({rows});
          for (std::size_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += a.at(i, j);
            out[i] = is_mean ? acc / static_cast<double>(cols) : acc;
          }
        }
        break;
      }
      case Op::l2norm_rows: {
        const Tensor& a = vals[n.a];
        std::size_t rows = a.extent(0), cols = a.extent(1);
        out = Tensor::zeros({rows});
        for (std::size_t i = 0; i < rows; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            double v = a.at(i, j);
            acc += v * v;
          }
          out[i] = std::sqrt(acc);
        }
        break;
      }
      case Op::lerp: {
        const Tensor& a = vals[n.a];
        const Tensor& b = vals[n.b];
        const Tensor& alpha = vals[n.c];
        std::size_t rows = a.extent(0), cols = a.extent(1);
        out = Tensor::zeros(n.shape);
        for (std::size_t i = 0; i < rows; ++i) {
          double w = alpha[i];
          for (std::size_t j = 0; j < cols; ++j)
            out.at(i, j) = w * a.at(i, j) + (1.0 - w) * b.at(i, j);
        }
        break;
      }
      case Op::bcast: {
        out = Tensor::full(n.shape, vals[n.a].item());
        break;
      }
      case Op::bcast_row: {
        const Tensor& a = vals[n.a];
        std::size_t rows = n.shape[0], cols = n.shape[1];
        out = Tensor::zeros(n.shape);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = a[j];
        break;
      }
      case Op::bcast_col: {
        const Tensor& a = vals[n.a];
        std::size_t rows = n.shape[0], cols = n.shape[1];
        out = Tensor::zeros(n.shape);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = a[i];
        break;
      }
    }
    if (!out.all_finite())
      throw numeric_error("evaluate: non-finite intermediate at node " + std::to_string(id) +
                          (n.name.empty() ? "" : " ('" + n.name + "')"));
  }

  Bindings result;
  for (const auto& name : which) result[name] = vals[static_cast<std::size_t>(g.output_id(name))];
  return result;
}

inline Bindings evaluate(const ExprGraph& g, const Bindings& bindings) {
  std::vector<std::string> all;
  all.reserve(g.outputs().size());
  for (const auto& [name, id] : g.outputs()) all.push_back(name);
  return evaluate(g, bindings, all);
}

// Reverse-mode differentiation as a graph transform. Returns a new graph that
// contains the original one plus adjoint nodes; for every leaf in `wrt` the
// result has an output named "<prefix><leaf>". Because adjoints are built from
// the same primitive set, the result can be differentiated again.
inline ExprGraph gradient(const ExprGraph& g, const std::string& scalar_output,
                          const std::vector<std::string>& wrt,
                          const std::string& prefix = "grad::") {
  int out_id = g.output_id(scalar_output);
  if (!g.at(out_id).shape.empty())
    throw validation_error("gradient: output '" + scalar_output + "' has shape " +
                           shape_str(g.at(out_id).shape) + ", expected scalar");

  std::vector<int> wrt_ids;
  for (const auto& name : wrt) {
    int id = g.leaf_id(name);
    wrt_ids.push_back(id);
    if (g.outputs().count(prefix + name))
      throw validation_error("gradient: output '" + prefix + name + "' already exists");
  }

  // Copy the graph (node ids are preserved), then append adjoints.
  ExprGraph r = g;

  // needs[i]: some wrt leaf is reachable from node i. Nodes without it get no
  // adjoint, which keeps repeated differentiation from blowing up the graph.
  std::vector<char> needs(g.size(), 0);
  for (int id : wrt_ids) needs[static_cast<std::size_t>(id)] = 1;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const GraphNode& n = g.at(static_cast<int>(i));
    for (int op_id : {n.a, n.b, n.c})
      if (op_id >= 0 && needs[static_cast<std::size_t>(op_id)]) needs[i] = 1;
  }

  // adjoint[i]: node id in r accumulating dL/d(node i), or -1.
  std::vector<int> adjoint(g.size(), -1);
  auto accumulate = [&](int node, int contribution) {
    if (adjoint[static_cast<std::size_t>(node)] < 0)
      adjoint[static_cast<std::size_t>(node)] = contribution;
    else
      adjoint[static_cast<std::size_t>(node)] =
          r.add(adjoint[static_cast<std::size_t>(node)], contribution);
  };

  adjoint[static_cast<std::size_t>(out_id)] = r.ones({});

  std::vector<char> live = detail::live_nodes(g, {out_id});
  for (int id = out_id; id >= 0; --id) {
    std::size_t uid = static_cast<std::size_t>(id);
    if (!live[uid] || !needs[uid] || adjoint[uid] < 0) continue;
    const GraphNode& n = g.at(id);
    int d = adjoint[uid];
    auto want = [&](int op_id) { return op_id >= 0 && needs[static_cast<std::size_t>(op_id)]; };
    switch (n.op) {
      case Op::leaf:
      case Op::ones:
        break;
      case Op::matmul: {
        bool tA = n.trans_a, tB = n.trans_b;
        if (want(n.a)) {
          int da = !tA ? (!tB ? r.matmul(d, n.b, false, true) : r.matmul(d, n.b, false, false))
                       : (!tB ? r.matmul(n.b, d, false, true) : r.matmul(n.b, d, true, true));
          accumulate(n.a, da);
        }
        if (want(n.b)) {
          int db = !tB ? (!tA ? r.matmul(n.a, d, true, false) : r.matmul(n.a, d, false, false))
                       : (!tA ? r.matmul(d, n.a, true, false) : r.matmul(d, n.a, true, true));
          accumulate(n.b, db);
        }
        break;
      }
      case Op::add: {
        if (want(n.a)) accumulate(n.a, d);
        if (want(n.b)) {
          if (g.at(n.a).shape == g.at(n.b).shape)
            accumulate(n.b, d);
          else  // bias broadcast: reduce over the batch axis
            accumulate(n.b, r.sum(d, Axis::rows));
        }
        break;
      }
      case Op::mul:
        if (want(n.a)) accumulate(n.a, r.mul(d, n.b));
        if (want(n.b)) accumulate(n.b, r.mul(d, n.a));
        break;
      case Op::relu:
        if (want(n.a)) accumulate(n.a, r.mul(d, r.step(n.a)));
        break;
      case Op::step:
        break;  // zero almost everywhere; the kink contributes nothing
      case Op::tanh_:
        if (want(n.a)) accumulate(n.a, r.mul(d, r.affine(r.power(id, 2.0), -1.0, 1.0)));
        break;
      case Op::power:
        if (want(n.a)) accumulate(n.a, r.mul(d, r.affine(r.power(n.a, n.p0 - 1.0), n.p0, 0.0)));
        break;
      case Op::recip0:
        // d/dx = -1/x^2 away from 0, and 0 at 0: -(recip0(x))^2
        if (want(n.a)) accumulate(n.a, r.mul(d, r.affine(r.mul(id, id), -1.0, 0.0)));
        break;
      case Op::affine:
        if (want(n.a)) accumulate(n.a, r.affine(d, n.p0, 0.0));
        break;
      case Op::sum:
      case Op::mean: {
        if (!want(n.a)) break;
        const Shape& sa = g.at(n.a).shape;
        int back;
        std::size_t count;
        if (n.axis == Axis::all) {
          back = r.bcast(d, sa);
          count = shape_numel(sa);
        } else if (n.axis == Axis::rows) {
          back = r.bcast_row(d, sa[0]);
          count = sa[0];
        } else {
          back = r.bcast_col(d, sa[1]);
          count = sa[1];
        }
        if (n.op == Op::mean) back = r.affine(back, 1.0 / static_cast<double>(count), 0.0);
        accumulate(n.a, back);
        break;
      }
      case Op::l2norm_rows: {
        if (!want(n.a)) break;
        // d/dx_ij = adj_i * x_ij / norm_i; zero rows take the 0 subgradient
        int scaled = r.mul(d, r.recip0(id));
        accumulate(n.a, r.mul(r.bcast_col(scaled, g.at(n.a).shape[1]), n.a));
        break;
      }
      case Op::lerp: {
        std::size_t cols = n.shape[1];
        if (want(n.a)) accumulate(n.a, r.mul(d, r.bcast_col(n.c, cols)));
        if (want(n.b)) accumulate(n.b, r.mul(d, r.affine(r.bcast_col(n.c, cols), -1.0, 1.0)));
        if (want(n.c)) accumulate(n.c, r.sum(r.mul(d, r.sub(n.a, n.b)), Axis::cols));
        break;
      }
      case Op::bcast:
        if (want(n.a)) accumulate(n.a, r.sum(d, Axis::all));
        break;
      case Op::bcast_row:
        if (want(n.a)) accumulate(n.a, r.sum(d, Axis::rows));
        break;
      case Op::bcast_col:
        if (want(n.a)) accumulate(n.a, r.sum(d, Axis::cols));
        break;
    }
  }

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    int leaf = wrt_ids[k];
    int grad_node = adjoint[static_cast<std::size_t>(leaf)];
    if (grad_node < 0) {
      // leaf does not influence the output
      const Shape& s = g.at(leaf).shape;
      int zero = r.affine(r.ones({}), 0.0, 0.0);
      grad_node = s.empty() ? zero : r.bcast(zero, s);
    }
    r.mark_output(prefix + wrt[k], grad_node);
  }
  return r;
}

// Worst relative error between reverse-mode gradients and central finite
// differences, taken over every coordinate of every trainable leaf.
inline double check_gradients(const ExprGraph& g, const std::string& scalar_output,
                              const Bindings& bindings, double eps) {
  if (eps <= 0.0) throw validation_error("check_gradients: eps must be positive");
  std::vector<std::string> wrt;
  for (const auto& [name, id] : g.leaves())
    if (g.at(id).trainable) wrt.push_back(name);
  if (wrt.empty()) throw validation_error("check_gradients: no trainable leaves");

  ExprGraph gg = gradient(g, scalar_output, wrt, "check::");
  std::vector<std::string> grad_names;
  grad_names.reserve(wrt.size());
  for (const auto& name : wrt) grad_names.push_back("check::" + name);
  Bindings analytic = evaluate(gg, bindings, grad_names);

  double worst = 0.0;
  Bindings perturbed = bindings;
  const std::vector<std::string> just_output{scalar_output};
  for (const auto& name : wrt) {
    const Tensor& grad = analytic["check::" + name];
    Tensor& x = perturbed[name];
    for (std::size_t i = 0; i < x.numel(); ++i) {
      double orig = x[i];
      x[i] = orig + eps;
      double fp = evaluate(g, perturbed, just_output)[scalar_output].item();
      x[i] = orig - eps;
      double fm = evaluate(g, perturbed, just_output)[scalar_output].item();
      x[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace m2m
