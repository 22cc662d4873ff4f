#pragma once

// Define-then-run computation graph with reverse-mode differentiation.
//
// Building a node checks shapes immediately; values are produced by
// Graph::evaluate(), which may be called repeatedly (e.g. after perturbing a
// Parameter). Graph::backward() accumulates into Parameter::grad.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mia/parameter.hpp"
#include "mia/tensor.hpp"

namespace mia {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public GraphError {
 public:
  NonFiniteError(int node, const std::string& op)
      : GraphError("non-finite value produced at node " + std::to_string(node) + " (" + op + ")"), node_id(node) {}
  int node_id;
};

/// Added to every norm in cosine similarity and row normalization.
inline constexpr double kNormEps = 1e-12;

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  const Tensor& value() const;
};

struct Node {
  std::string op;
  std::vector<int> inputs;
  Shape shape;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  Parameter* param = nullptr;
  std::string input_name;
  // Piecewise-linear nodes whose activation pattern the gradient checker watches.
  bool kink = false;
  std::function<void(Graph&, Node&)> forward;
  std::function<void(Graph&, Node&)> backward;
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T. B is transposed first so the inner loop runs over contiguous memory.
inline void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
  }
  gemm_nn(A, bt.data(), C, m, k, n);
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = A[p * m + i];
      if (a == 0.0) continue;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves -------------------------------------------------------------

  /// Named input bound at evaluate() time.
  Var input(const std::string& name, Shape shape, bool requires_grad = false) {
    if (named_inputs_.count(name)) throw GraphError("duplicate graph input: " + name);
    Node n;
    n.op = "input";
    n.shape = std::move(shape);
    n.input_name = name;
    n.requires_grad = requires_grad;
    Var v = push(std::move(n));
    named_inputs_[name] = v.id;
    return v;
  }

  Var constant(Tensor value) {
    Node n;
    n.op = "const";
    n.shape = value.shape();
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Leaf reading the parameter's current value on every evaluation.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    Node n;
    n.op = "param:" + p.name;
    n.shape = p.value.shape();
    n.param = &p;
    n.requires_grad = p.requires_grad;
    Var v = push(std::move(n));
    param_nodes_[&p] = v.id;
    return v;
  }

  // ---- node construction (used by the primitive ops) ------------------------

  Var add_node(std::string op, std::vector<Var> inputs, Shape shape, std::function<void(Graph&, Node&)> fwd,
               std::function<void(Graph&, Node&)> bwd, bool kink = false) {
    Node n;
    n.op = std::move(op);
    n.shape = std::move(shape);
    for (const Var& v : inputs) {
      if (v.graph != this) throw GraphError("op '" + n.op + "' mixes nodes from different graphs");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    n.forward = std::move(fwd);
    n.backward = std::move(bwd);
    n.kink = kink;
    return push(std::move(n));
  }

  int next_id() const { return static_cast<int>(nodes_.size()); }
  std::size_t size() const { return nodes_.size(); }
  Node& node(int id) { return nodes_.at(id); }
  const Node& node(int id) const { return nodes_.at(id); }
  const Tensor& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].value; }

  /// Gradient slot of input k of n, or nullptr when that input needs no gradient.
  Tensor* grad_in(const Node& n, std::size_t k) {
    Node& src = nodes_[n.inputs[k]];
    if (!src.requires_grad) return nullptr;
    if (src.grad.shape() != src.shape) src.grad = Tensor(src.shape);
    return &src.grad;
  }

  void name_output(const std::string& name, Var v) { named_outputs_[name] = v.id; }

  // ---- evaluation ------------------------------------------------------------

  /// Runs every node in construction order; returns the named outputs.
  std::map<std::string, Tensor> evaluate(const std::map<std::string, Tensor>& inputs = {}) {
    for (const auto& [name, t] : inputs) {
      auto it = named_inputs_.find(name);
      if (it == named_inputs_.end()) throw GraphError("unknown graph input: " + name);
      Node& n = nodes_[it->second];
      if (t.shape() != n.shape) {
        throw ShapeError("input '" + name + "' (node " + std::to_string(it->second) + "): expected " +
                         shape_str(n.shape) + ", got " + shape_str(t.shape()));
      }
      n.value = t;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.param) {
        n.value = n.param->value;
      } else if (!n.input_name.empty()) {
        if (n.value.shape() != n.shape) throw GraphError("graph input not bound: " + n.input_name);
      } else if (n.forward) {
        n.forward(*this, n);
      }
      if (!n.value.all_finite()) throw NonFiniteError(static_cast<int>(i), n.op);
    }
    evaluated_ = true;
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : named_outputs_) out[name] = nodes_[id].value;
    return out;
  }

  /// Re-runs only the nodes downstream of `p`; everything else keeps its value from the last evaluate().
  void reevaluate_from(const Parameter& p) {
    if (!evaluated_) throw GraphError("reevaluate_from() called before evaluate()");
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return;
    std::vector<std::uint8_t> dirty(nodes_.size(), 0);
    for (std::size_t i = static_cast<std::size_t>(it->second); i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      bool d = static_cast<int>(i) == it->second;
      for (int k : n.inputs) d = d || dirty[k];
      if (!d) continue;
      dirty[i] = 1;
      if (n.param) n.value = n.param->value;
      else if (n.forward) n.forward(*this, n);
      if (!n.value.all_finite()) throw NonFiniteError(static_cast<int>(i), n.op);
    }
  }

  bool evaluated() const { return evaluated_; }

  const Tensor& value(Var v) const {
    if (!evaluated_) throw GraphError("graph has not been evaluated");
    return nodes_.at(v.id).value;
  }

  /// Reverse sweep from a scalar root; parameter gradients are accumulated (+=).
  void backward(Var root) {
    if (!evaluated_) throw GraphError("backward() called before evaluate()");
    Node& r = nodes_.at(root.id);
    if (shape_numel(r.shape) != 1) throw GraphError("backward() root must be scalar, got " + shape_str(r.shape));
    for (auto& n : nodes_) n.grad = Tensor();
    if (!r.requires_grad) return;
    r.grad = Tensor(r.shape, 1.0);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        auto& pg = n.param->grad.storage();
        const auto& g = n.grad.storage();
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += g[k];
      } else if (n.backward) {
        n.backward(*this, n);
      }
    }
  }

  /// Gradient w.r.t. a node after backward(); zeros when nothing flowed into it.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor(n.shape);
    return n.grad;
  }

  /// Activation pattern of every piecewise-linear node from the last evaluation.
  std::vector<std::uint8_t> kink_pattern() const {
    std::vector<std::uint8_t> out;
    for (const auto& n : nodes_) {
      if (!n.kink || n.inputs.empty()) continue;
      for (double x : nodes_[n.inputs[0]].value.values()) out.push_back(x > 0.0 ? 1 : 0);
    }
    return out;
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> named_inputs_;
  std::map<std::string, int> named_outputs_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool evaluated_ = false;
};

inline const Shape& Var::shape() const { return graph->node(id).shape; }
inline const Tensor& Var::value() const { return graph->value(*this); }

// ============================================================================
// Primitive operations
// ============================================================================

namespace detail {

[[noreturn]] inline void shape_fail(const Graph& g, const std::string& op, const std::string& what) {
  throw ShapeError(op + " (node " + std::to_string(g.next_id()) + "): " + what);
}

inline void expect_rank(const Graph& g, const std::string& op, const Var& v, std::size_t rank) {
  if (v.shape().size() != rank) {
    shape_fail(g, op, "expected rank " + std::to_string(rank) + ", got " + shape_str(v.shape()));
  }
}

template <typename F, typename D>
Var unary(const std::string& op, Var a, F f, D df, bool kink = false) {
  Graph& g = *a.graph;
  return g.add_node(
      op, {a}, a.shape(),
      [f](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) n.value[i] = f(x[i]);
      },
      [df](Graph& gr, Node& n) {
        Tensor* gx = gr.grad_in(n, 0);
        if (!gx) return;
        const Tensor& x = gr.in(n, 0);
        for (std::size_t i = 0; i < x.numel(); ++i) (*gx)[i] += n.grad[i] * df(x[i], n.value[i]);
      },
      kink);
}

inline Shape broadcast_shape(const Graph& g, const std::string& op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) shape_fail(g, op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      shape_fail(g, op, "incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    }
  }
  return out;
}

// Flat index into an operand for every flat index of the broadcast output.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> idx(total);
  if (in == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  auto in_st = strides_of(in);
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (in[d] == 1) in_st[d] = 0;
  }
  std::vector<std::size_t> counter(out.size(), 0);
  for (std::size_t f = 0; f < total; ++f) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < out.size(); ++d) off += counter[d] * in_st[d];
    idx[f] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++counter[d] < out[d]) break;
      counter[d] = 0;
    }
  }
  return idx;
}

enum class BinaryKind { kAdd, kSub, kMul };

inline Var binary(const std::string& op, BinaryKind kind, Var a, Var b) {
  Graph& g = *a.graph;
  Shape out = broadcast_shape(g, op, a.shape(), b.shape());
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(out, a.shape()));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(out, b.shape()));
  return g.add_node(
      op, {a, b}, out,
      [kind, ia, ib](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        const Tensor& y = gr.in(n, 1);
        n.value = Tensor(n.shape);
        const std::size_t total = n.value.numel();
        for (std::size_t i = 0; i < total; ++i) {
          const double u = x[(*ia)[i]];
          const double v = y[(*ib)[i]];
          n.value[i] = kind == BinaryKind::kAdd ? u + v : kind == BinaryKind::kSub ? u - v : u * v;
        }
      },
      [kind, ia, ib](Graph& gr, Node& n) {
        Tensor* gx = gr.grad_in(n, 0);
        Tensor* gy = gr.grad_in(n, 1);
        const Tensor& x = gr.in(n, 0);
        const Tensor& y = gr.in(n, 1);
        const std::size_t total = n.grad.numel();
        for (std::size_t i = 0; i < total; ++i) {
          const double g0 = n.grad[i];
          if (gx) (*gx)[(*ia)[i]] += kind == BinaryKind::kMul ? g0 * y[(*ib)[i]] : g0;
          if (gy) {
            (*gy)[(*ib)[i]] += kind == BinaryKind::kMul ? g0 * x[(*ia)[i]] : kind == BinaryKind::kSub ? -g0 : g0;
          }
        }
      });
}

}  // namespace detail

/// a + b with same-rank broadcasting over unit extents.
inline Var add(Var a, Var b) { return detail::binary("add", detail::BinaryKind::kAdd, a, b); }
inline Var sub(Var a, Var b) { return detail::binary("sub", detail::BinaryKind::kSub, a, b); }
inline Var mul(Var a, Var b) { return detail::binary("mul", detail::BinaryKind::kMul, a, b); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; },
      true);
}

/// max(0, x); identical to relu but named for loss graphs.
inline Var hinge(Var a) {
  return detail::unary(
      "hinge", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; },
      true);
}

inline Var sigmoid(Var a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// [m,k] x [k,n] -> [m,n]; with transpose_b, b is [n,k].
inline Var matmul(Var a, Var b, bool transpose_b = false) {
  Graph& g = *a.graph;
  detail::expect_rank(g, "matmul", a, 2);
  detail::expect_rank(g, "matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    detail::shape_fail(g, "matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                                        shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  return g.add_node(
      transpose_b ? "matmul_nt" : "matmul", {a, b}, {m, n},
      [=](Graph& gr, Node& nd) {
        nd.value = Tensor(nd.shape);
        const Tensor& A = gr.in(nd, 0);
        const Tensor& B = gr.in(nd, 1);
        if (transpose_b) {
          detail::gemm_nt(A.data(), B.data(), nd.value.data(), m, k, n);
        } else {
          detail::gemm_nn(A.data(), B.data(), nd.value.data(), m, k, n);
        }
      },
      [=](Graph& gr, Node& nd) {
        const Tensor& A = gr.in(nd, 0);
        const Tensor& B = gr.in(nd, 1);
        if (Tensor* gA = gr.grad_in(nd, 0)) {
          // dA = dC * B^T  (or dC * B when B was transposed)
          if (transpose_b) {
            detail::gemm_nn(nd.grad.data(), B.data(), gA->data(), m, n, k);
          } else {
            detail::gemm_nt(nd.grad.data(), B.data(), gA->data(), m, n, k);
          }
        }
        if (Tensor* gB = gr.grad_in(nd, 1)) {
          if (transpose_b) {
            // dB[n,k] = dC^T * A
            detail::gemm_tn(nd.grad.data(), A.data(), gB->data(), n, m, k);
          } else {
            detail::gemm_tn(A.data(), nd.grad.data(), gB->data(), k, m, n);
          }
        }
      });
}

/// Batched [b,m,k] x [b,k,n] -> [b,m,n].
inline Var bmm(Var a, Var b) {
  Graph& g = *a.graph;
  detail::expect_rank(g, "bmm", a, 3);
  detail::expect_rank(g, "bmm", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    detail::shape_fail(g, "bmm", "incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return g.add_node(
      "bmm", {a, b}, {batch, m, n},
      [=](Graph& gr, Node& nd) {
        nd.value = Tensor(nd.shape);
        const Tensor& A = gr.in(nd, 0);
        const Tensor& B = gr.in(nd, 1);
        for (std::size_t t = 0; t < batch; ++t) {
          detail::gemm_nn(A.data() + t * m * k, B.data() + t * k * n, nd.value.data() + t * m * n, m, k, n);
        }
      },
      [=](Graph& gr, Node& nd) {
        const Tensor& A = gr.in(nd, 0);
        const Tensor& B = gr.in(nd, 1);
        Tensor* gA = gr.grad_in(nd, 0);
        Tensor* gB = gr.grad_in(nd, 1);
        for (std::size_t t = 0; t < batch; ++t) {
          const double* gC = nd.grad.data() + t * m * n;
          if (gA) detail::gemm_nt(gC, B.data() + t * k * n, gA->data() + t * m * k, m, n, k);
          if (gB) detail::gemm_tn(A.data() + t * m * k, gC, gB->data() + t * k * n, k, m, n);
        }
      });
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = *a.graph;
  if (shape_numel(shape) != shape_numel(a.shape())) {
    detail::shape_fail(g, "reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return g.add_node(
      "reshape", {a}, shape,
      [](Graph& gr, Node& n) { n.value = gr.in(n, 0).reshaped(n.shape); },
      [](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          for (std::size_t i = 0; i < n.grad.numel(); ++i) (*gx)[i] += n.grad[i];
        }
      });
}

/// Axis permutation: output axis i is input axis perm[i].
inline Var permute(Var a, std::vector<std::size_t> perm) {
  Graph& g = *a.graph;
  const Shape in = a.shape();
  if (perm.size() != in.size()) detail::shape_fail(g, "permute", "permutation rank mismatch");
  std::vector<bool> seen(in.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size() || seen[perm[i]]) detail::shape_fail(g, "permute", "invalid permutation");
    seen[perm[i]] = true;
    out[i] = in[perm[i]];
  }
  // Source offset for each output flat index.
  const auto in_st = detail::strides_of(in);
  std::vector<std::size_t> st(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) st[i] = in_st[perm[i]];
  auto src = std::make_shared<std::vector<std::size_t>>(shape_numel(out));
  {
    std::vector<std::size_t> counter(out.size(), 0);
    for (std::size_t f = 0; f < src->size(); ++f) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < out.size(); ++d) off += counter[d] * st[d];
      (*src)[f] = off;
      for (std::size_t d = out.size(); d-- > 0;) {
        if (++counter[d] < out[d]) break;
        counter[d] = 0;
      }
    }
  }
  return g.add_node(
      "permute", {a}, out,
      [src](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < src->size(); ++i) n.value[i] = x[(*src)[i]];
      },
      [src](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          for (std::size_t i = 0; i < src->size(); ++i) (*gx)[(*src)[i]] += n.grad[i];
        }
      });
}

inline Var transpose(Var a) {
  detail::expect_rank(*a.graph, "transpose", a, 2);
  return permute(a, {1, 0});
}

/// Concatenate along an axis; all other extents must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw GraphError("concat of zero tensors");
  Graph& g = *parts[0].graph;
  Shape out = parts[0].shape();
  if (axis >= out.size()) detail::shape_fail(g, "concat", "axis out of range");
  std::vector<std::size_t> widths;
  out[axis] = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.size() != out.size()) detail::shape_fail(g, "concat", "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != out[d]) {
        detail::shape_fail(g, "concat", "extent mismatch on axis " + std::to_string(d) + ": " + shape_str(s));
      }
    }
    widths.push_back(s[axis]);
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out[d];
  for (std::size_t d = axis + 1; d < out.size(); ++d) inner *= out[d];
  const std::size_t total_w = out[axis];
  return g.add_node(
      "concat", parts, out,
      [=](Graph& gr, Node& n) {
        n.value = Tensor(n.shape);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const Tensor& x = gr.in(n, k);
          const std::size_t w = widths[k] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(x.data() + o * w, w, n.value.data() + o * total_w * inner + offset * inner);
          }
          offset += widths[k];
        }
      },
      [=](Graph& gr, Node& n) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t w = widths[k] * inner;
          if (Tensor* gx = gr.grad_in(n, k)) {
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = n.grad.data() + o * total_w * inner + offset * inner;
              double* dst = gx->data() + o * w;
              for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
            }
          }
          offset += widths[k];
        }
      });
}

/// Contiguous range [start, start + length) along an axis.
inline Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  Graph& g = *a.graph;
  Shape in = a.shape();
  if (axis >= in.size() || length == 0 || start + length > in[axis]) {
    detail::shape_fail(g, "slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                       ") invalid for axis " + std::to_string(axis) + " of " + shape_str(in));
  }
  Shape out = in;
  out[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t in_w = in[axis];
  return g.add_node(
      "slice", {a}, out,
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(x.data() + (o * in_w + start) * inner, length * inner, n.value.data() + o * length * inner);
        }
      },
      [=](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = n.grad.data() + o * length * inner;
            double* dst = gx->data() + (o * in_w + start) * inner;
            for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Rows of a (axis 0) selected by index, repeats allowed. Embedding lookup and tiling both use this.
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  Graph& g = *a.graph;
  Shape in = a.shape();
  if (rows.empty()) detail::shape_fail(g, "gather_rows", "empty index list");
  for (auto r : rows) {
    if (r >= in[0]) detail::shape_fail(g, "gather_rows", "row " + std::to_string(r) + " out of range " + shape_str(in));
  }
  const std::size_t inner = shape_numel(in) / in[0];
  Shape out = in;
  out[0] = rows.size();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return g.add_node(
      "gather_rows", {a}, out,
      [idx, inner](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < idx->size(); ++i) {
          std::copy_n(x.data() + (*idx)[i] * inner, inner, n.value.data() + i * inner);
        }
      },
      [idx, inner](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          for (std::size_t i = 0; i < idx->size(); ++i) {
            double* dst = gx->data() + (*idx)[i] * inner;
            const double* src = n.grad.data() + i * inner;
            for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
          }
        }
      });
}

/// Mean over one axis, which is removed (a rank-1 input yields shape [1]).
inline Var mean(Var a, std::size_t axis) {
  Graph& g = *a.graph;
  Shape in = a.shape();
  if (axis >= in.size()) detail::shape_fail(g, "mean", "axis out of range for " + shape_str(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t len = in[axis];
  Shape out;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (d != axis) out.push_back(in[d]);
  }
  if (out.empty()) out = {1};
  return g.add_node(
      "mean", {a}, out,
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t l = 0; l < len; ++l) {
            const double* src = x.data() + (o * len + l) * inner;
            double* dst = n.value.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
        }
        for (auto& v : n.value.values()) v /= static_cast<double>(len);
      },
      [=](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          const double s = 1.0 / static_cast<double>(len);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t l = 0; l < len; ++l) {
              double* dst = gx->data() + (o * len + l) * inner;
              const double* src = n.grad.data() + o * inner;
              for (std::size_t i = 0; i < inner; ++i) dst[i] += s * src[i];
            }
          }
        }
      });
}

inline Var sum_all(Var a) {
  Graph& g = *a.graph;
  return g.add_node(
      "sum", {a}, {1},
      [](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        double s = 0.0;
        for (double v : x.values()) s += v;
        n.value = Tensor::scalar(s);
      },
      [](Graph& gr, Node& n) {
        if (Tensor* gx = gr.grad_in(n, 0)) {
          for (auto& v : gx->values()) v += n.grad[0];
        }
      });
}

inline Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(shape_numel(a.shape()))); }

/// Softmax over the last axis.
inline Var softmax(Var a) {
  Graph& g = *a.graph;
  const std::size_t width = a.shape().back();
  const std::size_t rows = shape_numel(a.shape()) / width;
  return g.add_node(
      "softmax", {a}, a.shape(),
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = x.data() + r * width;
          double* yr = n.value.data() + r * width;
          const double mx = *std::max_element(xr, xr + width);
          double z = 0.0;
          for (std::size_t j = 0; j < width; ++j) z += (yr[j] = std::exp(xr[j] - mx));
          for (std::size_t j = 0; j < width; ++j) yr[j] /= z;
        }
      },
      [=](Graph& gr, Node& n) {
        Tensor* gx = gr.grad_in(n, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = n.value.data() + r * width;
          const double* gy = n.grad.data() + r * width;
          double dot = 0.0;
          for (std::size_t j = 0; j < width; ++j) dot += gy[j] * yr[j];
          for (std::size_t j = 0; j < width; ++j) (*gx)[r * width + j] += yr[j] * (gy[j] - dot);
        }
      });
}

/// Euclidean norm over the last axis, which is removed.
inline Var l2_norm(Var a) {
  Graph& g = *a.graph;
  const std::size_t width = a.shape().back();
  const std::size_t rows = shape_numel(a.shape()) / width;
  Shape out(a.shape().begin(), a.shape().end() - 1);
  if (out.empty()) out = {1};
  return g.add_node(
      "l2_norm", {a}, out,
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < width; ++j) s += x[r * width + j] * x[r * width + j];
          n.value[r] = std::sqrt(s);
        }
      },
      [=](Graph& gr, Node& n) {
        Tensor* gx = gr.grad_in(n, 0);
        if (!gx) return;
        const Tensor& x = gr.in(n, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          if (n.value[r] == 0.0) continue;
          const double s = n.grad[r] / n.value[r];
          for (std::size_t j = 0; j < width; ++j) (*gx)[r * width + j] += s * x[r * width + j];
        }
      });
}

/// Each row divided by (its norm + eps).
inline Var normalize_rows(Var a) {
  Graph& g = *a.graph;
  const std::size_t width = a.shape().back();
  const std::size_t rows = shape_numel(a.shape()) / width;
  auto norms = std::make_shared<std::vector<double>>(rows);
  return g.add_node(
      "normalize_rows", {a}, a.shape(),
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < width; ++j) s += x[r * width + j] * x[r * width + j];
          (*norms)[r] = std::sqrt(s);
          const double d = (*norms)[r] + kNormEps;
          for (std::size_t j = 0; j < width; ++j) n.value[r * width + j] = x[r * width + j] / d;
        }
      },
      [=](Graph& gr, Node& n) {
        Tensor* gx = gr.grad_in(n, 0);
        if (!gx) return;
        const Tensor& x = gr.in(n, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double nr = (*norms)[r];
          const double d = nr + kNormEps;
          const double* xr = x.data() + r * width;
          const double* gy = n.grad.data() + r * width;
          double dot = 0.0;
          for (std::size_t j = 0; j < width; ++j) dot += gy[j] * xr[j];
          const double c = nr > 0.0 ? dot / (d * d * nr) : 0.0;
          for (std::size_t j = 0; j < width; ++j) (*gx)[r * width + j] += gy[j] / d - c * xr[j];
        }
      });
}

/// Row-wise cosine similarity of two equally shaped tensors; the last axis is removed.
inline Var cosine_rows(Var a, Var b) {
  Graph& g = *a.graph;
  if (a.shape() != b.shape()) {
    detail::shape_fail(g, "cosine", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t width = a.shape().back();
  const std::size_t rows = shape_numel(a.shape()) / width;
  Shape out(a.shape().begin(), a.shape().end() - 1);
  if (out.empty()) out = {1};
  return g.add_node(
      "cosine", {a, b}, out,
      [=](Graph& gr, Node& n) {
        const Tensor& x = gr.in(n, 0);
        const Tensor& y = gr.in(n, 1);
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          double xy = 0.0, xx = 0.0, yy = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double u = x[r * width + j], v = y[r * width + j];
            xy += u * v;
            xx += u * u;
            yy += v * v;
          }
          n.value[r] = xy / ((std::sqrt(xx) + kNormEps) * (std::sqrt(yy) + kNormEps));
        }
      },
      [=](Graph& gr, Node& n) {
        Tensor* gx = gr.grad_in(n, 0);
        Tensor* gy = gr.grad_in(n, 1);
        const Tensor& x = gr.in(n, 0);
        const Tensor& y = gr.in(n, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          double xx = 0.0, yy = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            xx += x[r * width + j] * x[r * width + j];
            yy += y[r * width + j] * y[r * width + j];
          }
          const double nx = std::sqrt(xx), ny = std::sqrt(yy);
          const double dx = nx + kNormEps, dy = ny + kNormEps;
          const double c = n.value[r];
          const double go = n.grad[r];
          for (std::size_t j = 0; j < width; ++j) {
            const double u = x[r * width + j], v = y[r * width + j];
            if (gx) (*gx)[r * width + j] += go * (v / (dx * dy) - (nx > 0.0 ? c * u / (nx * dx) : 0.0));
            if (gy) (*gy)[r * width + j] += go * (u / (dx * dy) - (ny > 0.0 ? c * v / (ny * dy) : 0.0));
          }
        }
      });
}

/// Cosine of two vectors of any (equal) shape, as a [1] tensor.
inline Var cosine(Var a, Var b) {
  return cosine_rows(reshape(a, {1, shape_numel(a.shape())}), reshape(b, {1, shape_numel(b.shape())}));
}

/// 2-D convolution, x: [B,C,H,W], w: [O,C,k,k], bias: [O].
inline Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
  Graph& g = *x.graph;
  detail::expect_rank(g, "conv2d", x, 4);
  detail::expect_rank(g, "conv2d", w, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != k) {
    detail::shape_fail(g, "conv2d", "kernel " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (bias.shape() != Shape{O}) detail::shape_fail(g, "conv2d", "bias must be [" + std::to_string(O) + "]");
  if (H + 2 * pad < k || W + 2 * pad < k || stride == 0) detail::shape_fail(g, "conv2d", "kernel larger than input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t ckk = C * k * k, hw = Ho * Wo;

  // col[c*k*k + ky*k + kx, oy*Wo + ox] = x[c, oy*s+ky-pad, ox*s+kx-pad]
  auto im2col = [=](const double* img, double* col) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* row = col + ((c * k + ky) * k + kx) * hw;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              const bool inside = iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W);
              row[oy * Wo + ox] = inside ? img[(c * H + iy) * W + ix] : 0.0;
            }
          }
        }
      }
    }
  };
  auto col2im = [=](const double* col, double* img) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double* row = col + ((c * k + ky) * k + kx) * hw;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              img[(c * H + iy) * W + ix] += row[oy * Wo + ox];
            }
          }
        }
      }
    }
  };

  return g.add_node(
      "conv2d", {x, w, bias}, {B, O, Ho, Wo},
      [=](Graph& gr, Node& n) {
        const Tensor& X = gr.in(n, 0);
        const Tensor& Wt = gr.in(n, 1);
        const Tensor& b = gr.in(n, 2);
        n.value = Tensor(n.shape);
        std::vector<double> col(ckk * hw);
        for (std::size_t i = 0; i < B; ++i) {
          im2col(X.data() + i * C * H * W, col.data());
          double* out = n.value.data() + i * O * hw;
          for (std::size_t o = 0; o < O; ++o) std::fill_n(out + o * hw, hw, b[o]);
          detail::gemm_nn(Wt.data(), col.data(), out, O, ckk, hw);
        }
      },
      [=](Graph& gr, Node& n) {
        const Tensor& X = gr.in(n, 0);
        const Tensor& Wt = gr.in(n, 1);
        Tensor* gX = gr.grad_in(n, 0);
        Tensor* gW = gr.grad_in(n, 1);
        Tensor* gb = gr.grad_in(n, 2);
        std::vector<double> col(ckk * hw);
        for (std::size_t i = 0; i < B; ++i) {
          const double* gout = n.grad.data() + i * O * hw;
          if (gb) {
            for (std::size_t o = 0; o < O; ++o) {
              double s = 0.0;
              for (std::size_t p = 0; p < hw; ++p) s += gout[o * hw + p];
              (*gb)[o] += s;
            }
          }
          if (gW) {
            im2col(X.data() + i * C * H * W, col.data());
            detail::gemm_nt(gout, col.data(), gW->data(), O, hw, ckk);
          }
          if (gX) {
            std::fill(col.begin(), col.end(), 0.0);
            detail::gemm_tn(Wt.data(), gout, col.data(), ckk, O, hw);
            col2im(col.data(), gX->data() + i * C * H * W);
          }
        }
      });
}

}  // namespace mia
