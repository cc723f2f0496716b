#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dpi/tensor.hpp"

namespace dpi {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap emap(const Tensor& t) { return ECMap(t.data.data(), t.rows, t.cols); }
inline EMap emap(Tensor& t) { return EMap(t.data.data(), t.rows, t.cols); }

enum class Op {
  Placeholder,
  Constant,
  Parameter,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Exp,
  Log,
  Sqrt,
  Tanh,
  Sin,
  Cos,
  Abs,
  Sigmoid,
  Softplus,
  LeakyRelu,
  Neg,
  Scale,   // x * attr
  Shift,   // x + attr
  Atan2,   // atan2(a, b) elementwise
  SumAll,
  MeanAll,
  SumCols,  // (r,c) -> (r,1)
  SliceCols,
  ConcatCols,
  PermuteCols,
  GatherCols,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Placeholder: return "placeholder";
    case Op::Constant: return "constant";
    case Op::Parameter: return "parameter";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::MatMul: return "matmul";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Tanh: return "tanh";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Abs: return "abs";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::Shift: return "shift";
    case Op::Atan2: return "atan2";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::SumCols: return "sum_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::PermuteCols: return "permute_cols";
    case Op::GatherCols: return "gather_cols";
  }
  return "?";
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // kink crossings, excluded rather than failed
  bool pass = true;
  std::vector<std::pair<std::string, double>> per_parameter;
};

/// Reverse-mode computation graph over dense Tensors. Nodes are appended
/// in topological order; evaluate() runs them forward, backward() fills
/// gradients for every node reachable from a trainable parameter.
class Graph {
 public:
  struct Node {
    Op op = Op::Constant;
    std::vector<int> parents;
    Tensor value;
    Tensor grad;
    double attr = 0.0;       // leaky slope / scale factor / shift constant
    int i0 = 0, i1 = 0;      // slice bounds
    std::vector<int> index;  // permutation / gather indices
    std::string name;
    bool needs_grad = false;
  };

  int placeholder(int rows, int cols, const std::string& name) {
    Node n;
    n.op = Op::Placeholder;
    n.value = Tensor(rows, cols);
    n.name = name;
    return push(std::move(n));
  }

  int constant(Tensor t, const std::string& name = "") {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(t);
    n.name = name;
    return push(std::move(n));
  }

  int parameter(Tensor t, const std::string& name = "") {
    Node n;
    n.op = Op::Parameter;
    n.value = std::move(t);
    n.name = name;
    n.needs_grad = true;
    int id = push(std::move(n));
    params_.push_back(id);
    return id;
  }

  int add(int a, int b) { return binary(Op::Add, a, b); }
  int sub(int a, int b) { return binary(Op::Sub, a, b); }
  int mul(int a, int b) { return binary(Op::Mul, a, b); }
  int div(int a, int b) { return binary(Op::Div, a, b); }
  int atan2(int y, int x) { return binary(Op::Atan2, y, x); }

  int matmul(int a, int b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (A.cols != B.rows)
      throw shape_error("matmul: inner dimensions differ " + shape_str(A) + " x " +
                        shape_str(B) + at_node(a, b));
    Node n;
    n.op = Op::MatMul;
    n.parents = {a, b};
    n.value = Tensor(A.rows, B.cols);
    return push(std::move(n));
  }

  int exp(int a) { return unary(Op::Exp, a); }
  int log(int a) { return unary(Op::Log, a); }
  int sqrt(int a) { return unary(Op::Sqrt, a); }
  int tanh(int a) { return unary(Op::Tanh, a); }
  int sin(int a) { return unary(Op::Sin, a); }
  int cos(int a) { return unary(Op::Cos, a); }
  int abs(int a) { return unary(Op::Abs, a); }
  int sigmoid(int a) { return unary(Op::Sigmoid, a); }
  int softplus(int a) { return unary(Op::Softplus, a); }
  int neg(int a) { return unary(Op::Neg, a); }
  int leaky_relu(int a, double slope) {
    int id = unary(Op::LeakyRelu, a);
    nodes_[id].attr = slope;
    return id;
  }
  int scale(int a, double c) {
    int id = unary(Op::Scale, a);
    nodes_[id].attr = c;
    return id;
  }
  int shift(int a, double c) {
    int id = unary(Op::Shift, a);
    nodes_[id].attr = c;
    return id;
  }

  int sum(int a) { return reduce(Op::SumAll, a); }
  int mean(int a) { return reduce(Op::MeanAll, a); }

  int sum_cols(int a) {
    Node n;
    n.op = Op::SumCols;
    n.parents = {a};
    n.value = Tensor(nodes_[a].value.rows, 1);
    return push(std::move(n));
  }

  int slice_cols(int a, int c0, int c1) {
    const Tensor& A = nodes_[a].value;
    if (c0 < 0 || c1 > A.cols || c0 >= c1)
      throw shape_error("slice_cols: bad range [" + std::to_string(c0) + "," +
                        std::to_string(c1) + ") on " + shape_str(A));
    Node n;
    n.op = Op::SliceCols;
    n.parents = {a};
    n.i0 = c0;
    n.i1 = c1;
    n.value = Tensor(A.rows, c1 - c0);
    return push(std::move(n));
  }

  int concat_cols(int a, int b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (A.rows != B.rows)
      throw shape_error("concat_cols: row mismatch " + shape_str(A) + " vs " + shape_str(B));
    Node n;
    n.op = Op::ConcatCols;
    n.parents = {a, b};
    n.value = Tensor(A.rows, A.cols + B.cols);
    return push(std::move(n));
  }

  /// out[:, j] = in[:, perm[j]]; perm must be a bijection.
  int permute_cols(int a, std::vector<int> perm) {
    const Tensor& A = nodes_[a].value;
    if (static_cast<int>(perm.size()) != A.cols)
      throw shape_error("permute_cols: index length != cols");
    std::vector<char> seen(perm.size(), 0);
    for (int p : perm) {
      if (p < 0 || p >= A.cols || seen[p]) throw usage_error("permute_cols: not a bijection");
      seen[p] = 1;
    }
    Node n;
    n.op = Op::PermuteCols;
    n.parents = {a};
    n.index = std::move(perm);
    n.value = Tensor(A.rows, A.cols);
    return push(std::move(n));
  }

  /// out[:, j] = in[:, idx[j]]; indices may repeat (scatter-add gradient).
  int gather_cols(int a, std::vector<int> idx) {
    const Tensor& A = nodes_[a].value;
    for (int p : idx)
      if (p < 0 || p >= A.cols) throw usage_error("gather_cols: index out of range");
    Node n;
    n.op = Op::GatherCols;
    n.parents = {a};
    n.index = std::move(idx);
    n.value = Tensor(A.rows, static_cast<int>(n.index.size()));
    return push(std::move(n));
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  const std::vector<int>& parameters() const { return params_; }
  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& grad(int id) const { return nodes_[id].grad; }
  const Node& node(int id) const { return nodes_[id]; }

  void set_value(int id, const Tensor& v) {
    Node& n = nodes_[id];
    if (n.op != Op::Placeholder && n.op != Op::Parameter && n.op != Op::Constant)
      throw usage_error("set_value: node " + label(id) + " is computed");
    if (!n.value.same_shape(v))
      throw shape_error("set_value: shape mismatch on " + label(id));
    n.value = v;
  }

  Tensor& mutable_leaf(int id) {
    Node& n = nodes_[id];
    if (n.op != Op::Placeholder && n.op != Op::Parameter && n.op != Op::Constant)
      throw usage_error("mutable_leaf: node " + label(id) + " is computed");
    return n.value;
  }

  void evaluate() {
    for (int i = 0; i < size(); ++i) forward_node(i);
  }

  Tensor evaluate(int root, const std::map<std::string, Tensor>& inputs) {
    for (const auto& [name, t] : inputs) {
      int id = find_placeholder(name);
      if (id < 0) throw usage_error("evaluate: no placeholder named '" + name + "'");
      set_value(id, t);
    }
    evaluate();
    return nodes_[root].value;
  }

  void backward(int root) {
    if (!nodes_[root].value.is_scalar())
      throw usage_error("backward: root " + label(root) + " is not scalar");
    for (Node& n : nodes_) {
      if (!n.needs_grad) continue;
      if (!n.grad.same_shape(n.value)) n.grad = Tensor(n.value.rows, n.value.cols);
      n.grad.fill(0.0);
    }
    if (!nodes_[root].needs_grad) return;  // no parameter influences the root
    nodes_[root].grad.data[0] = 1.0;
    for (int i = root; i >= 0; --i)
      if (nodes_[i].needs_grad) backward_node(i);
  }

  GradCheckReport check_gradients(int root, double h = 1e-5, double tol = 1e-4) {
    GradCheckReport rep;
    evaluate();
    backward(root);
    std::vector<Tensor> analytic;
    analytic.reserve(params_.size());
    for (int p : params_) analytic.push_back(nodes_[p].grad);

    for (size_t pi = 0; pi < params_.size(); ++pi) {
      const int p = params_[pi];
      double param_max = 0.0;
      for (size_t i = 0; i < nodes_[p].value.size(); ++i) {
        double& v = nodes_[p].value.data[i];
        const double saved = v;
        v = saved + h;
        evaluate();
        const double fp = nodes_[root].value.data[0];
        const auto sig_p = kink_signature();
        v = saved - h;
        evaluate();
        const double fm = nodes_[root].value.data[0];
        const auto sig_m = kink_signature();
        v = saved;
        if (sig_p != sig_m) {
          ++rep.skipped;
          continue;
        }
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic[pi].data[i];
        // the floor keeps central-difference rounding noise (~eps/h) from
        // dominating near-zero gradients
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
        const double rel = std::abs(fd - an) / denom;
        param_max = std::max(param_max, rel);
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.checked;
      }
      rep.per_parameter.emplace_back(nodes_[p].name, param_max);
    }
    evaluate();  // leave values consistent with unperturbed parameters
    rep.pass = rep.max_rel_err <= tol;
    return rep;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> params_;

  std::string label(int id) const {
    const Node& n = nodes_[id];
    std::string s = "#" + std::to_string(id) + ":" + op_name(n.op);
    if (!n.name.empty()) s += "(" + n.name + ")";
    return s;
  }
  std::string at_node(int a, int b = -1) const {
    std::string s = " [parents " + label(a);
    if (b >= 0) s += ", " + label(b);
    return s + "]";
  }

  int find_placeholder(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (nodes_[i].op == Op::Placeholder && nodes_[i].name == name) return i;
    return -1;
  }

  int push(Node n) {
    for (int p : n.parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  int unary(Op op, int a) {
    Node n;
    n.op = op;
    n.parents = {a};
    n.value = Tensor(nodes_[a].value.rows, nodes_[a].value.cols);
    return push(std::move(n));
  }

  int reduce(Op op, int a) {
    Node n;
    n.op = op;
    n.parents = {a};
    n.value = Tensor(1, 1);
    return push(std::move(n));
  }

  static bool broadcastable(const Tensor& big, const Tensor& small) {
    return (small.rows == big.rows || small.rows == 1) &&
           (small.cols == big.cols || small.cols == 1);
  }

  int binary(Op op, int a, int b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    int rows, cols;
    if (broadcastable(A, B) && A.size() >= B.size()) {
      rows = A.rows;
      cols = A.cols;
    } else if (broadcastable(B, A)) {
      rows = B.rows;
      cols = B.cols;
    } else {
      throw shape_error(std::string(op_name(op)) + ": shapes not broadcastable " +
                        shape_str(A) + " vs " + shape_str(B) + at_node(a, b));
    }
    Node n;
    n.op = op;
    n.parents = {a, b};
    n.value = Tensor(rows, cols);
    return push(std::move(n));
  }

  // broadcast-aware element fetch
  static double bget(const Tensor& t, int r, int c) {
    return t.at(t.rows == 1 ? 0 : r, t.cols == 1 ? 0 : c);
  }
  static void bacc(Tensor& g, int r, int c, double v) {
    g.at(g.rows == 1 ? 0 : r, g.cols == 1 ? 0 : c) += v;
  }

  void forward_node(int id) {
    Node& n = nodes_[id];
    const auto pv = [&](int k) -> const Tensor& { return nodes_[n.parents[k]].value; };
    switch (n.op) {
      case Op::Placeholder:
      case Op::Constant:
      case Op::Parameter:
        return;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div:
      case Op::Atan2: {
        const Tensor& A = pv(0);
        const Tensor& B = pv(1);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) {
            const double x = bget(A, r, c), y = bget(B, r, c);
            double o;
            switch (n.op) {
              case Op::Add: o = x + y; break;
              case Op::Sub: o = x - y; break;
              case Op::Mul: o = x * y; break;
              case Op::Div: o = x / y; break;
              default: o = std::atan2(x, y); break;
            }
            n.value.at(r, c) = o;
          }
        break;
      }
      case Op::MatMul:
        emap(n.value).noalias() = emap(pv(0)) * emap(pv(1));
        break;
      case Op::Exp:
      case Op::Log:
      case Op::Sqrt:
      case Op::Tanh:
      case Op::Sin:
      case Op::Cos:
      case Op::Abs:
      case Op::Sigmoid:
      case Op::Softplus:
      case Op::LeakyRelu:
      case Op::Neg:
      case Op::Scale:
      case Op::Shift: {
        const Tensor& A = pv(0);
        for (size_t i = 0; i < A.size(); ++i) {
          const double x = A.data[i];
          double o;
          switch (n.op) {
            case Op::Exp: o = std::exp(x); break;
            case Op::Log: o = std::log(x); break;
            case Op::Sqrt: o = std::sqrt(x); break;
            case Op::Tanh: o = std::tanh(x); break;
            case Op::Sin: o = std::sin(x); break;
            case Op::Cos: o = std::cos(x); break;
            case Op::Abs: o = std::abs(x); break;
            case Op::Sigmoid: o = stable_sigmoid(x); break;
            case Op::Softplus: o = stable_softplus(x); break;
            case Op::LeakyRelu: o = x > 0.0 ? x : n.attr * x; break;
            case Op::Neg: o = -x; break;
            case Op::Scale: o = n.attr * x; break;
            default: o = x + n.attr; break;
          }
          n.value.data[i] = o;
        }
        break;
      }
      case Op::SumAll:
      case Op::MeanAll: {
        const Tensor& A = pv(0);
        double s = 0.0;
        for (double v : A.data) s += v;
        n.value.data[0] = n.op == Op::SumAll ? s : s / static_cast<double>(A.size());
        break;
      }
      case Op::SumCols: {
        const Tensor& A = pv(0);
        for (int r = 0; r < A.rows; ++r) {
          double s = 0.0;
          for (int c = 0; c < A.cols; ++c) s += A.at(r, c);
          n.value.at(r, 0) = s;
        }
        break;
      }
      case Op::SliceCols: {
        const Tensor& A = pv(0);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) n.value.at(r, c) = A.at(r, n.i0 + c);
        break;
      }
      case Op::ConcatCols: {
        const Tensor& A = pv(0);
        const Tensor& B = pv(1);
        for (int r = 0; r < n.value.rows; ++r) {
          for (int c = 0; c < A.cols; ++c) n.value.at(r, c) = A.at(r, c);
          for (int c = 0; c < B.cols; ++c) n.value.at(r, A.cols + c) = B.at(r, c);
        }
        break;
      }
      case Op::PermuteCols:
      case Op::GatherCols: {
        const Tensor& A = pv(0);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) n.value.at(r, c) = A.at(r, n.index[c]);
        break;
      }
    }
    if (!n.value.all_finite())
      throw numeric_error("non-finite output at node " + label(id));
  }

  void backward_node(int id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    const auto pv = [&](int k) -> const Tensor& { return nodes_[n.parents[k]].value; };
    const auto pg = [&](int k) -> Tensor& { return nodes_[n.parents[k]].grad; };
    const auto wants = [&](int k) { return nodes_[n.parents[k]].needs_grad; };
    switch (n.op) {
      case Op::Placeholder:
      case Op::Constant:
      case Op::Parameter:
        return;
      case Op::Add:
      case Op::Sub: {
        const double sb = n.op == Op::Add ? 1.0 : -1.0;
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) {
            const double gv = g.at(r, c);
            if (wants(0)) bacc(pg(0), r, c, gv);
            if (wants(1)) bacc(pg(1), r, c, sb * gv);
          }
        break;
      }
      case Op::Mul: {
        const Tensor& A = pv(0);
        const Tensor& B = pv(1);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) {
            const double gv = g.at(r, c);
            if (wants(0)) bacc(pg(0), r, c, gv * bget(B, r, c));
            if (wants(1)) bacc(pg(1), r, c, gv * bget(A, r, c));
          }
        break;
      }
      case Op::Div: {
        const Tensor& A = pv(0);
        const Tensor& B = pv(1);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) {
            const double gv = g.at(r, c);
            const double bv = bget(B, r, c);
            if (wants(0)) bacc(pg(0), r, c, gv / bv);
            if (wants(1)) bacc(pg(1), r, c, -gv * bget(A, r, c) / (bv * bv));
          }
        break;
      }
      case Op::Atan2: {
        const Tensor& Y = pv(0);
        const Tensor& X = pv(1);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) {
            const double gv = g.at(r, c);
            const double y = bget(Y, r, c), x = bget(X, r, c);
            const double d = x * x + y * y;
            if (wants(0)) bacc(pg(0), r, c, gv * x / d);
            if (wants(1)) bacc(pg(1), r, c, -gv * y / d);
          }
        break;
      }
      case Op::MatMul: {
        if (wants(0)) emap(pg(0)).noalias() += emap(g) * emap(pv(1)).transpose();
        if (wants(1)) emap(pg(1)).noalias() += emap(pv(0)).transpose() * emap(g);
        break;
      }
      case Op::Exp:
      case Op::Log:
      case Op::Sqrt:
      case Op::Tanh:
      case Op::Sin:
      case Op::Cos:
      case Op::Abs:
      case Op::Sigmoid:
      case Op::Softplus:
      case Op::LeakyRelu:
      case Op::Neg:
      case Op::Scale:
      case Op::Shift: {
        if (!wants(0)) break;
        const Tensor& A = pv(0);
        Tensor& ga = pg(0);
        for (size_t i = 0; i < A.size(); ++i) {
          const double x = A.data[i];
          const double y = n.value.data[i];
          double d;
          switch (n.op) {
            case Op::Exp: d = y; break;
            case Op::Log: d = 1.0 / x; break;
            case Op::Sqrt: d = 0.5 / y; break;
            case Op::Tanh: d = 1.0 - y * y; break;
            case Op::Sin: d = std::cos(x); break;
            case Op::Cos: d = -std::sin(x); break;
            // kinks take the left-limit subgradient
            case Op::Abs: d = x > 0.0 ? 1.0 : -1.0; break;
            case Op::Sigmoid: d = y * (1.0 - y); break;
            case Op::Softplus: d = stable_sigmoid(x); break;
            case Op::LeakyRelu: d = x > 0.0 ? 1.0 : n.attr; break;
            case Op::Neg: d = -1.0; break;
            case Op::Scale: d = n.attr; break;
            default: d = 1.0; break;
          }
          ga.data[i] += d * g.data[i];
        }
        break;
      }
      case Op::SumAll:
      case Op::MeanAll: {
        if (!wants(0)) break;
        Tensor& ga = pg(0);
        const double gv = g.data[0] *
            (n.op == Op::MeanAll ? 1.0 / static_cast<double>(ga.size()) : 1.0);
        for (double& v : ga.data) v += gv;
        break;
      }
      case Op::SumCols: {
        if (!wants(0)) break;
        Tensor& ga = pg(0);
        for (int r = 0; r < ga.rows; ++r) {
          const double gv = g.at(r, 0);
          for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += gv;
        }
        break;
      }
      case Op::SliceCols: {
        if (!wants(0)) break;
        Tensor& ga = pg(0);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) ga.at(r, n.i0 + c) += g.at(r, c);
        break;
      }
      case Op::ConcatCols: {
        const int ac = pv(0).cols;
        for (int r = 0; r < n.value.rows; ++r) {
          if (wants(0))
            for (int c = 0; c < ac; ++c) pg(0).at(r, c) += g.at(r, c);
          if (wants(1))
            for (int c = 0; c < pv(1).cols; ++c) pg(1).at(r, c) += g.at(r, ac + c);
        }
        break;
      }
      case Op::PermuteCols:
      case Op::GatherCols: {
        if (!wants(0)) break;
        Tensor& ga = pg(0);
        for (int r = 0; r < n.value.rows; ++r)
          for (int c = 0; c < n.value.cols; ++c) ga.at(r, n.index[c]) += g.at(r, c);
        break;
      }
    }
  }

  std::vector<uint8_t> kink_signature() const {
    std::vector<uint8_t> sig;
    for (const Node& n : nodes_) {
      if (n.op == Op::LeakyRelu || n.op == Op::Abs) {
        for (double v : nodes_[n.parents[0]].value.data) sig.push_back(v > 0.0 ? 1 : 0);
      } else if (n.op == Op::Atan2) {
        // branch cut along y = 0, x < 0
        const Tensor& y = nodes_[n.parents[0]].value;
        const Tensor& x = nodes_[n.parents[1]].value;
        for (size_t i = 0; i < y.data.size(); ++i) {
          const double xv = x.data[i % x.data.size()];
          sig.push_back(xv < 0.0 ? (y.data[i] > 0.0 ? 1 : 0) : 2);
        }
      }
    }
    return sig;
  }
};

}  // namespace dpi
