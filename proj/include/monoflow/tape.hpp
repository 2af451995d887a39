#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace monoflow::ad {

using Mat = Eigen::MatrixXd;

enum class Op {
  Leaf,
  Add, Sub, Mul, Div, Neg, Scale, AddConst,
  MatMulNN, MatMulNT, MatMulTN,
  AddRow, MulRow, MulScalar1,
  ConcatCols, SliceCols, PadCols,
  ColSum, SumAll, RepRow,
  Unary,
  Detach,
};

enum class UnaryFn { Relu, Sigmoid, Exp, Log, Sqrt, Pila };

struct Node {
  Op op;
  int a = -1;
  int b = -1;
  Mat val;
  double c0 = 0.0;       // scale factor / pila k
  int i0 = 0;            // slice offset / unary order / rep row count
  int i1 = 0;            // slice length / pad total
  UnaryFn fn = UnaryFn::Relu;
  bool grad_leaf = true;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  const Mat& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
};

class Tape {
 public:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  const Node& node(int i) const;
  Node& node_mut(int i) { return nodes_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  void rewind(int mark);

 private:
  std::vector<Node> nodes_;
};

// restores the tape to its size at construction
struct TapeMark {
  Tape& tape;
  int mark;
  explicit TapeMark(Tape& t) : tape(t), mark(t.size()) {}
  ~TapeMark() { tape.rewind(mark); }
  TapeMark(const TapeMark&) = delete;
  TapeMark& operator=(const TapeMark&) = delete;
};

Var leaf(Tape& t, Mat value, bool needs_grad = true);
Var constant(Tape& t, Mat value);
Var scalar_const(Tape& t, double value);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var matmul_nn(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var matmul_tn(Var a, Var b);
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
Var mul_scalar1(Var a, Var s);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, int off, int len);
Var pad_cols(Var a, int off, int total);
Var col_sum(Var a);
Var sum_all(Var a);
Var rep_row(Var row, int nrows);
Var unary(Var a, UnaryFn fn, int order = 0, double c = 0.0);
Var detach(Var a);
Var dot_all(Var a, Var b);

// Gradients of `out` w.r.t. each entry of `wrt`, appended to the same tape
// (so they can be differentiated again). `seed` is the cotangent at `out`;
// scalar 1 for plain backward. Leaves outside `wrt` are not accumulated into.
std::vector<Var> backward(Var out, const std::vector<Var>& wrt);
std::vector<Var> backward_seeded(Var out, const Mat& seed, const std::vector<Var>& wrt);

// Forward-mode directional derivative of `out` along tangent `dx` at leaf
// `x`; all other leaves held fixed. Purely numeric, records nothing.
Mat jvp(Var out, Var x, const Mat& dx);

}  // namespace monoflow::ad
