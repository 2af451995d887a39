#include "monoflow/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "monoflow/activations.hpp"

namespace monoflow::ad {

const Mat& Var::val() const {
  if (!tape) throw std::logic_error("empty Var");
  return tape->node(idx).val;
}

const Node& Tape::node(int i) const {
  if (i < 0 || i >= size()) throw std::runtime_error("stale tape reference");
  return nodes_[static_cast<size_t>(i)];
}

void Tape::rewind(int mark) {
  if (mark < 0 || mark > size()) throw std::logic_error("bad tape mark");
  nodes_.resize(static_cast<size_t>(mark));
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

Var push_op(Tape& t, Node n) {
  int i = t.push(std::move(n));
  return Var{&t, i};
}

double unary_eval(UnaryFn fn, int order, double c, double x) {
  switch (fn) {
    case UnaryFn::Relu: return relu_d(x, order);
    case UnaryFn::Sigmoid: return sigmoid_d(x, order);
    case UnaryFn::Exp: return std::exp(x);
    case UnaryFn::Log:
      if (order == 0) return std::log(x);
      throw std::logic_error("log derivatives handled structurally");
    case UnaryFn::Sqrt:
      if (order == 0) return std::sqrt(x);
      throw std::logic_error("sqrt derivatives handled structurally");
    case UnaryFn::Pila: return pila_d(x, c, order);
  }
  throw std::logic_error("bad unary fn");
}

Mat unary_eval_mat(UnaryFn fn, int order, double c, const Mat& x) {
  switch (fn) {
    case UnaryFn::Relu: return relu_d(x, order);
    case UnaryFn::Sigmoid: return sigmoid_d(x, order);
    case UnaryFn::Exp: return x.array().exp().matrix();
    case UnaryFn::Pila: return pila_d(x, c, order);
    case UnaryFn::Log:
    case UnaryFn::Sqrt: break;
  }
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      y(i, j) = unary_eval(fn, order, c, x(i, j));
  return y;
}

}  // namespace

Var leaf(Tape& t, Mat value, bool needs_grad) {
  Node n;
  n.op = Op::Leaf;
  n.val = std::move(value);
  n.grad_leaf = needs_grad;
  return push_op(t, std::move(n));
}

Var constant(Tape& t, Mat value) { return leaf(t, std::move(value), false); }

Var scalar_const(Tape& t, double value) {
  Mat m(1, 1);
  m(0, 0) = value;
  return constant(t, std::move(m));
}

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Node n;
  n.op = Op::Add;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val() + b.val();
  return push_op(*a.tape, std::move(n));
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Node n;
  n.op = Op::Sub;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val() - b.val();
  return push_op(*a.tape, std::move(n));
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Node n;
  n.op = Op::Mul;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val().cwiseProduct(b.val());
  return push_op(*a.tape, std::move(n));
}

Var div(Var a, Var b) {
  check_same_shape(a, b, "div");
  Node n;
  n.op = Op::Div;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val().cwiseQuotient(b.val());
  return push_op(*a.tape, std::move(n));
}

Var neg(Var a) {
  Node n;
  n.op = Op::Neg;
  n.a = a.idx;
  n.val = -a.val();
  return push_op(*a.tape, std::move(n));
}

Var scale(Var a, double c) {
  Node n;
  n.op = Op::Scale;
  n.a = a.idx;
  n.c0 = c;
  n.val = c * a.val();
  return push_op(*a.tape, std::move(n));
}

Var add_const(Var a, double c) {
  Node n;
  n.op = Op::AddConst;
  n.a = a.idx;
  n.c0 = c;
  n.val = (a.val().array() + c).matrix();
  return push_op(*a.tape, std::move(n));
}

Var matmul_nn(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul_nn: shape mismatch");
  Node n;
  n.op = Op::MatMulNN;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val() * b.val();
  return push_op(*a.tape, std::move(n));
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
  Node n;
  n.op = Op::MatMulNT;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val() * b.val().transpose();
  return push_op(*a.tape, std::move(n));
}

Var matmul_tn(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: shape mismatch");
  Node n;
  n.op = Op::MatMulTN;
  n.a = a.idx;
  n.b = b.idx;
  n.val = a.val().transpose() * b.val();
  return push_op(*a.tape, std::move(n));
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("add_row: shape mismatch");
  Node n;
  n.op = Op::AddRow;
  n.a = a.idx;
  n.b = row.idx;
  n.val = a.val().rowwise() + row.val().row(0);
  return push_op(*a.tape, std::move(n));
}

Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("mul_row: shape mismatch");
  Node n;
  n.op = Op::MulRow;
  n.a = a.idx;
  n.b = row.idx;
  n.val = (a.val().array().rowwise() * row.val().row(0).array()).matrix();
  return push_op(*a.tape, std::move(n));
}

Var mul_scalar1(Var a, Var s) {
  if (s.rows() != 1 || s.cols() != 1)
    throw std::invalid_argument("mul_scalar1: scalar must be 1x1");
  Node n;
  n.op = Op::MulScalar1;
  n.a = a.idx;
  n.b = s.idx;
  n.val = s.val()(0, 0) * a.val();
  return push_op(*a.tape, std::move(n));
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Node n;
  n.op = Op::ConcatCols;
  n.a = a.idx;
  n.b = b.idx;
  n.val.resize(a.rows(), a.cols() + b.cols());
  n.val << a.val(), b.val();
  n.i0 = static_cast<int>(a.cols());
  return push_op(*a.tape, std::move(n));
}

Var slice_cols(Var a, int off, int len) {
  if (off < 0 || len < 0 || off + len > a.cols())
    throw std::invalid_argument("slice_cols: out of range");
  Node n;
  n.op = Op::SliceCols;
  n.a = a.idx;
  n.i0 = off;
  n.i1 = len;
  n.val = a.val().middleCols(off, len);
  return push_op(*a.tape, std::move(n));
}

Var pad_cols(Var a, int off, int total) {
  if (off < 0 || off + a.cols() > total)
    throw std::invalid_argument("pad_cols: out of range");
  Node n;
  n.op = Op::PadCols;
  n.a = a.idx;
  n.i0 = off;
  n.i1 = total;
  n.val = Mat::Zero(a.rows(), total);
  n.val.middleCols(off, a.cols()) = a.val();
  return push_op(*a.tape, std::move(n));
}

Var col_sum(Var a) {
  Node n;
  n.op = Op::ColSum;
  n.a = a.idx;
  n.val = a.val().colwise().sum();
  return push_op(*a.tape, std::move(n));
}

Var sum_all(Var a) {
  Node n;
  n.op = Op::SumAll;
  n.a = a.idx;
  n.val = Mat::Constant(1, 1, a.val().sum());
  return push_op(*a.tape, std::move(n));
}

Var rep_row(Var row, int nrows) {
  if (row.rows() != 1) throw std::invalid_argument("rep_row: input must be a row");
  Node n;
  n.op = Op::RepRow;
  n.a = row.idx;
  n.i0 = nrows;
  n.val = row.val().replicate(nrows, 1);
  return push_op(*row.tape, std::move(n));
}

Var unary(Var a, UnaryFn fn, int order, double c) {
  Node n;
  n.op = Op::Unary;
  n.a = a.idx;
  n.fn = fn;
  n.i0 = order;
  n.c0 = c;
  n.val = unary_eval_mat(fn, order, c, a.val());
  return push_op(*a.tape, std::move(n));
}

Var detach(Var a) {
  Node n;
  n.op = Op::Detach;
  n.a = a.idx;
  n.val = a.val();
  return push_op(*a.tape, std::move(n));
}

Var dot_all(Var a, Var b) { return sum_all(mul(a, b)); }

namespace {

class BackwardPass {
 public:
  BackwardPass(Tape& t, const std::vector<Var>& wrt) : tape_(t) {
    for (const Var& v : wrt) wrt_.push_back(v.idx);
  }

  std::vector<Var> run(Var out, Mat seed) {
    grads_.assign(static_cast<size_t>(out.idx) + 1, -1);
    Var s = constant(tape_, std::move(seed));
    grads_[static_cast<size_t>(out.idx)] = s.idx;
    for (int i = out.idx; i >= 0; --i) {
      int gi = grads_[static_cast<size_t>(i)];
      if (gi < 0) continue;
      propagate(i, Var{&tape_, gi});
    }
    std::vector<Var> result;
    for (int w : wrt_) {
      int gi = w <= out.idx ? grads_[static_cast<size_t>(w)] : -1;
      if (gi >= 0) {
        result.push_back(Var{&tape_, gi});
      } else {
        const Node& n = tape_.node(w);
        result.push_back(constant(tape_, Mat::Zero(n.val.rows(), n.val.cols())));
      }
    }
    return result;
  }

 private:
  bool wanted_leaf(int idx) const {
    for (int w : wrt_)
      if (w == idx) return true;
    return false;
  }

  void accum(int idx, Var g) {
    const Node& n = tape_.node(idx);
    if (n.op == Op::Leaf && (!n.grad_leaf || !wanted_leaf(idx))) return;
    int& slot = grads_[static_cast<size_t>(idx)];
    slot = slot < 0 ? g.idx : add(Var{&tape_, slot}, g).idx;
  }

  void propagate(int i, Var g) {
    const Node n = tape_.node(i);  // copy: pushes below may reallocate
    Var self{&tape_, i};
    Var a{&tape_, n.a};
    Var b{&tape_, n.b};
    switch (n.op) {
      case Op::Leaf:
        return;
      case Op::Add:
        accum(n.a, g);
        accum(n.b, g);
        return;
      case Op::Sub:
        accum(n.a, g);
        accum(n.b, neg(g));
        return;
      case Op::Mul:
        accum(n.a, mul(g, b));
        accum(n.b, mul(g, a));
        return;
      case Op::Div:
        accum(n.a, div(g, b));
        accum(n.b, neg(mul(g, div(self, b))));
        return;
      case Op::Neg:
        accum(n.a, neg(g));
        return;
      case Op::Scale:
        accum(n.a, scale(g, n.c0));
        return;
      case Op::AddConst:
        accum(n.a, g);
        return;
      case Op::MatMulNN:
        accum(n.a, matmul_nt(g, b));
        accum(n.b, matmul_tn(a, g));
        return;
      case Op::MatMulNT:
        accum(n.a, matmul_nn(g, b));
        accum(n.b, matmul_tn(g, a));
        return;
      case Op::MatMulTN:
        accum(n.a, matmul_nt(b, g));
        accum(n.b, matmul_nn(a, g));
        return;
      case Op::AddRow:
        accum(n.a, g);
        accum(n.b, col_sum(g));
        return;
      case Op::MulRow:
        accum(n.a, mul_row(g, b));
        accum(n.b, col_sum(mul(g, a)));
        return;
      case Op::MulScalar1:
        accum(n.a, mul_scalar1(g, b));
        accum(n.b, sum_all(mul(g, a)));
        return;
      case Op::ConcatCols:
        accum(n.a, slice_cols(g, 0, n.i0));
        accum(n.b, slice_cols(g, n.i0, static_cast<int>(n.val.cols()) - n.i0));
        return;
      case Op::SliceCols:
        accum(n.a, pad_cols(g, n.i0, static_cast<int>(a.cols())));
        return;
      case Op::PadCols:
        accum(n.a, slice_cols(g, n.i0, static_cast<int>(a.cols())));
        return;
      case Op::ColSum:
        accum(n.a, rep_row(g, static_cast<int>(a.rows())));
        return;
      case Op::SumAll:
        accum(n.a, mul_scalar1(constant(tape_, Mat::Ones(a.rows(), a.cols())), g));
        return;
      case Op::RepRow:
        accum(n.a, col_sum(g));
        return;
      case Op::Unary:
        switch (n.fn) {
          case UnaryFn::Relu:
            if (n.i0 >= 1) return;  // step has zero derivative a.e.
            accum(n.a, mul(g, unary(a, UnaryFn::Relu, n.i0 + 1)));
            return;
          case UnaryFn::Sigmoid:
            if (n.i0 == 0) {
              accum(n.a, mul(g, mul(self, add_const(neg(self), 1.0))));
            } else {
              accum(n.a, mul(g, unary(a, UnaryFn::Sigmoid, n.i0 + 1)));
            }
            return;
          case UnaryFn::Exp:
            accum(n.a, mul(g, self));
            return;
          case UnaryFn::Log:
            accum(n.a, div(g, a));
            return;
          case UnaryFn::Sqrt:
            accum(n.a, div(scale(g, 0.5), self));
            return;
          case UnaryFn::Pila:
            accum(n.a, mul(g, unary(a, UnaryFn::Pila, n.i0 + 1, n.c0)));
            return;
        }
        return;
      case Op::Detach:
        return;
    }
  }

  Tape& tape_;
  std::vector<int> wrt_;
  std::vector<int> grads_;
};

}  // namespace

std::vector<Var> backward(Var out, const std::vector<Var>& wrt) {
  if (out.rows() != 1 || out.cols() != 1)
    throw std::invalid_argument("backward: output must be scalar; use backward_seeded");
  return backward_seeded(out, Mat::Ones(1, 1), wrt);
}

std::vector<Var> backward_seeded(Var out, const Mat& seed, const std::vector<Var>& wrt) {
  if (seed.rows() != out.rows() || seed.cols() != out.cols())
    throw std::invalid_argument("backward_seeded: seed shape mismatch");
  BackwardPass pass(*out.tape, wrt);
  return pass.run(out, seed);
}

Mat jvp(Var out, Var x, const Mat& dx) {
  if (dx.rows() != x.rows() || dx.cols() != x.cols())
    throw std::invalid_argument("jvp: tangent shape mismatch");
  Tape& t = *out.tape;
  std::vector<Mat> tan(static_cast<size_t>(out.idx) + 1);
  std::vector<char> has(static_cast<size_t>(out.idx) + 1, 0);
  auto get = [&](int i) -> const Mat& { return tan[static_cast<size_t>(i)]; };
  auto hastan = [&](int i) { return i >= 0 && i <= out.idx && has[static_cast<size_t>(i)]; };
  auto set = [&](int i, Mat m) {
    tan[static_cast<size_t>(i)] = std::move(m);
    has[static_cast<size_t>(i)] = 1;
  };
  if (x.idx > out.idx) throw std::invalid_argument("jvp: leaf is not an ancestor of out");
  set(x.idx, dx);
  for (int i = 0; i <= out.idx; ++i) {
    const Node& n = t.node(i);
    if (n.op == Op::Leaf) continue;
    bool ha = hastan(n.a);
    bool hb = n.b >= 0 && hastan(n.b);
    if (!ha && !hb) continue;
    const Mat& av = t.node(n.a).val;
    switch (n.op) {
      case Op::Add:
        set(i, ha && hb ? Mat(get(n.a) + get(n.b)) : (ha ? get(n.a) : get(n.b)));
        break;
      case Op::Sub:
        if (ha && hb) set(i, get(n.a) - get(n.b));
        else if (ha) set(i, get(n.a));
        else set(i, -get(n.b));
        break;
      case Op::Mul: {
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += get(n.a).cwiseProduct(t.node(n.b).val);
        if (hb) m += av.cwiseProduct(get(n.b));
        set(i, std::move(m));
        break;
      }
      case Op::Div: {
        const Mat& bv = t.node(n.b).val;
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += get(n.a).cwiseQuotient(bv);
        if (hb) m -= n.val.cwiseProduct(get(n.b)).cwiseQuotient(bv);
        set(i, std::move(m));
        break;
      }
      case Op::Neg:
        set(i, -get(n.a));
        break;
      case Op::Scale:
        set(i, n.c0 * get(n.a));
        break;
      case Op::AddConst:
        set(i, get(n.a));
        break;
      case Op::MatMulNN: {
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += get(n.a) * t.node(n.b).val;
        if (hb) m += av * get(n.b);
        set(i, std::move(m));
        break;
      }
      case Op::MatMulNT: {
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += get(n.a) * t.node(n.b).val.transpose();
        if (hb) m += av * get(n.b).transpose();
        set(i, std::move(m));
        break;
      }
      case Op::MatMulTN: {
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += get(n.a).transpose() * t.node(n.b).val;
        if (hb) m += av.transpose() * get(n.b);
        set(i, std::move(m));
        break;
      }
      case Op::AddRow: {
        Mat m = ha ? get(n.a) : Mat(Mat::Zero(n.val.rows(), n.val.cols()));
        if (hb) m.rowwise() += get(n.b).row(0);
        set(i, std::move(m));
        break;
      }
      case Op::MulRow: {
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += (get(n.a).array().rowwise() * t.node(n.b).val.row(0).array()).matrix();
        if (hb) m += (av.array().rowwise() * get(n.b).row(0).array()).matrix();
        set(i, std::move(m));
        break;
      }
      case Op::MulScalar1: {
        Mat m = Mat::Zero(n.val.rows(), n.val.cols());
        if (ha) m += t.node(n.b).val(0, 0) * get(n.a);
        if (hb) m += get(n.b)(0, 0) * av;
        set(i, std::move(m));
        break;
      }
      case Op::ConcatCols: {
        Mat m(n.val.rows(), n.val.cols());
        m.leftCols(n.i0) = ha ? get(n.a) : Mat(Mat::Zero(n.val.rows(), n.i0));
        Eigen::Index bc = n.val.cols() - n.i0;
        m.rightCols(bc) = hb ? get(n.b) : Mat(Mat::Zero(n.val.rows(), bc));
        set(i, std::move(m));
        break;
      }
      case Op::SliceCols:
        set(i, get(n.a).middleCols(n.i0, n.i1));
        break;
      case Op::PadCols: {
        Mat m = Mat::Zero(n.val.rows(), n.i1);
        m.middleCols(n.i0, av.cols()) = get(n.a);
        set(i, std::move(m));
        break;
      }
      case Op::ColSum:
        set(i, get(n.a).colwise().sum());
        break;
      case Op::SumAll:
        set(i, Mat::Constant(1, 1, get(n.a).sum()));
        break;
      case Op::RepRow:
        set(i, get(n.a).replicate(n.i0, 1));
        break;
      case Op::Unary: {
        Mat d;
        switch (n.fn) {
          case UnaryFn::Relu:
            d = relu_d(av, n.i0 + 1);
            break;
          case UnaryFn::Sigmoid:
            d = sigmoid_d(av, n.i0 + 1);
            break;
          case UnaryFn::Exp:
            d = n.val;
            break;
          case UnaryFn::Log:
            d = av.cwiseInverse();
            break;
          case UnaryFn::Sqrt:
            d = 0.5 * n.val.cwiseInverse();
            break;
          case UnaryFn::Pila:
            d = pila_d(av, n.c0, n.i0 + 1);
            break;
        }
        set(i, get(n.a).cwiseProduct(d));
        break;
      }
      case Op::Detach:
      case Op::Leaf:
        break;
    }
  }
  if (!hastan(out.idx)) return Mat::Zero(out.rows(), out.cols());
  return get(out.idx);
}

}  // namespace monoflow::ad
