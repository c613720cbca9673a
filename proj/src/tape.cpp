#include "optlens/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "optlens/kernels.hpp"

namespace optlens::nd {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::AddScalar: return "add-scalar";
    case Op::MulScalar: return "mul-scalar";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::LeakyRelu: return "leaky-relu";
    case Op::Abs: return "abs";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SumRows: return "sum-rows";
    case Op::SumCols: return "sum-cols";
    case Op::MaxRows: return "max-rows";
    case Op::AddRow: return "add-row";
    case Op::MulRow: return "mul-row";
    case Op::IndexSelect: return "index-select";
    case Op::Slice: return "slice";
    case Op::SliceCols: return "slice-cols";
    case Op::Reshape: return "reshape";
    case Op::BatchNorm: return "batch-norm";
    case Op::LogSumExp: return "log-sum-exp";
    case Op::LstmCell: return "lstm-cell";
  }
  return "?";
}

const Tensor& GradMap::at(NodeId leaf) const {
  auto it = grads_.find(leaf);
  if (it == grads_.end()) fail("gradmap: node " + std::to_string(leaf) + " is not a leaf of this tape");
  return it->second;
}

namespace {

[[noreturn]] void shape_fail(Op op, const Tensor& a) {
  fail(std::string(op_name(op)) + ": bad shape " + a.shape_str());
}

[[noreturn]] void shape_fail2(Op op, const Tensor& a, const Tensor& b) {
  fail(std::string(op_name(op)) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <class F>
void map_unary(const Tensor& a, Tensor& out, F f) {
  const int64_t n = a.size();
  const double* x = a.data.data();
  double* y = out.data.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
}

void accumulate(Tensor& dst, const Tensor& src) {
  const int64_t n = dst.size();
  double* d = dst.data.data();
  const double* s = src.data.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

NodeId Tape::push(Node n) {
  check_open(op_name(n.op));
  for (int i = 0; i < n.n_in; ++i) n.requires_grad = n.requires_grad || nodes_[n.in[i]].requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Node& Tape::node(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
    fail("tape: node id " + std::to_string(id) + " out of range");
  return nodes_[id];
}

void Tape::check_open(const char* what) const {
  if (spent_) fail(std::string("tape: ") + what + " after backward; reset() first");
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }
bool Tape::requires_grad(NodeId id) const { return node(id).requires_grad; }

NodeId Tape::leaf(Tensor v) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(v);
  n.requires_grad = true;
  return push(std::move(n));
}

NodeId Tape::constant(Tensor v) {
  Node n;
  n.op = Op::Const;
  n.value = std::move(v);
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) shape_fail2(Op::MatMul, A, B);
  Node n;
  n.op = Op::MatMul;
  n.in = {a, b};
  n.n_in = 2;
  n.value = Tensor{A.shape[0], B.shape[1]};
  kern::matmul(A.data.data(), B.data.data(), n.value.data.data(), A.shape[0], A.shape[1], B.shape[1]);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_fail2(Op::Add, A, B);
  Node n;
  n.op = Op::Add;
  n.in = {a, b};
  n.n_in = 2;
  n.value = Tensor(A.shape);
  const int64_t m = A.size();
  const double* x = A.data.data();
  const double* y = B.data.data();
  double* o = n.value.data.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) o[i] = x[i] + y[i];
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_fail2(Op::Sub, A, B);
  Node n;
  n.op = Op::Sub;
  n.in = {a, b};
  n.n_in = 2;
  n.value = Tensor(A.shape);
  const int64_t m = A.size();
  const double* x = A.data.data();
  const double* y = B.data.data();
  double* o = n.value.data.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) o[i] = x[i] - y[i];
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_fail2(Op::Mul, A, B);
  Node n;
  n.op = Op::Mul;
  n.in = {a, b};
  n.n_in = 2;
  n.value = Tensor(A.shape);
  const int64_t m = A.size();
  const double* x = A.data.data();
  const double* y = B.data.data();
  double* o = n.value.data.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) o[i] = x[i] * y[i];
  return push(std::move(n));
}

NodeId Tape::div(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_fail2(Op::Div, A, B);
  Node n;
  n.op = Op::Div;
  n.in = {a, b};
  n.n_in = 2;
  n.value = Tensor(A.shape);
  const int64_t m = A.size();
  const double* x = A.data.data();
  const double* y = B.data.data();
  double* o = n.value.data.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) o[i] = x[i] / y[i];
  return push(std::move(n));
}

NodeId Tape::add_scalar(NodeId a, double s) {
  Node n;
  n.op = Op::AddScalar;
  n.in = {a};
  n.n_in = 1;
  n.attr = s;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [s](double x) { return x + s; });
  return push(std::move(n));
}

NodeId Tape::mul_scalar(NodeId a, double s) {
  Node n;
  n.op = Op::MulScalar;
  n.in = {a};
  n.n_in = 1;
  n.attr = s;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [s](double x) { return x * s; });
  return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  Node n;
  n.op = Op::Exp;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [](double x) { return std::exp(x); });
  return push(std::move(n));
}

NodeId Tape::log(NodeId a) {
  Node n;
  n.op = Op::Log;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [](double x) { return std::log(x); });
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.op = Op::Tanh;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [](double x) { return std::tanh(x); });
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  Node n;
  n.op = Op::Sigmoid;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [](double x) { return sigmoid_scalar(x); });
  return push(std::move(n));
}

NodeId Tape::leaky_relu(NodeId a, double slope) {
  Node n;
  n.op = Op::LeakyRelu;
  n.in = {a};
  n.n_in = 1;
  n.attr = slope;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [slope](double x) { return x > 0.0 ? x : slope * x; });
  return push(std::move(n));
}

NodeId Tape::abs(NodeId a) {
  Node n;
  n.op = Op::Abs;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor(value(a).shape);
  map_unary(value(a), n.value, [](double x) { return std::fabs(x); });
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  const Tensor& A = value(a);
  Node n;
  n.op = Op::Sum;
  n.in = {a};
  n.n_in = 1;
  double s = 0.0;
  for (double x : A.data) s += x;  // fixed order, never parallel
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  const Tensor& A = value(a);
  Node n;
  n.op = Op::Mean;
  n.in = {a};
  n.n_in = 1;
  double s = 0.0;
  for (double x : A.data) s += x;
  n.value = Tensor::scalar(s / static_cast<double>(A.size()));
  return push(std::move(n));
}

NodeId Tape::sum_rows(NodeId a) {
  const Tensor& A = value(a);
  if (A.rank() != 2) shape_fail(Op::SumRows, A);
  const int64_t r = A.shape[0], c = A.shape[1];
  Node n;
  n.op = Op::SumRows;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor{r};
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    const double* row = A.data.data() + i * c;
    for (int64_t j = 0; j < c; ++j) s += row[j];
    n.value.data[i] = s;
  }
  return push(std::move(n));
}

NodeId Tape::sum_cols(NodeId a) {
  const Tensor& A = value(a);
  if (A.rank() != 2) shape_fail(Op::SumCols, A);
  const int64_t r = A.shape[0], c = A.shape[1];
  Node n;
  n.op = Op::SumCols;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor{c};
  for (int64_t i = 0; i < r; ++i) {
    const double* row = A.data.data() + i * c;
    for (int64_t j = 0; j < c; ++j) n.value.data[j] += row[j];
  }
  return push(std::move(n));
}

NodeId Tape::max_rows(NodeId a) {
  const Tensor& A = value(a);
  if (A.rank() != 2) shape_fail(Op::MaxRows, A);
  const int64_t r = A.shape[0], c = A.shape[1];
  if (c == 0) shape_fail(Op::MaxRows, A);
  Node n;
  n.op = Op::MaxRows;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor{r};
  n.saved = Tensor{r};  // first-argmax column per row; ties break low
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < r; ++i) {
    const double* row = A.data.data() + i * c;
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    n.value.data[i] = row[best];
    n.saved.data[i] = static_cast<double>(best);
  }
  return push(std::move(n));
}

NodeId Tape::add_row(NodeId a, NodeId r) {
  const Tensor& A = value(a);
  const Tensor& R = value(r);
  if (A.rank() != 2 || R.rank() != 1 || R.shape[0] != A.shape[1]) shape_fail2(Op::AddRow, A, R);
  Node n;
  n.op = Op::AddRow;
  n.in = {a, r};
  n.n_in = 2;
  n.value = Tensor(A.shape);
  const int64_t rows = A.shape[0], cols = A.shape[1];
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* x = A.data.data() + i * cols;
    double* o = n.value.data.data() + i * cols;
    for (int64_t j = 0; j < cols; ++j) o[j] = x[j] + R.data[j];
  }
  return push(std::move(n));
}

NodeId Tape::mul_row(NodeId a, NodeId r) {
  const Tensor& A = value(a);
  const Tensor& R = value(r);
  if (A.rank() != 2 || R.rank() != 1 || R.shape[0] != A.shape[1]) shape_fail2(Op::MulRow, A, R);
  Node n;
  n.op = Op::MulRow;
  n.in = {a, r};
  n.n_in = 2;
  n.value = Tensor(A.shape);
  const int64_t rows = A.shape[0], cols = A.shape[1];
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* x = A.data.data() + i * cols;
    double* o = n.value.data.data() + i * cols;
    for (int64_t j = 0; j < cols; ++j) o[j] = x[j] * R.data[j];
  }
  return push(std::move(n));
}

NodeId Tape::index_select(NodeId a, std::vector<int64_t> idx) {
  const Tensor& A = value(a);
  for (int64_t k : idx)
    if (k < 0 || k >= A.size())
      fail("index-select: index " + std::to_string(k) + " out of range for " + A.shape_str());
  Node n;
  n.op = Op::IndexSelect;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor{static_cast<int64_t>(idx.size())};
  for (size_t k = 0; k < idx.size(); ++k) n.value.data[k] = A.data[idx[k]];
  n.idx = std::move(idx);
  return push(std::move(n));
}

NodeId Tape::slice(NodeId a, int64_t start, int64_t len) {
  const Tensor& A = value(a);
  if (start < 0 || len < 0 || start + len > A.size())
    fail("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for " +
         A.shape_str());
  Node n;
  n.op = Op::Slice;
  n.in = {a};
  n.n_in = 1;
  n.i0 = start;
  n.i1 = len;
  n.value = Tensor{len};
  std::memcpy(n.value.data.data(), A.data.data() + start, len * sizeof(double));
  return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId a, int64_t c0, int64_t c1) {
  const Tensor& A = value(a);
  if (A.rank() != 2 || c0 < 0 || c1 < c0 || c1 > A.shape[1])
    fail("slice-cols: [" + std::to_string(c0) + ", " + std::to_string(c1) + ") out of range for " + A.shape_str());
  const int64_t rows = A.shape[0], cols = A.shape[1], w = c1 - c0;
  Node n;
  n.op = Op::SliceCols;
  n.in = {a};
  n.n_in = 1;
  n.i0 = c0;
  n.i1 = c1;
  n.value = Tensor{rows, w};
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i)
    std::memcpy(n.value.data.data() + i * w, A.data.data() + i * cols + c0, w * sizeof(double));
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, std::vector<int64_t> shape) {
  const Tensor& A = value(a);
  if (Tensor::count(shape) != A.size())
    fail("reshape: cannot view " + A.shape_str() + " as " + Tensor(shape).shape_str());
  Node n;
  n.op = Op::Reshape;
  n.in = {a};
  n.n_in = 1;
  n.value.shape = std::move(shape);
  n.value.data = A.data;
  return push(std::move(n));
}

NodeId Tape::batch_norm(NodeId a, double eps) {
  const Tensor& A = value(a);
  if (A.rank() != 2 || A.shape[0] < 1) shape_fail(Op::BatchNorm, A);
  const int64_t rows = A.shape[0], cols = A.shape[1];
  Node n;
  n.op = Op::BatchNorm;
  n.in = {a};
  n.n_in = 1;
  n.attr = eps;
  n.value = Tensor(A.shape);
  n.saved = Tensor{2, cols};  // row 0: mean, row 1: 1/sqrt(var+eps)
  for (int64_t j = 0; j < cols; ++j) {
    double m = 0.0;
    for (int64_t i = 0; i < rows; ++i) m += A.at(i, j);
    m /= static_cast<double>(rows);
    double v = 0.0;
    for (int64_t i = 0; i < rows; ++i) {
      const double d = A.at(i, j) - m;
      v += d * d;
    }
    v /= static_cast<double>(rows);
    n.saved.at(0, j) = m;
    n.saved.at(1, j) = 1.0 / std::sqrt(v + eps);
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) n.value.at(i, j) = (A.at(i, j) - n.saved.at(0, j)) * n.saved.at(1, j);
  return push(std::move(n));
}

NodeId Tape::log_sum_exp(NodeId a) {
  const Tensor& A = value(a);
  if (A.rank() != 1 && A.rank() != 2) shape_fail(Op::LogSumExp, A);
  const int64_t rows = A.rank() == 2 ? A.shape[0] : 1;
  const int64_t cols = A.rank() == 2 ? A.shape[1] : A.shape[0];
  if (cols == 0) shape_fail(Op::LogSumExp, A);
  Node n;
  n.op = Op::LogSumExp;
  n.in = {a};
  n.n_in = 1;
  n.value = Tensor{rows};
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = A.data.data() + i * cols;
    double m = row[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) s += std::exp(row[j] - m);
    n.value.data[i] = m + std::log(s);
  }
  return push(std::move(n));
}

NodeId Tape::lstm_cell(NodeId x, NodeId h, NodeId c, NodeId wx, NodeId wh, NodeId b) {
  const Tensor& X = value(x);
  const Tensor& H = value(h);
  const Tensor& C = value(c);
  const Tensor& Wx = value(wx);
  const Tensor& Wh = value(wh);
  const Tensor& B = value(b);
  if (X.rank() != 2 || H.rank() != 2 || C.rank() != 2 || Wx.rank() != 2 || Wh.rank() != 2 || B.rank() != 1)
    fail("lstm-cell: all matrix inputs must be rank 2 and bias rank 1");
  const int64_t N = X.shape[0], I = X.shape[1], Hd = H.shape[1];
  if (H.shape[0] != N || !C.same_shape(H) || Wx.shape[0] != I || Wx.shape[1] != 4 * Hd ||
      Wh.shape[0] != Hd || Wh.shape[1] != 4 * Hd || B.shape[0] != 4 * Hd)
    fail("lstm-cell: inconsistent shapes x" + X.shape_str() + " h" + H.shape_str() + " c" + C.shape_str() +
         " wx" + Wx.shape_str() + " wh" + Wh.shape_str() + " b" + B.shape_str());

  Node n;
  n.op = Op::LstmCell;
  n.in = {x, h, c, wx, wh, b};
  n.n_in = 6;
  n.value = Tensor{N, 2 * Hd};
  n.saved = Tensor{N, 4 * Hd};  // activated gates [i f g o], needed for backward

  Tensor pre{N, 4 * Hd};
  kern::matmul(X.data.data(), Wx.data.data(), pre.data.data(), N, I, 4 * Hd);
  Tensor hw{N, 4 * Hd};
  kern::matmul(H.data.data(), Wh.data.data(), hw.data.data(), N, Hd, 4 * Hd);

#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < N; ++r) {
    double* p = pre.data.data() + r * 4 * Hd;
    const double* q = hw.data.data() + r * 4 * Hd;
    const double* cr = C.data.data() + r * Hd;
    double* gates = n.saved.data.data() + r * 4 * Hd;
    double* out = n.value.data.data() + r * 2 * Hd;
    for (int64_t j = 0; j < 4 * Hd; ++j) p[j] += q[j] + B.data[j];
    for (int64_t j = 0; j < Hd; ++j) {
      const double ig = sigmoid_scalar(p[j]);
      const double fg = sigmoid_scalar(p[Hd + j]);
      const double gg = std::tanh(p[2 * Hd + j]);
      const double og = sigmoid_scalar(p[3 * Hd + j]);
      gates[j] = ig;
      gates[Hd + j] = fg;
      gates[2 * Hd + j] = gg;
      gates[3 * Hd + j] = og;
      const double cn = fg * cr[j] + ig * gg;
      out[j] = og * std::tanh(cn);
      out[Hd + j] = cn;
    }
  }
  return push(std::move(n));
}

void Tape::set_output(NodeId id) {
  check_open("set_output");
  const Node& n = node(id);
  if (n.value.size() != 1) fail("tape: output must be scalar, got " + n.value.shape_str());
  output_ = id;
}

void Tape::reset() {
  nodes_.clear();
  output_ = -1;
  spent_ = false;
}

GradMap Tape::backward() {
  check_open("backward");
  if (output_ < 0) fail("tape: backward without set_output");
  spent_ = true;

  std::vector<Tensor> grad(nodes_.size());
  auto ensure = [&](NodeId i) -> Tensor& {
    if (grad[i].data.empty()) grad[i] = Tensor(nodes_[i].value.shape);
    return grad[i];
  };
  ensure(output_).data[0] = 1.0;

  for (NodeId i = output_; i >= 0; --i) {
    Node& n = nodes_[i];
    if (grad[i].data.empty() || !n.requires_grad || n.n_in == 0) {
      if (n.op != Op::Leaf) grad[i] = Tensor();
      continue;
    }
    const Tensor& d = grad[i];
    switch (n.op) {
      case Op::MatMul: {
        const Tensor& A = nodes_[n.in[0]].value;
        const Tensor& B = nodes_[n.in[1]].value;
        const int64_t m = A.shape[0], k = A.shape[1], p = B.shape[1];
        if (nodes_[n.in[0]].requires_grad) {
          Tensor da{m, k};
          kern::matmul_bt(d.data.data(), B.data.data(), da.data.data(), m, p, k);
          accumulate(ensure(n.in[0]), da);
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor db{k, p};
          kern::matmul_at(A.data.data(), d.data.data(), db.data.data(), k, m, p);
          accumulate(ensure(n.in[1]), db);
        }
        break;
      }
      case Op::Add:
        if (nodes_[n.in[0]].requires_grad) accumulate(ensure(n.in[0]), d);
        if (nodes_[n.in[1]].requires_grad) accumulate(ensure(n.in[1]), d);
        break;
      case Op::Sub: {
        if (nodes_[n.in[0]].requires_grad) accumulate(ensure(n.in[0]), d);
        if (nodes_[n.in[1]].requires_grad) {
          Tensor& g = ensure(n.in[1]);
          const int64_t m = g.size();
#pragma omp parallel for schedule(static)
          for (int64_t j = 0; j < m; ++j) g.data[j] -= d.data[j];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& A = nodes_[n.in[0]].value;
        const Tensor& B = nodes_[n.in[1]].value;
        const int64_t m = d.size();
        if (nodes_[n.in[0]].requires_grad) {
          Tensor& g = ensure(n.in[0]);
#pragma omp parallel for schedule(static)
          for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] * B.data[j];
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor& g = ensure(n.in[1]);
#pragma omp parallel for schedule(static)
          for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] * A.data[j];
        }
        break;
      }
      case Op::Div: {
        const Tensor& A = nodes_[n.in[0]].value;
        const Tensor& B = nodes_[n.in[1]].value;
        const int64_t m = d.size();
        if (nodes_[n.in[0]].requires_grad) {
          Tensor& g = ensure(n.in[0]);
#pragma omp parallel for schedule(static)
          for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] / B.data[j];
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor& g = ensure(n.in[1]);
#pragma omp parallel for schedule(static)
          for (int64_t j = 0; j < m; ++j) g.data[j] -= d.data[j] * A.data[j] / (B.data[j] * B.data[j]);
        }
        break;
      }
      case Op::AddScalar:
        accumulate(ensure(n.in[0]), d);
        break;
      case Op::MulScalar: {
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
        const double s = n.attr;
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += s * d.data[j];
        break;
      }
      case Op::Exp: {
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] * n.value.data[j];
        break;
      }
      case Op::Log: {
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] / A.data[j];
        break;
      }
      case Op::Tanh: {
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] * (1.0 - n.value.data[j] * n.value.data[j]);
        break;
      }
      case Op::Sigmoid: {
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] * n.value.data[j] * (1.0 - n.value.data[j]);
        break;
      }
      case Op::LeakyRelu: {
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
        const double slope = n.attr;
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += d.data[j] * (A.data[j] > 0.0 ? 1.0 : slope);
        break;
      }
      case Op::Abs: {
        // subgradient 0 at the kink
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) {
          const double s = A.data[j] > 0.0 ? 1.0 : (A.data[j] < 0.0 ? -1.0 : 0.0);
          g.data[j] += d.data[j] * s;
        }
        break;
      }
      case Op::Sum: {
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
        const double dv = d.data[0];
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += dv;
        break;
      }
      case Op::Mean: {
        Tensor& g = ensure(n.in[0]);
        const int64_t m = g.size();
        const double dv = d.data[0] / static_cast<double>(m);
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < m; ++j) g.data[j] += dv;
        break;
      }
      case Op::SumRows: {
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t r = A.shape[0], c = A.shape[1];
#pragma omp parallel for schedule(static)
        for (int64_t i2 = 0; i2 < r; ++i2) {
          double* row = g.data.data() + i2 * c;
          const double dv = d.data[i2];
          for (int64_t j = 0; j < c; ++j) row[j] += dv;
        }
        break;
      }
      case Op::SumCols: {
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t r = A.shape[0], c = A.shape[1];
#pragma omp parallel for schedule(static)
        for (int64_t i2 = 0; i2 < r; ++i2) {
          double* row = g.data.data() + i2 * c;
          for (int64_t j = 0; j < c; ++j) row[j] += d.data[j];
        }
        break;
      }
      case Op::MaxRows: {
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t r = A.shape[0], c = A.shape[1];
        for (int64_t i2 = 0; i2 < r; ++i2)
          g.data[i2 * c + static_cast<int64_t>(n.saved.data[i2])] += d.data[i2];
        break;
      }
      case Op::AddRow: {
        const int64_t r = n.value.shape[0], c = n.value.shape[1];
        if (nodes_[n.in[0]].requires_grad) accumulate(ensure(n.in[0]), d);
        if (nodes_[n.in[1]].requires_grad) {
          Tensor& g = ensure(n.in[1]);
          for (int64_t i2 = 0; i2 < r; ++i2)
            for (int64_t j = 0; j < c; ++j) g.data[j] += d.data[i2 * c + j];
        }
        break;
      }
      case Op::MulRow: {
        const Tensor& A = nodes_[n.in[0]].value;
        const Tensor& R = nodes_[n.in[1]].value;
        const int64_t r = n.value.shape[0], c = n.value.shape[1];
        if (nodes_[n.in[0]].requires_grad) {
          Tensor& g = ensure(n.in[0]);
#pragma omp parallel for schedule(static)
          for (int64_t i2 = 0; i2 < r; ++i2)
            for (int64_t j = 0; j < c; ++j) g.data[i2 * c + j] += d.data[i2 * c + j] * R.data[j];
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor& g = ensure(n.in[1]);
          for (int64_t i2 = 0; i2 < r; ++i2)
            for (int64_t j = 0; j < c; ++j) g.data[j] += d.data[i2 * c + j] * A.data[i2 * c + j];
        }
        break;
      }
      case Op::IndexSelect: {
        Tensor& g = ensure(n.in[0]);
        for (size_t k = 0; k < n.idx.size(); ++k) g.data[n.idx[k]] += d.data[k];
        break;
      }
      case Op::Slice: {
        Tensor& g = ensure(n.in[0]);
        double* dst = g.data.data() + n.i0;
        for (int64_t j = 0; j < n.i1; ++j) dst[j] += d.data[j];
        break;
      }
      case Op::SliceCols: {
        const Tensor& A = nodes_[n.in[0]].value;
        Tensor& g = ensure(n.in[0]);
        const int64_t rows = A.shape[0], cols = A.shape[1], w = n.i1 - n.i0;
#pragma omp parallel for schedule(static)
        for (int64_t i2 = 0; i2 < rows; ++i2) {
          double* dst = g.data.data() + i2 * cols + n.i0;
          const double* src = d.data.data() + i2 * w;
          for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::Reshape:
        accumulate(ensure(n.in[0]), d);
        break;
      case Op::BatchNorm: {
        // d/dx of column-standardized output with biased variance:
        // dx = invstd * (d - mean(d) - y * mean(d*y))
        const int64_t rows = n.value.shape[0], cols = n.value.shape[1];
        Tensor& g = ensure(n.in[0]);
        for (int64_t j = 0; j < cols; ++j) {
          double md = 0.0, mdy = 0.0;
          for (int64_t i2 = 0; i2 < rows; ++i2) {
            md += d.data[i2 * cols + j];
            mdy += d.data[i2 * cols + j] * n.value.data[i2 * cols + j];
          }
          md /= static_cast<double>(rows);
          mdy /= static_cast<double>(rows);
          const double inv = n.saved.at(1, j);
          for (int64_t i2 = 0; i2 < rows; ++i2)
            g.data[i2 * cols + j] +=
                inv * (d.data[i2 * cols + j] - md - n.value.data[i2 * cols + j] * mdy);
        }
        break;
      }
      case Op::LogSumExp: {
        const Tensor& A = nodes_[n.in[0]].value;
        const int64_t rows = n.value.shape[0];
        const int64_t cols = A.size() / rows;
        Tensor& g = ensure(n.in[0]);
#pragma omp parallel for schedule(static)
        for (int64_t i2 = 0; i2 < rows; ++i2) {
          const double lse = n.value.data[i2];
          const double dv = d.data[i2];
          const double* row = A.data.data() + i2 * cols;
          double* grow = g.data.data() + i2 * cols;
          for (int64_t j = 0; j < cols; ++j) grow[j] += dv * std::exp(row[j] - lse);
        }
        break;
      }
      case Op::LstmCell: {
        const Tensor& X = nodes_[n.in[0]].value;
        const Tensor& H = nodes_[n.in[1]].value;
        const Tensor& C = nodes_[n.in[2]].value;
        const Tensor& Wx = nodes_[n.in[3]].value;
        const Tensor& Wh = nodes_[n.in[4]].value;
        const int64_t N = X.shape[0], I = X.shape[1], Hd = H.shape[1];

        // reconstruct gate-preactivation gradients, then push through the two matmuls
        Tensor dpre{N, 4 * Hd};
        Tensor dc_in{N, Hd};
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N; ++r) {
          const double* gates = n.saved.data.data() + r * 4 * Hd;
          const double* out = n.value.data.data() + r * 2 * Hd;
          const double* dout = d.data.data() + r * 2 * Hd;
          const double* cr = C.data.data() + r * Hd;
          double* dp = dpre.data.data() + r * 4 * Hd;
          double* dci = dc_in.data.data() + r * Hd;
          for (int64_t j = 0; j < Hd; ++j) {
            const double ig = gates[j], fg = gates[Hd + j], gg = gates[2 * Hd + j], og = gates[3 * Hd + j];
            const double cn = out[Hd + j];
            const double tc = std::tanh(cn);
            const double dh = dout[j];
            double dcn = dout[Hd + j] + dh * og * (1.0 - tc * tc);
            const double dog = dh * tc;
            dp[j] = dcn * gg * ig * (1.0 - ig);
            dp[Hd + j] = dcn * cr[j] * fg * (1.0 - fg);
            dp[2 * Hd + j] = dcn * ig * (1.0 - gg * gg);
            dp[3 * Hd + j] = dog * og * (1.0 - og);
            dci[j] = dcn * fg;
          }
        }
        if (nodes_[n.in[2]].requires_grad) accumulate(ensure(n.in[2]), dc_in);
        if (nodes_[n.in[0]].requires_grad) {
          Tensor dx{N, I};
          kern::matmul_bt(dpre.data.data(), Wx.data.data(), dx.data.data(), N, 4 * Hd, I);
          accumulate(ensure(n.in[0]), dx);
        }
        if (nodes_[n.in[1]].requires_grad) {
          Tensor dh2{N, Hd};
          kern::matmul_bt(dpre.data.data(), Wh.data.data(), dh2.data.data(), N, 4 * Hd, Hd);
          accumulate(ensure(n.in[1]), dh2);
        }
        if (nodes_[n.in[3]].requires_grad) {
          Tensor dwx{I, 4 * Hd};
          kern::matmul_at(X.data.data(), dpre.data.data(), dwx.data.data(), I, N, 4 * Hd);
          accumulate(ensure(n.in[3]), dwx);
        }
        if (nodes_[n.in[4]].requires_grad) {
          Tensor dwh{Hd, 4 * Hd};
          kern::matmul_at(H.data.data(), dpre.data.data(), dwh.data.data(), Hd, N, 4 * Hd);
          accumulate(ensure(n.in[4]), dwh);
        }
        if (nodes_[n.in[5]].requires_grad) {
          Tensor& g = ensure(n.in[5]);
          for (int64_t r = 0; r < N; ++r) {
            const double* dp = dpre.data.data() + r * 4 * Hd;
            for (int64_t j = 0; j < 4 * Hd; ++j) g.data[j] += dp[j];
          }
        }
        break;
      }
      case Op::Leaf:
      case Op::Const:
        break;
    }
    // backward is single-shot: drop buffers as soon as a node is consumed
    grad[i] = Tensor();
    n.saved = Tensor();
  }

  GradMap out;
  for (NodeId i = 0; i < static_cast<NodeId>(nodes_.size()); ++i) {
    if (nodes_[i].op != Op::Leaf) continue;
    if (grad[i].data.empty())
      out.grads_.emplace(i, Tensor(nodes_[i].value.shape));
    else
      out.grads_.emplace(i, std::move(grad[i]));
  }
  return out;
}

}  // namespace optlens::nd
