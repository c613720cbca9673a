#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "optlens/tensor.hpp"

namespace optlens::nd {

using NodeId = int32_t;

enum class Op : uint8_t {
  Leaf,
  Const,
  MatMul,
  Add,
  Sub,
  Mul,
  Div,
  AddScalar,
  MulScalar,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  LeakyRelu,
  Abs,
  Sum,
  Mean,
  SumRows,
  SumCols,
  MaxRows,
  AddRow,
  MulRow,
  IndexSelect,
  Slice,
  SliceCols,
  Reshape,
  BatchNorm,
  LogSumExp,
  LstmCell,
};

const char* op_name(Op op);

struct Node {
  Op op;
  std::array<NodeId, 6> in{-1, -1, -1, -1, -1, -1};
  int n_in = 0;
  Tensor value;
  Tensor saved;              // op-specific stash for backward
  double attr = 0.0;         // slope / eps / scalar operand
  int64_t i0 = 0, i1 = 0;    // slice bounds
  std::vector<int64_t> idx;  // index-select table
  bool requires_grad = false;
};

// Gradients for the leaves of one backward pass. Every leaf of the tape gets
// an entry (zeros when the output does not depend on it).
class GradMap {
 public:
  const Tensor& at(NodeId leaf) const;
  bool contains(NodeId leaf) const { return grads_.count(leaf) != 0; }
  std::unordered_map<NodeId, Tensor> grads_;
};

// Append-only reverse-mode tape. Nodes reference earlier nodes only, so the
// record order is already topological and backward is a single reverse sweep.
// One scalar output per pass; after backward() the tape accepts no further
// recording until reset().
class Tape {
 public:
  NodeId leaf(Tensor v);
  NodeId constant(Tensor v);
  NodeId scalar_const(double v) { return constant(Tensor::scalar(v)); }
  // constant carrying the current value of `a`; the copy has no history
  NodeId detach(NodeId a) { return constant(value(a)); }

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId add_scalar(NodeId a, double s);
  NodeId mul_scalar(NodeId a, double s);

  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId leaky_relu(NodeId a, double slope);
  NodeId abs(NodeId a);

  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId sum_rows(NodeId a);
  NodeId sum_cols(NodeId a);
  NodeId max_rows(NodeId a);

  // [B x D] + / * row vector [D]
  NodeId add_row(NodeId a, NodeId r);
  NodeId mul_row(NodeId a, NodeId r);

  // gathers flat positions; duplicate indices accumulate on backward
  NodeId index_select(NodeId a, std::vector<int64_t> idx);
  NodeId slice(NodeId a, int64_t start, int64_t len);
  NodeId slice_cols(NodeId a, int64_t c0, int64_t c1);
  NodeId reshape(NodeId a, std::vector<int64_t> shape);

  // per-column normalization over rows, biased variance, then (x-mu)/sqrt(var+eps)
  NodeId batch_norm(NodeId a, double eps);
  // row-wise log(sum(exp)); rank-1 input is treated as a single row
  NodeId log_sum_exp(NodeId a);

  // fused cell: x [N x I], h,c [N x H], wx [I x 4H], wh [H x 4H], b [4H];
  // gate layout along the 4H axis is [i f g o]; returns packed [h' | c'] (N x 2H)
  NodeId lstm_cell(NodeId x, NodeId h, NodeId c, NodeId wx, NodeId wh, NodeId b);

  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const;
  void set_output(NodeId id);
  GradMap backward();
  void reset();
  size_t n_nodes() const { return nodes_.size(); }

 private:
  NodeId push(Node n);
  const Node& node(NodeId id) const;
  void check_open(const char* what) const;

  std::vector<Node> nodes_;
  NodeId output_ = -1;
  bool spent_ = false;  // backward has run; reset() required before reuse
};

}  // namespace optlens::nd
