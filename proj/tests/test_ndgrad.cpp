#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "optlens/rng.hpp"
#include "optlens/tape.hpp"
#include "support/oracles.hpp"

using namespace optlens;
using nd::NodeId;
using nd::Tape;

namespace {

using Builder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

// Records the graph, then probes random leaf elements with central
// differences (h = 1e-5) against the analytic gradients.
void check_fd(const char* name, const std::vector<std::vector<int64_t>>& shapes,
              const Builder& build, uint64_t seed, int n_probe = 10, double tol = 1e-4) {
  Rng rng(seed);
  std::vector<Tensor> vals;
  for (const auto& s : shapes) {
    Tensor t(s);
    for (auto& x : t.data) x = rng.uniform(-1.0, 1.0);
    vals.push_back(std::move(t));
  }

  auto eval = [&](const std::vector<Tensor>& vs) {
    Tape tape;
    std::vector<NodeId> leaves;
    for (const auto& v : vs) leaves.push_back(tape.leaf(v));
    NodeId out = build(tape, leaves);
    return tape.value(out).data[0];
  };

  Tape tape;
  std::vector<NodeId> leaves;
  for (const auto& v : vals) leaves.push_back(tape.leaf(v));
  NodeId out = build(tape, leaves);
  tape.set_output(out);
  nd::GradMap g = tape.backward();

  for (int p = 0; p < n_probe; ++p) {
    size_t li = size_t(rng.index(vals.size()));
    size_t ei = size_t(rng.index(vals[li].data.size()));
    const double h = 1e-5;
    auto probe = vals;
    probe[li].data[ei] += h;
    double fp = eval(probe);
    probe[li].data[ei] -= 2 * h;
    double fm = eval(probe);
    double fd = (fp - fm) / (2 * h);
    double an = g.at(leaves[li]).data[ei];
    INFO(name, ": leaf ", li, " elem ", ei, " analytic ", an, " fd ", fd);
    CHECK(oracle::rel_err(an, fd) <= tol);
  }
}

}  // namespace

TEST_CASE("forward values of the documented examples") {
  Tape t;
  NodeId ones = t.constant(Tensor::matrix(2, 2, {1, 1, 1, 1}));
  CHECK(t.value(t.sum(ones)).data[0] == 4.0);

  NodeId z = t.constant(Tensor::from_vector({0.0, 0.0}));
  CHECK(t.value(t.log_sum_exp(z)).data[0] == doctest::Approx(std::numbers::ln2).epsilon(1e-12));

  NodeId neg = t.constant(Tensor::from_vector({-1.0}));
  CHECK(t.value(t.leaky_relu(neg, 0.01)).data[0] == -0.01);
}

TEST_CASE("x^2 at x=3 has gradient 6") {
  Tape t;
  NodeId x = t.leaf(Tensor::from_vector({3.0}));
  t.set_output(t.mul(x, x));
  CHECK(t.backward().at(x).data[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("sum(W x) gradient rows equal x") {
  Tape t;
  NodeId w = t.leaf(Tensor::matrix(2, 2, {0.3, -0.7, 1.1, 0.2}));
  NodeId x = t.constant(Tensor::matrix(2, 1, {1.0, 2.0}));
  t.set_output(t.sum(t.matmul(w, x)));
  const Tensor& g = t.backward().at(w);
  CHECK(g.data == std::vector<double>{1.0, 2.0, 1.0, 2.0});
}

TEST_CASE("detach blocks gradient flow") {
  Tape t;
  NodeId x = t.leaf(Tensor::from_vector({2.0}));
  NodeId d = t.detach(x);
  t.set_output(t.sum(t.mul(d, x)));
  nd::GradMap g = t.backward();
  CHECK(g.at(x).data[0] == 2.0);  // constant factor, not the full 2x
  CHECK_FALSE(g.contains(d));     // constants never appear in the map
}

TEST_CASE("finite differences cover every primitive") {
  check_fd("matmul", {{3, 4}, {4, 2}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.sum(t.matmul(l[0], l[1])); }, 101);

  check_fd("arith add/sub/mul/div", {{3, 3}, {3, 3}},
           [](Tape& t, const std::vector<NodeId>& l) {
             NodeId num = t.mul(t.add(l[0], l[1]), t.sub(l[0], l[1]));
             NodeId den = t.add_scalar(t.mul(l[1], l[1]), 1.5);
             return t.mean(t.div(num, den));
           },
           102);

  check_fd("scalar ops", {{2, 5}},
           [](Tape& t, const std::vector<NodeId>& l) {
             return t.sum(t.mul_scalar(t.add_scalar(l[0], 0.7), -1.3));
           },
           103);

  check_fd("exp", {{4, 4}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.mean(t.exp(l[0])); }, 104);
  check_fd("log", {{4, 4}},
           [](Tape& t, const std::vector<NodeId>& l) {
             return t.mean(t.log(t.add_scalar(l[0], 2.0)));
           },
           105);
  check_fd("tanh", {{4, 4}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.mean(t.tanh(l[0])); }, 106);
  check_fd("sigmoid", {{4, 4}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.mean(t.sigmoid(l[0])); }, 107);
  check_fd("leaky-relu", {{4, 4}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.sum(t.leaky_relu(l[0], 0.01)); },
           108);
  check_fd("abs", {{4, 4}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.mean(t.abs(l[0])); }, 109);

  check_fd("reductions sum-rows/sum-cols/mean", {{4, 5}},
           [](Tape& t, const std::vector<NodeId>& l) {
             NodeId r = t.sum_rows(l[0]);     // [4]
             NodeId c = t.sum_cols(l[0]);     // [5]
             return t.add(t.mean(t.mul(r, r)), t.sum(t.mul_scalar(c, 0.25)));
           },
           110);

  check_fd("max-rows", {{4, 5}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.sum(t.max_rows(l[0])); }, 111);

  check_fd("add-row/mul-row", {{4, 3}, {3}, {3}},
           [](Tape& t, const std::vector<NodeId>& l) {
             return t.sum(t.mul_row(t.add_row(l[0], l[1]), l[2]));
           },
           112);

  check_fd("slice/slice-cols/reshape/index-select", {{4, 6}, {7}},
           [](Tape& t, const std::vector<NodeId>& l) {
             NodeId flat = t.reshape(t.slice_cols(l[0], 1, 5), {16});
             NodeId picked = t.index_select(flat, {0, 3, 3, 7, 15});  // dup accumulates
             return t.add(t.sum(picked), t.sum(t.slice(l[1], 2, 4)));
           },
           113);

  check_fd("batch-norm", {{5, 3}, {5, 3}},
           [](Tape& t, const std::vector<NodeId>& l) {
             return t.mean(t.mul(t.batch_norm(l[0], 1e-5), l[1]));
           },
           114);

  check_fd("log-sum-exp", {{4, 5}},
           [](Tape& t, const std::vector<NodeId>& l) { return t.mean(t.log_sum_exp(l[0])); }, 115);

  // x enters as a constant because the learned-optimizer path always detaches
  // the incoming gradient; the cell must still be differentiable in
  // parameters and carried state. All five leaf gradients checked.
  check_fd("lstm-cell", {{3, 4}, {3, 4}, {2, 16}, {4, 16}, {16}},
           [](Tape& t, const std::vector<NodeId>& l) {
             Tensor x({3, 2});
             for (size_t i = 0; i < x.data.size(); ++i) x.data[i] = 0.3 * double(i) - 0.4;
             NodeId xc = t.constant(x);
             NodeId packed = t.lstm_cell(xc, l[0], l[1], l[2], l[3], l[4]);
             NodeId hp = t.slice_cols(packed, 0, 4);
             NodeId cp = t.slice_cols(packed, 4, 8);
             return t.add(t.sum(hp), t.mul_scalar(t.mean(t.mul(cp, cp)), 0.5));
           },
           116, 20);
}

TEST_CASE("lstm-cell parameter gradients are nonzero through a detached input") {
  Tape t;
  Rng rng(42);
  Tensor x({3, 2}), h({3, 4}), c({3, 4}), wx({2, 16}), wh({4, 16}), b({16});
  for (Tensor* p : {&x, &h, &c, &wx, &wh, &b})
    for (auto& v : p->data) v = rng.uniform(-0.5, 0.5);
  NodeId wxl = t.leaf(wx), whl = t.leaf(wh), bl = t.leaf(b);
  NodeId packed =
      t.lstm_cell(t.constant(x), t.constant(h), t.constant(c), wxl, whl, bl);
  t.set_output(t.sum(packed));
  nd::GradMap g = t.backward();
  for (NodeId leaf : {wxl, whl, bl}) {
    double norm = 0.0;
    for (double v : g.at(leaf).data) norm += v * v;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("backward is linear in the output") {
  Tensor xv({3, 3});
  Rng rng(9);
  for (auto& v : xv.data) v = rng.uniform(-1.0, 1.0);
  const double a = 2.5, b = -1.25;

  auto grads = [&](double ca, double cb) {
    Tape t;
    NodeId x = t.leaf(xv);
    NodeId f = t.sum(t.mul(x, x));
    NodeId g = t.sum(t.exp(x));
    t.set_output(t.add(t.mul_scalar(f, ca), t.mul_scalar(g, cb)));
    return t.backward().at(x).data;
  };

  auto gf = grads(1.0, 0.0);
  auto gg = grads(0.0, 1.0);
  auto combo = grads(a, b);
  for (size_t i = 0; i < combo.size(); ++i)
    CHECK(combo[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
}

TEST_CASE("tapes are deterministic") {
  auto run = [] {
    Rng rng(77);
    Tensor av({6, 5}), bv({5, 4});
    for (auto& v : av.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : bv.data) v = rng.uniform(-1.0, 1.0);
    Tape t;
    NodeId A = t.leaf(av), B = t.leaf(bv);
    NodeId out = t.mean(t.tanh(t.matmul(A, B)));
    t.set_output(out);
    double val = t.value(out).data[0];
    nd::GradMap g = t.backward();
    return std::make_pair(val, g.at(A).data);
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("shape errors name the op and shapes") {
  Tape t;
  NodeId A = t.constant(Tensor{2, 3});
  NodeId B = t.constant(Tensor{2, 3});
  CHECK_THROWS_WITH_AS(t.matmul(A, B), doctest::Contains("matmul"), Error);
  CHECK_THROWS_WITH_AS(t.add(A, t.constant(Tensor{3, 2})), doctest::Contains("(2x3)"), Error);
}

TEST_CASE("backward lifecycle is enforced") {
  Tape t;
  NodeId x = t.leaf(Tensor::from_vector({1.0}));
  CHECK_THROWS_AS(t.backward(), Error);  // no output designated
  NodeId y = t.mul(x, x);
  CHECK_THROWS_AS(t.set_output(t.constant(Tensor{2, 2})), Error);  // non-scalar
  t.set_output(y);
  t.backward();
  CHECK_THROWS_AS(t.mul(x, x), Error);  // spent tape records nothing
  CHECK_THROWS_AS(t.backward(), Error);
  t.reset();
  NodeId x2 = t.leaf(Tensor::from_vector({4.0}));
  t.set_output(t.mul(x2, x2));
  CHECK(t.backward().at(x2).data[0] == doctest::Approx(8.0));
}

TEST_CASE("every leaf gets a gradient entry, zeros when unused") {
  Tape t;
  NodeId used = t.leaf(Tensor::from_vector({1.5}));
  NodeId unused = t.leaf(Tensor{3, 2});
  t.set_output(t.mul(used, used));
  nd::GradMap g = t.backward();
  CHECK(g.contains(unused));
  for (double v : g.at(unused).data) CHECK(v == 0.0);
}
