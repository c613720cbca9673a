#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "optlens/optimizee.hpp"
#include "optlens/rng.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace optlens;

namespace {

model::ArchSpec arch_of(model::Act act) {
  model::ArchSpec a;
  a.act = act;
  return a;
}

const model::ParamRecord& record_for(const model::ModelParams& m, int layer, model::Role role) {
  for (const auto& r : m.layout)
    if (r.layer == layer && r.role == role) return r;
  FAIL("record not found");
  return m.layout.front();
}

data::Batch test_batch(int64_t b = 32, uint64_t seed = 7) {
  data::Dataset ds = testsupport::toy_dataset(64, seed);
  std::vector<int64_t> idx(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) idx[static_cast<size_t>(i)] = i;
  return data::make_batch(ds, idx, 0);
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(model::param_count(arch_of(model::Act::Sigmoid)) == 15910);
  CHECK(model::param_count(arch_of(model::Act::LeakyRelu)) == 15910);
  CHECK(model::param_count(arch_of(model::Act::ReluBatchNorm)) == 15950);

  model::ArchSpec wide;
  wide.hidden = {100, 100};
  CHECK(model::param_count(wide) == 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
}

TEST_CASE("init: deterministic, bounded weights, zero biases, unit gammas") {
  auto arch = arch_of(model::Act::ReluBatchNorm);
  model::ModelParams a = model::init_model(arch, 5);
  model::ModelParams b = model::init_model(arch, 5);
  model::ModelParams c = model::init_model(arch, 6);
  CHECK(a.theta == b.theta);
  CHECK(a.theta != c.theta);

  for (const auto& r : a.layout) {
    switch (r.role) {
      case model::Role::Weight: {
        double bound = 1.0 / std::sqrt(double(r.shape[0]));
        for (int64_t i = 0; i < r.count; ++i) {
          CHECK(std::fabs(a.theta[size_t(r.offset + i)]) <= bound);
        }
        break;
      }
      case model::Role::Bias:
      case model::Role::BnBeta:
        for (int64_t i = 0; i < r.count; ++i) CHECK(a.theta[size_t(r.offset + i)] == 0.0);
        break;
      case model::Role::BnGamma:
        for (int64_t i = 0; i < r.count; ++i) CHECK(a.theta[size_t(r.offset + i)] == 1.0);
        break;
    }
  }
}

TEST_CASE("uniform logits give ln 10") {
  data::Batch zeros;
  zeros.x = Tensor{4, 784};
  zeros.y_onehot = Tensor{4, 10};
  for (int64_t i = 0; i < 4; ++i) zeros.y_onehot.at(i, int64_t(i % 10)) = 1.0;
  zeros.labels = {0, 1, 2, 3};

  for (auto act : {model::Act::Sigmoid, model::Act::LeakyRelu, model::Act::ReluBatchNorm}) {
    auto arch = arch_of(act);
    model::ModelParams m = model::init_model(arch, 1);
    std::fill(m.theta.begin(), m.theta.end(), 0.0);
    CHECK(model::loss_only(m, zeros) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  }
}

TEST_CASE("gradients match finite differences on all architectures") {
  data::Batch b = test_batch();
  Rng rng(31);
  for (auto act : {model::Act::Sigmoid, model::Act::LeakyRelu, model::Act::ReluBatchNorm}) {
    auto arch = arch_of(act);
    model::ModelParams m = model::init_model(arch, 2);
    model::LossGrad lg = model::loss_and_grad(m, b);
    auto f = [&](const std::vector<double>& th) {
      return model::loss_and_grad(arch, m.layout, th, b).loss;
    };
    for (int p = 0; p < 12; ++p) {
      size_t i = size_t(rng.index(m.theta.size()));
      double fd = oracle::central_diff(f, m.theta, i, 1e-5);
      INFO(model::act_name(act), " coord ", i);
      CHECK(oracle::rel_err(lg.grad[i], fd) <= 1e-4);
    }
  }
}

TEST_CASE("output-bias gradient sums to zero") {
  data::Batch b = test_batch();
  for (auto act : {model::Act::Sigmoid, model::Act::LeakyRelu, model::Act::ReluBatchNorm}) {
    auto arch = arch_of(act);
    model::ModelParams m = model::init_model(arch, 3);
    model::LossGrad lg = model::loss_and_grad(m, b);
    const auto& rec = record_for(m, int(arch.hidden.size()), model::Role::Bias);
    double s = 0.0;
    for (int64_t i = 0; i < rec.count; ++i) s += lg.grad[size_t(rec.offset + i)];
    CHECK(std::fabs(s) <= 1e-10);
  }
}

TEST_CASE("non-finite loss raises with context") {
  data::Batch b = test_batch();
  auto arch = arch_of(model::Act::Sigmoid);
  model::ModelParams m = model::init_model(arch, 2);
  m.theta[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(model::loss_and_grad(m, b), doctest::Contains("non-finite"), Error);
}

TEST_CASE("symmetry group enumeration") {
  auto count = [](const std::vector<sym::SymmetryGroup>& gs, sym::Kind k) {
    return std::count_if(gs.begin(), gs.end(),
                         [&](const sym::SymmetryGroup& g) { return g.kind == k; });
  };

  auto sig = model::enumerate_symmetry_groups(arch_of(model::Act::Sigmoid));
  CHECK(count(sig, sym::Kind::Translation) == 21);
  CHECK(count(sig, sym::Kind::Rescale) == 0);
  CHECK(count(sig, sym::Kind::Scale) == 0);

  auto lre = model::enumerate_symmetry_groups(arch_of(model::Act::LeakyRelu));
  CHECK(count(lre, sym::Kind::Translation) == 21);
  CHECK(count(lre, sym::Kind::Rescale) == 20);
  CHECK(count(lre, sym::Kind::Scale) == 0);

  auto bn = model::enumerate_symmetry_groups(arch_of(model::Act::ReluBatchNorm));
  CHECK(count(bn, sym::Kind::Translation) == 21);
  CHECK(count(bn, sym::Kind::Scale) == 20);
  CHECK(count(bn, sym::Kind::Rescale) == 0);

  const int64_t n = model::param_count(arch_of(model::Act::LeakyRelu));
  for (const auto& g : lre) {
    for (int64_t i : g.x1) CHECK((0 <= i && i < n));
    for (int64_t i : g.x2) CHECK((0 <= i && i < n));
    if (g.kind == sym::Kind::Rescale) {
      CHECK(!g.x2.empty());
      for (int64_t i : g.x2)
        CHECK(std::find(g.x1.begin(), g.x1.end(), i) == g.x1.end());  // disjoint
    }
  }

  // deeper net: rescale groups at every hidden neuron of every hidden layer
  model::ArchSpec deep = arch_of(model::Act::LeakyRelu);
  deep.hidden = {30, 40};
  auto dg = model::enumerate_symmetry_groups(deep);
  // one translation group per unit of the last hidden layer, plus the bias
  CHECK(count(dg, sym::Kind::Translation) == 41);
  CHECK(count(dg, sym::Kind::Rescale) == 70);
}

TEST_CASE("translation invariance of the loss (forward only)") {
  data::Batch b = test_batch();
  for (auto act : {model::Act::Sigmoid, model::Act::LeakyRelu, model::Act::ReluBatchNorm}) {
    auto arch = arch_of(act);
    model::ModelParams m = model::init_model(arch, 4);
    double base = model::loss_only(m, b);
    const int last = int(arch.hidden.size());
    const auto& w = record_for(m, last, model::Role::Weight);
    const auto& bias = record_for(m, last, model::Role::Bias);

    // hidden unit 3's outgoing weights all shifted by c: every logit moves by
    // c*h_3, so the softmax is untouched (storage row 3 of the final weight)
    model::ModelParams shifted = m;
    for (int64_t j = 0; j < w.shape[1]; ++j)
      shifted.theta[size_t(w.offset + 3 * w.shape[1] + j)] += 0.37;
    CHECK(std::fabs(model::loss_only(shifted, b) - base) <= 1e-9);

    model::ModelParams bs = m;
    for (int64_t i = 0; i < bias.count; ++i) bs.theta[size_t(bias.offset + i)] += 0.37;
    CHECK(std::fabs(model::loss_only(bs, b) - base) <= 1e-9);

    // shifting a single output unit's weights (a storage column) moves one
    // logit alone and must NOT be a symmetry
    model::ModelParams col = m;
    for (int64_t r = 0; r < w.shape[0]; ++r)
      col.theta[size_t(w.offset + r * w.shape[1] + 2)] += 0.37;
    CHECK(std::fabs(model::loss_only(col, b) - base) > 1e-6);
  }
}

TEST_CASE("rescale invariance of leaky-relu") {
  data::Batch b = test_batch();
  auto arch = arch_of(model::Act::LeakyRelu);
  model::ModelParams m = model::init_model(arch, 8);
  double base = model::loss_only(m, b);

  const double alpha = 1.7;
  const auto& w1 = record_for(m, 0, model::Role::Weight);
  const auto& b1 = record_for(m, 0, model::Role::Bias);
  const auto& w2 = record_for(m, 1, model::Role::Weight);
  const int64_t j = 5;  // hidden neuron
  model::ModelParams s = m;
  for (int64_t r = 0; r < w1.shape[0]; ++r) s.theta[size_t(w1.offset + r * w1.shape[1] + j)] *= alpha;
  s.theta[size_t(b1.offset + j)] *= alpha;
  for (int64_t c = 0; c < w2.shape[1]; ++c) s.theta[size_t(w2.offset + j * w2.shape[1] + c)] /= alpha;
  CHECK(std::fabs(model::loss_only(s, b) - base) <= 1e-9);
}

TEST_CASE("scale invariance of batch-norm at eps=0") {
  data::Batch b = test_batch();
  auto arch = arch_of(model::Act::ReluBatchNorm);
  arch.bn_eps = 0.0;
  model::ModelParams m = model::init_model(arch, 8);
  double base = model::loss_only(m, b);

  const double alpha = 2.3;
  const auto& w1 = record_for(m, 0, model::Role::Weight);
  const auto& b1 = record_for(m, 0, model::Role::Bias);
  const int64_t j = 11;
  model::ModelParams s = m;
  for (int64_t r = 0; r < w1.shape[0]; ++r) s.theta[size_t(w1.offset + r * w1.shape[1] + j)] *= alpha;
  s.theta[size_t(b1.offset + j)] *= alpha;
  CHECK(std::fabs(model::loss_only(s, b) - base) <= 1e-8);
}

TEST_CASE("analytic gradients are orthogonal to the symmetry generators") {
  data::Batch b = test_batch();
  struct Case {
    model::Act act;
    double eps;
  } cases[] = {{model::Act::Sigmoid, 1e-5}, {model::Act::LeakyRelu, 1e-5},
               {model::Act::ReluBatchNorm, 0.0}};
  for (auto cs : cases) {
    auto arch = arch_of(cs.act);
    arch.bn_eps = cs.eps;
    model::ModelParams m = model::init_model(arch, 12);
    model::LossGrad lg = model::loss_and_grad(m, b);
    double gn = norm(lg.grad);
    for (const auto& g : model::enumerate_symmetry_groups(arch)) {
      double dev = 0.0, gen_norm = 0.0;
      switch (g.kind) {
        case sym::Kind::Translation: {
          for (int64_t i : g.x1) dev += lg.grad[size_t(i)];
          gen_norm = std::sqrt(double(g.x1.size()));
          break;
        }
        case sym::Kind::Rescale: {
          for (int64_t i : g.x1) {
            dev += lg.grad[size_t(i)] * m.theta[size_t(i)];
            gen_norm += m.theta[size_t(i)] * m.theta[size_t(i)];
          }
          for (int64_t i : g.x2) {
            dev -= lg.grad[size_t(i)] * m.theta[size_t(i)];
            gen_norm += m.theta[size_t(i)] * m.theta[size_t(i)];
          }
          gen_norm = std::sqrt(gen_norm);
          break;
        }
        case sym::Kind::Scale: {
          for (int64_t i : g.x1) {
            dev += lg.grad[size_t(i)] * m.theta[size_t(i)];
            gen_norm += m.theta[size_t(i)] * m.theta[size_t(i)];
          }
          gen_norm = std::sqrt(gen_norm);
          break;
        }
      }
      INFO(model::act_name(cs.act), " kind ", sym::kind_name(g.kind));
      CHECK(std::fabs(dev) <= 1e-8 * gn * gen_norm);
    }
  }
}

TEST_CASE("loss_and_grad is deterministic") {
  data::Batch b = test_batch();
  auto arch = arch_of(model::Act::LeakyRelu);
  model::ModelParams m = model::init_model(arch, 2);
  model::LossGrad a = model::loss_and_grad(m, b);
  model::LossGrad c = model::loss_and_grad(m, b);
  CHECK(a.loss == c.loss);
  CHECK(a.grad == c.grad);
}
