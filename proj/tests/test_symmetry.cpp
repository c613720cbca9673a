#include <doctest.h>

#include <cmath>
#include <vector>

#include "optlens/handopt.hpp"
#include "optlens/optimizee.hpp"
#include "optlens/symmetry.hpp"
#include "support/helpers.hpp"

using namespace optlens;
using sym::Kind;
using sym::SymmetryGroup;

namespace {

data::Batch test_batch(uint64_t seed = 7) {
  data::Dataset ds = testsupport::toy_dataset(64, seed);
  std::vector<int64_t> idx(32);
  for (int64_t i = 0; i < 32; ++i) idx[static_cast<size_t>(i)] = i;
  return data::make_batch(ds, idx, 0);
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("translation: unit bias update scores its dimension") {
  SymmetryGroup g{Kind::Translation, {3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, {}};
  std::vector<double> upd(20, 0.0);
  for (int64_t i : g.x1) upd[static_cast<size_t>(i)] = 1.0;
  CHECK(sym::translation_deviation(upd, {g}) == 10.0);
}

TEST_CASE("rescale and scale: synthetic updates against hand dot products") {
  // theta: x1 = {0,1,2} (two weights + bias), x2 = {3,4}
  std::vector<double> theta = {0.5, -1.0, 0.25, 2.0, -0.5};
  SymmetryGroup rg{Kind::Rescale, {0, 1, 2}, {3, 4}};
  SymmetryGroup sg{Kind::Scale, {0, 1, 2}, {}};

  std::vector<double> g_theta = theta;  // g = theta restricted to x1
  g_theta[3] = g_theta[4] = 0.0;
  double self = 0.5 * 0.5 + 1.0 * 1.0 + 0.25 * 0.25;
  CHECK(sym::rescale_deviation(g_theta, theta, {rg}) == doctest::Approx(self).epsilon(1e-15));
  CHECK(sym::scale_deviation(g_theta, theta, {sg}) == doctest::Approx(self).epsilon(1e-15));

  std::vector<double> zero(5, 0.0);
  CHECK(sym::rescale_deviation(zero, theta, {rg}) == 0.0);
  CHECK(sym::scale_deviation(zero, theta, {sg}) == 0.0);
}

TEST_CASE("wrong-kind groups are rejected") {
  SymmetryGroup rg{Kind::Rescale, {0}, {1}};
  SymmetryGroup tg{Kind::Translation, {0}, {}};
  std::vector<double> v = {1.0, 2.0};
  CHECK_THROWS_AS(sym::translation_deviation(v, {rg}), Error);
  CHECK_THROWS_AS(sym::rescale_deviation(v, v, {tg}), Error);
  CHECK_THROWS_AS(sym::scale_deviation(v, v, {tg}), Error);
}

TEST_CASE("homogeneity: scaling the update scales all deviations") {
  std::vector<double> theta = {0.5, -1.0, 0.25, 2.0, -0.5, 0.75};
  std::vector<double> g = {0.1, 0.2, -0.3, 0.4, -0.5, 0.6};
  std::vector<SymmetryGroup> gs = {{Kind::Translation, {0, 1, 2}, {}},
                                   {Kind::Rescale, {0, 1}, {2, 3}},
                                   {Kind::Scale, {4, 5}, {}}};
  sym::DeviationReport base = sym::deviation_report(g, theta, gs);
  const double c = -4.0;  // power of two: scaling is exact in floats
  std::vector<double> cg(g.size());
  for (size_t i = 0; i < g.size(); ++i) cg[i] = c * g[i];
  sym::DeviationReport scaled = sym::deviation_report(cg, theta, gs);
  CHECK(scaled.translation == 4.0 * base.translation);
  CHECK(scaled.rescale == 4.0 * base.rescale);
  CHECK(scaled.scale == 4.0 * base.scale);
}

TEST_CASE("analytic gradient scores ~0 on every kind") {
  data::Batch b = test_batch();
  model::ArchSpec arch;
  arch.act = model::Act::LeakyRelu;
  model::ModelParams m = model::init_model(arch, 3);
  model::LossGrad lg = model::loss_and_grad(m, b);
  auto groups = model::enumerate_symmetry_groups(arch);

  std::vector<double> g(lg.grad.size());
  for (size_t i = 0; i < g.size(); ++i) g[i] = -0.1 * lg.grad[i];  // plain SGD step
  sym::DeviationReport rep = sym::deviation_report(g, m.theta, groups);
  CHECK(rep.translation <= 1e-10);
  CHECK(rep.rescale <= 1e-9 * norm(lg.grad) * norm(m.theta));
  CHECK(rep.n_scale == 0);
}

TEST_CASE("report totals match the single-kind entry points") {
  data::Batch b = test_batch();
  model::ArchSpec arch;
  arch.act = model::Act::LeakyRelu;
  model::ModelParams m = model::init_model(arch, 9);
  model::LossGrad lg = model::loss_and_grad(m, b);
  auto groups = model::enumerate_symmetry_groups(arch);

  opt::Optimizer adam = opt::Optimizer::adam({0.05, 0.9, 0.999, 1e-8}, int64_t(m.theta.size()));
  std::vector<double> g = adam.step(m.theta, lg.grad);

  std::vector<SymmetryGroup> tg, rg;
  for (const auto& gr : groups) (gr.kind == Kind::Translation ? tg : rg).push_back(gr);
  sym::DeviationReport rep = sym::deviation_report(g, m.theta, groups);
  CHECK(rep.translation == sym::translation_deviation(g, tg));
  CHECK(rep.rescale == sym::rescale_deviation(g, m.theta, rg));
  CHECK(rep.n_translation == 21);
  CHECK(rep.n_rescale == 20);
  CHECK(rep.translation > 0.0);  // adam's normalization breaks the constraint
}

TEST_CASE("adam translation deviation matches a direct recomputation") {
  data::Batch b = test_batch();
  model::ArchSpec arch;  // sigmoid
  model::ModelParams m = model::init_model(arch, 17);
  model::LossGrad lg = model::loss_and_grad(m, b);
  auto groups = model::enumerate_symmetry_groups(arch);

  opt::Optimizer adam = opt::Optimizer::adam({0.05, 0.9, 0.999, 1e-8}, int64_t(m.theta.size()));
  std::vector<double> g = adam.step(m.theta, lg.grad);

  double manual = 0.0;
  for (const auto& gr : groups) {
    double s = 0.0;
    for (int64_t i : gr.x1) s += g[static_cast<size_t>(i)];
    manual += std::fabs(s);
  }
  CHECK(sym::translation_deviation(g, groups) == doctest::Approx(manual).epsilon(1e-15));
  CHECK(manual > 0.0);
}

TEST_CASE("lion bias-group deviation counts signs") {
  data::Batch b = test_batch();
  model::ArchSpec arch;  // sigmoid
  model::ModelParams m = model::init_model(arch, 23);
  model::LossGrad lg = model::loss_and_grad(m, b);

  const double lr = 0.001;
  opt::Optimizer lion = opt::Optimizer::lion({lr, 0.9, 0.99, 0.0}, int64_t(m.theta.size()));
  std::vector<double> g = lion.step(m.theta, lg.grad);

  // the output bias is the final 10 coordinates of theta
  const size_t n = m.theta.size();
  SymmetryGroup bias_group{Kind::Translation, {}, {}};
  int pos = 0, neg = 0;
  for (size_t i = n - 10; i < n; ++i) {
    bias_group.x1.push_back(int64_t(i));
    if (g[i] > 0) ++pos;
    if (g[i] < 0) ++neg;
  }
  double want = lr * std::fabs(double(pos - neg));
  CHECK(sym::translation_deviation(g, {bias_group}) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("momentum preserves translation nullity but not rescale nullity") {
  data::Dataset ds = testsupport::toy_dataset(256, 11);
  model::ArchSpec arch;
  arch.act = model::Act::LeakyRelu;
  model::ModelParams m = model::init_model(arch, 4);
  auto groups = model::enumerate_symmetry_groups(arch);
  std::vector<SymmetryGroup> tg, rg;
  for (const auto& gr : groups) (gr.kind == Kind::Translation ? tg : rg).push_back(gr);

  opt::Optimizer sgd = opt::Optimizer::sgd({0.5, 0.9}, int64_t(m.theta.size()));
  data::BatchIter iter(ds, 64, 5);
  double max_rescale = 0.0;
  for (int t = 0; t < 10; ++t) {
    model::LossGrad lg = model::loss_and_grad(m, iter.next());
    std::vector<double> g = sgd.step(m.theta, lg.grad);
    // the constraint is linear in g, so any mix of gradients keeps it
    CHECK(sym::translation_deviation(g, tg) <= 1e-10);
    if (t > 0) max_rescale = std::max(max_rescale, sym::rescale_deviation(g, m.theta, rg));
    for (size_t i = 0; i < m.theta.size(); ++i) m.theta[i] += g[i];
  }
  // stale momentum is orthogonal to stale theta, not to the current one
  CHECK(max_rescale > 1e-10);
}
