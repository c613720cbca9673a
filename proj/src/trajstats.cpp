#include "optlens/trajstats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "optlens/rng.hpp"

namespace optlens::stats {

NoiseSample collect_noise(const model::ModelParams& m, const UpdateFn& hypothetical_update,
                          const data::Dataset& ds, int64_t L, int64_t M, uint64_t seed,
                          int64_t step) {
  if (L < 2) fail("noise: need at least 2 mini-batches");
  if (L * M > ds.n())
    fail("noise: " + std::to_string(L) + " disjoint batches of " + std::to_string(M) +
         " exceed dataset size " + std::to_string(ds.n()));

  std::vector<int64_t> perm(ds.n());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(stream_seed(seed, "noise-batching", uint64_t(step)));
  rng.shuffle(perm);

  const int64_t n = static_cast<int64_t>(m.theta.size());
  std::vector<std::vector<double>> grads(L);
  std::vector<double> mean_grad(n, 0.0);
  for (int64_t k = 0; k < L; ++k) {
    std::vector<int64_t> idx(perm.begin() + k * M, perm.begin() + (k + 1) * M);
    data::Batch b = data::make_batch(ds, idx, k);
    grads[k] = model::loss_and_grad(m, b).grad;
    for (int64_t i = 0; i < n; ++i) mean_grad[i] += grads[k][i];
  }
  for (int64_t i = 0; i < n; ++i) mean_grad[i] /= static_cast<double>(L);

  NoiseSample out;
  out.step = step;
  out.batch_size = M;
  out.grad_noise.resize(L);
  out.update_noise.resize(L);
  const std::vector<double> ref_update = hypothetical_update(mean_grad);
  for (int64_t k = 0; k < L; ++k) {
    std::vector<double> u = hypothetical_update(grads[k]);
    for (int64_t i = 0; i < n; ++i) {
      grads[k][i] -= mean_grad[i];
      u[i] -= ref_update[i];
    }
    out.grad_noise[k] = std::move(grads[k]);
    out.update_noise[k] = std::move(u);
  }
  return out;
}

TailIndexEstimate estimate_tail_index(const std::vector<double>& samples) {
  if (samples.size() < 100)
    fail("tail-index: need at least 100 samples, got " + std::to_string(samples.size()));
  std::vector<double> x;
  x.reserve(samples.size());
  for (double v : samples)
    if (v != 0.0) x.push_back(v);
  if (x.empty()) fail("tail-index: all samples are zero");

  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t k = static_cast<int64_t>(std::floor(std::sqrt(static_cast<double>(n))));
  if (k < 2) fail("tail-index: too few nonzero samples (" + std::to_string(n) + ")");
  const int64_t blocks = k;
  const int64_t used = k * blocks;

  double log_abs_sum = 0.0;
  for (int64_t j = 0; j < used; ++j) log_abs_sum += std::log(std::fabs(x[j]));

  double block_term = 0.0;
  int64_t nonzero_blocks = 0;
  for (int64_t i = 0; i < blocks; ++i) {
    double y = 0.0;
    for (int64_t j = 0; j < k; ++j) y += x[i * k + j];
    if (y != 0.0) {
      block_term += std::log(std::fabs(y));
      ++nonzero_blocks;
    }
  }
  if (nonzero_blocks == 0) fail("tail-index: every block sum is zero");

  const double inv_alpha = (block_term / static_cast<double>(nonzero_blocks) -
                            log_abs_sum / static_cast<double>(used)) /
                           std::log(static_cast<double>(k));

  TailIndexEstimate e;
  e.n = used;
  e.k = k;
  e.alpha_raw = 1.0 / inv_alpha;
  // inv_alpha <= 0 means lighter than any power law the estimator can see
  e.alpha = (inv_alpha <= 0.0 || e.alpha_raw > 2.0) ? 2.0 : e.alpha_raw;
  e.clamped = e.alpha != e.alpha_raw;
  return e;
}

std::vector<double> sample_sas(double alpha, double sigma, int64_t n, uint64_t seed) {
  if (!(alpha > 0.0 && alpha <= 2.0)) fail("sas: alpha must lie in (0,2]");
  if (!(sigma > 0.0)) fail("sas: sigma must be positive");
  std::vector<double> out(n);
  Rng rng(seed);
  const double half_pi = std::numbers::pi / 2.0;
  for (int64_t i = 0; i < n; ++i) {
    const double u = rng.uniform(-half_pi, half_pi);
    const double w = rng.exponential();
    if (alpha == 1.0) {
      out[i] = sigma * std::tan(u);
      continue;
    }
    const double a = std::sin(alpha * u) / std::pow(std::cos(u), 1.0 / alpha);
    const double b = std::pow(std::cos(u - alpha * u) / w, (1.0 - alpha) / alpha);
    out[i] = sigma * a * b;
  }
  return out;
}

GramMatrix gram_matrix(const std::vector<std::vector<double>>& centered, int64_t batch_size) {
  const int64_t L = static_cast<int64_t>(centered.size());
  if (L < 2) fail("gram: need at least 2 vectors");
  const size_t dim = centered[0].size();
  for (const auto& v : centered)
    if (v.size() != dim) fail("gram: inconsistent vector lengths");

  GramMatrix g;
  g.l = L;
  g.m = batch_size;
  g.k = Tensor{L, L};
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < L; ++i) {
    for (int64_t j = i; j < L; ++j) {
      double s = 0.0;
      const double* a = centered[i].data();
      const double* b = centered[j].data();
      for (size_t p = 0; p < dim; ++p) s += a[p] * b[p];
      g.k.at(i, j) = s / static_cast<double>(L);
    }
  }
  for (int64_t i = 0; i < L; ++i)
    for (int64_t j = 0; j < i; ++j) g.k.at(i, j) = g.k.at(j, i);
  return g;
}

double top_eigenvalue(const Tensor& k, uint64_t seed) {
  if (k.rank() != 2 || k.shape[0] != k.shape[1]) fail("power-iteration: matrix must be square");
  const int64_t n = k.shape[0];

  bool all_zero = true;
  for (double v : k.data)
    if (v != 0.0) {
      all_zero = false;
      break;
    }
  if (all_zero) return 0.0;

  Rng rng(stream_seed(seed, "power-iteration"));
  std::vector<double> v(n), w(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (double& x : v) x /= norm;

  double lambda = 0.0;
  for (int64_t it = 0; it < 10000; ++it) {
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += k.at(i, j) * v[j];
      w[i] = s;
    }
    const double rayleigh = std::inner_product(v.begin(), v.end(), w.begin(), 0.0);
    const double wn = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    if (wn == 0.0) return 0.0;  // v landed exactly in the nullspace
    for (int64_t i = 0; i < n; ++i) v[i] = w[i] / wn;
    if (it > 0 && std::fabs(rayleigh - lambda) <= 1e-9 * std::max(1.0, std::fabs(rayleigh)))
      return rayleigh;
    lambda = rayleigh;
  }
  fail("power-iteration: no convergence after 10000 iterations (last change " +
       std::to_string(std::fabs(lambda)) + ")");
}

std::pair<GramMatrix, double> gram_and_top_eig(const std::vector<std::vector<double>>& centered,
                                               int64_t batch_size, uint64_t seed) {
  GramMatrix g = gram_matrix(centered, batch_size);
  const double lam = top_eigenvalue(g.k, seed);
  return {std::move(g), lam};
}

Histogram update_histogram(const std::vector<double>& g, const std::vector<double>& edges) {
  if (edges.size() < 2) fail("histogram: need at least 2 edges");
  for (size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) fail("histogram: edges must be strictly increasing");

  Histogram h;
  h.edges = edges;
  h.counts.assign(edges.size() + 1, 0);
  for (double gi : g) {
    const double x = std::fabs(gi);
    if (x < edges.front()) {
      ++h.counts.front();
    } else if (x >= edges.back()) {
      ++h.counts.back();
    } else {
      const auto it = std::upper_bound(edges.begin(), edges.end(), x);
      ++h.counts[static_cast<size_t>(it - edges.begin())];
    }
  }
  return h;
}

std::vector<double> default_log_edges() {
  std::vector<double> e(51);
  for (int i = 0; i <= 50; ++i) e[i] = std::pow(10.0, -8.0 + 8.0 * i / 50.0);
  return e;
}

}  // namespace optlens::stats
