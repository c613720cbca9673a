#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "optlens/dataio.hpp"
#include "optlens/optimizee.hpp"
#include "optlens/tensor.hpp"

namespace optlens::stats {

// Produces the update an optimizer WOULD take for a given gradient, from a
// fresh clone of its live state (Optimizer::peek / l2o_peek fit directly).
using UpdateFn = std::function<std::vector<double>(const std::vector<double>&)>;

struct NoiseSample {
  int64_t step = 0;
  int64_t batch_size = 0;  // M
  std::vector<std::vector<double>> grad_noise;    // U_k = grad_k - mean grad
  std::vector<std::vector<double>> update_noise;  // g_k - g(mean grad)
};

// Freezes theta, draws L disjoint mini-batches of size M, and measures both
// noise families against the mean-gradient reference. Neither theta nor the
// live optimizer state is touched; the trajectory must continue bit-exactly
// whether or not this ran.
NoiseSample collect_noise(const model::ModelParams& m, const UpdateFn& hypothetical_update,
                          const data::Dataset& ds, int64_t L, int64_t M, uint64_t seed,
                          int64_t step = 0);

struct TailIndexEstimate {
  double alpha;      // clamped into (0, 2]
  double alpha_raw;  // pre-clamp value
  bool clamped;
  int64_t n;  // values used after blocking (K * K)
  int64_t k;  // block count / block length
};

// Log-moment block estimator: K = M' = floor(sqrt(N)); over the first K*M'
// values, 1/alpha = (1/log K) * [ mean_i log|Y_i| - mean_j log|X_j| ] with
// Y_i the sums of K consecutive X's. Exact zeros are dropped up front (they
// carry no tail information and sign-based optimizers emit them in bulk);
// zero block sums are likewise skipped.
TailIndexEstimate estimate_tail_index(const std::vector<double>& samples);

// Chambers-Mallows-Stuck sampler for symmetric alpha-stable variates.
// Per draw: U ~ Uniform(-pi/2, pi/2) then W ~ Exp(1).
std::vector<double> sample_sas(double alpha, double sigma, int64_t n, uint64_t seed);

struct GramMatrix {
  Tensor k;  // L x L
  int64_t l = 0;
  int64_t m = 0;
};

GramMatrix gram_matrix(const std::vector<std::vector<double>>& centered, int64_t batch_size);

// Power iteration from a seeded random unit vector; relative-change tolerance
// 1e-9, hard cap 10,000 iterations (error with the residual on cap).
double top_eigenvalue(const Tensor& k, uint64_t seed);

std::pair<GramMatrix, double> gram_and_top_eig(const std::vector<std::vector<double>>& centered,
                                               int64_t batch_size, uint64_t seed);

struct Histogram {
  std::vector<double> edges;   // strictly increasing
  std::vector<int64_t> counts; // [underflow] [edges.size()-1 bins] [overflow]
};

// histogram of |g_i|; values below edges[0] land in underflow, values at or
// above the last edge in overflow
Histogram update_histogram(const std::vector<double>& g, const std::vector<double>& edges);

// 50 log-spaced bins spanning [1e-8, 1e0]
std::vector<double> default_log_edges();

}  // namespace optlens::stats
