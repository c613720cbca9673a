// Times the OpenMP kernels against their serial twins on the shapes the
// trajectories actually hit, and verifies the two agree bit for bit.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <vector>

#include "optlens/kernels.hpp"
#include "optlens/rng.hpp"

using optlens::Rng;

namespace {

using KernelFn = void (*)(const double*, const double*, double*, int64_t, int64_t, int64_t);

struct Case {
  const char* name;
  KernelFn par;
  KernelFn ser;
  int64_t m, k, n;
};

double time_one(KernelFn fn, const std::vector<double>& a, const std::vector<double>& b,
                std::vector<double>& c, const Case& cs, int reps) {
  using clock = std::chrono::steady_clock;
  fn(a.data(), b.data(), c.data(), cs.m, cs.k, cs.n);  // warm-up
  auto t0 = clock::now();
  for (int r = 0; r < reps; ++r) fn(a.data(), b.data(), c.data(), cs.m, cs.k, cs.n);
  auto t1 = clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernel benchmark: parallel vs serial"};
  int reps = 20;
  app.add_option("--reps", reps, "repetitions per measurement");
  CLI11_PARSE(app, argc, argv);

  // mlp forward/backward and lstm-cell shapes for the default optimizee
  const Case cases[] = {
      {"matmul    batch x mlp  ", optlens::kern::matmul, optlens::kern::serial::matmul, 128, 784, 20},
      {"matmul    coords x lstm", optlens::kern::matmul, optlens::kern::serial::matmul, 15910, 20, 80},
      {"matmul    coords x head", optlens::kern::matmul, optlens::kern::serial::matmul, 15910, 20, 1},
      {"matmul_at mlp backward ", optlens::kern::matmul_at, optlens::kern::serial::matmul_at, 784, 128, 20},
      {"matmul_bt mlp backward ", optlens::kern::matmul_bt, optlens::kern::serial::matmul_bt, 128, 20, 784},
  };

  std::printf("%-24s %12s %12s %8s %10s\n", "case", "par GFLOP/s", "ser GFLOP/s", "speedup",
              "bit-exact");
  bool all_exact = true;
  for (const auto& cs : cases) {
    Rng rng(42);
    std::vector<double> a(cs.m * cs.k), b(cs.k * cs.n);
    for (auto& x : a) x = rng.uniform(-1.0, 1.0);
    for (auto& x : b) x = rng.uniform(-1.0, 1.0);
    std::vector<double> cp(cs.m * cs.n), csr(cs.m * cs.n);

    double tp = time_one(cs.par, a, b, cp, cs, reps);
    double ts = time_one(cs.ser, a, b, csr, cs, reps);

    bool exact = cp == csr;
    all_exact = all_exact && exact;
    double flops = 2.0 * cs.m * cs.k * cs.n;
    std::printf("%-24s %12.2f %12.2f %7.2fx %10s\n", cs.name, flops / tp * 1e-9,
                flops / ts * 1e-9, ts / tp, exact ? "yes" : "NO");
  }
  return all_exact ? 0 : 1;
}
