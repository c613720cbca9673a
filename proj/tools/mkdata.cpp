// Writes a deterministic MNIST-shaped IDX pair for offline use.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>

#include "optlens/dataio.hpp"
#include "optlens/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic IDX digit set"};
  std::string out = "data";
  int64_t n = 60000;
  uint64_t seed = 1;
  app.add_option("--out", out, "output directory");
  app.add_option("--n", n, "number of examples");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  try {
    optlens::data::write_synthetic_idx(out, n, seed);
  } catch (const optlens::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cout << "wrote " << out << "/train-images-idx3-ubyte and train-labels-idx1-ubyte (" << n
            << " examples)\n";
  return 0;
}
