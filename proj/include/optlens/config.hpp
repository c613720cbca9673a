#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "optlens/dataio.hpp"
#include "optlens/optimizee.hpp"
#include "optlens/symmetry.hpp"

namespace optlens::harness {

// Flat key=value config. The key set mirrors the CLI flags 1:1 (a flag
// --noise-cadence corresponds to the key "noise-cadence"); CLI values win.
using KV = std::map<std::string, std::string>;

KV parse_ini(const std::string& path);
KV parse_ini_text(const std::string& text, const std::string& origin);

// every key the config file / CLI accepts, with a one-line description
const std::vector<std::pair<std::string, std::string>>& config_keys();

struct RunConfig {
  std::string arch = "sigmoid";
  std::vector<int64_t> hidden = {20};
  std::string optimizer = "sgd";
  std::string checkpoint;

  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  int64_t iters = 1000;
  int64_t batch_size = 128;
  data::Preprocessing preprocessing = data::Preprocessing::Normalize;
  std::string data_dir;
  std::string out_dir = "out";

  bool log_symmetry = true;
  int64_t noise_cadence = 10;  // 0 disables noise/covariance analysis
  int64_t noise_l = 93;
  int64_t noise_m = 128;
  bool dump_noise = false;

  // optimizer hyperparameters; negative lr means "use the tuned default"
  double lr = -1.0;
  double momentum = 0.9;
  double beta1 = -1.0;
  double beta2 = -1.0;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::vector<double> lambdas = {0.0, 0.25, 0.5, 0.75, 1.0};

  // meta-training
  int64_t unroll = 20;
  int64_t epochs = 50;
  int64_t runs_per_epoch = 20;
  int64_t max_iters = 200;
  double meta_lr = 0.001;
  bool meta_sgd = false;
  double beta = 0.0;
  std::vector<sym::Kind> reg_kinds;
  int64_t l2o_hidden = 20;
  double out_scale = 0.1;
  double preprocess_p = 10.0;

  std::vector<int64_t> hist_iters = {1, 50, 200};
};

// Applies `kv` on top of the defaults; unknown keys are an error.
RunConfig config_from_kv(const KV& kv);

model::ArchSpec arch_from_config(const RunConfig& cfg);

// the paper's tuned learning rate for (optimizer, activation)
double default_lr(const std::string& optimizer, model::Act act);

}  // namespace optlens::harness
