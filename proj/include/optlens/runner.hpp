#pragma once

#include <functional>
#include <string>
#include <vector>

#include "optlens/config.hpp"
#include "optlens/metrics.hpp"
#include "optlens/trajstats.hpp"

namespace optlens::harness {

// Finds the IDX pair under cfg.data_dir (falling back to $OPTLENS_DATA_DIR),
// accepting plain or .gz files.
data::Dataset load_data(const RunConfig& cfg);

std::string arch_label(const RunConfig& cfg);
std::string run_id(const std::string& opt_label, const RunConfig& cfg, uint64_t seed);

// One optimizer behind a uniform stepping interface. step() advances the
// internal state and returns the update (the caller applies theta += g);
// peek() produces the same update from a throwaway copy of the state.
struct Stepper {
  std::string label;
  std::function<std::vector<double>(const std::vector<double>& theta,
                                    const std::vector<double>& grad)>
      step;
  std::function<std::vector<double>(const std::vector<double>& theta,
                                    const std::vector<double>& grad)>
      peek;
};

Stepper make_stepper(const RunConfig& cfg, const std::string& optimizer,
                     const model::ArchSpec& arch, int64_t n_params,
                     double blend_lambda = 0.5);

// Runs one instrumented trajectory: symmetry deviations every step (when
// enabled), noise collection + tail/covariance analysis at the cadence,
// update quantiles every step.
std::vector<MetricsRow> run_trajectory(const RunConfig& cfg, const data::Dataset& ds,
                                       const model::ArchSpec& arch, Stepper& st,
                                       uint64_t seed);

// raw noise samples written by --dump-noise, re-read by the analyze command
void write_noise_dump(const std::string& path, const stats::NoiseSample& ns);
stats::NoiseSample read_noise_dump(const std::string& path);

struct HistBlock {
  std::string optimizer;
  int64_t iteration = 0;
  stats::Histogram hist;
};

void write_histograms(const std::string& path, const std::vector<HistBlock>& blocks);

int cmd_meta_train(const RunConfig& cfg);
int cmd_meta_test(const RunConfig& cfg);
int cmd_blend_sweep(const RunConfig& cfg);
int cmd_histograms(const RunConfig& cfg);
int cmd_analyze(const RunConfig& cfg);

}  // namespace optlens::harness
