#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace optlens::harness {

// One trajectory step. Analyses that did not run at this step stay nullopt
// and are written as empty CSV fields, never as zeros.
struct MetricsRow {
  std::string run_id;
  uint64_t seed = 0;
  int64_t step = 0;
  double loss = 0.0;
  std::optional<double> dev_translation;
  std::optional<double> dev_rescale;
  std::optional<double> dev_scale;
  std::optional<double> alpha_grad;
  std::optional<double> alpha_update;
  std::optional<double> lambda_max;
  std::optional<double> upd_q25;
  std::optional<double> upd_q50;
  std::optional<double> upd_q75;
};

extern const char* const kMetricsHeader;

std::string format_double(double v);  // shortest round-trip (%.17g)

void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics(const std::string& path);

// linear-interpolation quantile of |v| entries; q in [0,1]
double abs_quantile(const std::vector<double>& v, double q);

struct MetaLossRow {
  int64_t epoch = 0;
  int64_t run = 0;
  int64_t segment = 0;
  double meta_loss = 0.0;
};

void write_meta_loss(const std::string& path, const std::vector<MetaLossRow>& rows);

}  // namespace optlens::harness
