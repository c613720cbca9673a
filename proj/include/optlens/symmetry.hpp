#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace optlens::sym {

enum class Kind { Translation, Rescale, Scale };

const char* kind_name(Kind k);
Kind kind_from_string(const std::string& s);

// One conserved direction of the loss landscape, as index sets into the flat
// parameter vector. Translation and scale groups use only `x1`; rescale groups
// oppose incoming weights + bias (x1) against outgoing weights (x2).
struct SymmetryGroup {
  Kind kind;
  std::vector<int64_t> x1;
  std::vector<int64_t> x2;
};

// sum_groups | <g_members, 1> |
double translation_deviation(const std::vector<double>& grad,
                             const std::vector<SymmetryGroup>& groups);

// sum_groups | <g_x1, theta_x1> - <g_x2, theta_x2> |
double rescale_deviation(const std::vector<double>& grad, const std::vector<double>& theta,
                         const std::vector<SymmetryGroup>& groups);

// sum_groups | <g_x1, theta_x1> |
double scale_deviation(const std::vector<double>& grad, const std::vector<double>& theta,
                       const std::vector<SymmetryGroup>& groups);

// Totals per kind over a mixed group list. A kind with no groups reports
// count 0 and its total must be treated as absent, not as an observed zero.
struct DeviationReport {
  double translation = 0.0;
  double rescale = 0.0;
  double scale = 0.0;
  int64_t n_translation = 0;
  int64_t n_rescale = 0;
  int64_t n_scale = 0;
};

DeviationReport deviation_report(const std::vector<double>& grad, const std::vector<double>& theta,
                                 const std::vector<SymmetryGroup>& groups);

}  // namespace optlens::sym
