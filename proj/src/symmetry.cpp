#include "optlens/symmetry.hpp"

#include <cmath>

#include "optlens/error.hpp"

namespace optlens::sym {

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Translation: return "translation";
    case Kind::Rescale: return "rescale";
    case Kind::Scale: return "scale";
  }
  return "?";
}

Kind kind_from_string(const std::string& s) {
  if (s == "translation") return Kind::Translation;
  if (s == "rescale") return Kind::Rescale;
  if (s == "scale") return Kind::Scale;
  fail("symmetry: unknown kind '" + s + "'");
}

namespace {

double dot_subset(const std::vector<double>& a, const std::vector<double>& b,
                  const std::vector<int64_t>& idx) {
  double s = 0.0;
  for (int64_t i : idx) s += a[i] * b[i];
  return s;
}

double sum_subset(const std::vector<double>& a, const std::vector<int64_t>& idx) {
  double s = 0.0;
  for (int64_t i : idx) s += a[i];
  return s;
}

void want_kind(const SymmetryGroup& g, Kind k) {
  if (g.kind != k)
    fail(std::string(kind_name(k)) + "-deviation: got a " + kind_name(g.kind) + " group");
}

}  // namespace

double translation_deviation(const std::vector<double>& grad,
                             const std::vector<SymmetryGroup>& groups) {
  double total = 0.0;
  for (const auto& g : groups) {
    want_kind(g, Kind::Translation);
    total += std::fabs(sum_subset(grad, g.x1));
  }
  return total;
}

double rescale_deviation(const std::vector<double>& grad, const std::vector<double>& theta,
                         const std::vector<SymmetryGroup>& groups) {
  double total = 0.0;
  for (const auto& g : groups) {
    want_kind(g, Kind::Rescale);
    total += std::fabs(dot_subset(grad, theta, g.x1) - dot_subset(grad, theta, g.x2));
  }
  return total;
}

double scale_deviation(const std::vector<double>& grad, const std::vector<double>& theta,
                       const std::vector<SymmetryGroup>& groups) {
  double total = 0.0;
  for (const auto& g : groups) {
    want_kind(g, Kind::Scale);
    total += std::fabs(dot_subset(grad, theta, g.x1));
  }
  return total;
}

DeviationReport deviation_report(const std::vector<double>& grad, const std::vector<double>& theta,
                                 const std::vector<SymmetryGroup>& groups) {
  DeviationReport r;
  for (const auto& g : groups) {
    switch (g.kind) {
      case Kind::Translation:
        r.translation += std::fabs(sum_subset(grad, g.x1));
        ++r.n_translation;
        break;
      case Kind::Rescale:
        r.rescale += std::fabs(dot_subset(grad, theta, g.x1) - dot_subset(grad, theta, g.x2));
        ++r.n_rescale;
        break;
      case Kind::Scale:
        r.scale += std::fabs(dot_subset(grad, theta, g.x1));
        ++r.n_scale;
        break;
    }
  }
  return r;
}

}  // namespace optlens::sym
