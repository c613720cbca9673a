#include "optlens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "optlens/error.hpp"

namespace optlens::harness {

const char* const kMetricsHeader =
    "run_id,seed,step,loss,dev_translation,dev_rescale,dev_scale,"
    "alpha_grad,alpha_update,lambda_max,upd_q25,upd_q50,upd_q75";

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::string opt_field(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<double> parse_opt(const std::string& s, const std::string& where) {
  if (s.empty()) return std::nullopt;
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail("metrics: bad number '" + s + "' in " + where);
  }
}

}  // namespace

void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::binary);  // binary: LF line endings everywhere
  if (!out) fail("metrics: cannot open " + path + " for writing");
  out << "# schema=1\n" << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    out << r.run_id << ',' << r.seed << ',' << r.step << ','
        << format_double(r.loss) << ',' << opt_field(r.dev_translation) << ','
        << opt_field(r.dev_rescale) << ',' << opt_field(r.dev_scale) << ','
        << opt_field(r.alpha_grad) << ',' << opt_field(r.alpha_update) << ','
        << opt_field(r.lambda_max) << ',' << opt_field(r.upd_q25) << ','
        << opt_field(r.upd_q50) << ',' << opt_field(r.upd_q75) << '\n';
  }
  if (!out) fail("metrics: write failed for " + path);
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("metrics: cannot open " + path);
  std::string line;
  std::vector<MetricsRow> rows;
  bool saw_header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!saw_header) {
      if (line != kMetricsHeader)
        fail("metrics: unexpected header in " + path + ": " + line);
      saw_header = true;
      continue;
    }
    auto f = split_csv(line);
    if (f.size() != 13)
      fail("metrics: " + path + ":" + std::to_string(lineno) + ": expected 13 fields, got " +
           std::to_string(f.size()));
    const std::string where = path + ":" + std::to_string(lineno);
    MetricsRow r;
    r.run_id = f[0];
    r.seed = std::stoull(f[1]);
    r.step = std::stoll(f[2]);
    auto loss = parse_opt(f[3], where);
    if (!loss) fail("metrics: empty loss in " + where);
    r.loss = *loss;
    r.dev_translation = parse_opt(f[4], where);
    r.dev_rescale = parse_opt(f[5], where);
    r.dev_scale = parse_opt(f[6], where);
    r.alpha_grad = parse_opt(f[7], where);
    r.alpha_update = parse_opt(f[8], where);
    r.lambda_max = parse_opt(f[9], where);
    r.upd_q25 = parse_opt(f[10], where);
    r.upd_q50 = parse_opt(f[11], where);
    r.upd_q75 = parse_opt(f[12], where);
    rows.push_back(std::move(r));
  }
  if (!saw_header) fail("metrics: no header in " + path);
  return rows;
}

double abs_quantile(const std::vector<double>& v, double q) {
  if (v.empty()) fail("quantile of empty vector");
  if (q < 0.0 || q > 1.0) fail("quantile fraction out of range");
  std::vector<double> a(v.size());
  for (size_t i = 0; i < v.size(); ++i) a[i] = std::fabs(v[i]);
  std::sort(a.begin(), a.end());
  double pos = q * static_cast<double>(a.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  size_t hi = std::min(lo + 1, a.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return a[lo] * (1.0 - frac) + a[hi] * frac;
}

void write_meta_loss(const std::string& path, const std::vector<MetaLossRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("metrics: cannot open " + path + " for writing");
  out << "# schema=1\nepoch,run,segment,meta_loss\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.run << ',' << r.segment << ','
        << format_double(r.meta_loss) << '\n';
  if (!out) fail("metrics: write failed for " + path);
}

}  // namespace optlens::harness
