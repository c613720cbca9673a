#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace optlens::opt {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
};

struct AdamConfig {
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct LionConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0;
};

struct BlendConfig {
  double lambda = 0.5;  // weight on the Lion half
  SgdConfig sgd;
  LionConfig lion;
};

// Uniform step interface over the hand-designed optimizers. step() advances
// the internal buffers and returns the raw update g; the caller applies
// theta += g (updates are inspected by the symmetry metrics before they land).
// Value semantics: a copy is an independent clone, which is what the
// hypothetical-update protocol in trajstats leans on.
class Optimizer {
 public:
  static Optimizer sgd(const SgdConfig& c, int64_t n);
  static Optimizer adam(const AdamConfig& c, int64_t n);
  static Optimizer lion(const LionConfig& c, int64_t n);
  static Optimizer blend(const BlendConfig& c, int64_t n);

  std::vector<double> step(const std::vector<double>& theta, const std::vector<double>& grad);

  // the update step() would produce, without touching any state
  std::vector<double> peek(const std::vector<double>& theta, const std::vector<double>& grad) const;

  const std::string& kind() const { return kind_; }
  int64_t step_count() const { return t_; }

 private:
  Optimizer() = default;
  void compute(const std::vector<double>& theta, const std::vector<double>& grad,
               std::vector<double>& out, bool commit);

  std::string kind_;
  int64_t n_ = 0;
  int64_t t_ = 0;
  SgdConfig sgd_;
  AdamConfig adam_;
  LionConfig lion_;
  double blend_lambda_ = 0.0;
  std::vector<double> m_, v_;
  std::vector<Optimizer> inner_;  // blend: [sgd, lion]
};

}  // namespace optlens::opt
