#include "optlens/handopt.hpp"

#include <cmath>

#include "optlens/error.hpp"

namespace optlens::opt {

Optimizer Optimizer::sgd(const SgdConfig& c, int64_t n) {
  Optimizer o;
  o.kind_ = "sgd";
  o.n_ = n;
  o.sgd_ = c;
  o.m_.assign(n, 0.0);
  return o;
}

Optimizer Optimizer::adam(const AdamConfig& c, int64_t n) {
  Optimizer o;
  o.kind_ = "adam";
  o.n_ = n;
  o.adam_ = c;
  o.m_.assign(n, 0.0);
  o.v_.assign(n, 0.0);
  return o;
}

Optimizer Optimizer::lion(const LionConfig& c, int64_t n) {
  if (c.beta1 < 0.0 || c.beta1 >= 1.0 || c.beta2 < 0.0 || c.beta2 >= 1.0)
    fail("lion: betas must lie in [0,1)");
  Optimizer o;
  o.kind_ = "lion";
  o.n_ = n;
  o.lion_ = c;
  o.m_.assign(n, 0.0);
  return o;
}

Optimizer Optimizer::blend(const BlendConfig& c, int64_t n) {
  if (c.lambda < 0.0 || c.lambda > 1.0) fail("blend: lambda must lie in [0,1]");
  Optimizer o;
  o.kind_ = "blend";
  o.n_ = n;
  o.blend_lambda_ = c.lambda;
  o.inner_.push_back(sgd(c.sgd, n));
  o.inner_.push_back(lion(c.lion, n));
  return o;
}

std::vector<double> Optimizer::step(const std::vector<double>& theta,
                                    const std::vector<double>& grad) {
  if (static_cast<int64_t>(grad.size()) != n_)
    fail(kind_ + ": gradient size " + std::to_string(grad.size()) + " != state size " +
         std::to_string(n_));
  std::vector<double> g(n_);
  ++t_;
  if (kind_ == "sgd") {
    for (int64_t i = 0; i < n_; ++i) {
      m_[i] = sgd_.momentum * m_[i] + grad[i];
      g[i] = -sgd_.lr * m_[i];
    }
  } else if (kind_ == "adam") {
    const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
    for (int64_t i = 0; i < n_; ++i) {
      m_[i] = adam_.beta1 * m_[i] + (1.0 - adam_.beta1) * grad[i];
      v_[i] = adam_.beta2 * v_[i] + (1.0 - adam_.beta2) * grad[i] * grad[i];
      g[i] = -adam_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + adam_.eps);
    }
  } else if (kind_ == "lion") {
    // sign of the momentum/gradient interpolation; EMA refresh happens after
    for (int64_t i = 0; i < n_; ++i) {
      const double c = lion_.beta1 * m_[i] + (1.0 - lion_.beta1) * grad[i];
      const double s = c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
      g[i] = -lion_.lr * (s + lion_.weight_decay * theta[i]);
      m_[i] = lion_.beta2 * m_[i] + (1.0 - lion_.beta2) * grad[i];
    }
  } else {
    std::vector<double> gs = inner_[0].step(theta, grad);
    std::vector<double> gl = inner_[1].step(theta, grad);
    for (int64_t i = 0; i < n_; ++i)
      g[i] = blend_lambda_ * gl[i] + (1.0 - blend_lambda_) * gs[i];
  }
  return g;
}

std::vector<double> Optimizer::peek(const std::vector<double>& theta,
                                    const std::vector<double>& grad) const {
  Optimizer clone = *this;
  return clone.step(theta, grad);
}

}  // namespace optlens::opt
