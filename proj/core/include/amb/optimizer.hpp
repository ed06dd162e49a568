#pragma once

// RMSProp with a global gradient-norm clip. One optimizer instance covers
// every parameter — the gradient reversal layer supplies the adversarial
// sign flip, so no alternating schedule exists anywhere.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "amb/encoder.hpp"
#include "amb/errors.hpp"
#include "amb/tensor.hpp"

namespace amb {

template <typename Real>
class RmsProp {
 public:
  struct Options {
    Real learning_rate = Real(0.001);
    Real rho = Real(0.9);
    Real epsilon = Real(1e-8);
    Real clip_norm = Real(5.0);  // global L2 clip; <= 0 disables

    void validate() const {
      if (learning_rate <= Real(0)) throw ConfigError("rmsprop: learning rate must be > 0");
      if (rho < Real(0) || rho >= Real(1)) throw ConfigError("rmsprop: rho must be in [0, 1)");
      if (epsilon <= Real(0)) throw ConfigError("rmsprop: epsilon must be > 0");
    }
  };

  explicit RmsProp(Options opt = {}) : opt_(opt) { opt_.validate(); }

  const Options& options() const { return opt_; }

  // s <- rho*s + (1-rho)*g^2;  p <- p - lr * g / (sqrt(s) + eps).
  // Gradients are looked up by each parameter's tape node. A non-finite
  // gradient aborts, naming the parameter; parameters the loss never touched
  // have zero gradients and stay put exactly.
  void step(ParamRefs<Real>& params, const GradientMap<Real>& grads) {
    if (state_.empty()) {
      state_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        state_[i].assign(static_cast<std::size_t>(params[i].second->size()), Real(0));
    }
    if (state_.size() != params.size())
      throw ContractError("rmsprop: parameter count changed between steps");

    // Validate and measure the global norm first so a bad gradient aborts
    // before any parameter moves.
    double sumsq = 0.0;
    for (auto& [name, p] : params) {
      const auto& g = grads.at(p->node());
      for (Real v : g.data()) {
        if (!std::isfinite(v))
          throw NumericError("rmsprop: non-finite gradient in parameter \"" + name + "\"");
        sumsq += static_cast<double>(v) * static_cast<double>(v);
      }
    }
    Real scale = Real(1);
    if (opt_.clip_norm > Real(0)) {
      const double norm = std::sqrt(sumsq);
      if (norm > static_cast<double>(opt_.clip_norm))
        scale = opt_.clip_norm / static_cast<Real>(norm);
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<Real>& p = *params[i].second;
      const auto& g = grads.at(p.node());
      auto s = state_[i].data();
      auto pv = p.data();
      const auto gv = g.data();
      for (std::int64_t j = 0; j < p.size(); ++j) {
        const Real gj = gv[j] * scale;
        s[j] = opt_.rho * s[j] + (Real(1) - opt_.rho) * gj * gj;
        pv[j] -= opt_.learning_rate * gj / (std::sqrt(s[j]) + opt_.epsilon);
      }
    }
  }

  // Running squared-gradient average for one parameter (tests/diagnostics).
  const std::vector<Real>& accumulator(std::size_t param_index) const {
    return state_.at(param_index);
  }

 private:
  Options opt_;
  std::vector<std::vector<Real>> state_;
};

}  // namespace amb
