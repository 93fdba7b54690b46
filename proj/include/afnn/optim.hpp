#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>

#include "afnn/model.hpp"

namespace afnn {

/// base * 0.5 * (1 + cos(pi * step / total_steps)).
inline double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step exceeds total_steps");
  return base * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamSlot {
  Tensor<T> m;
  Tensor<T> v;
  std::size_t t = 0;
};

/// Adam with per-parameter step counts. Frozen parameters, and their moment
/// buffers, are never touched.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  void step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads, double lr) {
    // Validate everything first so a failure leaves the parameters untouched.
    for (const auto& p : params.params()) {
      if (p.frozen) continue;
      auto it = grads.find(p.name);
      if (it == grads.end()) throw std::invalid_argument("optimizer: no gradient for " + p.name);
      if (it->second.shape() != p.value.shape()) throw ShapeError("optimizer: gradient shape mismatch for " + p.name);
      if (!it->second.all_finite()) throw NumericalError("optimizer: non-finite gradient for parameter " + p.name);
    }
    for (auto& p : params.params()) {
      if (p.frozen) continue;
      const auto& g = grads.at(p.name);
      auto& s = slots_[p.name];
      if (s.m.empty()) {
        s.m = Tensor<T>(p.value.shape());
        s.v = Tensor<T>(p.value.shape());
      }
      ++s.t;
      const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(s.t));
      const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
      const T step = static_cast<T>(lr / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(opt_.eps);
      auto& w = p.value;
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (T{1} - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (T{1} - b2) * g[i] * g[i];
        w[i] -= step * s.m[i] / (std::sqrt(s.v[i] * inv_c2) + eps);
      }
    }
  }

  const std::map<std::string, AdamSlot<T>>& slots() const { return slots_; }

 private:
  AdamOptions opt_;
  std::map<std::string, AdamSlot<T>> slots_;
};

}  // namespace afnn
