#pragma once

#include "tad/numerics.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

namespace tad {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
};

/// AdamW over any parameter container exposing
/// `static void visit(Self&, F)` with F(std::string_view, num::Tensor&).
template <class Params>
class AdamW {
 public:
  explicit AdamW(const Params& like, AdamWConfig cfg = {})
      : cfg_(cfg), m_(Params::zeros_like(like)), v_(Params::zeros_like(like)) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return step_; }

  /// Returns the pre-clipping global gradient norm.
  double step(Params& params, Params& grads) {
    double sq = 0.0;
    Params::visit(grads, [&](auto, auto& g) {
      for (double v : g.data()) sq += v * v;
    });
    const double norm = std::sqrt(sq);
    const double clip =
        (cfg_.max_grad_norm > 0.0 && norm > cfg_.max_grad_norm) ? cfg_.max_grad_norm / norm : 1.0;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));

    std::vector<num::Tensor*> ps, gs, ms, vs;
    Params::visit(params, [&](auto, auto& t) { ps.push_back(&t); });
    Params::visit(grads, [&](auto, auto& t) { gs.push_back(&t); });
    Params::visit(m_, [&](auto, auto& t) { ms.push_back(&t); });
    Params::visit(v_, [&](auto, auto& t) { vs.push_back(&t); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto p = ps[k]->data();
      auto g = gs[k]->data();
      auto m = ms[k]->data();
      auto v = vs[k]->data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * clip;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  Params m_;
  Params v_;
  std::size_t step_ = 0;
};

}  // namespace tad
