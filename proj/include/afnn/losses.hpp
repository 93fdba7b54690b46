#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "afnn/ops.hpp"

namespace afnn {

struct LossWeights {
  double alpha = 0.4;  ///< optic-disc dice weight
  double beta = 0.6;   ///< optic-cup dice weight
  double lambda_seg = 1.0;
  double lambda_rec = 1.0;
  double lambda_cls = 1.0;

  void validate(bool cup_emphasis = false) const {
    for (double v : {alpha, beta, lambda_seg, lambda_rec, lambda_cls}) {
      if (!std::isfinite(v)) throw std::invalid_argument("LossWeights: non-finite weight");
    }
    if (!(alpha > 0) || !(beta > 0)) throw std::invalid_argument("LossWeights: alpha and beta must be > 0");
    if (lambda_seg < 0 || lambda_rec < 0 || lambda_cls < 0) {
      throw std::invalid_argument("LossWeights: stage coefficients must be >= 0");
    }
    if (cup_emphasis && beta < alpha) throw std::invalid_argument("LossWeights: cup emphasis requires beta >= alpha");
  }
};

struct LossReport {
  double total = 0.0;
  double seg = 0.0;
  double seg_od = 0.0;
  double seg_oc = 0.0;
  double rec = 0.0;
  double cls = 0.0;
};

/// The scalar identity behind total_loss, usable on already-computed parts.
inline double combine(const LossReport& r, const LossWeights& w) {
  return w.lambda_seg * r.seg + w.lambda_rec * r.rec + w.lambda_cls * r.cls;
}

inline constexpr double kDiceSmooth = 1.0;

/// (2 Σ p·t + s) / (Σ p + Σ t + s) on plain arrays.
template <class T, class U>
double soft_dice(std::span<const T> pred, std::span<const U> truth, double smooth = kDiceSmooth) {
  if (pred.size() != truth.size()) throw ShapeError("soft_dice: size mismatch");
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = static_cast<double>(pred[i]);
    const double t = static_cast<double>(truth[i]);
    inter += p * t;
    sp += p;
    st += t;
  }
  return (2.0 * inter + smooth) / (sp + st + smooth);
}

/// Differentiable soft dice per (n, c) slice: [N,C,H,W] x [N,C,H,W] -> [N,C].
template <class T>
Var<T> dice_coefficients(Var<T> pred, const Tensor<T>& truth, T smooth = T(kDiceSmooth)) {
  const auto& pv = pred.value();
  require_rank(pv.shape(), 4, "dice_coefficients");
  if (truth.shape() != pv.shape()) {
    throw ShapeError("dice_coefficients: prediction " + shape_str(pv.shape()) + " vs truth " +
                     shape_str(truth.shape()));
  }
  const std::size_t slices = pv.dim(0) * pv.dim(1), plane = pv.dim(2) * pv.dim(3);
  Tensor<T> out({pv.dim(0), pv.dim(1)});
  std::vector<T> inter(slices), denom(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    T i{0}, sp{0}, st{0};
    for (std::size_t k = 0; k < plane; ++k) {
      const T p = pv[s * plane + k], t = truth[s * plane + k];
      i += p * t;
      sp += p;
      st += t;
    }
    inter[s] = i;
    denom[s] = sp + st + smooth;
    out[s] = (T{2} * i + smooth) / denom[s];
  }
  return pred.tape->record(
      std::move(out), pred.requires_grad(),
      [pred, truth, inter = std::move(inter), denom = std::move(denom), plane, smooth](Tape<T>& tape,
                                                                                      const Tensor<T>& g) {
        auto& dp = tape.grad_buffer(pred);
        for (std::size_t s = 0; s < inter.size(); ++s) {
          const T d2 = denom[s] * denom[s];
          const T num = T{2} * inter[s] + smooth;
          for (std::size_t k = 0; k < plane; ++k) {
            const T t = truth[s * plane + k];
            dp[s * plane + k] += g[s] * (T{2} * t * denom[s] - num) / d2;
          }
        }
      });
}

template <class T>
struct WeightedDice {
  Var<T> loss;        ///< α·mean(1 − dice_OD) + β·mean(1 − dice_OC)
  double od = 0.0;    ///< mean(1 − dice_OD)
  double oc = 0.0;    ///< mean(1 − dice_OC)
};

/// pred/truth are [N,2,H,W] with channel 0 the optic disc, channel 1 the cup.
template <class T>
WeightedDice<T> weighted_dice_loss(Var<T> pred, const Tensor<T>& truth, const LossWeights& w,
                                   T smooth = T(kDiceSmooth)) {
  if (pred.value().rank() != 4 || pred.dim(1) != 2) {
    throw ShapeError("weighted_dice_loss: expected [N,2,H,W], got " + shape_str(pred.shape()));
  }
  const std::size_t n = pred.dim(0);
  auto dice = dice_coefficients(pred, truth, smooth);
  Tensor<T> weights({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    weights[2 * i] = static_cast<T>(w.alpha);
    weights[2 * i + 1] = static_cast<T>(w.beta);
  }
  auto one_minus = add_scalar(scale(dice, T{-1}), T{1});
  auto loss = scale(sum(mul(one_minus, pred.tape->constant(std::move(weights)))), T{1} / static_cast<T>(n));
  WeightedDice<T> out{loss};
  const auto& dv = dice.value();
  for (std::size_t i = 0; i < n; ++i) {
    out.od += 1.0 - static_cast<double>(dv[2 * i]);
    out.oc += 1.0 - static_cast<double>(dv[2 * i + 1]);
  }
  out.od /= static_cast<double>(n);
  out.oc /= static_cast<double>(n);
  return out;
}

/// Mean absolute error between the reconstruction and its target.
template <class T>
Var<T> rec_loss(Var<T> target, Var<T> reconstruction) {
  return mean(abs_op(sub(reconstruction, target)));
}

/// Mean over the batch of −log softmax(logits)[label], via log-sum-exp.
template <class T>
Var<T> cls_loss(Var<T> logits, const std::vector<int>& labels) {
  const auto& lv = logits.value();
  require_rank(lv.shape(), 2, "cls_loss");
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  if (labels.size() != n) throw ShapeError("cls_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                                           std::to_string(n));
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw std::out_of_range("cls_loss: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor<T> probs(lv.shape());
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = lv.data().data() + i * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    total += lse - row[labels[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
  }
  return logits.tape->record(Tensor<T>::scalar(total / static_cast<T>(n)), logits.requires_grad(),
                             [logits, probs = std::move(probs), labels, n, k](Tape<T>& tape, const Tensor<T>& g) {
                               auto& dl = tape.grad_buffer(logits);
                               const T scale = g[0] / static_cast<T>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < k; ++j) {
                                   const T onehot = static_cast<std::size_t>(labels[i]) == j ? T{1} : T{0};
                                   dl[i * k + j] += scale * (probs[i * k + j] - onehot);
                                 }
                               }
                             });
}

template <class T>
struct TotalLoss {
  Var<T> total;
  LossReport report;
};

/// λ_seg·seg + λ_rec·rec + λ_cls·cls. Absent auxiliary terms contribute 0.
template <class T>
TotalLoss<T> total_loss(const WeightedDice<T>& seg, std::type_identity_t<std::optional<Var<T>>> rec,
                        std::type_identity_t<std::optional<Var<T>>> cls,
                        const LossWeights& w) {
  Var<T> total = scale(seg.loss, static_cast<T>(w.lambda_seg));
  LossReport r;
  r.seg = static_cast<double>(seg.loss.value()[0]);
  r.seg_od = seg.od;
  r.seg_oc = seg.oc;
  if (rec) {
    total = add(total, scale(*rec, static_cast<T>(w.lambda_rec)));
    r.rec = static_cast<double>(rec->value()[0]);
  }
  if (cls) {
    total = add(total, scale(*cls, static_cast<T>(w.lambda_cls)));
    r.cls = static_cast<double>(cls->value()[0]);
  }
  r.total = combine(r, w);
  return {total, r};
}

}  // namespace afnn
