#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "afnn/gradcheck.hpp"
#include "afnn/losses.hpp"
#include "afnn/model.hpp"
#include "afnn/ops.hpp"
#include "afnn/rng.hpp"

namespace afnn {

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// One randomized instance: inputs plus the scalar function to differentiate.
struct GradTrial {
  std::vector<Tensor<double>> inputs;
  ScalarFn f;
};

struct GradCase {
  std::string name;
  double tol;  ///< 1e-6 for smooth ops, 1e-4 otherwise
  std::function<GradTrial(Rng&)> make;
};

inline void PrintTo(const GradCase& c, std::ostream* os) { *os << c.name; }

struct GradCaseResult {
  std::string name;
  std::size_t trials = 0;
  double tol = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
};

namespace suite {

inline Tensor<double> uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled by h.
inline Tensor<double> away_from_zero(Shape s, Rng& rng, double margin = 0.1) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(margin, 1.0);
  return t;
}

inline Tensor<double> binary(Shape s, Rng& rng, double p = 0.4) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

/// Reduces any output to a scalar with fixed random weights, so that ops
/// whose plain sum is constant (softmax, norms) still get a nontrivial check.
inline Var<double> project(Var<double> y, const Tensor<double>& weights) {
  return sum(mul(y, y.tape->constant(weights)));
}

template <class Op>
GradCase unary_case(std::string name, double tol, Shape shape, Op op, bool avoid_zero = false) {
  return {std::move(name), tol, [shape, op, avoid_zero](Rng& rng) {
            auto x = avoid_zero ? away_from_zero(shape, rng) : uniform(shape, rng, -2.0, 2.0);
            Tape<double> probe;
            auto w = uniform(op(probe.constant(x)).shape(), rng);
            return GradTrial{{x}, [op, w](Tape<double>&, const std::vector<Var<double>>& in) {
                               return project(op(in[0]), w);
                             }};
          }};
}

}  // namespace suite

/// Every differentiable op plus the composite losses.
inline std::vector<GradCase> op_cases() {
  using suite::away_from_zero;
  using suite::binary;
  using suite::project;
  using suite::uniform;
  using V = Var<double>;
  using In = const std::vector<V>&;
  std::vector<GradCase> cases;

  cases.push_back({"conv2d", 1e-6, [](Rng& rng) {
                     auto x = uniform({2, 3, 6, 6}, rng);
                     auto w = uniform({4, 3, 3, 3}, rng);
                     auto b = uniform({4}, rng);
                     auto p = uniform({2, 4, 6, 6}, rng);
                     return GradTrial{{x, w, b}, [p](Tape<double>&, In in) {
                                        return project(conv2d(in[0], in[1], in[2], {1, 1}), p);
                                      }};
                   }});
  cases.push_back({"conv2d_stride2", 1e-6, [](Rng& rng) {
                     auto x = uniform({1, 2, 7, 7}, rng);
                     auto w = uniform({3, 2, 3, 3}, rng);
                     auto p = uniform({1, 3, 4, 4}, rng);
                     return GradTrial{{x, w}, [p](Tape<double>&, In in) {
                                        return project(conv2d(in[0], in[1], std::nullopt, {2, 1}), p);
                                      }};
                   }});
  cases.push_back({"conv2d_replicate", 1e-6, [](Rng& rng) {
                     auto x = uniform({1, 2, 5, 5}, rng);
                     auto w = uniform({2, 2, 5, 5}, rng);
                     auto p = uniform({1, 2, 5, 5}, rng);
                     return GradTrial{{x, w}, [p](Tape<double>&, In in) {
                                        return project(
                                            conv2d(in[0], in[1], std::nullopt, {1, 2, PadMode::kReplicate}), p);
                                      }};
                   }});
  cases.push_back(suite::unary_case("instance_norm", 1e-6, {2, 3, 4, 4}, [](V x) { return instance_norm(x); }));
  cases.push_back({"batch_norm_train", 1e-6, [](Rng& rng) {
                     auto x = uniform({3, 2, 3, 3}, rng, -2, 2);
                     auto g = uniform({2}, rng, 0.5, 1.5);
                     auto b = uniform({2}, rng);
                     auto p = uniform({3, 2, 3, 3}, rng);
                     return GradTrial{{x, g, b}, [p](Tape<double>&, In in) {
                                        BatchNormStats<double> stats(2);
                                        return project(batch_norm(in[0], in[1], in[2], stats), p);
                                      }};
                   }});
  cases.push_back({"batch_norm_eval", 1e-6, [](Rng& rng) {
                     auto x = uniform({2, 2, 3, 3}, rng, -2, 2);
                     auto g = uniform({2}, rng, 0.5, 1.5);
                     auto b = uniform({2}, rng);
                     auto mean = uniform({2}, rng);
                     auto var = uniform({2}, rng, 0.5, 2.0);
                     auto p = uniform({2, 2, 3, 3}, rng);
                     return GradTrial{{x, g, b}, [p, mean, var](Tape<double>&, In in) {
                                        BatchNormStats<double> stats;
                                        stats.seed(mean, var);
                                        return project(batch_norm(in[0], in[1], in[2], stats, {Mode::kEval}), p);
                                      }};
                   }});
  cases.push_back(suite::unary_case("relu", 1e-4, {2, 3, 3}, [](V x) { return relu(x); }, true));
  cases.push_back(suite::unary_case("tanh", 1e-6, {2, 3, 3}, [](V x) { return tanh_op(x); }));
  cases.push_back(suite::unary_case("sigmoid", 1e-6, {2, 3, 3}, [](V x) { return sigmoid(x); }));
  cases.push_back(suite::unary_case("abs", 1e-4, {2, 3, 3}, [](V x) { return abs_op(x); }, true));
  cases.push_back(suite::unary_case("softmax", 1e-6, {3, 5}, [](V x) { return softmax(x, 1); }));
  cases.push_back(suite::unary_case("softmax_axis0", 1e-6, {4, 2, 3}, [](V x) { return softmax(x, 0); }));
  cases.push_back(suite::unary_case("scale", 1e-6, {2, 4}, [](V x) { return scale(x, -1.7); }));
  cases.push_back(suite::unary_case("add_scalar", 1e-6, {2, 4}, [](V x) { return add_scalar(x, 0.3); }));
  cases.push_back({"linear", 1e-6, [](Rng& rng) {
                     auto x = uniform({3, 4}, rng);
                     auto w = uniform({4, 2}, rng);
                     auto b = uniform({2}, rng);
                     auto p = uniform({3, 2}, rng);
                     return GradTrial{{x, w, b}, [p](Tape<double>&, In in) {
                                        return project(linear(in[0], in[1], in[2]), p);
                                      }};
                   }});
  cases.push_back(
      suite::unary_case("upsample_nearest", 1e-6, {1, 2, 3, 3}, [](V x) { return upsample_nearest(x, 2); }));
  cases.push_back(suite::unary_case("avgpool2d", 1e-6, {1, 2, 4, 6}, [](V x) { return avgpool2d(x, 2); }));
  cases.push_back(suite::unary_case("global_avg_pool", 1e-6, {2, 3, 3, 3}, [](V x) { return global_avg_pool(x); }));
  cases.push_back({"concat", 1e-6, [](Rng& rng) {
                     auto a = uniform({2, 1, 3, 3}, rng);
                     auto b = uniform({2, 3, 3, 3}, rng);
                     auto p = uniform({2, 4, 3, 3}, rng);
                     return GradTrial{{a, b}, [p](Tape<double>&, In in) { return project(concat(std::vector<V>{in[0], in[1]}, 1), p); }};
                   }});
  cases.push_back(suite::unary_case("slice", 1e-6, {2, 5, 3}, [](V x) { return slice(x, 1, 1, 3); }));
  cases.push_back({"add_sub_mul", 1e-6, [](Rng& rng) {
                     auto a = uniform({2, 3}, rng);
                     auto b = uniform({2, 3}, rng);
                     auto p = uniform({2, 3}, rng);
                     return GradTrial{{a, b}, [p](Tape<double>&, In in) {
                                        return project(mul(add(in[0], in[1]), sub(in[0], in[1])), p);
                                      }};
                   }});
  cases.push_back(suite::unary_case("mean", 1e-6, {3, 4}, [](V x) { return mean(mul(x, x)); }));
  cases.push_back({"dice", 1e-4, [](Rng& rng) {
                     auto pred = uniform({2, 2, 8, 8}, rng, 0.1, 0.9);
                     auto truth = binary({2, 2, 8, 8}, rng);
                     return GradTrial{{pred}, [truth](Tape<double>&, In in) {
                                        return weighted_dice_loss(in[0], truth, LossWeights{}).loss;
                                      }};
                   }});
  cases.push_back({"rec_loss", 1e-4, [](Rng& rng) {
                     auto x = uniform({1, 3, 4, 4}, rng);
                     auto z = uniform({1, 3, 4, 4}, rng);
                     // Keep |z - x| off the kink.
                     for (std::size_t i = 0; i < z.size(); ++i) {
                       if (std::abs(z[i] - x[i]) < 0.05) z[i] = x[i] + 0.1;
                     }
                     return GradTrial{{x, z}, [](Tape<double>&, In in) { return rec_loss(in[0], in[1]); }};
                   }});
  cases.push_back({"cls_loss", 1e-6, [](Rng& rng) {
                     auto logits = uniform({4, 3}, rng, -3, 3);
                     std::vector<int> labels;
                     for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.index(3)));
                     return GradTrial{{logits}, [labels](Tape<double>&, In in) { return cls_loss(in[0], labels); }};
                   }});
  cases.push_back({"conv_in_dice", 1e-4, [](Rng& rng) {
                     auto x = uniform({1, 1, 4, 4}, rng);
                     auto w = uniform({1, 1, 3, 3}, rng);
                     auto truth = binary({1, 1, 4, 4}, rng, 0.5);
                     return GradTrial{{x, w}, [truth](Tape<double>&, In in) {
                                        auto y = sigmoid(instance_norm(conv2d(in[0], in[1], std::nullopt, {1, 1})));
                                        return sum(dice_coefficients(y, truth));
                                      }};
                   }});
  cases.push_back({"total_loss", 1e-4, [](Rng& rng) {
                     auto seg = uniform({2, 2, 4, 4}, rng, 0.1, 0.9);
                     auto truth = binary({2, 2, 4, 4}, rng);
                     auto img = uniform({2, 3, 4, 4}, rng);
                     auto rec = uniform({2, 3, 4, 4}, rng, -0.9, 0.9);
                     for (std::size_t i = 0; i < rec.size(); ++i) {
                       if (std::abs(rec[i] - img[i]) < 0.05) rec[i] = img[i] > 0 ? img[i] - 0.1 : img[i] + 0.1;
                     }
                     auto logits = uniform({2, 3}, rng, -2, 2);
                     return GradTrial{{seg, rec, logits}, [truth, img](Tape<double>& tape, In in) {
                                        LossWeights w{0.4, 0.6, 2.0, 0.5, 0.5};
                                        return total_loss(weighted_dice_loss(in[0], truth, w),
                                                          rec_loss(tape.constant(img), in[1]), cls_loss(in[2], {0, 2}),
                                                          w)
                                            .total;
                                      }};
                   }});
  // The whole network end to end: adaptor, encoder with both fusions, three
  // heads and the combined loss, differentiated with respect to the image.
  cases.push_back({"model_total_loss", 1e-4, [](Rng& rng) {
                     ModelConfig cfg;
                     cfg.adaptor.channels = 3;
                     cfg.fusion.levels = 3;
                     cfg.fusion.channels = {3, 4, 4};
                     cfg.fusion.fusion_dim = 4;
                     cfg.fusion.kernels = {1, 3};
                     cfg.n_domains = 3;
                     auto params = std::make_shared<ModelParams<double>>(init_params<double>(cfg, rng.next_u64()));
                     for (auto& p : params->params()) {
                       if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
                         for (auto& v : p.value.data()) v = rng.uniform(-0.3, 0.3);
                       }
                     }
                     auto img = uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
                     auto truth = binary({2, 2, 8, 8}, rng, 0.5);
                     return GradTrial{{img}, [params, truth](Tape<double>& tape, In in) {
                                        Net<double> net(*params, tape, Mode::kTrain);
                                        auto out = model_forward(net, in[0]);
                                        LossWeights w{0.4, 0.6, 2.0, 0.5, 0.5};
                                        auto target = add_scalar(scale(in[0], 2.0), -1.0);
                                        return total_loss(weighted_dice_loss(out.seg, truth, w),
                                                          rec_loss(target, *out.rec), cls_loss(*out.cls_logits, {0, 2}),
                                                          w)
                                            .total;
                                      }};
                   }});
  return cases;
}

/// Runs `trials` random instances of each case; a case passes iff every
/// trial's max relative error is within the case tolerance.
inline GradCaseResult run_grad_case(const GradCase& c, std::size_t trials, std::uint64_t seed) {
  GradCaseResult r{c.name, trials, c.tol};
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a of the name
  for (unsigned char ch : c.name) h = (h ^ ch) * 1099511628211ull;
  Rng rng(mix_seed(seed, h));
  for (std::size_t t = 0; t < trials; ++t) {
    GradTrial trial = c.make(rng);
    GradCheckOptions opt;
    opt.tol = c.tol;
    auto rep = grad_check(trial.f, trial.inputs, opt);
    r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
  }
  r.passed = r.max_rel_error <= c.tol;
  return r;
}

inline std::vector<GradCaseResult> run_grad_suite(const std::vector<GradCase>& cases, std::size_t trials,
                                                  std::uint64_t seed = 1) {
  std::vector<GradCaseResult> out;
  for (const auto& c : cases) out.push_back(run_grad_case(c, trials, seed));
  return out;
}

}  // namespace afnn
