#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "afnn/kernels.hpp"
#include "afnn/tape.hpp"
#include "afnn/tensor.hpp"

// Differentiable operator set. Every op validates shapes, computes its
// forward value eagerly and records a closure that maps the output gradient
// back onto its inputs.

namespace afnn {

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b, const char* what) {
  if (a.tape != b.tape) throw std::logic_error(std::string(what) + ": operands live on different tapes");
}

inline long clamp_index(long i, long n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

enum class PadMode { kZero, kReplicate };

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::kZero;
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
  PadMode mode;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return ho * wo; }
};

/// Unfolds one CHW image into a [C*k*k, Ho*Wo] patch matrix.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const long h = static_cast<long>(g.h), w = static_cast<long>(g.w);
  const long pad = static_cast<long>(g.pad), stride = static_cast<long>(g.stride);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        T* row = cols + r * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
          const bool row_out = iy < 0 || iy >= h;
          if (g.mode == PadMode::kReplicate) iy = clamp_index(iy, h);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
            T v;
            if (g.mode == PadMode::kReplicate) {
              v = xc[iy * w + clamp_index(ix, w)];
            } else {
              v = (row_out || ix < 0 || ix >= w) ? T{0} : xc[iy * w + ix];
            }
            row[oy * g.wo + ox] = v;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch-matrix gradients back onto the image.
template <class T>
void col2im_acc(const T* cols, const ConvGeometry& g, T* dx) {
  const long h = static_cast<long>(g.h), w = static_cast<long>(g.w);
  const long pad = static_cast<long>(g.pad), stride = static_cast<long>(g.stride);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    T* dxc = dx + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        const T* row = cols + r * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
          if (g.mode == PadMode::kZero && (iy < 0 || iy >= h)) continue;
          iy = clamp_index(iy, h);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
            if (g.mode == PadMode::kZero && (ix < 0 || ix >= w)) continue;
            dxc[iy * w + clamp_index(ix, w)] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation over NCHW input with an [O,C,k,k] kernel.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt,
              Conv2dOptions opt = {}) {
  detail::require_same_tape(x, weight, "conv2d");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  require_rank(xv.shape(), 4, "conv2d input");
  require_rank(wv.shape(), 4, "conv2d weight");
  if (opt.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (xv.dim(1) != wv.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(xv.dim(1)) + " channels but weight " +
                     shape_str(wv.shape()) + " expects " + std::to_string(wv.dim(1)));
  }
  if (wv.dim(2) != wv.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(wv.shape()));
  const std::size_t k = wv.dim(2);
  if (xv.dim(2) + 2 * opt.padding < k || xv.dim(3) + 2 * opt.padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(xv.shape()));
  }
  if (bias) {
    detail::require_same_tape(x, *bias, "conv2d");
    if (bias->value().rank() != 1 || bias->value().dim(0) != wv.dim(0)) {
      throw ShapeError("conv2d: bias " + shape_str(bias->value().shape()) + " does not match " +
                       std::to_string(wv.dim(0)) + " output channels");
    }
  }

  detail::ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), k, opt.stride, opt.padding,
                         (xv.dim(2) + 2 * opt.padding - k) / opt.stride + 1,
                         (xv.dim(3) + 2 * opt.padding - k) / opt.stride + 1, opt.pad_mode};

  Tensor<T> out({g.n, g.o, g.ho, g.wo});
  std::vector<T> cols(g.rows() * g.cols());
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.o * g.cols();
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(xv.data().data() + n * in_stride, g, cols.data());
    T* on = out.data().data() + n * out_stride;
    if (bias) {
      const auto& bv = bias->value();
      for (std::size_t o = 0; o < g.o; ++o) std::fill(on + o * g.cols(), on + (o + 1) * g.cols(), bv[o]);
    }
    kernels::gemm_acc(wv.data().data(), cols.data(), on, g.o, g.rows(), g.cols());
  }

  const bool rg = bias ? detail::any_requires_grad({x, weight, *bias}) : detail::any_requires_grad({x, weight});
  return x.tape->record(std::move(out), rg, [x, weight, bias, g](Tape<T>& tape, const Tensor<T>& gout) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(weight);
    const std::size_t in_stride = g.c * g.h * g.w;
    const std::size_t out_stride = g.o * g.cols();
    if (bias && tape.requires_grad(*bias)) {
      Tensor<T>& db = tape.grad_buffer(*bias);
      for (std::size_t n = 0; n < g.n; ++n) {
        const T* gn = gout.data().data() + n * out_stride;
        for (std::size_t o = 0; o < g.o; ++o) {
          T s{0};
          for (std::size_t p = 0; p < g.cols(); ++p) s += gn[o * g.cols() + p];
          db[o] += s;
        }
      }
    }
    const bool need_w = tape.requires_grad(weight);
    const bool need_x = tape.requires_grad(x);
    std::vector<T> cols(g.rows() * g.cols());
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* gn = gout.data().data() + n * out_stride;
      if (need_w) {
        detail::im2col(xv.data().data() + n * in_stride, g, cols.data());
        kernels::gemm_a_bt_acc(gn, cols.data(), tape.grad_buffer(weight).data().data(), g.o, g.rows(),
                               g.cols());
      }
      if (need_x) {
        std::fill(cols.begin(), cols.end(), T{0});
        kernels::gemm_at_b_acc(wv.data().data(), gn, cols.data(), g.o, g.rows(), g.cols());
        detail::col2im_acc(cols.data(), g, tape.grad_buffer(x).data().data() + n * in_stride);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-(n, c) normalization over the spatial plane, no affine parameters.
template <class T>
Var<T> instance_norm(Var<T> x, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "instance_norm");
  if (!(eps >= T{0})) throw ShapeError("instance_norm: eps must be >= 0");
  const std::size_t slices = xv.dim(0) * xv.dim(1);
  const std::size_t m = xv.dim(2) * xv.dim(3);
  Tensor<T> out(xv.shape());
  std::vector<T> inv_std(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const T* xs = xv.data().data() + s * m;
    T mean{0};
    for (std::size_t i = 0; i < m; ++i) mean += xs[i];
    mean /= static_cast<T>(m);
    T var{0};
    for (std::size_t i = 0; i < m; ++i) var += (xs[i] - mean) * (xs[i] - mean);
    var /= static_cast<T>(m);
    inv_std[s] = T{1} / std::sqrt(var + eps);
    T* os = out.data().data() + s * m;
    for (std::size_t i = 0; i < m; ++i) os[i] = (xs[i] - mean) * inv_std[s];
  }
  Tensor<T> xhat = out;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, xhat = std::move(xhat), inv_std = std::move(inv_std), m](Tape<T>& tape,
                                                                                  const Tensor<T>& g) {
                          Tensor<T>& dx = tape.grad_buffer(x);
                          for (std::size_t s = 0; s < inv_std.size(); ++s) {
                            const T* gs = g.data().data() + s * m;
                            const T* hs = xhat.data().data() + s * m;
                            T mg{0}, mgh{0};
                            for (std::size_t i = 0; i < m; ++i) {
                              mg += gs[i];
                              mgh += gs[i] * hs[i];
                            }
                            mg /= static_cast<T>(m);
                            mgh /= static_cast<T>(m);
                            T* ds = dx.data().data() + s * m;
                            for (std::size_t i = 0; i < m; ++i) ds[i] += inv_std[s] * (gs[i] - mg - hs[i] * mgh);
                          }
                        });
}

enum class Mode { kTrain, kEval };

/// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
  bool initialized = false;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : mean(Shape{channels}, T{0}), var(Shape{channels}, T{1}) {}

  /// Marks externally supplied statistics as usable in eval mode.
  void seed(Tensor<T> m, Tensor<T> v) {
    if (m.shape() != v.shape() || m.rank() != 1) throw ShapeError("batch_norm: bad seeded statistics");
    mean = std::move(m);
    var = std::move(v);
    initialized = true;
  }
};

struct BatchNormOptions {
  Mode mode = Mode::kTrain;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel normalization over (N, H, W) followed by gamma * x + beta.
/// Train mode uses batch statistics and updates `stats`; eval mode reads them.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, BatchNormOptions opt = {}) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "batch_norm");
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw ShapeError("batch_norm: gamma/beta must be [" + std::to_string(c) + "]");
  }
  if (stats.mean.shape() != Shape{c}) {
    throw ShapeError("batch_norm: running statistics sized for " + shape_str(stats.mean.shape()) +
                     ", input has " + std::to_string(c) + " channels");
  }
  if (!(opt.eps >= 0)) throw ShapeError("batch_norm: eps must be >= 0");
  const std::size_t count = n * plane;
  const T eps = static_cast<T>(opt.eps);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();

  std::vector<T> mean(c), inv_std(c);
  if (opt.mode == Mode::kTrain) {
    if (count < 2) throw ShapeError("batch_norm: train mode needs N*H*W >= 2 per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.data().data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean[ch] = s / static_cast<T>(count);
      T v{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.data().data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mean[ch]) * (p[i] - mean[ch]);
      }
      const T biased = v / static_cast<T>(count);
      inv_std[ch] = T{1} / std::sqrt(biased + eps);
      const T unbiased = v / static_cast<T>(count - 1);
      const T mom = static_cast<T>(opt.momentum);
      stats.mean[ch] = (T{1} - mom) * stats.mean[ch] + mom * mean[ch];
      stats.var[ch] = (T{1} - mom) * stats.var[ch] + mom * unbiased;
    }
    stats.initialized = true;
  } else {
    if (!stats.initialized) throw std::runtime_error("batch_norm: running statistics uninitialized");
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.mean[ch];
      inv_std[ch] = T{1} / std::sqrt(stats.var[ch] + eps);
    }
  }

  Tensor<T> xhat(xv.shape());
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (xv[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = h;
        out[off + i] = gv[ch] * h + bv[ch];
      }
    }
  }

  const bool train = opt.mode == Mode::kTrain;
  const bool rg = detail::any_requires_grad({x, gamma, beta});
  return x.tape->record(
      std::move(out), rg,
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, train](
          Tape<T>& tape, const Tensor<T>& g) {
        const auto& gv = tape.value(gamma);
        std::vector<T> sum_g(c, T{0}), sum_gh(c, T{0});
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g[ch] += g[off + i];
              sum_gh[ch] += g[off + i] * xhat[off + i];
            }
          }
        }
        if (tape.requires_grad(gamma)) {
          auto& dg = tape.grad_buffer(gamma);
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_gh[ch];
        }
        if (tape.requires_grad(beta)) {
          auto& db = tape.grad_buffer(beta);
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_g[ch];
        }
        if (!tape.requires_grad(x)) return;
        auto& dx = tape.grad_buffer(x);
        const T count = static_cast<T>(n * plane);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T scale = gv[ch] * inv_std[ch];
          const T mg = train ? sum_g[ch] / count : T{0};
          const T mgh = train ? sum_gh[ch] / count : T{0};
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              dx[off + i] += scale * (g[off + i] - mg - xhat[off + i] * mgh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise activations

namespace detail {

/// Elementwise map whose derivative is expressed through input and output.
template <class T, class F, class D>
Var<T> unary(Var<T> x, F f, D dfdx) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tensor<T> saved = out;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, saved = std::move(saved), dfdx](Tape<T>& tape, const Tensor<T>& g) {
                          const auto& xv = tape.value(x);
                          auto& dx = tape.grad_buffer(x);
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(xv[i], saved[i]);
                        });
}

}  // namespace detail

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> tanh_op(Var<T> x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

/// |x| with subgradient 0 at 0.
template <class T>
Var<T> abs_op(Var<T> x) {
  return detail::unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(Var<T> x, T s) {
  return detail::unary(
      x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, int axis, const char* what) {
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(what) + ": axis out of range for " + shape_str(s));
  }
  AxisSplit a{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) a.inner *= s[static_cast<std::size_t>(i)];
  return a;
}

}  // namespace detail

template <class T>
Var<T> softmax(Var<T> x, int axis = -1) {
  const Tensor<T>& xv = x.value();
  const auto a = detail::split_axis(xv.shape(), axis, "softmax");
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t in = 0; in < a.inner; ++in) {
      const std::size_t base = o * a.len * a.inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < a.len; ++j) mx = std::max(mx, xv[base + j * a.inner]);
      T s{0};
      for (std::size_t j = 0; j < a.len; ++j) {
        const T e = std::exp(xv[base + j * a.inner] - mx);
        out[base + j * a.inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < a.len; ++j) out[base + j * a.inner] /= s;
    }
  }
  Tensor<T> y = out;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, y = std::move(y), a](Tape<T>& tape, const Tensor<T>& g) {
                          auto& dx = tape.grad_buffer(x);
                          for (std::size_t o = 0; o < a.outer; ++o) {
                            for (std::size_t in = 0; in < a.inner; ++in) {
                              const std::size_t base = o * a.len * a.inner + in;
                              T dot{0};
                              for (std::size_t j = 0; j < a.len; ++j) {
                                dot += g[base + j * a.inner] * y[base + j * a.inner];
                              }
                              for (std::size_t j = 0; j < a.len; ++j) {
                                const std::size_t i = base + j * a.inner;
                                dx[i] += y[i] * (g[i] - dot);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Affine

/// [N,F] x [F,G] + [G].
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  require_rank(xv.shape(), 2, "linear input");
  require_rank(wv.shape(), 2, "linear weight");
  if (xv.dim(1) != wv.dim(0)) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                     shape_str(wv.shape()));
  }
  if (bv.shape() != Shape{wv.dim(1)}) {
    throw ShapeError("linear: bias " + shape_str(bv.shape()) + " must be [" + std::to_string(wv.dim(1)) + "]");
  }
  const std::size_t n = xv.dim(0), f = xv.dim(1), gdim = wv.dim(1);
  Tensor<T> out({n, gdim});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < gdim; ++j) out[i * gdim + j] = bv[j];
  }
  kernels::gemm_acc(xv.data().data(), wv.data().data(), out.data().data(), n, f, gdim);
  const bool rg = detail::any_requires_grad({x, weight, bias});
  return x.tape->record(std::move(out), rg, [x, weight, bias, n, f, gdim](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(bias)) {
      auto& db = tape.grad_buffer(bias);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < gdim; ++j) db[j] += g[i * gdim + j];
      }
    }
    if (tape.requires_grad(weight)) {
      // dW[F,G] += X^T[F,N] * G[N,G]
      kernels::gemm_at_b_acc(tape.value(x).data().data(), g.data().data(),
                             tape.grad_buffer(weight).data().data(), n, f, gdim);
    }
    if (tape.requires_grad(x)) {
      // dX[N,F] += G[N,G] * W^T
      kernels::gemm_a_bt_acc(g.data().data(), tape.value(weight).data().data(),
                             tape.grad_buffer(x).data().data(), n, f, gdim);
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial resampling and structural ops

template <class T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "upsample_nearest");
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor<T> out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t s = 0; s < nc; ++s) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(s * oh + y) * ow + xx] = xv[(s * h + y / factor) * w + xx / factor];
      }
    }
  }
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, nc, h, w, factor](Tape<T>& tape, const Tensor<T>& g) {
                          auto& dx = tape.grad_buffer(x);
                          const std::size_t oh = h * factor, ow = w * factor;
                          for (std::size_t s = 0; s < nc; ++s) {
                            for (std::size_t y = 0; y < oh; ++y) {
                              for (std::size_t xx = 0; xx < ow; ++xx) {
                                dx[(s * h + y / factor) * w + xx / factor] += g[(s * oh + y) * ow + xx];
                              }
                            }
                          }
                        });
}

/// Non-overlapping mean pooling with window and stride `factor`.
template <class T>
Var<T> avgpool2d(Var<T> x, std::size_t factor) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "avgpool2d");
  if (factor < 1) throw ShapeError("avgpool2d: factor must be >= 1");
  const std::size_t h = xv.dim(2), w = xv.dim(3);
  if (h % factor != 0 || w % factor != 0) {
    throw ShapeError("avgpool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by " + std::to_string(factor));
  }
  const std::size_t nc = xv.dim(0) * xv.dim(1), oh = h / factor, ow = w / factor;
  const T inv = T{1} / static_cast<T>(factor * factor);
  Tensor<T> out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t s = 0; s < nc; ++s) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[(s * oh + y / factor) * ow + xx / factor] += xv[(s * h + y) * w + xx];
      }
    }
  }
  for (auto& v : out.data()) v *= inv;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, nc, h, w, factor, inv](Tape<T>& tape, const Tensor<T>& g) {
                          auto& dx = tape.grad_buffer(x);
                          const std::size_t oh = h / factor, ow = w / factor;
                          for (std::size_t s = 0; s < nc; ++s) {
                            for (std::size_t y = 0; y < h; ++y) {
                              for (std::size_t xx = 0; xx < w; ++xx) {
                                dx[(s * h + y) * w + xx] += inv * g[(s * oh + y / factor) * ow + xx / factor];
                              }
                            }
                          }
                        });
}

/// [N,C,H,W] -> [N,C].
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "global_avg_pool");
  const std::size_t nc = xv.dim(0) * xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out({xv.dim(0), xv.dim(1)});
  for (std::size_t s = 0; s < nc; ++s) {
    T sum{0};
    for (std::size_t i = 0; i < plane; ++i) sum += xv[s * plane + i];
    out[s] = sum / static_cast<T>(plane);
  }
  return x.tape->record(std::move(out), x.requires_grad(), [x, nc, plane](Tape<T>& tape, const Tensor<T>& g) {
    auto& dx = tape.grad_buffer(x);
    const T inv = T{1} / static_cast<T>(plane);
    for (std::size_t s = 0; s < nc; ++s) {
      for (std::size_t i = 0; i < plane; ++i) dx[s * plane + i] += g[s] * inv;
    }
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(ax)] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p, "concat");
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (int i = 0; i < rank; ++i) {
      if (i != ax && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: dimension " + std::to_string(i) + " disagrees: " + shape_str(s0) + " vs " +
                         shape_str(s));
      }
    }
    out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    rg = rg || p.requires_grad();
  }
  const auto split = detail::split_axis(out_shape, ax, "concat");
  Tensor<T> out(out_shape);
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t len = v.dim(static_cast<std::size_t>(ax));
    lens.push_back(len);
    const std::size_t block = len * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.data().data() + o * block, block,
                  out.data().data() + (o * split.len + offset) * split.inner);
    }
    offset += len;
  }
  return parts[0].tape->record(std::move(out), rg, [parts, lens, split](Tape<T>& tape, const Tensor<T>& g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::size_t block = lens[k] * split.inner;
      if (tape.requires_grad(parts[k])) {
        auto& dx = tape.grad_buffer(parts[k]);
        for (std::size_t o = 0; o < split.outer; ++o) {
          const T* src = g.data().data() + (o * split.len + offset) * split.inner;
          T* dst = dx.data().data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += lens[k];
    }
  });
}

/// Contiguous slice [start, start+len) along `axis`; the inverse of concat.
template <class T>
Var<T> slice(Var<T> x, int axis, std::size_t start, std::size_t len) {
  const auto& xv = x.value();
  const auto split = detail::split_axis(xv.shape(), axis, "slice");
  if (len == 0 || start + len > split.len) throw ShapeError("slice: range out of bounds for " + shape_str(xv.shape()));
  Shape out_shape = xv.shape();
  const int rank = static_cast<int>(out_shape.size());
  out_shape[static_cast<std::size_t>(axis < 0 ? axis + rank : axis)] = len;
  Tensor<T> out(out_shape);
  const std::size_t block = len * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.data().data() + (o * split.len + start) * split.inner, block, out.data().data() + o * block);
  }
  return x.tape->record(std::move(out), x.requires_grad(), [x, split, start, block](Tape<T>& tape, const Tensor<T>& g) {
    auto& dx = tape.grad_buffer(x);
    for (std::size_t o = 0; o < split.outer; ++o) {
      T* dst = dx.data().data() + (o * split.len + start) * split.inner;
      for (std::size_t i = 0; i < block; ++i) dst[i] += g[o * block + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Binary elementwise and reductions

namespace detail {

template <class T>
void require_same_shape(Var<T> a, Var<T> b, const char* what) {
  require_same_tape(a, b, what);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), detail::any_requires_grad({a, b}), [a, b](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), detail::any_requires_grad({a, b}), [a, b](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, g);
    if (tape.requires_grad(b)) {
      auto& db = tape.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), detail::any_requires_grad({a, b}), [a, b](Tape<T>& tape, const Tensor<T>& g) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (tape.requires_grad(a)) {
      auto& da = tape.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b)) {
      auto& db = tape.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

/// Sum of all elements as a [1] tensor.
template <class T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T s{0};
  for (T v : xv.data()) s += v;
  return x.tape->record(Tensor<T>::scalar(s), x.requires_grad(), [x](Tape<T>& tape, const Tensor<T>& g) {
    auto& dx = tape.grad_buffer(x);
    for (auto& v : dx.data()) v += g[0];
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

}  // namespace afnn
