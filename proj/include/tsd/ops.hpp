#pragma once

// Differentiable primitives recorded on a Tape. All arithmetic is 64-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tsd/tape.hpp"

namespace tsd {

/// Floor applied to the second argument of a KL divergence before the log.
inline constexpr double kKlFloor = 1e-12;

namespace detail {

inline Tape& tape_of(const Var& a) {
  if (a.tape() == nullptr) throw TapeError("variable is not attached to a tape");
  a.tape()->check(a);
  return *a.tape();
}

inline Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  t.check(b);
  return t;
}

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(v.shape()),
                         -1);
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(sa) + " vs " + shape_str(sb), -1);
  }
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw DimensionError(std::string(op) + ": axis " + std::to_string(i) + " mismatch " +
                               shape_str(sa) + " vs " + shape_str(sb),
                           static_cast<int>(i));
    }
  }
}

template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return t.push(a.shape(), std::move(out), {ia}, [ia, deriv](Tape& tp, std::span<const double> g) {
    auto x = tp.value_of(ia);
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(a.shape(), std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::span<const double> g) {
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    auto& gb = tp.grad_of(ib);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(a.shape(), std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::span<const double> g) {
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    auto& gb = tp.grad_of(ib);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(a.shape(), std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::span<const double> g) {
    auto x = tp.value_of(ia);
    auto y = tp.value_of(ib);
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    auto& gb = tp.grad_of(ib);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
  });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Var relu(const Var& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double x) {
                         const double y = std::tanh(x);
                         return 1.0 - y * y;
                       });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                       [](double x) {
                         const double y = 1.0 / (1.0 + std::exp(-x));
                         return y * (1.0 - y);
                       });
}

inline Var abs(const Var& a) {
  return detail::unary(a, [](double x) { return std::fabs(x); },
                       [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

/// max(a, floor); gradient passes only where a > floor.
inline Var clamp_min(const Var& a, double floor) {
  return detail::unary(a, [floor](double x) { return x > floor ? x : floor; },
                       [floor](double x) { return x > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  double s = 0.0;
  for (double v : a.values()) s += v;
  const std::size_t ia = a.id();
  return t.push(Shape{1}, {s}, {ia}, [ia](Tape& tp, std::span<const double> g) {
    auto& ga = tp.grad_of(ia);
    for (double& x : ga) x += g[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var reshape(const Var& a, Shape shape) {
  Tape& t = detail::tape_of(a);
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape), -1);
  }
  auto av = a.values();
  const std::size_t ia = a.id();
  return t.push(std::move(shape), std::vector<double>(av.begin(), av.end()), {ia},
                [ia](Tape& tp, std::span<const double> g) {
                  auto& ga = tp.grad_of(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
}

/// [R,K] -> [R]
inline Var mean_rows(const Var& a) {
  detail::require_rank(a, 2, "mean_rows");
  Tape& t = detail::tape_of(a);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  auto av = a.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += av[r * cols + c];
    out[r] = s / static_cast<double>(cols);
  }
  const std::size_t ia = a.id();
  return t.push(Shape{rows}, std::move(out), {ia}, [ia, rows, cols](Tape& tp, std::span<const double> g) {
    auto& ga = tp.grad_of(ia);
    const double inv = 1.0 / static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r] * inv;
  });
}

/// x[R,K] / d[R], row-wise.
inline Var div_rows(const Var& x, const Var& d) {
  Tape& t = detail::tape_of(x, d);
  detail::require_rank(x, 2, "div_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (d.size() != rows) throw DimensionError("div_rows: divisor length must equal rows", 0);
  auto xv = x.values();
  auto dv = d.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / dv[r];
  const std::size_t ix = x.id(), id = d.id();
  return t.push(x.shape(), std::move(out), {ix, id},
                [ix, id, rows, cols](Tape& tp, std::span<const double> g) {
                  auto xs = tp.value_of(ix);
                  auto ds = tp.value_of(id);
                  auto& gx = tp.grad_of(ix);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] / ds[r];
                  auto& gd = tp.grad_of(id);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * xs[r * cols + c];
                    gd[r] -= acc / (ds[r] * ds[r]);
                  }
                });
}

/// Gathers rows of x[R,...] by index; repeated indices accumulate gradient.
inline Var select_rows(const Var& x, std::vector<std::size_t> index) {
  Tape& t = detail::tape_of(x);
  if (x.shape().empty()) throw DimensionError("select_rows: rank-0 input", -1);
  const std::size_t rows = x.shape()[0];
  const std::size_t width = x.size() / rows;
  auto xv = x.values();
  std::vector<double> out(index.size() * width);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw DimensionError("select_rows: row index out of range", 0);
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  const std::size_t ix = x.id();
  return t.push(std::move(shape), std::move(out), {ix},
                [ix, width, index = std::move(index)](Tape& tp, std::span<const double> g) {
                  auto& gx = tp.grad_of(ix);
                  for (std::size_t i = 0; i < index.size(); ++i)
                    for (std::size_t k = 0; k < width; ++k) gx[index[i] * width + k] += g[i * width + k];
                });
}

/// Columns [begin, begin+count) of x[R,K].
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  Tape& t = detail::tape_of(x);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin + count > cols || count == 0) throw DimensionError("slice_cols: range out of bounds", 1);
  auto xv = x.values();
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = xv[r * cols + begin + c];
  const std::size_t ix = x.id();
  return t.push(Shape{rows, count}, std::move(out), {ix},
                [ix, rows, cols, begin, count](Tape& tp, std::span<const double> g) {
                  auto& gx = tp.grad_of(ix);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += g[r * count + c];
                });
}

/// x[B,n,T] -> x[:, :, step] as [B,n].
inline Var time_step(const Var& x, std::size_t step) {
  detail::require_rank(x, 3, "time_step");
  Tape& t = detail::tape_of(x);
  const std::size_t batch = x.shape()[0], ch = x.shape()[1], len = x.shape()[2];
  if (step >= len) throw DimensionError("time_step: index beyond series length", 2);
  auto xv = x.values();
  std::vector<double> out(batch * ch);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] = xv[(b * ch + c) * len + step];
  const std::size_t ix = x.id();
  return t.push(Shape{batch, ch}, std::move(out), {ix},
                [ix, batch, ch, len, step](Tape& tp, std::span<const double> g) {
                  auto& gx = tp.grad_of(ix);
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t c = 0; c < ch; ++c) gx[(b * ch + c) * len + step] += g[b * ch + c];
                });
}

// ---------------------------------------------------------------------------
// Layers

/// y = x W^T (+ b). x[R,in], W[out,in], b[out].
inline Var linear(const Var& x, const Var& w, const Var* bias = nullptr) {
  Tape& t = detail::tape_of(x, w);
  detail::require_rank(x, 2, "linear input");
  detail::require_rank(w, 2, "linear weight");
  const std::size_t rows = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) {
    throw DimensionError("linear: input features " + std::to_string(in) + " vs weight " +
                             shape_str(w.shape()),
                         1);
  }
  if (bias != nullptr) {
    t.check(*bias);
    if (bias->size() != out_dim) throw DimensionError("linear: bias length must equal outputs", 0);
  }
  auto xv = x.values();
  auto wv = w.values();
  std::vector<double> out(rows * out_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv[r * in];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = &wv[o * in];
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[r * out_dim + o] = acc;
    }
  }
  std::vector<std::size_t> parents{x.id(), w.id()};
  std::size_t ib = 0;
  const bool has_bias = bias != nullptr;
  if (has_bias) {
    auto bv = bias->values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_dim; ++o) out[r * out_dim + o] += bv[o];
    ib = bias->id();
    parents.push_back(ib);
  }
  const std::size_t ix = x.id(), iw = w.id();
  const bool need_x = t.needs_grad(x);
  return t.push(Shape{rows, out_dim}, std::move(out), std::move(parents),
                [=](Tape& tp, std::span<const double> g) {
                  auto xs = tp.value_of(ix);
                  auto ws = tp.value_of(iw);
                  if (need_x) {
                    auto& gx = tp.grad_of(ix);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        const double go = g[r * out_dim + o];
                        if (go == 0.0) continue;
                        const double* wr = &ws[o * in];
                        double* gxr = &gx[r * in];
                        for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                      }
                  }
                  auto& gw = tp.grad_of(iw);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                      const double go = g[r * out_dim + o];
                      if (go == 0.0) continue;
                      const double* xr = &xs[r * in];
                      double* gwr = &gw[o * in];
                      for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                    }
                  if (has_bias) {
                    auto& gb = tp.grad_of(ib);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
                  }
                });
}

inline Var linear(const Var& x, const Var& w, const Var& bias) { return linear(x, w, &bias); }

/// 1D cross-correlation (no kernel flip). input [B,Cin,L] or [Cin,L];
/// kernel [Cout,Cin,K]. Output length floor((L + 2*padding - K)/stride) + 1.
inline Var conv1d(const Var& input, const Var& kernel, std::size_t stride = 1, std::size_t padding = 0) {
  Tape& t = detail::tape_of(input, kernel);
  const Shape is = input.shape();
  const Shape ks = kernel.shape();
  if (is.size() != 2 && is.size() != 3) {
    throw DimensionError("conv1d: input must be [channels,length] or [batch,channels,length], got " +
                             shape_str(is),
                         -1);
  }
  detail::require_rank(kernel, 3, "conv1d kernel");
  const bool batched = is.size() == 3;
  const std::size_t batch = batched ? is[0] : 1;
  const std::size_t cin = is[is.size() - 2];
  const std::size_t len = is[is.size() - 1];
  const std::size_t cout = ks[0], k = ks[2];
  const int ch_axis = static_cast<int>(is.size()) - 2;
  if (ks[1] != cin) {
    throw DimensionError("conv1d: kernel in_channels " + std::to_string(ks[1]) +
                             " != input channels " + std::to_string(cin) + " (input axis " +
                             std::to_string(ch_axis) + ")",
                         ch_axis);
  }
  if (stride < 1) throw DimensionError("conv1d: stride must be >= 1", ch_axis + 1);
  if (k > len + 2 * padding) {
    throw DimensionError("conv1d: kernel width " + std::to_string(k) + " exceeds padded length " +
                             std::to_string(len + 2 * padding) + " (input axis " +
                             std::to_string(ch_axis + 1) + ")",
                         ch_axis + 1);
  }
  const std::size_t lout = (len + 2 * padding - k) / stride + 1;

  // Valid output range for kernel tap kk: 0 <= l*stride + kk - padding < len.
  auto range = [=](std::size_t kk) {
    const long p = static_cast<long>(padding), kl = static_cast<long>(kk), s = static_cast<long>(stride);
    long lo = 0;
    if (p > kl) lo = (p - kl + s - 1) / s;
    long hi = (static_cast<long>(len) - 1 + p - kl);
    hi = hi < 0 ? 0 : hi / s + 1;
    if (hi > static_cast<long>(lout)) hi = static_cast<long>(lout);
    if (lo > hi) lo = hi;
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi));
  };

  auto xv = input.values();
  auto wv = kernel.values();
  std::vector<double> out(batch * cout * lout, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t co = 0; co < cout; ++co) {
      double* o = &out[(b * cout + co) * lout];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xin = &xv[(b * cin + ci) * len];
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double wk = wv[(co * cin + ci) * k + kk];
          const auto [lo, hi] = range(kk);
          if (stride == 1) {
            for (std::size_t l = lo; l < hi; ++l) o[l] += wk * xin[l + kk - padding];
          } else {
            for (std::size_t l = lo; l < hi; ++l) o[l] += wk * xin[l * stride + kk - padding];
          }
        }
      }
    }
  Shape oshape = batched ? Shape{batch, cout, lout} : Shape{cout, lout};
  const std::size_t ix = input.id(), iw = kernel.id();
  const bool need_x = t.needs_grad(input);
  return t.push(std::move(oshape), std::move(out), {ix, iw},
                [=](Tape& tp, std::span<const double> g) {
                  auto xs = tp.value_of(ix);
                  auto ws = tp.value_of(iw);
                  std::vector<double>* gx = need_x ? &tp.grad_of(ix) : nullptr;
                  auto& gw = tp.grad_of(iw);
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t co = 0; co < cout; ++co) {
                      const double* go = &g[(b * cout + co) * lout];
                      for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* xin = &xs[(b * cin + ci) * len];
                        for (std::size_t kk = 0; kk < k; ++kk) {
                          const auto [lo, hi] = range(kk);
                          const std::size_t widx = (co * cin + ci) * k + kk;
                          double acc = 0.0;
                          for (std::size_t l = lo; l < hi; ++l) acc += go[l] * xin[l * stride + kk - padding];
                          gw[widx] += acc;
                          if (gx != nullptr) {
                            const double wk = ws[widx];
                            double* gxin = &(*gx)[(b * cin + ci) * len];
                            for (std::size_t l = lo; l < hi; ++l) gxin[l * stride + kk - padding] += wk * go[l];
                          }
                        }
                      }
                    }
                });
}

/// Per-channel scale and shift on x[B,C,L]: y = gamma[c] * x + beta[c].
inline Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  detail::require_rank(x, 3, "channel_affine");
  Tape& t = detail::tape_of(x, gamma);
  t.check(beta);
  const std::size_t batch = x.shape()[0], ch = x.shape()[1], len = x.shape()[2];
  if (gamma.size() != ch || beta.size() != ch) throw DimensionError("channel_affine: channel count mismatch", 1);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t off = (b * ch + c) * len;
      for (std::size_t l = 0; l < len; ++l) out[off + l] = gv[c] * xv[off + l] + bv[c];
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.push(x.shape(), std::move(out), {ix, ig, ib}, [=](Tape& tp, std::span<const double> g) {
    auto xs = tp.value_of(ix);
    auto gs = tp.value_of(ig);
    auto& gx = tp.grad_of(ix);
    auto& gg = tp.grad_of(ig);
    auto& gb = tp.grad_of(ib);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t off = (b * ch + c) * len;
        double sg = 0.0, sb = 0.0;
        for (std::size_t l = 0; l < len; ++l) {
          gx[off + l] += g[off + l] * gs[c];
          sg += g[off + l] * xs[off + l];
          sb += g[off + l];
        }
        gg[c] += sg;
        gb[c] += sb;
      }
  });
}

/// Mean over the last axis: [B,C,L] -> [B,C].
inline Var global_avg_pool(const Var& x) {
  detail::require_rank(x, 3, "global_avg_pool");
  Tape& t = detail::tape_of(x);
  const std::size_t batch = x.shape()[0], ch = x.shape()[1], len = x.shape()[2];
  auto xv = x.values();
  std::vector<double> out(batch * ch);
  for (std::size_t i = 0; i < batch * ch; ++i) {
    double s = 0.0;
    for (std::size_t l = 0; l < len; ++l) s += xv[i * len + l];
    out[i] = s / static_cast<double>(len);
  }
  const std::size_t ix = x.id();
  return t.push(Shape{batch, ch}, std::move(out), {ix}, [=](Tape& tp, std::span<const double> g) {
    auto& gx = tp.grad_of(ix);
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t i = 0; i < batch * ch; ++i)
      for (std::size_t l = 0; l < len; ++l) gx[i * len + l] += g[i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Probability rows

/// Row-wise softmax(x / tau) on [R,C] with max subtraction.
inline Var softmax_rows(const Var& x, double tau = 1.0) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
  detail::require_rank(x, 2, "softmax_rows");
  Tape& t = detail::tape_of(x);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv[r * cols];
    double* yr = &out[r * cols];
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (yr[c] = std::exp((xr[c] - mx) / tau));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  const std::size_t ix = x.id();
  const std::size_t self = t.size();
  return t.push(x.shape(), std::move(out), {ix}, [=](Tape& tp, std::span<const double> g) {
    auto y = tp.value_of(self);
    auto& gx = tp.grad_of(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot) / tau;
    }
  });
}

/// Row-wise KL(p || q) on [R,C] -> [R]. q is floored at kKlFloor; 0 ln 0 = 0.
/// Rounding below zero is clamped to 0.
inline Var kl_rows(const Var& p, const Var& q) {
  Tape& t = detail::tape_of(p, q);
  detail::require_rank(p, 2, "kl_rows");
  detail::require_same_shape(p, q, "kl_rows");
  const std::size_t rows = p.shape()[0], cols = p.shape()[1];
  auto pv = p.values();
  auto qv = q.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double pi = pv[r * cols + c];
      if (pi > 0.0) s += pi * (std::log(pi) - std::log(std::max(qv[r * cols + c], kKlFloor)));
    }
    out[r] = std::max(s, 0.0);
  }
  const std::size_t ip = p.id(), iq = q.id();
  return t.push(Shape{rows}, std::move(out), {ip, iq}, [=](Tape& tp, std::span<const double> g) {
    auto ps = tp.value_of(ip);
    auto qs = tp.value_of(iq);
    auto& gp = tp.grad_of(ip);
    auto& gq = tp.grad_of(iq);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        const double qf = std::max(qs[i], kKlFloor);
        if (ps[i] > 0.0) gp[i] += g[r] * (std::log(ps[i]) - std::log(qf) + 1.0);
        if (qs[i] > kKlFloor) gq[i] -= g[r] * ps[i] / qf;
      }
  });
}

/// p[R,C] -> p[r, target[r]] as [R].
inline Var pick(const Var& p, std::vector<std::size_t> target) {
  detail::require_rank(p, 2, "pick");
  Tape& t = detail::tape_of(p);
  const std::size_t rows = p.shape()[0], cols = p.shape()[1];
  if (target.size() != rows) throw DimensionError("pick: one target per row required", 0);
  auto pv = p.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (target[r] >= cols) throw DimensionError("pick: target class out of range", 1);
    out[r] = pv[r * cols + target[r]];
  }
  const std::size_t ip = p.id();
  return t.push(Shape{rows}, std::move(out), {ip},
                [ip, cols, target = std::move(target)](Tape& tp, std::span<const double> g) {
                  auto& gp = tp.grad_of(ip);
                  for (std::size_t r = 0; r < target.size(); ++r) gp[r * cols + target[r]] += g[r];
                });
}

/// Collapses p[R,C] to the two-entry distribution (p_target, 1 - p_target).
inline Var target_vs_rest(const Var& p, std::vector<std::size_t> target) {
  detail::require_rank(p, 2, "target_vs_rest");
  Tape& t = detail::tape_of(p);
  const std::size_t rows = p.shape()[0], cols = p.shape()[1];
  if (target.size() != rows) throw DimensionError("target_vs_rest: one target per row required", 0);
  auto pv = p.values();
  std::vector<double> out(rows * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    if (target[r] >= cols) throw DimensionError("target_vs_rest: target class out of range", 1);
    const double pt = pv[r * cols + target[r]];
    double rest = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (c != target[r]) rest += pv[r * cols + c];
    out[2 * r] = pt;
    out[2 * r + 1] = rest;
  }
  const std::size_t ip = p.id();
  return t.push(Shape{rows, 2}, std::move(out), {ip},
                [ip, cols, target = std::move(target)](Tape& tp, std::span<const double> g) {
                  auto& gp = tp.grad_of(ip);
                  for (std::size_t r = 0; r < target.size(); ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                      gp[r * cols + c] += c == target[r] ? g[2 * r] : g[2 * r + 1];
                });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean negative log-softmax of the true class. logits [B,C].
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  Tape& t = detail::tape_of(logits);
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (labels.size() != rows) throw DimensionError("cross_entropy: one label per row required", 0);
  auto lv = logits.values();
  std::vector<double> prob(lv.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " outside [0," +
                              std::to_string(cols) + ")");
    }
    const double* lr = &lv[r * cols];
    const double mx = *std::max_element(lr, lr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(lr[c] - mx);
    const double logz = std::log(z) + mx;
    for (std::size_t c = 0; c < cols; ++c) prob[r * cols + c] = std::exp(lr[c] - logz);
    loss += logz - lr[labels[r]];
  }
  loss /= static_cast<double>(rows);
  const std::size_t il = logits.id();
  return t.push(Shape{1}, {loss}, {il},
                [il, rows, cols, labels, prob = std::move(prob)](Tape& tp, std::span<const double> g) {
                  auto& gl = tp.grad_of(il);
                  const double s = g[0] / static_cast<double>(rows);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                      gl[r * cols + c] += s * (prob[r * cols + c] - (c == labels[r] ? 1.0 : 0.0));
                });
}

/// Mean Smooth-L1 with transition at 1: 0.5 d^2 if |d| < 1 else |d| - 0.5.
inline Var smooth_l1(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  if (a.size() != b.size()) throw DimensionError("smooth_l1: length mismatch", 0);
  auto av = a.values();
  auto bv = b.values();
  const std::size_t n = av.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    const double ad = std::fabs(d);
    s += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  s /= static_cast<double>(n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(Shape{1}, {s}, {ia, ib}, [ia, ib, n](Tape& tp, std::span<const double> g) {
    auto as = tp.value_of(ia);
    auto bs = tp.value_of(ib);
    std::vector<double> dd(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = as[i] - bs[i];
      dd[i] = g[0] * (std::fabs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0)) / static_cast<double>(n);
    }
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += dd[i];
    auto& gb = tp.grad_of(ib);
    for (std::size_t i = 0; i < n; ++i) gb[i] -= dd[i];
  });
}

}  // namespace tsd
