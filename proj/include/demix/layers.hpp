#pragma once

// Differentiable layers over [batch, channels, freq, time] tensors. The heavy
// lifting is GEMM via Eigen; convolutions are lowered to im2col over tiles of
// output positions so the column buffer stays bounded on large inputs.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "demix/autograd.hpp"

namespace demix::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError("tensorops", std::string(op) + ": expected rank " + std::to_string(rank) +
                                      ", got " + shape_str(s));
}

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t positions() const { return ho * wo; }
  std::size_t patch() const { return cin * k * k; }
};

inline constexpr std::size_t kColBudget = std::size_t{1} << 22;  // elements per im2col tile

inline std::size_t tile_positions(const ConvGeom& g) {
  return std::clamp<std::size_t>(kColBudget / std::max<std::size_t>(g.patch(), 1), 64, g.positions());
}

/// Visits the output positions [p0, p0 + np) one output row at a time:
/// f(j, n, iy, ix0) for n consecutive positions starting at column offset j,
/// whose input row is iy and whose first input column is ix0 (steps of
/// `stride`). Rows outside the input are still visited.
template <class F>
void for_each_run(const ConvGeom& g, std::size_t p0, std::size_t np, std::size_t ky, std::size_t kx, F&& f) {
  std::size_t oy = p0 / g.wo, ox = p0 % g.wo, j = 0;
  while (j < np) {
    const std::size_t n = std::min(g.wo - ox, np - j);
    f(j, n, static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad),
      static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad));
    j += n;
    ox = 0;
    ++oy;
  }
}

/// col[(c, ky, kx), p - p0] for output positions p in [p0, p0 + np).
template <class T>
void im2col(const T* x, const ConvGeom& g, std::size_t p0, std::size_t np, T* col) {
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w), st = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for_each_run(g, p0, np, ky, kx, [&](std::size_t j, std::size_t n, long iy, long ix0) {
          T* dst = row + j;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst, n, T{0});
            return;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          if (st == 1) {
            const long n_l = static_cast<long>(n);
            const long lo = std::clamp(-ix0, 0L, n_l), hi = std::clamp(W - ix0, lo, n_l);
            std::fill(dst, dst + lo, T{0});
            std::copy(src + ix0 + lo, src + ix0 + hi, dst + lo);
            std::fill(dst + hi, dst + n_l, T{0});
            return;
          }
          for (std::size_t t = 0; t < n; ++t) {
            const long ix = ix0 + static_cast<long>(t) * st;
            dst[t] = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        });
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, std::size_t p0, std::size_t np, T* x) {
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w), st = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for_each_run(g, p0, np, ky, kx, [&](std::size_t j, std::size_t n, long iy, long ix0) {
          if (iy < 0 || iy >= H) return;
          const T* src = row + j;
          T* dst = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          if (st == 1) {
            const long n_l = static_cast<long>(n);
            const long lo = std::clamp(-ix0, 0L, n_l), hi = std::clamp(W - ix0, lo, n_l);
            for (long t = lo; t < hi; ++t) dst[ix0 + t] += src[t];
            return;
          }
          for (std::size_t t = 0; t < n; ++t) {
            const long ix = ix0 + static_cast<long>(t) * st;
            if (ix >= 0 && ix < W) dst[ix] += src[t];
          }
        });
      }
}

}  // namespace detail

/// 2-D convolution without bias. x: [B, Cin, H, W], w: [Cout, Cin, k, k].
/// Stride-2 layers reject odd spatial sizes instead of padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(w.shape(), 4, "conv2d weight");
  const std::size_t B = x.dim(0), cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != x.dim(1) || w.dim(3) != k)
    throw ShapeError("tensorops", "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                                      shape_str(x.shape()));
  const std::size_t H = x.dim(2), W = x.dim(3);
  if (stride > 1 && (H % stride || W % stride))
    throw ShapeError("tensorops", "conv2d: stride " + std::to_string(stride) +
                                      " needs spatial dims divisible by it, got " + shape_str(x.shape()));
  if (H + 2 * pad < k || W + 2 * pad < k)
    throw ShapeError("tensorops", "conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  const detail::ConvGeom g{x.dim(1), H, W, k, stride, pad, (H + 2 * pad - k) / stride + 1,
                           (W + 2 * pad - k) / stride + 1};
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out({B, cout, g.ho, g.wo});
  detail::ConstMatMap<T> wm(w.value().data(), cout, g.patch());
  const std::size_t tile = detail::tile_positions(g);
  std::vector<T> col;
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.value().data() + b * g.cin * H * W;
    detail::MatMap<T> ym(out.data() + b * cout * g.positions(), cout, g.positions());
    if (pointwise) {
      ym.noalias() = wm * detail::ConstMatMap<T>(xb, g.cin, g.positions());
      continue;
    }
    for (std::size_t p0 = 0; p0 < g.positions(); p0 += tile) {
      const std::size_t np = std::min(tile, g.positions() - p0);
      col.resize(g.patch() * np);
      detail::im2col(xb, g, p0, np, col.data());
      ym.middleCols(p0, np).noalias() = wm * detail::ConstMatMap<T>(col.data(), g.patch(), np);
    }
  }

  return make_result<T>("conv2d", std::move(out), {x, w}, [g, B, cout, pointwise, tile](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    auto* gx = detail::grad_of(*self.parents[0]);
    auto* gw = detail::grad_of(*self.parents[1]);
    detail::ConstMatMap<T> wm(wv.data(), cout, g.patch());
    std::vector<T> col, dcol;
    for (std::size_t b = 0; b < B; ++b) {
      const T* xb = xv.data() + b * g.cin * g.h * g.w;
      detail::ConstMatMap<T> dy(self.grad.data() + b * cout * g.positions(), cout, g.positions());
      if (pointwise) {
        if (gw)
          detail::MatMap<T>(gw->data(), cout, g.patch()).noalias() +=
              dy * detail::ConstMatMap<T>(xb, g.cin, g.positions()).transpose();
        if (gx)
          detail::MatMap<T>(gx->data() + b * g.cin * g.positions(), g.cin, g.positions()).noalias() +=
              wm.transpose() * dy;
        continue;
      }
      for (std::size_t p0 = 0; p0 < g.positions(); p0 += tile) {
        const std::size_t np = std::min(tile, g.positions() - p0);
        if (gw) {
          col.resize(g.patch() * np);
          detail::im2col(xb, g, p0, np, col.data());
          detail::MatMap<T>(gw->data(), cout, g.patch()).noalias() +=
              dy.middleCols(p0, np) * detail::ConstMatMap<T>(col.data(), g.patch(), np).transpose();
        }
        if (gx) {
          dcol.resize(g.patch() * np);
          detail::MatMap<T>(dcol.data(), g.patch(), np).noalias() = wm.transpose() * dy.middleCols(p0, np);
          detail::col2im_add(dcol.data(), g, p0, np, gx->data() + b * g.cin * g.h * g.w);
        }
      }
    }
  });
}

/// Transposed convolution with kernel == stride (non-overlapping), no bias.
/// x: [B, Cin, H, W], w: [Cin, Cout, s, s] -> [B, Cout, s*H, s*W].
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w) {
  detail::require_rank(x.shape(), 4, "conv_transpose2d input");
  detail::require_rank(w.shape(), 4, "conv_transpose2d weight");
  const std::size_t B = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t cout = w.dim(1), s = w.dim(2);
  if (w.dim(0) != cin || w.dim(3) != s)
    throw ShapeError("tensorops", "conv_transpose2d: weight " + shape_str(w.shape()) +
                                      " incompatible with input " + shape_str(x.shape()));
  const std::size_t hw = H * W, rows = cout * s * s;
  Tensor<T> out({B, cout, H * s, W * s});
  detail::ConstMatMap<T> wm(w.value().data(), cin, rows);
  detail::RowMat<T> z(rows, hw);
  for (std::size_t b = 0; b < B; ++b) {
    z.noalias() = wm.transpose() * detail::ConstMatMap<T>(x.value().data() + b * cin * hw, cin, hw);
    T* yb = out.data() + b * cout * hw * s * s;
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t a = 0; a < s; ++a)
        for (std::size_t c = 0; c < s; ++c) {
          const T* zr = z.data() + ((co * s + a) * s + c) * hw;
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
              yb[(co * H * s + i * s + a) * W * s + j * s + c] = zr[i * W + j];
        }
  }
  return make_result<T>("conv_transpose2d", std::move(out), {x, w},
                        [B, cin, H, W, cout, s, hw, rows](Node<T>& self) {
                          const auto& xv = self.parents[0]->value;
                          const auto& wv = self.parents[1]->value;
                          auto* gx = detail::grad_of(*self.parents[0]);
                          auto* gw = detail::grad_of(*self.parents[1]);
                          detail::ConstMatMap<T> wm(wv.data(), cin, rows);
                          detail::RowMat<T> dz(rows, hw);
                          for (std::size_t b = 0; b < B; ++b) {
                            const T* gy = self.grad.data() + b * cout * hw * s * s;
                            for (std::size_t co = 0; co < cout; ++co)
                              for (std::size_t a = 0; a < s; ++a)
                                for (std::size_t c = 0; c < s; ++c) {
                                  T* zr = dz.data() + ((co * s + a) * s + c) * hw;
                                  for (std::size_t i = 0; i < H; ++i)
                                    for (std::size_t j = 0; j < W; ++j)
                                      zr[i * W + j] = gy[(co * H * s + i * s + a) * W * s + j * s + c];
                                }
                            detail::ConstMatMap<T> xb(xv.data() + b * cin * hw, cin, hw);
                            if (gx)
                              detail::MatMap<T>(gx->data() + b * cin * hw, cin, hw).noalias() += wm * dz;
                            if (gw)
                              detail::MatMap<T>(gw->data(), cin, rows).noalias() += xb * dz.transpose();
                          }
                        });
}

/// Linear map along the frequency axis, shared across batch, channel and
/// time. x: [B, C, F, T], w: [Fout, F] -> [B, C, Fout, T].
template <class T>
Var<T> linear_freq(const Var<T>& x, const Var<T>& w) {
  detail::require_rank(x.shape(), 4, "linear_freq input");
  detail::require_rank(w.shape(), 2, "linear_freq weight");
  const std::size_t B = x.dim(0), C = x.dim(1), F = x.dim(2), Tn = x.dim(3), Fo = w.dim(0);
  if (w.dim(1) != F)
    throw ShapeError("tensorops", "linear_freq: weight " + shape_str(w.shape()) + " incompatible with input " +
                                      shape_str(x.shape()));
  Tensor<T> out({B, C, Fo, Tn});
  detail::ConstMatMap<T> wm(w.value().data(), Fo, F);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    detail::MatMap<T>(out.data() + bc * Fo * Tn, Fo, Tn).noalias() =
        wm * detail::ConstMatMap<T>(x.value().data() + bc * F * Tn, F, Tn);
  return make_result<T>("linear_freq", std::move(out), {x, w}, [B, C, F, Tn, Fo](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    auto* gx = detail::grad_of(*self.parents[0]);
    auto* gw = detail::grad_of(*self.parents[1]);
    detail::ConstMatMap<T> wm(self.parents[1]->value.data(), Fo, F);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      detail::ConstMatMap<T> dy(self.grad.data() + bc * Fo * Tn, Fo, Tn);
      if (gw)
        detail::MatMap<T>(gw->data(), Fo, F).noalias() +=
            dy * detail::ConstMatMap<T>(xv.data() + bc * F * Tn, F, Tn).transpose();
      if (gx) detail::MatMap<T>(gx->data() + bc * F * Tn, F, Tn).noalias() += wm.transpose() * dy;
    }
  });
}

/// Instance normalization per (item, channel) over the spatial plane, with a
/// learned per-channel scale and shift.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "instance_norm input");
  const std::size_t B = x.dim(0), C = x.dim(1), n = x.dim(2) * x.dim(3);
  if (gamma.value().size() != C || beta.value().size() != C)
    throw ShapeError("tensorops", "instance_norm: scale/shift size must equal channel count " + std::to_string(C));
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(B * C), means(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = x.value().data() + bc * n;
    T mu{0};
    for (std::size_t i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(n);
    const T r = T(1) / std::sqrt(var + eps);
    means[bc] = mu;
    inv_std[bc] = r;
    const T gm = gamma.value()[bc % C], bt = beta.value()[bc % C];
    T* dst = out.data() + bc * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] = gm * (src[i] - mu) * r + bt;
  }
  return make_result<T>(
      "instance_norm", std::move(out), {x, gamma, beta},
      [B, C, n, means = std::move(means), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        auto* gx = detail::grad_of(*self.parents[0]);
        auto* gg = detail::grad_of(*self.parents[1]);
        auto* gb = detail::grad_of(*self.parents[2]);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          const std::size_t c = bc % C;
          const T* src = xv.data() + bc * n;
          const T* dy = self.grad.data() + bc * n;
          const T mu = means[bc], r = inv_std[bc];
          T sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t i = 0; i < n; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (src[i] - mu) * r;
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (gx) {
            const T k = gv[c] * r;
            const T m_dy = sum_dy / static_cast<T>(n), m_dyx = sum_dy_xhat / static_cast<T>(n);
            T* dx = gx->data() + bc * n;
            for (std::size_t i = 0; i < n; ++i) dx[i] += k * (dy[i] - m_dy - (src[i] - mu) * r * m_dyx);
          }
        }
      });
}

}  // namespace demix::ad
