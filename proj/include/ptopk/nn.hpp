#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ptopk/autodiff.hpp"
#include "ptopk/rng.hpp"
#include "ptopk/tensor.hpp"

namespace ptopk {

// Image tensors are (H, W, C); conv kernels are (Kh, Kw, Cin, Cout).

/// 3x3-style stride-1 convolution with zero 'same' padding (odd kernels).
inline Var conv2d_same(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  if (xv.rank() != 3 || wv.rank() != 4) throw std::invalid_argument("conv2d_same: need (H,W,C) and (Kh,Kw,Ci,Co)");
  const int h = xv.dim(0), wd = xv.dim(1), ci = xv.dim(2);
  const int kh = wv.dim(0), kw = wv.dim(1), co = wv.dim(3);
  if (wv.dim(2) != ci || bv.size() != co) throw std::invalid_argument("conv2d_same: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d_same: kernel dims must be odd");
  const int ph = kh / 2, pw = kw / 2;

  Tensor out({h, wd, co});
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < wd; ++xx)
      for (int oc = 0; oc < co; ++oc) {
        double acc = bv[oc];
        for (int dy = 0; dy < kh; ++dy) {
          const int sy = y + dy - ph;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < kw; ++dx) {
            const int sx = xx + dx - pw;
            if (sx < 0 || sx >= wd) continue;
            for (int ic = 0; ic < ci; ++ic)
              acc += static_cast<double>(xv[(static_cast<int64_t>(sy) * wd + sx) * ci + ic]) *
                     wv[((static_cast<int64_t>(dy) * kw + dx) * ci + ic) * co + oc];
          }
        }
        out[(static_cast<int64_t>(y) * wd + xx) * co + oc] = static_cast<float>(acc);
      }

  return t.append(std::move(out), "conv2d_same", {x.id, w.id, b.id},
                  [h, wd, ci, kh, kw, co, ph, pw](Tape& t, const Tape::Node& n) {
                    const Tensor& xv = detail::val(n, t, 0);
                    const Tensor& wv = detail::val(n, t, 1);
                    Tensor& gx = detail::grd(n, t, 0);
                    Tensor& gw = detail::grd(n, t, 1);
                    Tensor& gb = detail::grd(n, t, 2);
                    for (int y = 0; y < h; ++y)
                      for (int xx = 0; xx < wd; ++xx)
                        for (int oc = 0; oc < co; ++oc) {
                          const float gout = n.grad[(static_cast<int64_t>(y) * wd + xx) * co + oc];
                          if (gout == 0.0f) continue;
                          gb[oc] += gout;
                          for (int dy = 0; dy < kh; ++dy) {
                            const int sy = y + dy - ph;
                            if (sy < 0 || sy >= h) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                              const int sx = xx + dx - pw;
                              if (sx < 0 || sx >= wd) continue;
                              for (int ic = 0; ic < ci; ++ic) {
                                const int64_t xi = (static_cast<int64_t>(sy) * wd + sx) * ci + ic;
                                const int64_t wi = ((static_cast<int64_t>(dy) * kw + dx) * ci + ic) * co + oc;
                                gx[xi] += gout * wv[wi];
                                gw[wi] += gout * xv[xi];
                              }
                            }
                          }
                        }
                  });
}

inline void pool_out_dims(int h, int w, int k, int s, int& ho, int& wo) {
  if (k < 1 || s < 1) throw std::invalid_argument("pool: window and stride must be >= 1");
  if (h < k || w < k) throw std::invalid_argument("pool: window larger than input");
  ho = (h - k) / s + 1;
  wo = (w - k) / s + 1;
}

inline Var avg_pool2d(Var x, int k, int s) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3) throw std::invalid_argument("avg_pool2d: need (H,W,C)");
  const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  int ho = 0, wo = 0;
  pool_out_dims(h, w, k, s, ho, wo);
  Tensor out({ho, wo, c});
  for (int y = 0; y < ho; ++y)
    for (int xx = 0; xx < wo; ++xx)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            acc += xv[(static_cast<int64_t>(y * s + dy) * w + (xx * s + dx)) * c + ch];
        out[(static_cast<int64_t>(y) * wo + xx) * c + ch] = static_cast<float>(acc / (k * k));
      }
  return t.append(std::move(out), "avg_pool2d", {x.id}, [h, w, c, k, s, ho, wo](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        for (int ch = 0; ch < c; ++ch) {
          const float gw = n.grad[(static_cast<int64_t>(y) * wo + xx) * c + ch] / static_cast<float>(k * k);
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              g[(static_cast<int64_t>(y * s + dy) * w + (xx * s + dx)) * c + ch] += gw;
        }
  });
}

inline Var max_pool2d(Var x, int k, int s) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3) throw std::invalid_argument("max_pool2d: need (H,W,C)");
  const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  int ho = 0, wo = 0;
  pool_out_dims(h, w, k, s, ho, wo);
  Tensor out({ho, wo, c});
  std::vector<int64_t> arg(static_cast<size_t>(out.size()));
  for (int y = 0; y < ho; ++y)
    for (int xx = 0; xx < wo; ++xx)
      for (int ch = 0; ch < c; ++ch) {
        int64_t best = (static_cast<int64_t>(y * s) * w + (xx * s)) * c + ch;
        float bv = xv[best];
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const int64_t off = (static_cast<int64_t>(y * s + dy) * w + (xx * s + dx)) * c + ch;
            if (xv[off] > bv) {
              bv = xv[off];
              best = off;
            }
          }
        const int64_t oi = (static_cast<int64_t>(y) * wo + xx) * c + ch;
        out[oi] = bv;
        arg[static_cast<size_t>(oi)] = best;
      }
  return t.append(std::move(out), "max_pool2d", {x.id}, [arg = std::move(arg)](Tape& t, const Tape::Node& n) {
    Tensor& g = detail::grd(n, t, 0);
    for (int64_t i = 0; i < n.grad.size(); ++i) g[arg[static_cast<size_t>(i)]] += n.grad[i];
  });
}

/// y = W x + b for a 1-D x, with W shaped (out, in).
inline Var affine(Var w, Var x, Var b) {
  Tape& t = *x.tape;
  const int in = t.value(x).dim(0);
  const int out = t.value(w).dim(0);
  Var y = matmul(w, reshape(x, {in, 1}));
  return add(reshape(y, {out}), b);
}

// Parameter initializers.

inline Tensor normal_init(RngStream& rng, Shape shape, double stddev) {
  Tensor t = gaussian_sample(rng, shape);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(t[i] * stddev);
  return t;
}

inline Tensor he_conv_init(RngStream& rng, int kh, int kw, int ci, int co) {
  return normal_init(rng, {kh, kw, ci, co}, std::sqrt(2.0 / (kh * kw * ci)));
}

inline Tensor glorot_dense_init(RngStream& rng, int out, int in) {
  return normal_init(rng, {out, in}, std::sqrt(2.0 / (in + out)));
}

}  // namespace ptopk
