#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ccnn/core.hpp"
#include "ccnn/rng.hpp"
#include "ccnn/tensor.hpp"

namespace ccnn {

struct conv_spec {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
};

struct pool_spec {
  int k = 2;
  int s = 2;
};

inline int conv_out_dim(int in, int k, int s, int p) {
  return (in + 2 * p - k) / s + 1;
}

// ---- raw kernels ------------------------------------------------------------
// Weights are stored as (kh, kw, in_c, out_c) mapped onto tensor (n, h, w, c),
// so the out-channel axis is contiguous and the inner loops vectorize. The
// hot loops run over a whole output row at a time: consecutive output pixels
// carry independent accumulator chains, which keeps the FMA pipeline full.

#if defined(__GNUC__) && (defined(__x86_64__) || defined(__aarch64__))
#define CCNN_VEC_KERNELS 1
#endif

#ifdef CCNN_VEC_KERNELS
namespace simd {

template <typename T>
struct vec8_t {
  typedef T type __attribute__((vector_size(sizeof(T) * 8)));
};
template <typename T>
using vec8 = typename vec8_t<T>::type;

template <typename T>
inline vec8<T> load8(const T* p) {
  vec8<T> v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
template <typename T>
inline void store8(T* p, vec8<T> v) {
  __builtin_memcpy(p, &v, sizeof(v));
}

}  // namespace simd

// Stride-1 kernel for out-channel counts divisible by 8. Works on a
// zero-padded copy of the input so the reduction is branch-free; four output
// pixels are accumulated concurrently in registers.
template <typename T>
void conv2d_forward_blocked(const tensor<T>& x, const tensor<T>& w, const tensor<T>* bias,
                            const conv_spec& s, tensor<T>& y, bool accumulate) {
  using vec = simd::vec8<T>;
  const int IC = x.c, OC = w.c, H = x.h, W = x.w;
  const int OH = y.h, OW = y.w;
  const tensor<T>* src = &x;
  tensor<T> xpad;
  if (s.ph > 0 || s.pw > 0) {
    xpad = tensor<T>(x.n, H + 2 * s.ph, W + 2 * s.pw, IC);
    for (int n = 0; n < x.n; ++n)
      for (int iy = 0; iy < H; ++iy)
        std::copy(x.row(n, iy, 0), x.row(n, iy, 0) + static_cast<size_t>(W) * IC,
                  xpad.row(n, iy + s.ph, s.pw));
    src = &xpad;
  }
  const std::int64_t rows = static_cast<std::int64_t>(x.n) * OH;
  const std::int64_t flops_per_row =
      static_cast<std::int64_t>(OW) * s.kh * s.kw * IC * OC;
  const std::int64_t serial_below = flops_per_row > 0 ? (1 << 18) / flops_per_row : rows + 1;
  const size_t wstride_kx = static_cast<size_t>(IC) * OC;
  parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r) {
      const int n = static_cast<int>(r / OH);
      const int oy = static_cast<int>(r % OH);
      for (int oc0 = 0; oc0 < OC; oc0 += 8) {
        vec bv{};
        if (bias) bv = simd::load8(bias->data() + oc0);
        int ox = 0;
        for (; ox + 4 <= OW; ox += 4) {
          vec a0 = bv, a1 = bv, a2 = bv, a3 = bv;
          for (int ky = 0; ky < s.kh; ++ky) {
            const T* __restrict xr = src->row(n, oy + ky, ox);
            const T* wk = w.data() + (static_cast<size_t>(ky) * s.kw * IC) * OC + oc0;
            for (int kx = 0; kx < s.kw; ++kx) {
              const T* __restrict xc = xr + static_cast<size_t>(kx) * IC;
              const T* __restrict wr = wk + kx * wstride_kx;
              for (int ic = 0; ic < IC; ++ic) {
                const vec wv = simd::load8(wr + static_cast<size_t>(ic) * OC);
                a0 += xc[ic] * wv;
                a1 += xc[ic + IC] * wv;
                a2 += xc[ic + 2 * IC] * wv;
                a3 += xc[ic + 3 * IC] * wv;
              }
            }
          }
          T* out = y.row(n, oy, ox) + oc0;
          if (accumulate) {
            simd::store8(out, simd::load8(out) + a0);
            simd::store8(out + OC, simd::load8(out + OC) + a1);
            simd::store8(out + 2 * OC, simd::load8(out + 2 * OC) + a2);
            simd::store8(out + 3 * OC, simd::load8(out + 3 * OC) + a3);
          } else {
            simd::store8(out, a0);
            simd::store8(out + OC, a1);
            simd::store8(out + 2 * OC, a2);
            simd::store8(out + 3 * OC, a3);
          }
        }
        for (; ox < OW; ++ox) {
          vec a0 = bv;
          for (int ky = 0; ky < s.kh; ++ky) {
            const T* __restrict xr = src->row(n, oy + ky, ox);
            const T* wk = w.data() + (static_cast<size_t>(ky) * s.kw * IC) * OC + oc0;
            for (int kx = 0; kx < s.kw; ++kx) {
              const T* __restrict xc = xr + static_cast<size_t>(kx) * IC;
              const T* __restrict wr = wk + kx * wstride_kx;
              for (int ic = 0; ic < IC; ++ic)
                a0 += xc[ic] * simd::load8(wr + static_cast<size_t>(ic) * OC);
            }
          }
          T* out = y.row(n, oy, ox) + oc0;
          if (accumulate)
            simd::store8(out, simd::load8(out) + a0);
          else
            simd::store8(out, a0);
        }
      }
    }
  }, std::max<std::int64_t>(serial_below, 2));
}
// Weight-gradient companion to the blocked forward: padded input, one
// (ky, kx, ic) slice per worker, register accumulators per 8-channel chunk.
template <typename T>
void conv2d_backward_weights_blocked(const tensor<T>& x, const tensor<T>& dy,
                                     const conv_spec& s, tensor<T>& dw, tensor<T>* db) {
  using vec = simd::vec8<T>;
  const int IC = x.c, OC = dy.c, H = x.h, W = x.w;
  const int OH = dy.h, OW = dy.w;
  const tensor<T>* src = &x;
  tensor<T> xpad;
  if (s.ph > 0 || s.pw > 0) {
    xpad = tensor<T>(x.n, H + 2 * s.ph, W + 2 * s.pw, IC);
    for (int n = 0; n < x.n; ++n)
      for (int iy = 0; iy < H; ++iy)
        std::copy(x.row(n, iy, 0), x.row(n, iy, 0) + static_cast<size_t>(W) * IC,
                  xpad.row(n, iy + s.ph, s.pw));
    src = &xpad;
  }
  const std::int64_t slices = static_cast<std::int64_t>(s.kh) * s.kw * IC;
  parallel_for(slices, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t sl = lo; sl < hi; ++sl) {
      const int ic = static_cast<int>(sl % IC);
      const int kx = static_cast<int>((sl / IC) % s.kw);
      const int ky = static_cast<int>(sl / (static_cast<std::int64_t>(IC) * s.kw));
      T* __restrict wr = dw.row(ky, kx, ic);
      for (int oc0 = 0; oc0 < OC; oc0 += 8) {
        vec a0{}, a1{}, a2{}, a3{};
        for (int n = 0; n < x.n; ++n) {
          for (int oy = 0; oy < OH; ++oy) {
            const T* __restrict xr = src->row(n, oy + ky, kx) + ic;
            const T* __restrict gr = dy.row(n, oy, 0) + oc0;
            int ox = 0;
            for (; ox + 4 <= OW; ox += 4) {
              const T* xi = xr + static_cast<size_t>(ox) * IC;
              const T* gi = gr + static_cast<size_t>(ox) * OC;
              a0 += xi[0] * simd::load8(gi);
              a1 += xi[IC] * simd::load8(gi + OC);
              a2 += xi[2 * IC] * simd::load8(gi + 2 * OC);
              a3 += xi[3 * IC] * simd::load8(gi + 3 * OC);
            }
            for (; ox < OW; ++ox)
              a0 += xr[static_cast<size_t>(ox) * IC] *
                    simd::load8(gr + static_cast<size_t>(ox) * OC);
          }
        }
        const vec total = (a0 + a1) + (a2 + a3);
        T lanes[8];
        simd::store8(lanes, total);
        for (int j = 0; j < 8; ++j) wr[oc0 + j] += lanes[j];
      }
    }
  }, 2);
  if (db) {
    T* __restrict b = db->data();
    for (int n = 0; n < dy.n; ++n)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          const T* __restrict g = dy.row(n, oy, ox);
          for (int oc = 0; oc < OC; ++oc) b[oc] += g[oc];
        }
  }
}
#endif  // CCNN_VEC_KERNELS

template <typename T>
void conv2d_forward(const tensor<T>& x, const tensor<T>& w, const tensor<T>* bias,
                    const conv_spec& s, tensor<T>& y, bool accumulate = false) {
#ifdef CCNN_VEC_KERNELS
  if (s.sh == 1 && s.sw == 1 && w.c % 8 == 0) {
    conv2d_forward_blocked(x, w, bias, s, y, accumulate);
    return;
  }
#endif
  const int IC = x.c, OC = w.c, H = x.h, W = x.w;
  const int OH = y.h, OW = y.w;
  const std::int64_t rows = static_cast<std::int64_t>(x.n) * OH;
  const std::int64_t flops_per_row =
      static_cast<std::int64_t>(OW) * s.kh * s.kw * IC * OC;
  const std::int64_t serial_below = flops_per_row > 0 ? (1 << 18) / flops_per_row : rows + 1;
  parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<T> acc_row(static_cast<size_t>(OW) * OC);
    for (std::int64_t r = lo; r < hi; ++r) {
      const int n = static_cast<int>(r / OH);
      const int oy = static_cast<int>(r % OH);
      const int iy0 = oy * s.sh - s.ph;
      T* __restrict acc = acc_row.data();
      if (bias) {
        const T* __restrict bp = bias->data();
        for (int ox = 0; ox < OW; ++ox)
          for (int oc = 0; oc < OC; ++oc) acc[ox * OC + oc] = bp[oc];
      } else {
        std::fill(acc_row.begin(), acc_row.end(), T(0));
      }
      for (int ky = 0; ky < s.kh; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= H) continue;
        const T* __restrict xrow = x.row(n, iy, 0);
        for (int kx = 0; kx < s.kw; ++kx) {
          // valid ox range: 0 <= ox*sw - pw + kx < W
          const int shift = kx - s.pw;
          int ox_lo = 0, ox_hi = OW;
          if (s.sw == 1) {
            ox_lo = std::max(0, -shift);
            ox_hi = std::min(OW, W - shift);
          }
          const T* wp = w.row(ky, kx, 0);
          for (int ic = 0; ic < IC; ++ic) {
            const T* __restrict wr = wp + static_cast<size_t>(ic) * OC;
            if (s.sw == 1) {
              const T* __restrict xi = xrow + static_cast<size_t>(ox_lo + shift) * IC + ic;
              T* __restrict ar = acc + static_cast<size_t>(ox_lo) * OC;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                const T xv = *xi;
                for (int oc = 0; oc < OC; ++oc) ar[oc] += xv * wr[oc];
                xi += IC;
                ar += OC;
              }
            } else {
              for (int ox = 0; ox < OW; ++ox) {
                const int ix = ox * s.sw + shift;
                if (ix < 0 || ix >= W) continue;
                const T xv = xrow[static_cast<size_t>(ix) * IC + ic];
                T* __restrict ar = acc + static_cast<size_t>(ox) * OC;
                for (int oc = 0; oc < OC; ++oc) ar[oc] += xv * wr[oc];
              }
            }
          }
        }
      }
      T* __restrict out = y.row(n, oy, 0);
      if (accumulate) {
        for (int i = 0; i < OW * OC; ++i) out[i] += acc[i];
      } else {
        for (int i = 0; i < OW * OC; ++i) out[i] = acc[i];
      }
    }
  }, std::max<std::int64_t>(serial_below, 2));
}

// Accumulates into dx. For stride-1 convolutions the input gradient is itself
// a convolution of dy with the spatially flipped, io-transposed kernel, which
// reuses the fast forward path. The general strided case falls back to a
// per-sample scatter.
template <typename T>
void conv2d_backward_input(const tensor<T>& dy, const tensor<T>& w, const conv_spec& s,
                           tensor<T>& dx) {
  const int IC = dx.c, OC = w.c;
  if (s.sh == 1 && s.sw == 1 && s.kh - 1 - s.ph >= 0 && s.kw - 1 - s.pw >= 0) {
    // Pad the flipped kernel's output side to a multiple of 8 so the blocked
    // forward path applies; the padded channels stay zero and are dropped.
    const int ICP = (IC + 7) & ~7;
    tensor<T> wt(s.kh, s.kw, OC, ICP);
    for (int ky = 0; ky < s.kh; ++ky)
      for (int kx = 0; kx < s.kw; ++kx)
        for (int ic = 0; ic < IC; ++ic) {
          const T* src = w.row(ky, kx, ic);
          T* dst = wt.row(s.kh - 1 - ky, s.kw - 1 - kx, 0) + ic;
          for (int oc = 0; oc < OC; ++oc) dst[static_cast<size_t>(oc) * ICP] = src[oc];
        }
    conv_spec flip{s.kh, s.kw, 1, 1, s.kh - 1 - s.ph, s.kw - 1 - s.pw};
    if (ICP == IC) {
      conv2d_forward(dy, wt, static_cast<const tensor<T>*>(nullptr), flip, dx, true);
      return;
    }
    tensor<T> tmp(dx.n, dx.h, dx.w, ICP);
    conv2d_forward(dy, wt, static_cast<const tensor<T>*>(nullptr), flip, tmp, false);
    const std::int64_t cells = static_cast<std::int64_t>(dx.n) * dx.h * dx.w;
    for (std::int64_t i = 0; i < cells; ++i) {
      const T* __restrict src = tmp.data() + i * ICP;
      T* __restrict dst = dx.data() + i * IC;
      for (int ic = 0; ic < IC; ++ic) dst[ic] += src[ic];
    }
    return;
  }
  tensor<T> wt(s.kh, s.kw, OC, IC);
  for (int ky = 0; ky < s.kh; ++ky)
    for (int kx = 0; kx < s.kw; ++kx)
      for (int ic = 0; ic < IC; ++ic) {
        const T* src = w.row(ky, kx, ic);
        for (int oc = 0; oc < OC; ++oc)
          wt.at(s.kh - 1 - ky, s.kw - 1 - kx, oc, ic) = src[oc];
      }
  parallel_for(dx.n, [&](std::int64_t nlo, std::int64_t nhi) {
    for (std::int64_t n = nlo; n < nhi; ++n) {
      for (int oy = 0; oy < dy.h; ++oy) {
        const int iy0 = oy * s.sh - s.ph;
        for (int ox = 0; ox < dy.w; ++ox) {
          const int ix0 = ox * s.sw - s.pw;
          const T* __restrict g = dy.row(static_cast<int>(n), oy, ox);
          for (int ky = 0; ky < s.kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= dx.h) continue;
            for (int kx = 0; kx < s.kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= dx.w) continue;
              T* __restrict xg = dx.row(static_cast<int>(n), iy, ix);
              const T* wp = wt.row(s.kh - 1 - ky, s.kw - 1 - kx, 0);
              for (int oc = 0; oc < OC; ++oc) {
                const T gv = g[oc];
                const T* __restrict wr = wp + static_cast<size_t>(oc) * IC;
                for (int ic = 0; ic < IC; ++ic) xg[ic] += gv * wr[ic];
              }
            }
          }
        }
      }
    }
  }, 1);
}

// Accumulates into dw / db. Each worker owns a disjoint (ky, kx, ic) slice of
// dw, so accumulation order is fixed; four interleaved accumulators break the
// FMA dependency chain over the long spatial reduction.
template <typename T>
void conv2d_backward_weights(const tensor<T>& x, const tensor<T>& dy, const conv_spec& s,
                             tensor<T>& dw, tensor<T>* db) {
  const int IC = x.c, OC = dy.c;
#ifdef CCNN_VEC_KERNELS
  if (s.sh == 1 && s.sw == 1 && OC % 8 == 0) {
    conv2d_backward_weights_blocked(x, dy, s, dw, db);
    return;
  }
#endif
  const std::int64_t slices = static_cast<std::int64_t>(s.kh) * s.kw * IC;
  parallel_for(slices, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<T> acc(static_cast<size_t>(4) * OC);
    for (std::int64_t sl = lo; sl < hi; ++sl) {
      const int ic = static_cast<int>(sl % IC);
      const int kx = static_cast<int>((sl / IC) % s.kw);
      const int ky = static_cast<int>(sl / (static_cast<std::int64_t>(IC) * s.kw));
      std::fill(acc.begin(), acc.end(), T(0));
      T* __restrict a0 = acc.data();
      T* __restrict a1 = acc.data() + OC;
      T* __restrict a2 = acc.data() + 2 * OC;
      T* __restrict a3 = acc.data() + 3 * OC;
      for (int n = 0; n < x.n; ++n) {
        for (int oy = 0; oy < dy.h; ++oy) {
          const int iy = oy * s.sh - s.ph + ky;
          if (iy < 0 || iy >= x.h) continue;
          int ox_lo = 0, ox_hi = dy.w;
          const int shift = kx - s.pw;
          if (s.sw == 1) {
            ox_lo = std::max(0, -shift);
            ox_hi = std::min(dy.w, x.w - shift);
          }
          const T* __restrict xrow = x.row(n, iy, 0);
          const T* __restrict grow = dy.row(n, oy, 0);
          int ox = ox_lo;
          if (s.sw == 1) {
            for (; ox + 4 <= ox_hi; ox += 4) {
              const T x0 = xrow[static_cast<size_t>(ox + shift) * IC + ic];
              const T x1 = xrow[static_cast<size_t>(ox + 1 + shift) * IC + ic];
              const T x2 = xrow[static_cast<size_t>(ox + 2 + shift) * IC + ic];
              const T x3 = xrow[static_cast<size_t>(ox + 3 + shift) * IC + ic];
              const T* __restrict g0 = grow + static_cast<size_t>(ox) * OC;
              const T* __restrict g1 = g0 + OC;
              const T* __restrict g2 = g1 + OC;
              const T* __restrict g3 = g2 + OC;
              for (int oc = 0; oc < OC; ++oc) {
                a0[oc] += x0 * g0[oc];
                a1[oc] += x1 * g1[oc];
                a2[oc] += x2 * g2[oc];
                a3[oc] += x3 * g3[oc];
              }
            }
          }
          for (; ox < ox_hi; ++ox) {
            const int ix = ox * s.sw + shift;
            if (ix < 0 || ix >= x.w) continue;
            const T xv = xrow[static_cast<size_t>(ix) * IC + ic];
            const T* __restrict g = grow + static_cast<size_t>(ox) * OC;
            for (int oc = 0; oc < OC; ++oc) a0[oc] += xv * g[oc];
          }
        }
      }
      T* __restrict wr = dw.row(ky, kx, ic);
      for (int oc = 0; oc < OC; ++oc) wr[oc] += a0[oc] + a1[oc] + a2[oc] + a3[oc];
    }
  }, 4);
  if (db) {
    T* __restrict b = db->data();
    for (int n = 0; n < dy.n; ++n)
      for (int oy = 0; oy < dy.h; ++oy)
        for (int ox = 0; ox < dy.w; ++ox) {
          const T* __restrict g = dy.row(n, oy, ox);
          for (int oc = 0; oc < OC; ++oc) b[oc] += g[oc];
        }
  }
}

// ---- tape -------------------------------------------------------------------
// Reverse-mode tape. Ops append nodes in topological order; backward() walks
// the tape in reverse. Leaf nodes reference caller-owned tensors so parameters
// are never copied per step.

template <typename T>
class tape {
 public:
  struct var {
    int i = -1;
    bool valid() const { return i >= 0; }
  };

  explicit tape(bool train_mode, std::uint64_t dropout_seed = 0)
      : train_mode_(train_mode), drop_rng_(dropout_seed) {}

  bool train_mode() const { return train_mode_; }

  var constant(tensor<T> v) {
    return push(std::move(v), nullptr, false, {});
  }

  // External storage; the caller keeps `data` alive for the tape's lifetime.
  // Registering the same tensor twice returns the original node so its
  // gradient accumulates in one place.
  var leaf(const tensor<T>& data, bool requires_grad) {
    auto it = leaves_.find(&data);
    if (it != leaves_.end()) return var{it->second};
    var v = push(tensor<T>{}, &data, requires_grad, {});
    leaves_.emplace(&data, v.i);
    return v;
  }

  // Gradient accumulated for an external tensor, or nullptr if the tensor was
  // never registered or not reached by the loss.
  const tensor<T>* grad_for(const tensor<T>& data) const {
    auto it = leaves_.find(&data);
    if (it == leaves_.end()) return nullptr;
    const tensor<T>& g = nodes_[it->second].grad;
    return g.empty() ? nullptr : &g;
  }

  const tensor<T>& val(var v) const {
    const node& nd = nodes_[check(v)];
    return nd.ext ? *nd.ext : nd.own;
  }

  // Valid after backward(); empty for nodes the loss does not reach.
  const tensor<T>& grad(var v) const { return nodes_[check(v)].grad; }

  var conv2d(var x, var w, var bias, const conv_spec& s, const std::string& name) {
    const tensor<T>& xv = val(x);
    const tensor<T>& wv = val(w);
    if (xv.c != wv.w)
      throw error(name + ": input has " + std::to_string(xv.c) + " channels, weights expect " +
                  std::to_string(wv.w));
    if (wv.n != s.kh || wv.h != s.kw)
      throw error(name + ": weight tensor does not match kernel spec");
    const int oh = conv_out_dim(xv.h, s.kh, s.sh, s.ph);
    const int ow = conv_out_dim(xv.w, s.kw, s.sw, s.pw);
    if (oh <= 0 || ow <= 0) throw error(name + ": output would be empty");
    tensor<T> y(xv.n, oh, ow, wv.c);
    conv2d_forward(xv, wv, bias.valid() ? &val(bias) : nullptr, s, y);
    var out = push(std::move(y), nullptr, needs(x) || needs(w) || (bias.valid() && needs(bias)), {x, w, bias});
    nodes_[out.i].back = [this, x, w, bias, s, out] {
      const tensor<T>& gy = nodes_[out.i].grad;
      if (needs(x)) conv2d_backward_input(gy, val(w), s, grad_buf(x));
      if (needs(w))
        conv2d_backward_weights(val(x), gy, s, grad_buf(w),
                                bias.valid() && needs(bias) ? &grad_buf(bias) : nullptr);
    };
    return out;
  }

  // Fully connected: flattens each sample of x and maps it to out_c values.
  var dense(var x, var w, var bias, const std::string& name) {
    const tensor<T>& xv = val(x);
    const tensor<T>& wv = val(w);
    const int in = xv.h * xv.w * xv.c;
    const int oc = wv.c;
    if (wv.w != in)
      throw error(name + ": dense expects " + std::to_string(wv.w) + " inputs, got " +
                  std::to_string(in));
    tensor<T> y(xv.n, 1, 1, oc);
    const tensor<T>& bv = val(bias);
    for (int n = 0; n < xv.n; ++n) {
      T* __restrict out = y.row(n, 0, 0);
      for (int o = 0; o < oc; ++o) out[o] = bv.v[o];
      const T* xn = xv.row(n, 0, 0);
      for (int i = 0; i < in; ++i) {
        const T xi = xn[i];
        const T* __restrict wr = wv.data() + static_cast<size_t>(i) * oc;
        for (int o = 0; o < oc; ++o) out[o] += xi * wr[o];
      }
    }
    var out = push(std::move(y), nullptr, needs(x) || needs(w) || needs(bias), {x, w, bias});
    nodes_[out.i].back = [this, x, w, bias, in, oc, out] {
      const tensor<T>& gy = nodes_[out.i].grad;
      const tensor<T>& xv = val(x);
      const tensor<T>& wv = val(w);
      for (int n = 0; n < xv.n; ++n) {
        const T* g = gy.row(n, 0, 0);
        if (needs(x)) {
          T* gx = grad_buf(x).row(n, 0, 0);
          for (int i = 0; i < in; ++i) {
            const T* wr = wv.data() + static_cast<size_t>(i) * oc;
            T acc = T(0);
            for (int o = 0; o < oc; ++o) acc += g[o] * wr[o];
            gx[i] += acc;
          }
        }
        if (needs(w)) {
          const T* xn = xv.row(n, 0, 0);
          tensor<T>& gw = grad_buf(w);
          for (int i = 0; i < in; ++i) {
            T* __restrict wr = gw.data() + static_cast<size_t>(i) * oc;
            const T xi = xn[i];
            for (int o = 0; o < oc; ++o) wr[o] += xi * g[o];
          }
        }
        if (needs(bias)) {
          T* gb = grad_buf(bias).data();
          for (int o = 0; o < oc; ++o) gb[o] += g[o];
        }
      }
    };
    return out;
  }

  var relu(var x) {
    const tensor<T>& xv = val(x);
    tensor<T> y = xv;
    for (auto& e : y.v)
      if (e < T(0)) e = T(0);
    var out = push(std::move(y), nullptr, needs(x), {x});
    nodes_[out.i].back = [this, x, out] {
      if (!needs(x)) return;
      const tensor<T>& gy = nodes_[out.i].grad;
      const tensor<T>& xv = val(x);
      tensor<T>& gx = grad_buf(x);
      for (size_t i = 0; i < xv.size(); ++i)
        if (xv.v[i] > T(0)) gx.v[i] += gy.v[i];
    };
    return out;
  }

  // Max pool with implicit zero output for any window fully outside; windows
  // are never padded here (pad 0). Argmax indices are recorded for backward.
  var maxpool(var x, const pool_spec& p, const std::string& name) {
    const tensor<T>& xv = val(x);
    if (xv.h < p.k || xv.w < p.k)
      throw error(name + ": pool window larger than input " + xv.shape_str());
    const int oh = conv_out_dim(xv.h, p.k, p.s, 0);
    const int ow = conv_out_dim(xv.w, p.k, p.s, 0);
    tensor<T> y(xv.n, oh, ow, xv.c);
    auto arg = std::make_shared<std::vector<std::int64_t>>(y.size());
    for (int n = 0; n < xv.n; ++n)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T* out = y.row(n, oy, ox);
          std::int64_t* ar =
              arg->data() + ((static_cast<std::int64_t>(n) * oh + oy) * ow + ox) * xv.c;
          for (int c = 0; c < xv.c; ++c) {
            T best{};
            std::int64_t best_idx = -1;
            for (int ky = 0; ky < p.k; ++ky)
              for (int kx = 0; kx < p.k; ++kx) {
                const int iy = oy * p.s + ky, ix = ox * p.s + kx;
                std::int64_t idx =
                    ((static_cast<std::int64_t>(n) * xv.h + iy) * xv.w + ix) * xv.c + c;
                T v = xv.v[idx];
                if (best_idx < 0 || v > best) {
                  best = v;
                  best_idx = idx;
                }
              }
            out[c] = best;
            ar[c] = best_idx;
          }
        }
    var out = push(std::move(y), nullptr, needs(x), {x});
    nodes_[out.i].back = [this, x, out, arg] {
      if (!needs(x)) return;
      const tensor<T>& gy = nodes_[out.i].grad;
      tensor<T>& gx = grad_buf(x);
      for (size_t i = 0; i < gy.size(); ++i) gx.v[(*arg)[i]] += gy.v[i];
    };
    return out;
  }

  // Per-channel batch normalization. Training mode normalizes with batch
  // statistics and updates the caller's running stats in place; otherwise the
  // running stats are used as constants (the "frozen" mode gradient checks
  // need).
  var batchnorm(var x, var gamma, var beta, tensor<T>& run_mean, tensor<T>& run_var,
                T momentum, T eps, const std::string& name) {
    const tensor<T>& xv = val(x);
    const int C = xv.c;
    if (run_mean.c != C || val(gamma).c != C || val(beta).c != C)
      throw error(name + ": batchnorm parameter size mismatch");
    const std::int64_t m = static_cast<std::int64_t>(xv.n) * xv.h * xv.w;
    auto mean = std::make_shared<std::vector<T>>(C, T(0));
    auto istd = std::make_shared<std::vector<T>>(C, T(0));
    if (train_mode_) {
      std::vector<T> varc(C, T(0));
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = xv.data() + i * C;
        for (int c = 0; c < C; ++c) (*mean)[c] += row[c];
      }
      for (int c = 0; c < C; ++c) (*mean)[c] /= static_cast<T>(m);
      for (std::int64_t i = 0; i < m; ++i) {
        const T* row = xv.data() + i * C;
        for (int c = 0; c < C; ++c) {
          T d = row[c] - (*mean)[c];
          varc[c] += d * d;
        }
      }
      for (int c = 0; c < C; ++c) {
        varc[c] /= static_cast<T>(m);
        (*istd)[c] = T(1) / std::sqrt(varc[c] + eps);
        run_mean.v[c] = (T(1) - momentum) * run_mean.v[c] + momentum * (*mean)[c];
        run_var.v[c] = (T(1) - momentum) * run_var.v[c] + momentum * varc[c];
      }
    } else {
      for (int c = 0; c < C; ++c) {
        (*mean)[c] = run_mean.v[c];
        (*istd)[c] = T(1) / std::sqrt(run_var.v[c] + eps);
      }
    }
    tensor<T> y(xv.n, xv.h, xv.w, C);
    const tensor<T>& gv = val(gamma);
    const tensor<T>& bv = val(beta);
    for (std::int64_t i = 0; i < m; ++i) {
      const T* __restrict in = xv.data() + i * C;
      T* __restrict out = y.data() + i * C;
      for (int c = 0; c < C; ++c)
        out[c] = gv.v[c] * ((in[c] - (*mean)[c]) * (*istd)[c]) + bv.v[c];
    }
    const bool batch_stats = train_mode_;
    var out = push(std::move(y), nullptr, needs(x) || needs(gamma) || needs(beta),
                   {x, gamma, beta});
    nodes_[out.i].back = [this, x, gamma, beta, out, mean, istd, m, C, batch_stats] {
      const tensor<T>& gy = nodes_[out.i].grad;
      const tensor<T>& xv = val(x);
      const tensor<T>& gv = val(gamma);
      std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
      for (std::int64_t i = 0; i < m; ++i) {
        const T* g = gy.data() + i * C;
        const T* in = xv.data() + i * C;
        for (int c = 0; c < C; ++c) {
          sum_dy[c] += g[c];
          sum_dy_xhat[c] += g[c] * (in[c] - (*mean)[c]) * (*istd)[c];
        }
      }
      if (needs(gamma)) {
        tensor<T>& gg = grad_buf(gamma);
        for (int c = 0; c < C; ++c) gg.v[c] += sum_dy_xhat[c];
      }
      if (needs(beta)) {
        tensor<T>& gb = grad_buf(beta);
        for (int c = 0; c < C; ++c) gb.v[c] += sum_dy[c];
      }
      if (needs(x)) {
        tensor<T>& gx = grad_buf(x);
        if (batch_stats) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::int64_t i = 0; i < m; ++i) {
            const T* g = gy.data() + i * C;
            const T* in = xv.data() + i * C;
            T* gxr = gx.data() + i * C;
            for (int c = 0; c < C; ++c) {
              T xhat = (in[c] - (*mean)[c]) * (*istd)[c];
              gxr[c] += gv.v[c] * (*istd)[c] *
                        (g[c] - inv_m * sum_dy[c] - xhat * inv_m * sum_dy_xhat[c]);
            }
          }
        } else {
          for (std::int64_t i = 0; i < m; ++i) {
            const T* g = gy.data() + i * C;
            T* gxr = gx.data() + i * C;
            for (int c = 0; c < C; ++c) gxr[c] += g[c] * gv.v[c] * (*istd)[c];
          }
        }
      }
    };
    return out;
  }

  // Inverted dropout; identity when not in training mode.
  var dropout(var x, T rate) {
    require(rate >= T(0) && rate < T(1), "dropout: rate must be in [0, 1)");
    if (!train_mode_ || rate == T(0)) return x;
    const tensor<T>& xv = val(x);
    auto mask = std::make_shared<std::vector<T>>(xv.size());
    const T keep = T(1) - rate;
    const T scale = T(1) / keep;
    for (auto& mv : *mask) mv = drop_rng_.uniform() < static_cast<double>(keep) ? scale : T(0);
    tensor<T> y = xv;
    for (size_t i = 0; i < y.size(); ++i) y.v[i] *= (*mask)[i];
    var out = push(std::move(y), nullptr, needs(x), {x});
    nodes_[out.i].back = [this, x, out, mask] {
      if (!needs(x)) return;
      const tensor<T>& gy = nodes_[out.i].grad;
      tensor<T>& gx = grad_buf(x);
      for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += gy.v[i] * (*mask)[i];
    };
    return out;
  }

  // Stacks inputs along the channel axis.
  var concat(std::span<const var> xs, const std::string& name) {
    require(!xs.empty(), name + ": concat of nothing");
    const tensor<T>& first = val(xs[0]);
    int total_c = 0;
    for (var v : xs) {
      const tensor<T>& t = val(v);
      if (t.n != first.n || t.h != first.h || t.w != first.w)
        throw error(name + ": concat spatial dims mismatch (" + t.shape_str() + " vs " +
                    first.shape_str() + ")");
      total_c += t.c;
    }
    tensor<T> y(first.n, first.h, first.w, total_c);
    const std::int64_t m = static_cast<std::int64_t>(first.n) * first.h * first.w;
    int offset = 0;
    for (var v : xs) {
      const tensor<T>& t = val(v);
      for (std::int64_t i = 0; i < m; ++i) {
        const T* in = t.data() + i * t.c;
        T* out = y.data() + i * total_c + offset;
        for (int c = 0; c < t.c; ++c) out[c] = in[c];
      }
      offset += t.c;
    }
    bool any = false;
    for (var v : xs) any = any || needs(v);
    std::vector<var> deps(xs.begin(), xs.end());
    var out = push(std::move(y), nullptr, any, deps);
    nodes_[out.i].back = [this, deps, out, m, total_c] {
      const tensor<T>& gy = nodes_[out.i].grad;
      int off = 0;
      for (var v : deps) {
        const int ch = val(v).c;
        if (needs(v)) {
          tensor<T>& gx = grad_buf(v);
          for (std::int64_t i = 0; i < m; ++i) {
            const T* g = gy.data() + i * total_c + off;
            T* gr = gx.data() + i * ch;
            for (int c = 0; c < ch; ++c) gr[c] += g[c];
          }
        }
        off += ch;
      }
    };
    return out;
  }

  // Mean of squared differences over all elements (scalar output).
  var l2_loss(var pred, var target, const std::string& name) {
    const tensor<T>& pv = val(pred);
    const tensor<T>& tv = val(target);
    if (!pv.same_shape(tv))
      throw error(name + ": l2 loss shape mismatch " + pv.shape_str() + " vs " + tv.shape_str());
    tensor<T> y(1, 1, 1, 1);
    T acc = T(0);
    for (size_t i = 0; i < pv.size(); ++i) {
      T d = pv.v[i] - tv.v[i];
      acc += d * d;
    }
    const T inv_m = T(1) / static_cast<T>(pv.size());
    y.v[0] = acc * inv_m;
    var out = push(std::move(y), nullptr, needs(pred) || needs(target), {pred, target});
    nodes_[out.i].back = [this, pred, target, out, inv_m] {
      const T g = nodes_[out.i].grad.v[0] * T(2) * inv_m;
      const tensor<T>& pv = val(pred);
      const tensor<T>& tv = val(target);
      if (needs(pred)) {
        tensor<T>& gp = grad_buf(pred);
        for (size_t i = 0; i < pv.size(); ++i) gp.v[i] += g * (pv.v[i] - tv.v[i]);
      }
      if (needs(target)) {
        tensor<T>& gt = grad_buf(target);
        for (size_t i = 0; i < pv.size(); ++i) gt.v[i] -= g * (pv.v[i] - tv.v[i]);
      }
    };
    return out;
  }

  var add(var a, var b) {
    const tensor<T>& av = val(a);
    const tensor<T>& bv = val(b);
    check_same_shape(av, bv, "add");
    tensor<T> y = av;
    for (size_t i = 0; i < y.size(); ++i) y.v[i] += bv.v[i];
    var out = push(std::move(y), nullptr, needs(a) || needs(b), {a, b});
    nodes_[out.i].back = [this, a, b, out] {
      const tensor<T>& gy = nodes_[out.i].grad;
      for (var v : {a, b}) {
        if (!needs(v)) continue;
        tensor<T>& g = grad_buf(v);
        for (size_t i = 0; i < gy.size(); ++i) g.v[i] += gy.v[i];
      }
    };
    return out;
  }

  var scale(var a, T factor) {
    tensor<T> y = val(a);
    for (auto& e : y.v) e *= factor;
    var out = push(std::move(y), nullptr, needs(a), {a});
    nodes_[out.i].back = [this, a, out, factor] {
      if (!needs(a)) return;
      const tensor<T>& gy = nodes_[out.i].grad;
      tensor<T>& g = grad_buf(a);
      for (size_t i = 0; i < gy.size(); ++i) g.v[i] += gy.v[i] * factor;
    };
    return out;
  }

  void backward(var loss) {
    const tensor<T>& lv = val(loss);
    require(lv.size() == 1, "backward: loss must be scalar");
    tensor<T>& g = grad_buf(loss);
    g.v[0] = T(1);
    for (int i = loss.i; i >= 0; --i) {
      node& nd = nodes_[i];
      if (nd.back && !nd.grad.empty()) nd.back();
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct node {
    const tensor<T>* ext = nullptr;
    tensor<T> own;
    tensor<T> grad;
    std::function<void()> back;
    bool needs = false;
  };

  int check(var v) const {
    require(v.i >= 0 && v.i < static_cast<int>(nodes_.size()), "tape: invalid var");
    return v.i;
  }

  bool needs(var v) const { return v.valid() && nodes_[v.i].needs; }

  tensor<T>& grad_buf(var v) {
    node& nd = nodes_[check(v)];
    if (nd.grad.empty()) {
      const tensor<T>& value = nd.ext ? *nd.ext : nd.own;
      nd.grad = tensor<T>(value.n, value.h, value.w, value.c);
    }
    return nd.grad;
  }

  var push(tensor<T> own, const tensor<T>* ext, bool needs_grad, std::vector<var> /*deps*/) {
    node nd;
    nd.own = std::move(own);
    nd.ext = ext;
    nd.needs = needs_grad;
    nodes_.push_back(std::move(nd));
    return var{static_cast<int>(nodes_.size()) - 1};
  }

  bool train_mode_;
  rng drop_rng_;
  std::vector<node> nodes_;
  std::unordered_map<const tensor<T>*, int> leaves_;
};

}  // namespace ccnn
