#pragma once

#include <algorithm>
#include <cmath>

#include "atm/array.hpp"

// Differentiable primitives. Every op:
//   * validates shapes up front and throws ShapeError/ArgumentError,
//   * computes the forward result into a fresh Array,
//   * if a tape is active and any input is tracked, records one backward
//     closure that accumulates into the tracked inputs' grad buffers.
// Feature maps are channel-last (B,H,W,C); the innermost loops run over the
// channel axis so gathers and matmuls stay stride-1.

namespace atm {

enum class Axis { height, width };

inline const char* axis_name(Axis a) {
  return a == Axis::height ? "height" : "width";
}

namespace detail {

template <class T>
inline bool should_record(std::initializer_list<const Array<T>*> ins) {
  if (!active_tape<T>()) return false;
  for (const Array<T>* a : ins)
    if (a->tracked()) return true;
  return false;
}

template <class T>
inline void prepare(Array<T>& out, std::initializer_list<Array<T>*> ins) {
  out.mark_tracked();
  for (Array<T>* a : ins)
    if (a->tracked()) a->ensure_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// affine: y[..., o] = sum_i x[..., i] * w[i, o] + b[o]
// ---------------------------------------------------------------------------
template <class T>
Array<T> affine(Array<T> x, Array<T> w, Array<T> b) {
  ATM_CHECK(w.rank() == 2, ShapeError, "affine: weight must be rank-2, got ",
            shape_str(w.shape()));
  const int64_t cin = w.dim(0), cout = w.dim(1);
  ATM_CHECK(x.rank() >= 1 && x.dim(x.rank() - 1) == cin, ShapeError,
            "affine: input ", shape_str(x.shape()),
            " does not end in weight input width ", shape_str(w.shape()));
  ATM_CHECK(b.rank() == 1 && b.dim(0) == cout, ShapeError,
            "affine: bias ", shape_str(b.shape()), " vs weight ",
            shape_str(w.shape()));

  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Array<T> y(out_shape);
  const int64_t rows = x.size() / cin;

  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = b.data();
  T* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    T* yr = yp + r * cout;
    for (int64_t o = 0; o < cout; ++o) yr[o] = bp[o];
    const T* xr = xp + r * cin;
    for (int64_t i = 0; i < cin; ++i) {
      const T xv = xr[i];
      if (xv == T(0)) continue;
      const T* wr = wp + i * cout;
      for (int64_t o = 0; o < cout; ++o) yr[o] += xv * wr[o];
    }
  }
  ATM_DEBUG_FINITE(y, "affine");

  if (detail::should_record<T>({&x, &w, &b})) {
    detail::prepare(y, {&x, &w, &b});
    const bool xt = x.tracked(), wt = w.tracked(), bt = b.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = go + r * cout;
        const T* xr = x.data() + r * cin;
        if (xt) {
          T* dxr = x.grad() + r * cin;
          for (int64_t i = 0; i < cin; ++i) {
            const T* wr = w.data() + i * cout;
            T acc = T(0);
            for (int64_t o = 0; o < cout; ++o) acc += gr[o] * wr[o];
            dxr[i] += acc;
          }
        }
        if (wt) {
          for (int64_t i = 0; i < cin; ++i) {
            const T xv = xr[i];
            if (xv == T(0)) continue;
            T* dwr = w.grad() + i * cout;
            for (int64_t o = 0; o < cout; ++o) dwr[o] += xv * gr[o];
          }
        }
        if (bt) {
          T* db = b.grad();
          for (int64_t o = 0; o < cout; ++o) db[o] += gr[o];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layer_norm over the channel (last) axis, then affine scale/shift
// ---------------------------------------------------------------------------
template <class T>
Array<T> layer_norm(Array<T> x, Array<T> gamma, Array<T> beta, T eps) {
  const int64_t c = x.dim(x.rank() - 1);
  ATM_CHECK(c >= 1, ArgumentError, "layer_norm: empty channel axis");
  ATM_CHECK(eps > T(0), ArgumentError, "layer_norm: eps must be positive");
  ATM_CHECK(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 &&
                beta.dim(0) == c,
            ShapeError, "layer_norm: gamma/beta ", shape_str(gamma.shape()),
            "/", shape_str(beta.shape()), " vs channels ", c);

  Array<T> y(x.shape());
  const int64_t rows = x.size() / c;
  auto mu = std::make_shared<std::vector<T>>(size_t(rows));
  auto istd = std::make_shared<std::vector<T>>(size_t(rows));

  const T* xp = x.data();
  const T* gp = gamma.data();
  const T* bp = beta.data();
  T* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * c;
    T m = T(0);
    for (int64_t i = 0; i < c; ++i) m += xr[i];
    m /= T(c);
    T v = T(0);
    for (int64_t i = 0; i < c; ++i) {
      const T d = xr[i] - m;
      v += d * d;
    }
    v /= T(c);
    const T is = T(1) / std::sqrt(v + eps);
    (*mu)[size_t(r)] = m;
    (*istd)[size_t(r)] = is;
    T* yr = yp + r * c;
    for (int64_t i = 0; i < c; ++i) yr[i] = (xr[i] - m) * is * gp[i] + bp[i];
  }
  ATM_DEBUG_FINITE(y, "layer_norm");

  if (detail::should_record<T>({&x, &gamma, &beta})) {
    detail::prepare(y, {&x, &gamma, &beta});
    const bool xt = x.tracked(), gt = gamma.tracked(), bt = beta.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      std::vector<T> xhat(size_t(c)), gx(size_t(c));
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * c;
        const T* gr = go + r * c;
        const T m = (*mu)[size_t(r)], is = (*istd)[size_t(r)];
        for (int64_t i = 0; i < c; ++i) xhat[size_t(i)] = (xr[i] - m) * is;
        if (gt) {
          T* dg = gamma.grad();
          for (int64_t i = 0; i < c; ++i) dg[i] += xhat[size_t(i)] * gr[i];
        }
        if (bt) {
          T* db = beta.grad();
          for (int64_t i = 0; i < c; ++i) db[i] += gr[i];
        }
        if (xt) {
          T s1 = T(0), s2 = T(0);
          for (int64_t i = 0; i < c; ++i) {
            gx[size_t(i)] = gr[i] * gamma.data()[i];
            s1 += gx[size_t(i)];
            s2 += gx[size_t(i)] * xhat[size_t(i)];
          }
          s1 /= T(c);
          s2 /= T(c);
          T* dx = x.grad() + r * c;
          for (int64_t i = 0; i < c; ++i)
            dx[i] += is * (gx[size_t(i)] - s1 - xhat[size_t(i)] * s2);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax_groups: last axis holds K groups of C channels laid out
// [g0 c0..cC-1 | g1 c0..cC-1 | ...]; softmax runs across the K entries that
// share a channel index.
// ---------------------------------------------------------------------------
template <class T>
Array<T> softmax_groups(Array<T> x, int64_t k) {
  ATM_CHECK(k >= 1, ArgumentError, "softmax_groups: K must be >= 1, got ", k);
  const int64_t last = x.dim(x.rank() - 1);
  ATM_CHECK(last % k == 0, ShapeError, "softmax_groups: last extent ", last,
            " not divisible into ", k, " groups");
  const int64_t c = last / k;
  const int64_t rows = x.size() / last;

  Array<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * last;
    T* yr = yp + r * last;
    for (int64_t ch = 0; ch < c; ++ch) {
      T mx = xr[ch];
      for (int64_t g = 1; g < k; ++g) mx = std::max(mx, xr[g * c + ch]);
      T denom = T(0);
      for (int64_t g = 0; g < k; ++g) {
        const T e = std::exp(xr[g * c + ch] - mx);
        yr[g * c + ch] = e;
        denom += e;
      }
      for (int64_t g = 0; g < k; ++g) yr[g * c + ch] /= denom;
    }
  }
  ATM_DEBUG_FINITE(y, "softmax_groups");

  if (detail::should_record<T>({&x})) {
    detail::prepare(y, {&x});
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      const T* yv = y.data();
      T* dx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t ch = 0; ch < c; ++ch) {
          T dot = T(0);
          for (int64_t g = 0; g < k; ++g) {
            const int64_t idx = r * last + g * c + ch;
            dot += yv[idx] * go[idx];
          }
          for (int64_t g = 0; g < k; ++g) {
            const int64_t idx = r * last + g * c + ch;
            dx[idx] += yv[idx] * (go[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// gather_interp_1d: per-token, per-channel-group fractional sampling along
// one spatial axis. out[b,i,j,c] samples x at the fractional coordinate
// (j + off[b,i,j,c/gs]) (axis=width) clamped to [0, extent-1], linearly
// interpolated between the two neighbouring tokens. Gradients flow to both
// x (scattered interpolation weights) and the offsets (difference of the
// neighbouring samples); positions clamped at a boundary get a zero offset
// subgradient.
// ---------------------------------------------------------------------------
template <class T>
Array<T> gather_interp_1d(Array<T> x, Array<T> off, Axis axis) {
  ATM_CHECK(x.rank() == 4, ShapeError, "gather_interp_1d: input must be BHWC, got ",
            shape_str(x.shape()));
  ATM_CHECK(off.rank() == 4, ShapeError,
            "gather_interp_1d: offsets must be BHWG, got ",
            shape_str(off.shape()));
  const int64_t bsz = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t g = off.dim(3);
  ATM_CHECK(off.dim(0) == bsz && off.dim(1) == h && off.dim(2) == w, ShapeError,
            "gather_interp_1d: offsets ", shape_str(off.shape()),
            " do not match input ", shape_str(x.shape()));
  ATM_CHECK(g >= 1 && c % g == 0, ArgumentError,
            "gather_interp_1d: group count ", g, " does not divide channels ", c);
  const int64_t gs = c / g;
  const int64_t extent = axis == Axis::width ? w : h;

  Array<T> y(x.shape());
  const T* xp = x.data();
  const T* op = off.data();
  T* yp = y.data();

  // For axis=width neighbouring samples differ by one token (stride c);
  // for axis=height by one row (stride w*c).
  const int64_t nstride = axis == Axis::width ? c : w * c;

  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const int64_t tok = ((b * h + i) * w + j);
        const T* orow = op + tok * g;
        T* yrow = yp + tok * c;
        const int64_t pos = axis == Axis::width ? j : i;
        for (int64_t grp = 0; grp < g; ++grp) {
          const T praw = T(pos) + orow[grp];
          T p = praw;
          if (p < T(0)) p = T(0);
          if (p > T(extent - 1)) p = T(extent - 1);
          int64_t fl = int64_t(std::floor(double(p)));
          if (fl > extent - 1) fl = extent - 1;
          if (fl < 0) fl = 0;
          const T t = p - T(fl);
          const int64_t nb = std::min(fl + 1, extent - 1);
          // index of (b, i, fl, c0) resp. (b, fl, j, c0)
          const int64_t src0 = axis == Axis::width
                                   ? ((b * h + i) * w + fl) * c
                                   : ((b * h + fl) * w + j) * c;
          const int64_t src1 = src0 + (nb - fl) * nstride;
          const T* x0 = xp + src0 + grp * gs;
          const T* x1 = xp + src1 + grp * gs;
          T* out = yrow + grp * gs;
          for (int64_t u = 0; u < gs; ++u) out[u] = x0[u] + t * (x1[u] - x0[u]);
        }
      }
  ATM_DEBUG_FINITE(y, "gather_interp_1d");

  if (detail::should_record<T>({&x, &off})) {
    detail::prepare(y, {&x, &off});
    const bool xt = x.tracked(), ot = off.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      const T* xv = x.data();
      const T* op2 = off.data();
      T* dx = xt ? x.grad() : nullptr;
      T* doff = ot ? off.grad() : nullptr;
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j) {
            const int64_t tok = ((b * h + i) * w + j);
            const T* orow = op2 + tok * g;
            const T* grow = go + tok * c;
            const int64_t pos = axis == Axis::width ? j : i;
            for (int64_t grp = 0; grp < g; ++grp) {
              const T praw = T(pos) + orow[grp];
              const bool clamped = praw < T(0) || praw > T(extent - 1);
              T p = praw;
              if (p < T(0)) p = T(0);
              if (p > T(extent - 1)) p = T(extent - 1);
              int64_t fl = int64_t(std::floor(double(p)));
              if (fl > extent - 1) fl = extent - 1;
              if (fl < 0) fl = 0;
              const T t = p - T(fl);
              const int64_t nb = std::min(fl + 1, extent - 1);
              const int64_t src0 = axis == Axis::width
                                       ? ((b * h + i) * w + fl) * c
                                       : ((b * h + fl) * w + j) * c;
              const int64_t src1 = src0 + (nb - fl) * nstride;
              const T* gseg = grow + grp * gs;
              if (xt) {
                T* d0 = dx + src0 + grp * gs;
                T* d1 = dx + src1 + grp * gs;
                for (int64_t u = 0; u < gs; ++u) {
                  d0[u] += (T(1) - t) * gseg[u];
                  d1[u] += t * gseg[u];
                }
              }
              if (ot && !clamped) {
                const T* x0 = xv + src0 + grp * gs;
                const T* x1 = xv + src1 + grp * gs;
                T acc = T(0);
                for (int64_t u = 0; u < gs; ++u)
                  acc += (x1[u] - x0[u]) * gseg[u];
                doff[tok * g + grp] += acc;
              }
            }
          }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// depthwise_conv2d: per-channel k x k convolution, stride 1, zero padding
// (k-1)/2, shape preserved.
// ---------------------------------------------------------------------------
template <class T>
Array<T> depthwise_conv2d(Array<T> x, Array<T> kernel) {
  ATM_CHECK(x.rank() == 4, ShapeError, "depthwise_conv2d: input must be BHWC");
  ATM_CHECK(kernel.rank() == 3 && kernel.dim(0) == kernel.dim(1), ShapeError,
            "depthwise_conv2d: kernel must be [k,k,C], got ",
            shape_str(kernel.shape()));
  const int64_t k = kernel.dim(0);
  ATM_CHECK(k % 2 == 1, ArgumentError,
            "depthwise_conv2d: kernel size must be odd, got ", k);
  const int64_t bsz = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  ATM_CHECK(kernel.dim(2) == c, ShapeError, "depthwise_conv2d: kernel channels ",
            kernel.dim(2), " vs input channels ", c);
  const int64_t pad = (k - 1) / 2;

  Array<T> y(x.shape());
  const T* xp = x.data();
  const T* kp = kernel.data();
  T* yp = y.data();
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        T* yrow = yp + ((b * h + i) * w + j) * c;
        for (int64_t u = 0; u < k; ++u) {
          const int64_t ii = i + u - pad;
          if (ii < 0 || ii >= h) continue;
          for (int64_t v = 0; v < k; ++v) {
            const int64_t jj = j + v - pad;
            if (jj < 0 || jj >= w) continue;
            const T* xrow = xp + ((b * h + ii) * w + jj) * c;
            const T* krow = kp + (u * k + v) * c;
            for (int64_t ch = 0; ch < c; ++ch) yrow[ch] += xrow[ch] * krow[ch];
          }
        }
      }
  ATM_DEBUG_FINITE(y, "depthwise_conv2d");

  if (detail::should_record<T>({&x, &kernel})) {
    detail::prepare(y, {&x, &kernel});
    const bool xt = x.tracked(), kt = kernel.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j) {
            const T* grow = go + ((b * h + i) * w + j) * c;
            for (int64_t u = 0; u < k; ++u) {
              const int64_t ii = i + u - pad;
              if (ii < 0 || ii >= h) continue;
              for (int64_t v = 0; v < k; ++v) {
                const int64_t jj = j + v - pad;
                if (jj < 0 || jj >= w) continue;
                const int64_t xoff = ((b * h + ii) * w + jj) * c;
                const int64_t koff = (u * k + v) * c;
                if (xt) {
                  T* dx = x.grad() + xoff;
                  const T* krow = kernel.data() + koff;
                  for (int64_t ch = 0; ch < c; ++ch) dx[ch] += krow[ch] * grow[ch];
                }
                if (kt) {
                  T* dk = kernel.grad() + koff;
                  const T* xrow = x.data() + xoff;
                  for (int64_t ch = 0; ch < c; ++ch) dk[ch] += xrow[ch] * grow[ch];
                }
              }
            }
          }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// strided_conv2d: standard cross-correlation, kernel [k,k,Cin,Cout],
// output extent floor((H + 2p - k)/s) + 1. Bias optional.
// ---------------------------------------------------------------------------
template <class T>
Array<T> strided_conv2d(Array<T> x, Array<T> kernel, Array<T> bias,
                        int64_t stride, int64_t pad) {
  ATM_CHECK(x.rank() == 4, ShapeError, "strided_conv2d: input must be BHWC");
  ATM_CHECK(kernel.rank() == 4, ShapeError,
            "strided_conv2d: kernel must be [kh,kw,Cin,Cout], got ",
            shape_str(kernel.shape()));
  const int64_t bsz = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  const int64_t cout = kernel.dim(3);
  ATM_CHECK(kernel.dim(2) == cin, ShapeError, "strided_conv2d: kernel Cin ",
            kernel.dim(2), " vs input channels ", cin);
  ATM_CHECK(stride >= 1, ArgumentError, "strided_conv2d: stride must be >= 1");
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (w + 2 * pad - kw) / stride + 1;
  ATM_CHECK(ho >= 1 && wo >= 1, ArgumentError,
            "strided_conv2d: output extent would be ", ho, "x", wo,
            " for input ", shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias)
    ATM_CHECK(bias.rank() == 1 && bias.dim(0) == cout, ShapeError,
              "strided_conv2d: bias ", shape_str(bias.shape()), " vs Cout ",
              cout);

  Array<T> y(Shape{bsz, ho, wo, cout});
  const T* xp = x.data();
  const T* kp = kernel.data();
  T* yp = y.data();
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj) {
        T* yrow = yp + ((b * ho + oi) * wo + oj) * cout;
        if (has_bias)
          for (int64_t oc = 0; oc < cout; ++oc) yrow[oc] = bias.data()[oc];
        for (int64_t u = 0; u < kh; ++u) {
          const int64_t ii = oi * stride + u - pad;
          if (ii < 0 || ii >= h) continue;
          for (int64_t v = 0; v < kw; ++v) {
            const int64_t jj = oj * stride + v - pad;
            if (jj < 0 || jj >= w) continue;
            const T* xrow = xp + ((b * h + ii) * w + jj) * cin;
            const T* kbase = kp + (u * kw + v) * cin * cout;
            for (int64_t ic = 0; ic < cin; ++ic) {
              const T xv = xrow[ic];
              if (xv == T(0)) continue;
              const T* krow = kbase + ic * cout;
              for (int64_t oc = 0; oc < cout; ++oc) yrow[oc] += xv * krow[oc];
            }
          }
        }
      }
  ATM_DEBUG_FINITE(y, "strided_conv2d");

  const bool rec = has_bias ? detail::should_record<T>({&x, &kernel, &bias})
                            : detail::should_record<T>({&x, &kernel});
  if (rec) {
    if (has_bias)
      detail::prepare(y, {&x, &kernel, &bias});
    else
      detail::prepare(y, {&x, &kernel});
    const bool xt = x.tracked(), kt = kernel.tracked();
    const bool bt = has_bias && bias.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t oi = 0; oi < ho; ++oi)
          for (int64_t oj = 0; oj < wo; ++oj) {
            const T* grow = go + ((b * ho + oi) * wo + oj) * cout;
            if (bt) {
              T* db = bias.grad();
              for (int64_t oc = 0; oc < cout; ++oc) db[oc] += grow[oc];
            }
            for (int64_t u = 0; u < kh; ++u) {
              const int64_t ii = oi * stride + u - pad;
              if (ii < 0 || ii >= h) continue;
              for (int64_t v = 0; v < kw; ++v) {
                const int64_t jj = oj * stride + v - pad;
                if (jj < 0 || jj >= w) continue;
                const int64_t xoff = ((b * h + ii) * w + jj) * cin;
                const int64_t koff = (u * kw + v) * cin * cout;
                if (xt) {
                  T* dx = x.grad() + xoff;
                  for (int64_t ic = 0; ic < cin; ++ic) {
                    const T* krow = kernel.data() + koff + ic * cout;
                    T acc = T(0);
                    for (int64_t oc = 0; oc < cout; ++oc)
                      acc += krow[oc] * grow[oc];
                    dx[ic] += acc;
                  }
                }
                if (kt) {
                  const T* xrow = x.data() + xoff;
                  for (int64_t ic = 0; ic < cin; ++ic) {
                    const T xv = xrow[ic];
                    if (xv == T(0)) continue;
                    T* dk = kernel.grad() + koff + ic * cout;
                    for (int64_t oc = 0; oc < cout; ++oc)
                      dk[oc] += xv * grow[oc];
                  }
                }
              }
            }
          }
    });
  }
  return y;
}

template <class T>
Array<T> strided_conv2d(Array<T> x, Array<T> kernel, int64_t stride,
                        int64_t pad) {
  return strided_conv2d(std::move(x), std::move(kernel), Array<T>{}, stride,
                        pad);
}

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------
template <class T>
Array<T> add(Array<T> a, Array<T> b) {
  ATM_CHECK(a.shape() == b.shape(), ShapeError, "add: shape mismatch ",
            shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Array<T> y(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
  ATM_DEBUG_FINITE(y, "add");
  if (detail::should_record<T>({&a, &b})) {
    detail::prepare(y, {&a, &b});
    const bool at = a.tracked(), bt = b.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      if (at) {
        T* da = a.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += go[i];
      }
      if (bt) {
        T* db = b.grad();
        for (int64_t i = 0; i < n; ++i) db[i] += go[i];
      }
    });
  }
  return y;
}

template <class T>
Array<T> mul(Array<T> a, Array<T> b) {
  ATM_CHECK(a.shape() == b.shape(), ShapeError, "mul: shape mismatch ",
            shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Array<T> y(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
  ATM_DEBUG_FINITE(y, "mul");
  if (detail::should_record<T>({&a, &b})) {
    detail::prepare(y, {&a, &b});
    const bool at = a.tracked(), bt = b.tracked();
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      if (at) {
        T* da = a.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += b[i] * go[i];
      }
      if (bt) {
        T* db = b.grad();
        for (int64_t i = 0; i < n; ++i) db[i] += a[i] * go[i];
      }
    });
  }
  return y;
}

template <class T>
Array<T> scale(Array<T> a, T s) {
  Array<T> y(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * s;
  ATM_DEBUG_FINITE(y, "scale");
  if (detail::should_record<T>({&a})) {
    detail::prepare(y, {&a});
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      T* da = a.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += s * go[i];
    });
  }
  return y;
}

// Exact (erf-based) GELU.
template <class T>
Array<T> gelu(Array<T> a) {
  Array<T> y(a.shape());
  const int64_t n = a.size();
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (int64_t i = 0; i < n; ++i) {
    const T v = a[i];
    y[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  ATM_DEBUG_FINITE(y, "gelu");
  if (detail::should_record<T>({&a})) {
    detail::prepare(y, {&a});
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      T* da = a.grad();
      const T inv_sqrt2pi = T(0.39894228040143267794);
      for (int64_t i = 0; i < n; ++i) {
        const T v = a[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        da[i] += (cdf + v * pdf) * go[i];
      }
    });
  }
  return y;
}

// B,H,W,C -> B,C mean over all tokens.
template <class T>
Array<T> global_avg_pool(Array<T> x) {
  ATM_CHECK(x.rank() == 4, ShapeError, "global_avg_pool: input must be BHWC");
  const int64_t bsz = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Array<T> y(Shape{bsz, c});
  const T inv = T(1) / T(h * w);
  for (int64_t b = 0; b < bsz; ++b) {
    T* yr = y.data() + b * c;
    for (int64_t t = 0; t < h * w; ++t) {
      const T* xr = x.data() + (b * h * w + t) * c;
      for (int64_t ch = 0; ch < c; ++ch) yr[ch] += xr[ch];
    }
    for (int64_t ch = 0; ch < c; ++ch) yr[ch] *= inv;
  }
  ATM_DEBUG_FINITE(y, "global_avg_pool");
  if (detail::should_record<T>({&x})) {
    detail::prepare(y, {&x});
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      T* dx = x.grad();
      for (int64_t b = 0; b < bsz; ++b) {
        const T* gr = go + b * c;
        for (int64_t t = 0; t < h * w; ++t) {
          T* dxr = dx + (b * h * w + t) * c;
          for (int64_t ch = 0; ch < c; ++ch) dxr[ch] += gr[ch] * inv;
        }
      }
    });
  }
  return y;
}

// Mean cross-entropy with label smoothing; logits [B,K].
template <class T>
Array<T> cross_entropy(Array<T> logits, const std::vector<int64_t>& labels,
                       T smoothing) {
  ATM_CHECK(logits.rank() == 2, ShapeError, "cross_entropy: logits must be [B,K]");
  const int64_t bsz = logits.dim(0), k = logits.dim(1);
  ATM_CHECK(int64_t(labels.size()) == bsz, ShapeError,
            "cross_entropy: ", labels.size(), " labels for batch ", bsz);
  for (int64_t b = 0; b < bsz; ++b)
    ATM_CHECK(labels[size_t(b)] >= 0 && labels[size_t(b)] < k, ArgumentError,
              "cross_entropy: label ", labels[size_t(b)], " out of range [0,", k,
              ")");

  auto probs = std::make_shared<std::vector<T>>(size_t(bsz * k));
  T loss = T(0);
  const T off_w = smoothing / T(k);
  const T on_w = T(1) - smoothing + off_w;
  for (int64_t b = 0; b < bsz; ++b) {
    const T* lr = logits.data() + b * k;
    T mx = lr[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, lr[i]);
    T denom = T(0);
    for (int64_t i = 0; i < k; ++i) denom += std::exp(lr[i] - mx);
    const T lse = mx + std::log(denom);
    for (int64_t i = 0; i < k; ++i)
      (*probs)[size_t(b * k + i)] = std::exp(lr[i] - lse);
    for (int64_t i = 0; i < k; ++i) {
      const T q = (i == labels[size_t(b)]) ? on_w : off_w;
      loss -= q * (lr[i] - lse);
    }
  }
  loss /= T(bsz);

  Array<T> y = Array<T>::scalar(loss);
  ATM_DEBUG_FINITE(y, "cross_entropy");
  if (detail::should_record<T>({&logits})) {
    detail::prepare(y, {&logits});
    auto lbl = labels;
    active_tape<T>()->record([=]() mutable {
      const T g = y.grad()[0] / T(bsz);
      T* dl = logits.grad();
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t i = 0; i < k; ++i) {
          const T q = (i == lbl[size_t(b)]) ? on_w : off_w;
          dl[b * k + i] += g * ((*probs)[size_t(b * k + i)] - q);
        }
    });
  }
  return y;
}

template <class T>
Array<T> sum(Array<T> x) {
  T s = T(0);
  for (int64_t i = 0; i < x.size(); ++i) s += x[i];
  Array<T> y = Array<T>::scalar(s);
  if (detail::should_record<T>({&x})) {
    detail::prepare(y, {&x});
    active_tape<T>()->record([=]() mutable {
      const T g = y.grad()[0];
      T* dx = x.grad();
      for (int64_t i = 0; i < x.size(); ++i) dx[i] += g;
    });
  }
  return y;
}

// Convex combination of the three branch embeddings by per-sample gates:
// out[b,i,j,c] = sum_k alpha[b, k*C + c] * branch_k[b,i,j,c].
template <class T>
Array<T> mix_branches(Array<T> xw, Array<T> xh, Array<T> xi, Array<T> alpha) {
  ATM_CHECK(xw.shape() == xh.shape() && xw.shape() == xi.shape(), ShapeError,
            "mix_branches: branch shapes differ: ", shape_str(xw.shape()), " ",
            shape_str(xh.shape()), " ", shape_str(xi.shape()));
  ATM_CHECK(xw.rank() == 4, ShapeError, "mix_branches: branches must be BHWC");
  const int64_t bsz = xw.dim(0), h = xw.dim(1), w = xw.dim(2), c = xw.dim(3);
  ATM_CHECK(alpha.rank() == 2 && alpha.dim(0) == bsz && alpha.dim(1) == 3 * c,
            ShapeError, "mix_branches: gates must be [B,3C], got ",
            shape_str(alpha.shape()));

  Array<T> y(xw.shape());
  const Array<T>* branches[3] = {&xw, &xh, &xi};
  for (int64_t b = 0; b < bsz; ++b) {
    const T* ar = alpha.data() + b * 3 * c;
    for (int64_t t = 0; t < h * w; ++t) {
      const int64_t off = (b * h * w + t) * c;
      T* yr = y.data() + off;
      for (int64_t kb = 0; kb < 3; ++kb) {
        const T* xr = branches[kb]->data() + off;
        const T* a = ar + kb * c;
        for (int64_t ch = 0; ch < c; ++ch) yr[ch] += a[ch] * xr[ch];
      }
    }
  }
  ATM_DEBUG_FINITE(y, "mix_branches");

  if (detail::should_record<T>({&xw, &xh, &xi, &alpha})) {
    detail::prepare(y, {&xw, &xh, &xi, &alpha});
    const bool bt[3] = {xw.tracked(), xh.tracked(), xi.tracked()};
    const bool at = alpha.tracked();
    active_tape<T>()->record([=]() mutable {
      Array<T>* branches2[3] = {&xw, &xh, &xi};
      const T* go = y.grad();
      for (int64_t b = 0; b < bsz; ++b) {
        const T* ar = alpha.data() + b * 3 * c;
        T* dar = at ? alpha.grad() + b * 3 * c : nullptr;
        for (int64_t t = 0; t < h * w; ++t) {
          const int64_t off = (b * h * w + t) * c;
          const T* gr = go + off;
          for (int64_t kb = 0; kb < 3; ++kb) {
            if (bt[kb]) {
              T* dxr = branches2[kb]->grad() + off;
              const T* a = ar + kb * c;
              for (int64_t ch = 0; ch < c; ++ch) dxr[ch] += a[ch] * gr[ch];
            }
            if (at) {
              const T* xr = branches2[kb]->data() + off;
              T* da = dar + kb * c;
              for (int64_t ch = 0; ch < c; ++ch) da[ch] += xr[ch] * gr[ch];
            }
          }
        }
      }
    });
  }
  return y;
}

// 2x nearest-neighbour upsampling (FPN top-down pathway).
template <class T>
Array<T> upsample_nearest2x(Array<T> x) {
  ATM_CHECK(x.rank() == 4, ShapeError, "upsample_nearest2x: input must be BHWC");
  const int64_t bsz = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Array<T> y(Shape{bsz, 2 * h, 2 * w, c});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t i = 0; i < 2 * h; ++i)
      for (int64_t j = 0; j < 2 * w; ++j) {
        const T* xr = x.data() + ((b * h + i / 2) * w + j / 2) * c;
        T* yr = y.data() + ((b * 2 * h + i) * 2 * w + j) * c;
        for (int64_t ch = 0; ch < c; ++ch) yr[ch] = xr[ch];
      }
  if (detail::should_record<T>({&x})) {
    detail::prepare(y, {&x});
    active_tape<T>()->record([=]() mutable {
      const T* go = y.grad();
      T* dx = x.grad();
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t i = 0; i < 2 * h; ++i)
          for (int64_t j = 0; j < 2 * w; ++j) {
            T* dxr = dx + ((b * h + i / 2) * w + j / 2) * c;
            const T* gr = go + ((b * 2 * h + i) * 2 * w + j) * c;
            for (int64_t ch = 0; ch < c; ++ch) dxr[ch] += gr[ch];
          }
    });
  }
  return y;
}

}  // namespace atm
