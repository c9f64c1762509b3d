#include "xnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "xnet/errors.hpp"

namespace xnet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void record(std::function<void()> fn) {
  active_tape<T>()->record(std::move(fn));
}

template <typename T>
BasicTensor<T> output_like(const Shape& shape, bool recorded) {
  auto out = BasicTensor<T>::zeros(shape);
  if (recorded) out.set_requires_grad(true);
  return out;
}

template <typename T>
std::span<T> gbuf(const BasicTensor<T>& t) {
  return detail::grad_buffer(*t.impl());
}

/// Strides of `b` laid over the axes of `a`; 0 where b has extent 1.
std::vector<std::int64_t> broadcast_strides(const Shape& a, const Shape& b) {
  std::vector<std::int64_t> st(a.rank(), 0);
  std::int64_t s = 1;
  for (std::size_t i = a.rank(); i-- > 0;) {
    st[i] = b[i] == 1 ? 0 : s;
    s *= b[i];
  }
  return st;
}

/// Visits `shape` one innermost row at a time: body(offset, other_offset, row_length, other_inner_stride),
/// where other_offset follows `other_strides`.
template <typename F>
void walk_rows(const Shape& shape, const std::vector<std::int64_t>& other_strides, F&& body) {
  const std::size_t r = shape.rank();
  if (r == 0) {
    body(0, 0, 1, 0);
    return;
  }
  const std::int64_t len = shape[r - 1];
  const std::int64_t rows = shape.numel() / len;
  const std::int64_t inner = other_strides[r - 1];
  std::vector<std::int64_t> idx(r - 1, 0);
  std::int64_t off = 0;
  for (std::int64_t row = 0; row < rows; ++row) {
    body(row * len, off, len, inner);
    for (std::size_t i = r - 1; i-- > 0;) {
      ++idx[i];
      off += other_strides[i];
      if (idx[i] < shape[i]) break;
      off -= other_strides[i] * shape[i];
      idx[i] = 0;
    }
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " + s.str());
  }
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> elementwise(ElementwiseMode mode, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  if (!same) {
    bool ok = sa.rank() == sb.rank() && sa.rank() >= 2;
    for (std::size_t i = 0; ok && i < sa.rank(); ++i) {
      if (sb[i] == sa[i]) continue;
      ok = sb[i] == 1 && i != 1;
    }
    if (!ok) throw ShapeError("elementwise: cannot broadcast " + sb.str() + " onto " + sa.str());
  }

  const std::int64_t n = a.numel();
  // Stride of b along each axis of a (0 on broadcast axes).
  std::vector<std::int64_t> bstride;
  if (!same) bstride = broadcast_strides(sa, sb);

  const bool rec = detail::should_record<T>({&a, &b});
  auto out = output_like<T>(sa, rec);
  T* y = out.data().data();
  const T* xa = a.data().data();
  const T* xb = b.data().data();
  if (same) {
    switch (mode) {
      case ElementwiseMode::add: for (std::int64_t k = 0; k < n; ++k) y[k] = xa[k] + xb[k]; break;
      case ElementwiseMode::sub: for (std::int64_t k = 0; k < n; ++k) y[k] = xa[k] - xb[k]; break;
      case ElementwiseMode::mul: for (std::int64_t k = 0; k < n; ++k) y[k] = xa[k] * xb[k]; break;
    }
  } else {
    walk_rows(sa, bstride, [&](std::int64_t ao, std::int64_t bo, std::int64_t len, std::int64_t bs) {
      for (std::int64_t j = 0; j < len; ++j) {
        const T va = xa[ao + j], vb = xb[bo + j * bs];
        y[ao + j] = mode == ElementwiseMode::add ? va + vb : mode == ElementwiseMode::sub ? va - vb : va * vb;
      }
    });
  }

  if (rec) {
    record<T>([mode, a, b, out, same, bstride = std::move(bstride), n]() {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        T* ga = gbuf(a).data();
        if (mode != ElementwiseMode::mul) {
          for (std::int64_t k = 0; k < n; ++k) ga[k] += g[k];
        } else if (same) {
          const T* xb = b.data().data();
          for (std::int64_t k = 0; k < n; ++k) ga[k] += g[k] * xb[k];
        } else {
          const T* xb = b.data().data();
          walk_rows(a.shape(), bstride, [&](std::int64_t ao, std::int64_t bo, std::int64_t len, std::int64_t bs) {
            for (std::int64_t j = 0; j < len; ++j) ga[ao + j] += g[ao + j] * xb[bo + j * bs];
          });
        }
      }
      if (b.requires_grad()) {
        T* gb = gbuf(b).data();
        const T* xa = a.data().data();
        const T sign = mode == ElementwiseMode::sub ? T(-1) : T(1);
        if (same) {
          if (mode == ElementwiseMode::mul) {
            for (std::int64_t k = 0; k < n; ++k) gb[k] += g[k] * xa[k];
          } else {
            for (std::int64_t k = 0; k < n; ++k) gb[k] += sign * g[k];
          }
        } else {
          walk_rows(a.shape(), bstride, [&](std::int64_t ao, std::int64_t bo, std::int64_t len, std::int64_t bs) {
            if (bs == 0) {
              T acc = 0;
              if (mode == ElementwiseMode::mul) {
                for (std::int64_t j = 0; j < len; ++j) acc += g[ao + j] * xa[ao + j];
              } else {
                for (std::int64_t j = 0; j < len; ++j) acc += g[ao + j];
              }
              gb[bo] += sign * acc;
            } else if (mode == ElementwiseMode::mul) {
              for (std::int64_t j = 0; j < len; ++j) gb[bo + j] += g[ao + j] * xa[ao + j];
            } else {
              for (std::int64_t j = 0; j < len; ++j) gb[bo + j] += sign * g[ao + j];
            }
          });
        }
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------- linear

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  const Shape& sx = x.shape();
  require_rank(w.shape(), 2, "linear weight");
  if (sx.rank() < 1 || sx[sx.rank() - 1] != w.dim(0)) {
    throw ShapeError("linear: input " + sx.str() + " does not end in Cin of weight " + w.shape().str());
  }
  const std::int64_t cin = w.dim(0);
  const std::int64_t cout = w.dim(1);
  if (b.defined() && b.shape() != Shape{cout}) {
    throw ShapeError("linear: bias " + b.shape().str() + " does not match Cout " + std::to_string(cout));
  }
  const std::int64_t rows = x.numel() / cin;
  auto ext = sx.extents();
  ext.back() = cout;

  const bool rec = detail::should_record<T>({&x, &w, &b});
  auto out = output_like<T>(Shape(ext), rec);
  {
    CMapMat<T> X(x.data().data(), rows, cin);
    CMapMat<T> W(w.data().data(), cin, cout);
    MapMat<T> Y(out.data().data(), rows, cout);
    Y.noalias() = X * W;
    if (b.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(b.data().data(), cout);
      Y.rowwise() += B;
    }
  }
  if (rec) {
    record<T>([x, w, b, out, rows, cin, cout]() {
      if (!out.has_grad()) return;
      CMapMat<T> G(out.grad().data(), rows, cout);
      if (x.requires_grad()) {
        MapMat<T> GX(gbuf(x).data(), rows, cin);
        CMapMat<T> W(w.data().data(), cin, cout);
        GX.noalias() += G * W.transpose();
      }
      if (w.requires_grad()) {
        MapMat<T> GW(gbuf(w).data(), cin, cout);
        CMapMat<T> X(x.data().data(), rows, cin);
        GW.noalias() += X.transpose() * G;
      }
      if (b.defined() && b.requires_grad()) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(gbuf(b).data(), cout);
        GB += G.colwise().sum();
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> channel_linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  const Shape& sx = x.shape();
  require_rank(w.shape(), 2, "channel_linear weight");
  if (sx.rank() < 2 || sx[1] != w.dim(0)) {
    throw ShapeError("channel_linear: input " + sx.str() + " channel extent does not match weight " +
                     w.shape().str());
  }
  const std::int64_t n = sx[0];
  const std::int64_t cin = w.dim(0);
  const std::int64_t cout = w.dim(1);
  if (b.defined() && b.shape() != Shape{cout}) {
    throw ShapeError("channel_linear: bias " + b.shape().str() + " does not match Cout " + std::to_string(cout));
  }
  const std::int64_t inner = x.numel() / (n * cin);
  auto ext = sx.extents();
  ext[1] = cout;

  const bool rec = detail::should_record<T>({&x, &w, &b});
  auto out = output_like<T>(Shape(ext), rec);
  CMapMat<T> W(w.data().data(), cin, cout);
  for (std::int64_t i = 0; i < n; ++i) {
    CMapMat<T> X(x.data().data() + i * cin * inner, cin, inner);
    MapMat<T> Y(out.data().data() + i * cout * inner, cout, inner);
    Y.noalias() = W.transpose() * X;
    if (b.defined()) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> B(b.data().data(), cout);
      Y.colwise() += B;
    }
  }
  if (rec) {
    record<T>([x, w, b, out, n, cin, cout, inner]() {
      if (!out.has_grad()) return;
      CMapMat<T> W(w.data().data(), cin, cout);
      for (std::int64_t i = 0; i < n; ++i) {
        CMapMat<T> G(out.grad().data() + i * cout * inner, cout, inner);
        if (x.requires_grad()) {
          MapMat<T> GX(gbuf(x).data() + i * cin * inner, cin, inner);
          GX.noalias() += W * G;
        }
        if (w.requires_grad()) {
          MapMat<T> GW(gbuf(w).data(), cin, cout);
          CMapMat<T> X(x.data().data() + i * cin * inner, cin, inner);
          GW.noalias() += X * G.transpose();
        }
        if (b.defined() && b.requires_grad()) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> GB(gbuf(b).data(), cout);
          GB += G.rowwise().sum();
        }
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------- conv2d

namespace {

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, ho, wo, stride, pad, groups, cin_g, cout_g;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  // cols: (cin_g·kh·kw) × (ho·wo) for one image and one group; x points at the group's first channel.
  const std::int64_t plane = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        const T* src = x + c * g.h * g.w;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          T* row = dst + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            row[ow] = (iw >= 0 && iw < g.w) ? src[ih * g.w + iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::int64_t plane = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        T* dst = dx + c * g.h * g.w;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.w) dst[ih * g.w + iw] += src[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

// Valid output columns [lo, hi) for kernel column kj.
inline void valid_range(std::int64_t k, std::int64_t stride, std::int64_t pad, std::int64_t in, std::int64_t out,
                        std::int64_t& lo, std::int64_t& hi) {
  // need 0 <= o*stride - pad + k < in
  const std::int64_t a = pad - k;  // o*stride >= a
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const std::int64_t b = in - 1 + pad - k;  // o*stride <= b
  hi = b < 0 ? 0 : std::min(out, b / stride + 1);
  if (lo > hi) lo = hi;
}

// Stride-1 depthwise kernels on a zero-padded plane of width wp. Output rows
// are computed "wide" (wp columns, the last wp - wo discarded) so every tap is
// one contiguous axpy of length ho·wp.
template <typename T>
void pad_plane(const T* x, const ConvGeom& g, std::int64_t wp, T* p) {
  for (std::int64_t r = 0; r < g.h; ++r) std::copy(x + r * g.w, x + (r + 1) * g.w, p + (r + g.pad) * wp + g.pad);
}

template <typename T>
void depthwise_forward_s1(const T* x, const T* w, const T* bias, const ConvGeom& g, T* y) {
  const std::int64_t hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
  const std::int64_t run = (g.ho - 1) * wp + g.wo;
  AlignedVector<T> padded(static_cast<std::size_t>(hp * wp + g.kw), T(0));
  AlignedVector<T> acc(static_cast<std::size_t>(g.ho * wp));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      pad_plane(x + (n * g.cin + c) * g.h * g.w, g, wp, padded.data());
      std::fill(acc.begin(), acc.end(), bias ? bias[c] : T(0));
      const T* wk = w + c * g.kh * g.kw;
      T* a = acc.data();
      for (std::int64_t ki = 0; ki < g.kh; ++ki) {
        for (std::int64_t kj = 0; kj < g.kw; ++kj) {
          const T wv = wk[ki * g.kw + kj];
          const T* src = padded.data() + ki * wp + kj;
          for (std::int64_t k = 0; k < run; ++k) a[k] += wv * src[k];
        }
      }
      T* yp = y + (n * g.cin + c) * g.ho * g.wo;
      for (std::int64_t r = 0; r < g.ho; ++r) std::copy(a + r * wp, a + r * wp + g.wo, yp + r * g.wo);
    }
  }
}

template <typename T>
void depthwise_backward_s1(const T* x, const T* w, const T* gy, const ConvGeom& g, T* gx, T* gw, T* gb) {
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const std::int64_t hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
  const std::int64_t run = (g.ho - 1) * wp + g.wo;
  AlignedVector<T> padded(static_cast<std::size_t>(hp * wp + g.kw), T(0));
  AlignedVector<T> gpad(padded.size());
  AlignedVector<T> gwide(static_cast<std::size_t>(g.ho * wp), T(0));  // columns >= wo stay zero
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const T* gp = gy + (n * g.cin + c) * g.ho * g.wo;
      for (std::int64_t r = 0; r < g.ho; ++r) std::copy(gp + r * g.wo, gp + (r + 1) * g.wo, gwide.data() + r * wp);
      if (gb) gb[c] += Eigen::Map<const Vec>(gp, g.ho * g.wo).sum();
      const T* wk = w + c * g.kh * g.kw;
      Eigen::Map<const Vec> gv(gwide.data(), run);
      if (gw) pad_plane(x + (n * g.cin + c) * g.h * g.w, g, wp, padded.data());
      if (gx) std::fill(gpad.begin(), gpad.end(), T(0));
      for (std::int64_t ki = 0; ki < g.kh; ++ki) {
        for (std::int64_t kj = 0; kj < g.kw; ++kj) {
          const std::int64_t off = ki * wp + kj;
          if (gw) gw[c * g.kh * g.kw + ki * g.kw + kj] += gv.dot(Eigen::Map<const Vec>(padded.data() + off, run));
          if (gx) {
            const T wv = wk[ki * g.kw + kj];
            T* dst = gpad.data() + off;
            const T* src = gwide.data();
            for (std::int64_t k = 0; k < run; ++k) dst[k] += wv * src[k];
          }
        }
      }
      if (gx) {
        T* gxp = gx + (n * g.cin + c) * g.h * g.w;
        for (std::int64_t r = 0; r < g.h; ++r) {
          const T* row = gpad.data() + (r + g.pad) * wp + g.pad;
          for (std::int64_t q = 0; q < g.w; ++q) gxp[r * g.w + q] += row[q];
        }
      }
    }
  }
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const T* bias, const ConvGeom& g, T* y) {
  if (g.stride == 1) {
    depthwise_forward_s1(x, w, bias, g, y);
    return;
  }
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const T* xp = x + (n * g.cin + c) * g.h * g.w;
      T* yp = y + (n * g.cin + c) * g.ho * g.wo;
      const T b0 = bias ? bias[c] : T(0);
      std::fill(yp, yp + g.ho * g.wo, b0);
      const T* wk = w + c * g.kh * g.kw;
      for (std::int64_t ki = 0; ki < g.kh; ++ki) {
        std::int64_t hlo, hhi;
        valid_range(ki, g.stride, g.pad, g.h, g.ho, hlo, hhi);
        for (std::int64_t kj = 0; kj < g.kw; ++kj) {
          std::int64_t wlo, whi;
          valid_range(kj, g.stride, g.pad, g.w, g.wo, wlo, whi);
          const T wv = wk[ki * g.kw + kj];
          for (std::int64_t oh = hlo; oh < hhi; ++oh) {
            const T* xr = xp + (oh * g.stride - g.pad + ki) * g.w - g.pad + kj;
            T* yr = yp + oh * g.wo;
            if (g.stride == 1) {
              for (std::int64_t ow = wlo; ow < whi; ++ow) yr[ow] += wv * xr[ow];
            } else {
              for (std::int64_t ow = wlo; ow < whi; ++ow) yr[ow] += wv * xr[ow * g.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* gy, const ConvGeom& g, T* gx, T* gw, T* gb) {
  if (g.stride == 1) {
    depthwise_backward_s1(x, w, gy, g, gx, gw, gb);
    return;
  }
  AlignedVector<T> rowsum(static_cast<std::size_t>(g.wo));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const T* xp = x + (n * g.cin + c) * g.h * g.w;
      const T* gp = gy + (n * g.cin + c) * g.ho * g.wo;
      T* gxp = gx ? gx + (n * g.cin + c) * g.h * g.w : nullptr;
      if (gb) {
        T s = 0;
        for (std::int64_t k = 0; k < g.ho * g.wo; ++k) s += gp[k];
        gb[c] += s;
      }
      const T* wk = w + c * g.kh * g.kw;
      for (std::int64_t ki = 0; ki < g.kh; ++ki) {
        std::int64_t hlo, hhi;
        valid_range(ki, g.stride, g.pad, g.h, g.ho, hlo, hhi);
        for (std::int64_t kj = 0; kj < g.kw; ++kj) {
          std::int64_t wlo, whi;
          valid_range(kj, g.stride, g.pad, g.w, g.wo, wlo, whi);
          const T wv = wk[ki * g.kw + kj];
          // Row partial sums keep the weight-gradient loop vectorisable.
          std::fill(rowsum.begin(), rowsum.end(), T(0));
          for (std::int64_t oh = hlo; oh < hhi; ++oh) {
            const T* xr = xp + (oh * g.stride - g.pad + ki) * g.w - g.pad + kj;
            const T* gr = gp + oh * g.wo;
            if (g.stride == 1) {
              for (std::int64_t ow = wlo; ow < whi; ++ow) rowsum[ow] += gr[ow] * xr[ow];
              if (gxp) {
                T* gxr = gxp + (xr - xp);
                for (std::int64_t ow = wlo; ow < whi; ++ow) gxr[ow] += wv * gr[ow];
              }
            } else {
              for (std::int64_t ow = wlo; ow < whi; ++ow) rowsum[ow] += gr[ow] * xr[ow * g.stride];
              if (gxp) {
                T* gxr = gxp + (xr - xp);
                for (std::int64_t ow = wlo; ow < whi; ++ow) gxr[ow * g.stride] += wv * gr[ow];
              }
            }
          }
          T acc = 0;
          for (std::int64_t ow = wlo; ow < whi; ++ow) acc += rowsum[ow];
          if (gw) gw[c * g.kh * g.kw + ki * g.kw + kj] += acc;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      Conv2dOptions opts) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  if (opts.stride < 1 || opts.padding < 0 || opts.groups < 1) {
    throw ConfigError("conv2d: stride must be >= 1, padding >= 0, groups >= 1");
  }
  ConvGeom g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = opts.stride;
  g.pad = opts.padding;
  g.groups = opts.groups;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(g.groups) + " does not divide Cin=" +
                      std::to_string(g.cin) + " and Cout=" + std::to_string(g.cout));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (w.dim(1) != g.cin_g) {
    throw ShapeError("conv2d: weight " + w.shape().str() + " expects " + std::to_string(w.dim(1)) +
                     " input channels per group, input " + x.shape().str() + " provides " +
                     std::to_string(g.cin_g));
  }
  if (b.defined() && b.shape() != Shape{g.cout}) {
    throw ShapeError("conv2d: bias " + b.shape().str() + " does not match Cout " + std::to_string(g.cout));
  }
  const std::int64_t span_h = g.h + 2 * g.pad - g.kh;
  const std::int64_t span_w = g.w + 2 * g.pad - g.kw;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: kernel " + w.shape().str() + " larger than padded input " + x.shape().str());
  }
  if (span_h % g.stride != 0 || span_w % g.stride != 0) {
    throw ShapeError("conv2d: non-integral output extent for input " + x.shape().str() + " kernel " +
                     std::to_string(g.kh) + "x" + std::to_string(g.kw) + " stride " + std::to_string(g.stride) +
                     " padding " + std::to_string(g.pad));
  }
  g.ho = span_h / g.stride + 1;
  g.wo = span_w / g.stride + 1;

  const bool rec = detail::should_record<T>({&x, &w, &b});
  auto out = output_like<T>(Shape{g.n, g.cout, g.ho, g.wo}, rec);
  const bool depthwise = g.groups == g.cin && g.cout == g.cin;
  const T* bias = b.defined() ? b.data().data() : nullptr;

  if (depthwise) {
    depthwise_forward(x.data().data(), w.data().data(), bias, g, out.data().data());
  } else {
    const std::int64_t krows = g.cin_g * g.kh * g.kw;
    const std::int64_t plane = g.ho * g.wo;
    AlignedVector<T> cols(static_cast<std::size_t>(krows * plane));
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t gr = 0; gr < g.groups; ++gr) {
        im2col(x.data().data() + (n * g.cin + gr * g.cin_g) * g.h * g.w, g, cols.data());
        CMapMat<T> W(w.data().data() + gr * g.cout_g * krows, g.cout_g, krows);
        CMapMat<T> C(cols.data(), krows, plane);
        MapMat<T> Y(out.data().data() + (n * g.cout + gr * g.cout_g) * plane, g.cout_g, plane);
        Y.noalias() = W * C;
        if (bias) {
          Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> B(bias + gr * g.cout_g, g.cout_g);
          Y.colwise() += B;
        }
      }
    }
  }

  if (rec) {
    record<T>([x, w, b, out, g, depthwise]() {
      if (!out.has_grad()) return;
      const T* gy = out.grad().data();
      T* gx = x.requires_grad() ? gbuf(x).data() : nullptr;
      T* gw = w.requires_grad() ? gbuf(w).data() : nullptr;
      T* gb = (b.defined() && b.requires_grad()) ? gbuf(b).data() : nullptr;
      if (depthwise) {
        depthwise_backward(x.data().data(), w.data().data(), gy, g, gx, gw, gb);
        return;
      }
      const std::int64_t krows = g.cin_g * g.kh * g.kw;
      const std::int64_t plane = g.ho * g.wo;
      AlignedVector<T> cols(static_cast<std::size_t>(krows * plane));
      AlignedVector<T> dcols(gx ? cols.size() : 0);
      for (std::int64_t n = 0; n < g.n; ++n) {
        for (std::int64_t gr = 0; gr < g.groups; ++gr) {
          CMapMat<T> G(gy + (n * g.cout + gr * g.cout_g) * plane, g.cout_g, plane);
          if (gb) {
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> GB(gb + gr * g.cout_g, g.cout_g);
            GB += G.rowwise().sum();
          }
          if (gw) {
            im2col(x.data().data() + (n * g.cin + gr * g.cin_g) * g.h * g.w, g, cols.data());
            CMapMat<T> C(cols.data(), krows, plane);
            MapMat<T> GW(gw + gr * g.cout_g * krows, g.cout_g, krows);
            GW.noalias() += G * C.transpose();
          }
          if (gx) {
            CMapMat<T> W(w.data().data() + gr * g.cout_g * krows, g.cout_g, krows);
            MapMat<T> DC(dcols.data(), krows, plane);
            DC.noalias() = W.transpose() * G;
            col2im_add(dcols.data(), g, gx + (n * g.cin + gr * g.cin_g) * g.h * g.w);
          }
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------- layer_norm

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, int axis, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  const Shape& sx = x.shape();
  if (axis < 0 || static_cast<std::size_t>(axis) >= sx.rank()) {
    throw ShapeError("layer_norm: axis " + std::to_string(axis) + " invalid for " + sx.str());
  }
  const std::int64_t c = sx[static_cast<std::size_t>(axis)];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: gamma " + gamma.shape().str() + " / beta " + beta.shape().str() +
                     " must have extent " + std::to_string(c));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sx[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < sx.rank(); ++i) inner *= sx[i];

  const bool rec = detail::should_record<T>({&x, &gamma, &beta});
  auto out = output_like<T>(sx, rec);
  AlignedVector<T> xhat(static_cast<std::size_t>(x.numel()));
  AlignedVector<T> rstd(static_cast<std::size_t>(outer * inner));
  AlignedVector<T> mean(static_cast<std::size_t>(inner));
  AlignedVector<T> var(static_cast<std::size_t>(inner));
  auto xd = x.data();
  auto yd = out.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  const T inv_c = T(1) / static_cast<T>(c);
  for (std::int64_t o = 0; o < outer; ++o) {
    const std::int64_t base = o * c * inner;
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::int64_t k = 0; k < c; ++k) {
      const T* xr = xd.data() + base + k * inner;
      for (std::int64_t j = 0; j < inner; ++j) mean[j] += xr[j];
    }
    for (std::int64_t j = 0; j < inner; ++j) mean[j] *= inv_c;
    for (std::int64_t k = 0; k < c; ++k) {
      const T* xr = xd.data() + base + k * inner;
      for (std::int64_t j = 0; j < inner; ++j) {
        const T d = xr[j] - mean[j];
        var[j] += d * d;
      }
    }
    T* rs = rstd.data() + o * inner;
    for (std::int64_t j = 0; j < inner; ++j) rs[j] = T(1) / std::sqrt(var[j] * inv_c + static_cast<T>(eps));
    for (std::int64_t k = 0; k < c; ++k) {
      const T* xr = xd.data() + base + k * inner;
      T* hr = xhat.data() + base + k * inner;
      T* yr = yd.data() + base + k * inner;
      const T gk = gd[k], bk = bd[k];
      for (std::int64_t j = 0; j < inner; ++j) {
        hr[j] = (xr[j] - mean[j]) * rs[j];
        yr[j] = hr[j] * gk + bk;
      }
    }
  }

  if (rec) {
    record<T>([x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), outer, inner, c, inv_c]() {
      if (!out.has_grad()) return;
      auto gy = out.grad();
      auto gd = gamma.data();
      T* gg = gamma.requires_grad() ? gbuf(gamma).data() : nullptr;
      T* gbeta = beta.requires_grad() ? gbuf(beta).data() : nullptr;
      T* gx = x.requires_grad() ? gbuf(x).data() : nullptr;
      AlignedVector<T> m1(static_cast<std::size_t>(inner)), m2(static_cast<std::size_t>(inner));
      for (std::int64_t o = 0; o < outer; ++o) {
        const std::int64_t base = o * c * inner;
        std::fill(m1.begin(), m1.end(), T(0));
        std::fill(m2.begin(), m2.end(), T(0));
        for (std::int64_t k = 0; k < c; ++k) {
          const T* gr = gy.data() + base + k * inner;
          const T* hr = xhat.data() + base + k * inner;
          T sg = 0, sgh = 0;
          for (std::int64_t j = 0; j < inner; ++j) {
            const T dh = gr[j] * gd[k];
            m1[j] += dh;
            m2[j] += dh * hr[j];
            sg += gr[j];
            sgh += gr[j] * hr[j];
          }
          if (gg) gg[k] += sgh;
          if (gbeta) gbeta[k] += sg;
        }
        if (!gx) continue;
        const T* rs = rstd.data() + o * inner;
        for (std::int64_t k = 0; k < c; ++k) {
          const T* gr = gy.data() + base + k * inner;
          const T* hr = xhat.data() + base + k * inner;
          T* gxr = gx + base + k * inner;
          for (std::int64_t j = 0; j < inner; ++j) {
            const T dh = gr[j] * gd[k];
            gxr[j] += rs[j] * (dh - m1[j] * inv_c - hr[j] * m2[j] * inv_c);
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------- pointwise

namespace {

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
  const bool rec = detail::should_record<T>({&x});
  auto out = output_like<T>(x.shape(), rec);
  auto xd = x.data();
  auto yd = out.data();
  for (std::int64_t k = 0; k < x.numel(); ++k) yd[k] = fwd(xd[k]);
  if (rec) {
    record<T>([x, out, deriv]() {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = gbuf(x);
      auto xd = x.data();
      auto yd = out.data();
      for (std::int64_t k = 0; k < x.numel(); ++k) gx[k] += g[k] * deriv(xd[k], yd[k]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  constexpr T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
  const bool rec = detail::should_record<T>({&x});
  auto out = output_like<T>(x.shape(), rec);
  const T* xd = x.data().data();
  T* yd = out.data().data();
  const std::int64_t n = x.numel();
  // Phi(x) is kept for the backward pass; erf dominates the cost of this op.
  AlignedVector<T> cdf(rec ? static_cast<std::size_t>(n) : 0);
  for (std::int64_t k = 0; k < n; ++k) {
    const T c = T(0.5) * (T(1) + std::erf(xd[k] * inv_sqrt2));
    yd[k] = xd[k] * c;
    if (rec) cdf[static_cast<std::size_t>(k)] = c;
  }
  if (rec) {
    record<T>([x, out, cdf = std::move(cdf), n]() {
      if (!out.has_grad() || !x.requires_grad()) return;
      const T* g = out.grad().data();
      const T* xd = x.data().data();
      T* gx = gbuf(x).data();
      for (std::int64_t k = 0; k < n; ++k) {
        const T v = xd[k];
        gx[k] += g[k] * (cdf[static_cast<std::size_t>(k)] + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v));
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  static constexpr T lo = std::numeric_limits<T>::min();
  static constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return unary(
      x,
      [](T v) {
        const T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        return std::clamp(s, lo, hi);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
BasicTensor<T> sqrt(const BasicTensor<T>& x) {
  return unary(
      x, [](T v) { return std::sqrt(std::max(v, T(0))); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  return unary(x, [f](T v) { return v * f; }, [f](T, T) { return f; });
}

// -------------------------------------------------------------- pixel shuffle

namespace {

// Shared index walk: visits (input flat index, output flat index) of shuffle(x, r).
template <typename F>
void shuffle_walk(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t r, F&& f) {
  const std::int64_t oh = h * r, ow = w * r;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < r; ++j) {
          const std::int64_t src_plane = ((b * c + ch) * r * r + i * r + j) * h * w;
          for (std::int64_t y = 0; y < h; ++y) {
            const std::int64_t dst_row = ((b * c + ch) * oh + y * r + i) * ow + j;
            for (std::int64_t x = 0; x < w; ++x) f(src_plane + y * w + x, dst_row + x * r);
          }
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> permute_op(const BasicTensor<T>& x, const Shape& out_shape, std::int64_t n, std::int64_t c,
                          std::int64_t h, std::int64_t w, std::int64_t r, bool forward_shuffle) {
  const bool rec = detail::should_record<T>({&x});
  auto out = output_like<T>(out_shape, rec);
  auto xd = x.data();
  auto yd = out.data();
  if (forward_shuffle) {
    shuffle_walk(n, c, h, w, r, [&](std::int64_t s, std::int64_t d) { yd[d] = xd[s]; });
  } else {
    shuffle_walk(n, c, h, w, r, [&](std::int64_t s, std::int64_t d) { yd[s] = xd[d]; });
  }
  if (rec) {
    record<T>([x, out, n, c, h, w, r, forward_shuffle]() {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = gbuf(x);
      if (forward_shuffle) {
        shuffle_walk(n, c, h, w, r, [&](std::int64_t s, std::int64_t d) { gx[s] += g[d]; });
      } else {
        shuffle_walk(n, c, h, w, r, [&](std::int64_t s, std::int64_t d) { gx[d] += g[s]; });
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, int r) {
  require_rank(x.shape(), 4, "pixel_shuffle");
  if (r < 1) throw ConfigError("pixel_shuffle: factor must be >= 1");
  const std::int64_t rr = static_cast<std::int64_t>(r) * r;
  if (x.dim(1) % rr != 0) {
    throw ShapeError("pixel_shuffle: channel extent of " + x.shape().str() + " not divisible by r^2=" +
                     std::to_string(rr));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1) / rr, h = x.dim(2), w = x.dim(3);
  return permute_op(x, Shape{n, c, h * r, w * r}, n, c, h, w, r, true);
}

template <typename T>
BasicTensor<T> pixel_unshuffle(const BasicTensor<T>& x, int r) {
  require_rank(x.shape(), 4, "pixel_unshuffle");
  if (r < 1) throw ConfigError("pixel_unshuffle: factor must be >= 1");
  if (x.dim(2) % r != 0 || x.dim(3) % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents of " + x.shape().str() + " not divisible by r=" +
                     std::to_string(r));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / r, w = x.dim(3) / r;
  return permute_op(x, Shape{n, c * r * r, h, w}, n, c, h, w, r, false);
}

// -------------------------------------------------------------------- resize

namespace {

struct Interp {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> frac;
};

Interp make_interp(std::int64_t in, std::int64_t out) {
  Interp m;
  m.i0.resize(static_cast<std::size_t>(out));
  m.i1.resize(static_cast<std::size_t>(out));
  m.frac.resize(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = (in == 1 || out == 1) ? 0.0 : static_cast<double>(o) * static_cast<double>(in - 1) /
                                                          static_cast<double>(out - 1);
    std::int64_t a = std::min(static_cast<std::int64_t>(std::floor(src)), in - 1);
    m.i0[o] = a;
    m.i1[o] = std::min(a + 1, in - 1);
    m.frac[o] = src - static_cast<double>(a);
  }
  return m;
}

}  // namespace

template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x.shape(), 4, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: target extents must be >= 1");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) {
    // Identity map; still routed through the tape so gradients flow.
    return reshape(x, x.shape());
  }
  auto ry = make_interp(h, out_h);
  auto rx = make_interp(w, out_w);
  const bool rec = detail::should_record<T>({&x});
  auto out = output_like<T>(Shape{x.dim(0), x.dim(1), out_h, out_w}, rec);
  auto xd = x.data();
  auto yd = out.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = xd.data() + p * h * w;
    T* dst = yd.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ry.frac[oy]);
      const T* r0 = src + ry.i0[oy] * w;
      const T* r1 = src + ry.i1[oy] * w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(rx.frac[ox]);
        const std::int64_t a = rx.i0[ox], b = rx.i1[ox];
        const T top = r0[a] + (r0[b] - r0[a]) * fx;
        const T bot = r1[a] + (r1[b] - r1[a]) * fx;
        dst[oy * out_w + ox] = top + (bot - top) * fy;
      }
    }
  }
  if (rec) {
    record<T>([x, out, ry = std::move(ry), rx = std::move(rx), planes, h, w, out_h, out_w]() {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = gbuf(x);
      for (std::int64_t p = 0; p < planes; ++p) {
        const T* gp = g.data() + p * out_h * out_w;
        T* dst = gx.data() + p * h * w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const T fy = static_cast<T>(ry.frac[oy]);
          T* r0 = dst + ry.i0[oy] * w;
          T* r1 = dst + ry.i1[oy] * w;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const T fx = static_cast<T>(rx.frac[ox]);
            const std::int64_t a = rx.i0[ox], b = rx.i1[ox];
            const T v = gp[oy * out_w + ox];
            r0[a] += v * (T(1) - fy) * (T(1) - fx);
            r0[b] += v * (T(1) - fy) * fx;
            r1[a] += v * fy * (T(1) - fx);
            r1[b] += v * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

// -------------------------------------------------------------------- concat

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  const Shape& s0 = xs[0].shape();
  if (s0.rank() < 2) throw ShapeError("concat_channels: inputs need rank >= 2, got " + s0.str());
  std::int64_t ctot = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Shape& si = xs[i].shape();
    bool ok = si.rank() == s0.rank();
    for (std::size_t a = 0; ok && a < si.rank(); ++a) ok = a == 1 || si[a] == s0[a];
    if (!ok) {
      throw ShapeError("concat_channels: input " + std::to_string(i) + " has shape " + si.str() +
                       ", incompatible with input 0 shape " + s0.str());
    }
    ctot += si[1];
  }
  const std::int64_t n = s0[0];
  const std::int64_t inner = xs[0].numel() / (n * s0[1]);
  auto ext = s0.extents();
  ext[1] = ctot;

  bool rec = false;
  if (active_tape<T>() != nullptr) {
    for (const auto& t : xs) rec = rec || t.requires_grad();
  }
  auto out = output_like<T>(Shape(ext), rec);
  auto yd = out.data();
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::int64_t ci = t.dim(1);
    auto xd = t.data();
    for (std::int64_t b = 0; b < n; ++b) {
      std::copy_n(xd.data() + b * ci * inner, ci * inner, yd.data() + (b * ctot + off) * inner);
    }
    off += ci;
  }
  if (rec) {
    std::vector<BasicTensor<T>> inputs(xs.begin(), xs.end());
    record<T>([inputs = std::move(inputs), offsets = std::move(offsets), out, n, inner, ctot]() {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& t = inputs[i];
        if (!t.requires_grad()) continue;
        auto gx = gbuf(t);
        const std::int64_t ci = t.dim(1);
        for (std::int64_t b = 0; b < n; ++b) {
          const T* src = g.data() + (b * ctot + offsets[i]) * inner;
          T* dst = gx.data() + b * ci * inner;
          for (std::int64_t k = 0; k < ci * inner; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return out;
}

// -------------------------------------------------------------------- reduce

template <typename T>
BasicTensor<T> reduce(ReduceMode mode, const BasicTensor<T>& x, std::vector<int> axes) {
  const Shape& sx = x.shape();
  std::vector<bool> reduced(sx.rank(), false);
  for (int a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= sx.rank() || reduced[static_cast<std::size_t>(a)]) {
      throw ShapeError("reduce: invalid or repeated axis " + std::to_string(a) + " for " + sx.str());
    }
    reduced[static_cast<std::size_t>(a)] = true;
  }
  if (axes.empty()) return reshape(x, sx);

  std::vector<std::int64_t> out_ext;
  std::int64_t count = 1;
  for (std::size_t i = 0; i < sx.rank(); ++i) {
    if (reduced[i]) {
      count *= sx[i];
    } else {
      out_ext.push_back(sx[i]);
    }
  }
  // Output stride of each input axis (0 on reduced axes).
  std::vector<std::int64_t> ostride(sx.rank(), 0);
  std::int64_t s = 1;
  for (std::size_t i = sx.rank(); i-- > 0;) {
    if (!reduced[i]) {
      ostride[i] = s;
      s *= sx[i];
    }
  }
  const T factor = mode == ReduceMode::mean ? T(1) / static_cast<T>(count) : T(1);
  const bool rec = detail::should_record<T>({&x});
  auto out = output_like<T>(Shape(out_ext), rec);
  const T* xd = x.data().data();
  T* yd = out.data().data();
  walk_rows(sx, ostride, [&](std::int64_t xo, std::int64_t yo, std::int64_t len, std::int64_t ys) {
    if (ys == 0) {
      T acc = 0;
      for (std::int64_t j = 0; j < len; ++j) acc += xd[xo + j];
      yd[yo] += acc;
    } else {
      for (std::int64_t j = 0; j < len; ++j) yd[yo + j] += xd[xo + j];
    }
  });
  if (factor != T(1)) {
    for (auto& v : out.data()) v *= factor;
  }
  if (rec) {
    record<T>([x, out, ostride = std::move(ostride), factor]() {
      if (!out.has_grad() || !x.requires_grad()) return;
      const T* g = out.grad().data();
      T* gx = gbuf(x).data();
      walk_rows(x.shape(), ostride, [&](std::int64_t xo, std::int64_t yo, std::int64_t len, std::int64_t ys) {
        for (std::int64_t j = 0; j < len; ++j) gx[xo + j] += g[yo + j * ys] * factor;
      });
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
  std::vector<int> axes(x.shape().rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  if (axes.empty()) return reshape(x, x.shape());
  return reduce(ReduceMode::sum, x, std::move(axes));
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
  std::vector<int> axes(x.shape().rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  if (axes.empty()) return reshape(x, x.shape());
  return reduce(ReduceMode::mean, x, std::move(axes));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
  if (shape.numel() != x.numel()) {
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  }
  const bool rec = detail::should_record<T>({&x});
  auto out = BasicTensor<T>::zeros(shape);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (rec) {
    out.set_requires_grad(true);
    record<T>([x, out]() {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = gbuf(x);
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
    });
  }
  return out;
}

// ------------------------------------------------------------- cross entropy

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                     std::int32_t ignore_index) {
  const Shape& sl = logits.shape();
  if (sl.rank() != 2 && sl.rank() != 4) {
    throw ShapeError("softmax_cross_entropy: logits must be (N,K) or (N,K,H,W), got " + sl.str());
  }
  const std::int64_t n = sl[0], k = sl[1];
  const std::int64_t inner = sl.rank() == 4 ? sl[2] * sl[3] : 1;
  const std::int64_t positions = n * inner;
  if (static_cast<std::int64_t>(labels.size()) != positions) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(positions) + " positions of " + sl.str());
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto v = labels[i];
    if (v != ignore_index && (v < 0 || v >= k)) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(v) + " at position " +
                            std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
  }
  auto ld = logits.data();
  AlignedVector<T> prob(static_cast<std::size_t>(logits.numel()));
  std::int64_t count = 0;
  double total = 0.0;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t p = 0; p < inner; ++p) {
      const T* row = ld.data() + b * k * inner + p;
      T* pr = prob.data() + b * k * inner + p;
      T mx = row[0];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, row[c * inner]);
      T z = 0;
      for (std::int64_t c = 0; c < k; ++c) {
        pr[c * inner] = std::exp(row[c * inner] - mx);
        z += pr[c * inner];
      }
      for (std::int64_t c = 0; c < k; ++c) pr[c * inner] /= z;
      const auto lab = labels[static_cast<std::size_t>(b * inner + p)];
      if (lab == ignore_index) continue;
      total += static_cast<double>(mx + std::log(z) - row[lab * inner]);
      ++count;
    }
  }
  const bool rec = detail::should_record<T>({&logits});
  auto out = output_like<T>(Shape{}, rec);
  out.data()[0] = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
  if (rec && count) {
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    record<T>([logits, out, prob = std::move(prob), lab = std::move(lab), n, k, inner, count, ignore_index]() {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(count);
      auto gl = gbuf(logits);
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t p = 0; p < inner; ++p) {
          const auto l = lab[static_cast<std::size_t>(b * inner + p)];
          if (l == ignore_index) continue;
          const std::int64_t base = b * k * inner + p;
          for (std::int64_t c = 0; c < k; ++c) {
            const T onehot = c == l ? T(1) : T(0);
            gl[base + c * inner] += g * (prob[base + c * inner] - onehot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------- instantiations

#define XNET_INSTANTIATE_OPS(T)                                                                              \
  template BasicTensor<T> elementwise(ElementwiseMode, const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> channel_linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,       \
                                 Conv2dOptions);                                                             \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, int, const BasicTensor<T>&, const BasicTensor<T>&, \
                                     double);                                                                \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> sqrt(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                              \
  template BasicTensor<T> pixel_shuffle(const BasicTensor<T>&, int);                                         \
  template BasicTensor<T> pixel_unshuffle(const BasicTensor<T>&, int);                                       \
  template BasicTensor<T> resize_bilinear(const BasicTensor<T>&, std::int64_t, std::int64_t);                \
  template BasicTensor<T> concat_channels(std::span<const BasicTensor<T>>);                                  \
  template BasicTensor<T> reduce(ReduceMode, const BasicTensor<T>&, std::vector<int>);                       \
  template BasicTensor<T> sum_all(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> mean_all(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                                      \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>,        \
                                                std::int32_t);

XNET_INSTANTIATE_OPS(float)
XNET_INSTANTIATE_OPS(double)

#undef XNET_INSTANTIATE_OPS

}  // namespace xnet::ops
